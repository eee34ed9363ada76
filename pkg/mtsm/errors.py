# mtsm/errors.py
"""
Error hierarchy for the captioning package.

Every error carries a short machine-parsable `category` and an `exit_code`
so the CLI can print one line per failure, the same way the API layer pairs
a status code with a detail message.
"""
from __future__ import annotations

from pathlib import Path
from typing import Optional


class MtsmError(Exception):
    category: str = "internal"
    exit_code: int = 1

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def one_line(self) -> str:
        text = " ".join(self.message.split())
        return f"error[{self.category}]: {text}"


# ------------------------------------------------------------------
# Numerical / tensor errors
# ------------------------------------------------------------------

class DimensionError(MtsmError, ValueError):
    category = "dimension"
    exit_code = 10


class DomainError(MtsmError, ValueError):
    category = "domain"
    exit_code = 11


class DegenerateRowError(MtsmError, ValueError):
    category = "degenerate-row"
    exit_code = 12


class NonFiniteError(MtsmError, ArithmeticError):
    category = "non-finite"
    exit_code = 13


class ContractError(MtsmError, ValueError):
    category = "contract"
    exit_code = 14


# ------------------------------------------------------------------
# Configuration / data errors
# ------------------------------------------------------------------

class ConfigError(MtsmError, ValueError):
    category = "config"
    exit_code = 20


class InvalidBoxError(MtsmError, ValueError):
    category = "invalid-box"
    exit_code = 21


class EmptyDetectionsError(MtsmError, ValueError):
    category = "empty-detections"
    exit_code = 22


class EmptyCaptionError(MtsmError, ValueError):
    category = "empty-caption"
    exit_code = 23


class VocabError(MtsmError, ValueError):
    category = "vocab"
    exit_code = 24


class ParseError(MtsmError, ValueError):
    category = "parse"
    exit_code = 25

    def __init__(self, message: str, path: Optional[Path] = None, line: Optional[int] = None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{where}{message}")
        self.path = path
        self.line = line


# ------------------------------------------------------------------
# Training errors
# ------------------------------------------------------------------

class DegenerateBatchError(MtsmError, ValueError):
    category = "degenerate-batch"
    exit_code = 30


class NonFiniteGradientError(MtsmError, ArithmeticError):
    category = "non-finite-gradient"
    exit_code = 31

    def __init__(self, parameter: str):
        super().__init__(f"non-finite gradient for parameter '{parameter}', step aborted")
        self.parameter = parameter


class CheckpointError(MtsmError, OSError):
    category = "checkpoint"
    exit_code = 32


# ------------------------------------------------------------------
# CLI errors
# ------------------------------------------------------------------

class UsageError(MtsmError):
    category = "usage"
    exit_code = 2


class MissingFileError(MtsmError, FileNotFoundError):
    category = "missing-file"
    exit_code = 3


class GradcheckFailed(MtsmError):
    category = "gradcheck"
    exit_code = 40
