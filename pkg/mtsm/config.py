# mtsm/config.py
import logging
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from mtsm.errors import ConfigError
from mtsm.models import ModelConfig, TrainConfig


class Settings(BaseSettings):
    """
    Process-level configuration loaded from environment variables
    (prefix MTSM_) or a local .env file.
    Hyperparameters live in ModelConfig / TrainConfig, not here.
    """
    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "%(asctime)s %(levelname)s %(message)s"

    # Paths (relative to the project root)
    PROJECT_ROOT: Path = Path(__file__).parent.parent
    DATA_DIR: Path = PROJECT_ROOT / "data"
    CHECKPOINT_DIR: Path = PROJECT_ROOT / "checkpoints"

    # Reproducibility
    DEFAULT_SEED: int = 0

    # Finite-difference suite
    GRADCHECK_STEP: float = 1e-6
    GRADCHECK_TOLERANCE: float = 1e-4
    GRADCHECK_ENTRIES: int = 24  # sampled entries per parameter; 0 = all

    model_config = SettingsConfigDict(
        env_prefix="MTSM_",
        env_file=".env",
        case_sensitive=True,
        extra="ignore",
    )

    def ensure_data_dir(self):
        """Create data directory if it doesn't exist"""
        self.DATA_DIR.mkdir(parents=True, exist_ok=True)

    def ensure_checkpoint_dir(self):
        self.CHECKPOINT_DIR.mkdir(parents=True, exist_ok=True)


settings = Settings()

VERSION = "0.3.0"


# -------------------------------------------------------------------
# Logging
# -------------------------------------------------------------------
def configure_logging(level: Optional[str] = None) -> logging.Logger:
    """Attach one stderr handler to the package logger (idempotent)."""
    log = logging.getLogger("mtsm")
    log.setLevel((level or settings.LOG_LEVEL).upper())
    if not any(isinstance(h, logging.StreamHandler) for h in log.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(settings.LOG_FORMAT))
        log.addHandler(handler)
    return log


# -------------------------------------------------------------------
# Presets
# -------------------------------------------------------------------
# tiny  - finite-difference and overfit runs on one core
# desk  - default for property tests and small experiments
# paper - full-scale hyperparameters (51 words, 78 objects, L=6, lr 1e-5, 30 epochs)
PRESETS: Dict[str, Dict[str, Dict[str, Any]]] = {
    "tiny": {
        "model": dict(d_model=16, L=1, H=2, d_ff=32, d_feat=32, d_g=8, dropout_rate=0.0),
        "train": dict(epochs=300, base_lr=3e-3, lr_decay_gamma=0.995, batch_size=4),
    },
    "desk": {
        "model": dict(d_model=64, L=2, H=4, d_ff=128, d_feat=32, d_g=16, dropout_rate=0.1),
        "train": dict(epochs=100, base_lr=1e-3, lr_decay_gamma=0.98, batch_size=8),
    },
    "paper": {
        "model": dict(d_model=512, L=6, H=8, d_ff=2048, d_feat=2048, d_g=64,
                      max_objects=78, max_len=51, dropout_rate=0.1),
        "train": dict(epochs=30, base_lr=1e-5, lr_decay_gamma=0.95, batch_size=8),
    },
}


def preset(name: str) -> Tuple[Dict[str, Any], Dict[str, Any]]:
    """Return copies of (model overrides, train overrides) for a preset."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset '{name}', expected one of {sorted(PRESETS)}")
    entry = PRESETS[name]
    return dict(entry["model"]), dict(entry["train"])


def build_model_config(**fields: Any) -> ModelConfig:
    try:
        return ModelConfig(**fields)
    except ValidationError as e:
        raise ConfigError(_first_error(e)) from e


def build_train_config(**fields: Any) -> TrainConfig:
    try:
        return TrainConfig(**fields)
    except ValidationError as e:
        raise ConfigError(_first_error(e)) from e


def _first_error(e: ValidationError) -> str:
    err = e.errors()[0]
    loc = ".".join(str(p) for p in err.get("loc", ())) or "config"
    return f"{loc}: {err.get('msg', 'invalid value')}"
