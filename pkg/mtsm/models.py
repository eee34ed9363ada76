# mtsm/models.py
from __future__ import annotations

import math
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


# ==============================================================================
# HYPERPARAMETERS
# ==============================================================================

class ModelConfig(BaseModel):
    """
    Network shape and numerical constants.
    Defaults are the full-scale values; `config.preset()` gives the smaller ones.
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    d_model: int = Field(default=512, ge=1, description="Width of every residual stream")
    L: int = Field(default=6, ge=0, description="Layers in each of encoder and decoder")
    H: int = Field(default=8, ge=1, description="Attention heads")
    d_ff: int = Field(default=2048, ge=1, description="Hidden width of the position-wise FFN")
    d_feat: int = Field(default=2048, ge=1, description="Width of ingested visual features")
    d_g: int = Field(default=64, ge=2, description="Sinusoid channels per geometry component")
    max_objects: int = Field(default=78, ge=1)
    max_len: int = Field(default=51, ge=2, description="Maximum caption words")
    vocab_size: int = Field(default=10045, ge=5, description="Including the 4 reserved ids")
    log_base: float = Field(default=10.0, gt=1.0, description="Base of the geometry logarithm")
    eps_center: float = Field(default=1e-3, gt=0.0)
    eps_g: float = Field(default=1e-6, gt=0.0)
    dropout_rate: float = Field(default=0.1, ge=0.0, lt=1.0)
    min_score: float = Field(default=0.7, ge=0.0, le=1.0)
    geometry: bool = Field(default=True, description="Gate encoder self-attention with box geometry")
    share_geometry: bool = Field(default=False, description="One W_G for all encoder layers")
    center_clamp: Literal["ratio", "absolute"] = "ratio"

    @model_validator(mode="after")
    def check_shapes(self) -> "ModelConfig":
        if self.d_model % self.H != 0:
            raise ValueError(f"d_model ({self.d_model}) must be divisible by H ({self.H})")
        if self.d_g % 2 != 0:
            raise ValueError(f"d_g must be even, got {self.d_g}")
        return self

    @property
    def d_k(self) -> int:
        return self.d_model // self.H


class TrainConfig(BaseModel):
    """Optimizer and schedule settings for `training.train`."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    epochs: int = Field(default=30, ge=1)
    base_lr: float = Field(default=1e-5, gt=0.0)
    lr_decay_gamma: float = Field(default=0.95, gt=0.0, le=1.0)
    batch_size: int = Field(default=8, ge=1)
    seed: int = 0
    checkpoint_every: int = Field(default=1, ge=0, description="0 = only at the end")
    clip_norm: Optional[float] = Field(default=5.0, gt=0.0, description="None disables clipping")
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)


# ==============================================================================
# FILE RECORDS
# ==============================================================================

class Box(BaseModel):
    """Normalized (cx, cy, w, h) box."""
    model_config = ConfigDict(frozen=True)

    cx: float = Field(ge=0.0, le=1.0)
    cy: float = Field(ge=0.0, le=1.0)
    w: float = Field(gt=0.0, le=1.0)
    h: float = Field(gt=0.0, le=1.0)

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)


class DetectionRecord(BaseModel):
    """
    One line of a detections file.
    Raw detector output: thresholding and capping happen at load time.
    """
    image_id: str = Field(min_length=1)
    boxes: List[Tuple[float, float, float, float]]
    scores: List[float]
    features: List[List[float]]

    @field_validator("scores")
    @classmethod
    def check_scores(cls, v: List[float]) -> List[float]:
        for s in v:
            if not (0.0 <= s <= 1.0) or math.isnan(s):
                raise ValueError(f"score {s} outside [0, 1]")
        return v

    @model_validator(mode="after")
    def check_lengths(self) -> "DetectionRecord":
        if not (len(self.boxes) == len(self.scores) == len(self.features)):
            raise ValueError(
                f"boxes/scores/features lengths differ: "
                f"{len(self.boxes)}/{len(self.scores)}/{len(self.features)}"
            )
        widths = {len(f) for f in self.features}
        if len(widths) > 1:
            raise ValueError(f"feature rows have mixed widths {sorted(widths)}")
        return self


class CaptionLine(BaseModel):
    """One line of a captions file."""
    image_id: str = Field(min_length=1)
    caption: str


# ==============================================================================
# REPORTS
# ==============================================================================

class BleuReport(BaseModel):
    """Corpus BLEU-1..4 on the 0-100 scale."""
    bleu_1: float = Field(ge=0.0, le=100.0)
    bleu_2: float = Field(ge=0.0, le=100.0)
    bleu_3: float = Field(ge=0.0, le=100.0)
    bleu_4: float = Field(ge=0.0, le=100.0)
    brevity_penalty: float = Field(ge=0.0, le=1.0)
    candidate_length: int
    reference_length: int
    matches: List[int] = Field(description="Clipped n-gram matches for n = 1..4")
    totals: List[int] = Field(description="Candidate n-grams for n = 1..4")
    smooth_floor: Optional[float] = None

    @model_validator(mode="after")
    def check_counts(self) -> "BleuReport":
        for m, t in zip(self.matches, self.totals):
            if m > t:
                raise ValueError(f"matches {m} exceed totals {t}")
        return self

    def scores(self) -> List[float]:
        return [self.bleu_1, self.bleu_2, self.bleu_3, self.bleu_4]

    def table(self, label: str = "MTSM") -> str:
        """Fixed-width table with one row per report."""
        return bleu_table({label: self})


def bleu_table(rows: Dict[str, BleuReport]) -> str:
    width = max([len("Algorithm")] + [len(k) for k in rows])
    header = f"{'Algorithm':<{width}}  " + "  ".join(f"{f'BLEU-{n}':>7}" for n in range(1, 5))
    lines = [header, "-" * len(header)]
    for label, report in rows.items():
        cells = "  ".join(f"{s:>7.1f}" for s in report.scores())
        lines.append(f"{label:<{width}}  {cells}")
    return "\n".join(lines)


class EpochLogLine(BaseModel):
    """One record of the training log."""
    epoch: int
    mean_loss: float
    lr: float
    wall_seconds: float
    rss_mb: Optional[float] = None


class ParamGradcheck(BaseModel):
    name: str
    entries_checked: int
    max_relative_error: float


class GradcheckReport(BaseModel):
    step: float
    tolerance: float
    params: List[ParamGradcheck]

    @property
    def max_relative_error(self) -> float:
        return max((p.max_relative_error for p in self.params), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.tolerance


class RunManifest(BaseModel):
    """
    Written next to every CLI output so a run can be repeated from it alone.
    No timestamps: re-runs must reproduce the manifest byte for byte.
    """
    subcommand: str
    config: Dict[str, object] = Field(default_factory=dict)
    inputs: Dict[str, str] = Field(default_factory=dict)
    outputs: Dict[str, str] = Field(default_factory=dict)
    seed: Optional[int] = None
    version: str
