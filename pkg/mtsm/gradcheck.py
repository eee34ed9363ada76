# mtsm/gradcheck.py
"""
Central finite-difference verification of the analytic gradients.

`check_function` works on any scalar-valued closure over a set of tensors
(used for single operations); `check_model_gradients` runs it over every
named parameter of a CaptionModel on one example decoded against its ground-truth prefix.
"""
import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from mtsm.config import settings
from mtsm.data_pipeline import BOS, EOS, RESERVED_TOKENS, DetectionSet, synth_scene
from mtsm.errors import ContractError
from mtsm.models import GradcheckReport, ModelConfig, ParamGradcheck
from mtsm.tensor import Graph, Tensor, backward
from mtsm.training import masked_xe_loss
from mtsm.transformer import CaptionModel

logger = logging.getLogger(__name__)

# below this magnitude the comparison is effectively absolute
DENOMINATOR_FLOOR = 1e-4

GRADCHECK_VOCAB = 12
GRADCHECK_OBJECTS = 3
GRADCHECK_TOKENS = 4


def relative_error(analytic: np.ndarray, numeric: np.ndarray,
                   floor: float = DENOMINATOR_FLOOR) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _pick_entries(analytic: np.ndarray, max_entries: int, rng: np.random.Generator) -> np.ndarray:
    """Flat indices to check: the largest analytic entries plus a random sample of the rest."""
    size = analytic.size
    if max_entries <= 0 or size <= max_entries:
        return np.arange(size)
    largest = np.argsort(-np.abs(analytic.ravel()), kind="stable")[: max_entries // 2]
    rest = np.setdiff1d(np.arange(size), largest)
    sampled = rng.choice(rest, size=max_entries - largest.size, replace=False)
    return np.sort(np.concatenate([largest, sampled]))


def numeric_gradient(loss_fn: Callable[[], float], tensor: Tensor, indices: Sequence[int],
                     h: float) -> np.ndarray:
    """(f(x + h) - f(x - h)) / 2h at the given flat indices; the tensor is restored after each evaluation."""
    data = tensor.data
    out = np.zeros(len(indices))
    for k, flat_idx in enumerate(indices):
        idx = np.unravel_index(int(flat_idx), data.shape)
        original = data[idx]
        data[idx] = original + h
        plus = loss_fn()
        data[idx] = original - h
        minus = loss_fn()
        data[idx] = original
        out[k] = (plus - minus) / (2.0 * h)
    return out


def check_function(build_loss: Callable[[], Tensor], tensors: Dict[str, Tensor],
                   h: Optional[float] = None, max_entries: Optional[int] = None,
                   seed: int = 0, tolerance: Optional[float] = None) -> GradcheckReport:
    """Compare backward() against central differences for every tensor in `tensors`."""
    h = settings.GRADCHECK_STEP if h is None else h
    max_entries = settings.GRADCHECK_ENTRIES if max_entries is None else max_entries
    tolerance = settings.GRADCHECK_TOLERANCE if tolerance is None else tolerance

    with Graph() as graph:
        loss = build_loss()
    grads = backward(graph, loss, wrt=tensors.values())

    def value() -> float:
        return build_loss().item()

    rng = np.random.default_rng(seed)
    results: List[ParamGradcheck] = []
    for name, tensor in tensors.items():
        analytic = grads[tensor].reshape(-1)
        indices = _pick_entries(analytic, max_entries, rng)
        numeric = numeric_gradient(value, tensor, indices, h)
        err = relative_error(analytic[indices], numeric)
        worst = float(err.max()) if err.size else 0.0
        results.append(ParamGradcheck(name=name, entries_checked=len(indices), max_relative_error=worst))
        logger.debug(f"{name}: {len(indices)} entries, max rel err {worst:.2e}")
    return GradcheckReport(step=h, tolerance=tolerance, params=results)


def gradcheck_sample(config: ModelConfig, seed: int = 0,
                     num_objects: int = GRADCHECK_OBJECTS,
                     num_tokens: int = GRADCHECK_TOKENS) -> Tuple[DetectionSet, List[int], List[int]]:
    """A synthetic scene plus a random (inputs, targets) pair of length num_tokens."""
    if num_tokens < 2:
        raise ContractError("need at least two decoder positions")
    det, _ = synth_scene([seed, 1], num_objects=num_objects, d_feat=config.d_feat, image_id="gradcheck")
    rng = np.random.default_rng([seed, 2])
    words = rng.integers(len(RESERVED_TOKENS), config.vocab_size, size=num_tokens - 1).tolist()
    return det, [BOS] + words, words + [EOS]


def check_model_gradients(model: CaptionModel, det: DetectionSet, inputs: Sequence[int],
                          targets: Sequence[int], h: Optional[float] = None,
                          max_entries: Optional[int] = None, seed: int = 0,
                          tolerance: Optional[float] = None) -> GradcheckReport:
    """Finite-difference check of every named parameter under the masked XE loss (no dropout)."""

    def build_loss() -> Tensor:
        return masked_xe_loss(model.forward(det, inputs), targets)

    report = check_function(build_loss, dict(model.params.items()), h, max_entries, seed, tolerance)
    logger.info(f"gradcheck: {len(report.params)} parameters, "
                f"max relative error {report.max_relative_error:.3e} (tolerance {report.tolerance:g})")
    return report
