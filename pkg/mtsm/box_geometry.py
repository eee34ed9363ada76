# mtsm/box_geometry.py
"""
Pairwise box geometry and the learned, non-negative geometric gate.

relative_geometry -> delta[n, p, 4]   (log-scale displacement of box p seen from box n)
sinusoid_embed    -> emb[n, p, 4*d_g] (sines then cosines, per component)
geometric_bias    -> theta_g[h, n, p] = relu(emb[n, p] . W_G[h])
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence, Union

import numpy as np

from mtsm.errors import ConfigError, DimensionError, InvalidBoxError
from mtsm.models import Box
from mtsm.tensor import Tensor, constant, matmul, relu, reshape, transpose

BoxesLike = Union[Sequence[Box], np.ndarray]

EMBED_WAVELENGTH = 1000.0


@dataclass(frozen=True)
class GeometryFeature:
    delta: np.ndarray  # [N, N, 4]

    @property
    def num_boxes(self) -> int:
        return self.delta.shape[0]


@dataclass(frozen=True)
class GeometricBias:
    theta_g: Tensor  # [H, N, N], non-negative

    @property
    def heads(self) -> int:
        return self.theta_g.shape[0]


def box_array(boxes: BoxesLike) -> np.ndarray:
    """(cx, cy, w, h) rows as float64; checks sizes are positive and finite."""
    if isinstance(boxes, np.ndarray):
        arr = np.asarray(boxes, dtype=np.float64)
    else:
        arr = np.array([b.as_tuple() for b in boxes], dtype=np.float64).reshape(-1, 4)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise DimensionError(f"boxes must be shaped [N, 4], got {arr.shape}")
    if arr.shape[0] == 0:
        raise InvalidBoxError("at least one box is required")
    if not np.all(np.isfinite(arr)):
        raise InvalidBoxError("box coordinates must be finite")
    bad = np.nonzero((arr[:, 2] <= 0) | (arr[:, 3] <= 0))[0]
    if bad.size:
        i = int(bad[0])
        raise InvalidBoxError(f"box {i} has non-positive size w={arr[i, 2]}, h={arr[i, 3]}")
    return arr


def relative_geometry(
    boxes: BoxesLike,
    eps_center: float = 1e-3,
    log_base: float = 10.0,
    center_clamp: Literal["ratio", "absolute"] = "ratio",
) -> GeometryFeature:
    """
    delta(n, p) = (log |dcx| / w_n, log |dcy| / h_n, log w_p / w_n, log h_p / h_n)

    The center offsets are floored before the log. With center_clamp="ratio"
    the floor applies to the size-normalized offset, which keeps delta
    invariant under uniform scaling, self-pairs included. "absolute" floors
    the raw offset: log(max(|dcx|, eps) / w_n).
    """
    if eps_center <= 0:
        raise ConfigError(f"eps_center must be positive, got {eps_center}")
    if log_base <= 1:
        raise ConfigError(f"log_base must exceed 1, got {log_base}")
    b = box_array(boxes)
    cx, cy, w, h = b[:, 0], b[:, 1], b[:, 2], b[:, 3]

    # rows index the reference box n, columns the other box p
    dx = np.abs(cx[None, :] - cx[:, None])
    dy = np.abs(cy[None, :] - cy[:, None])
    if center_clamp == "ratio":
        rx = np.maximum(dx / w[:, None], eps_center)
        ry = np.maximum(dy / h[:, None], eps_center)
    elif center_clamp == "absolute":
        rx = np.maximum(dx, eps_center) / w[:, None]
        ry = np.maximum(dy, eps_center) / h[:, None]
    else:
        raise ConfigError(f"unknown center_clamp '{center_clamp}'")
    rw = w[None, :] / w[:, None]
    rh = h[None, :] / h[:, None]

    delta = np.log(np.stack([rx, ry, rw, rh], axis=-1)) / math.log(log_base)
    # self ratios are exactly 1; keep them exactly 0 whatever the base
    idx = np.arange(b.shape[0])
    delta[idx, idx, 2:] = 0.0
    return GeometryFeature(delta=delta)


def sinusoid_embed(feature: GeometryFeature, d_g: int = 64) -> np.ndarray:
    """Embed every delta component with d_g/2 sines then d_g/2 cosines."""
    if d_g < 2 or d_g % 2 != 0:
        raise ConfigError(f"d_g must be an even integer >= 2, got {d_g}")
    delta = feature.delta
    half = d_g // 2
    inv_wavelength = EMBED_WAVELENGTH ** (-2.0 * np.arange(half) / d_g)  # [half]
    angles = delta[..., None] * inv_wavelength  # [N, N, 4, half]
    per_component = np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)  # [N, N, 4, d_g]
    n = delta.shape[0]
    return per_component.reshape(n, n, 4 * d_g)


def geometric_bias(emb: np.ndarray, W_G: Tensor) -> GeometricBias:
    """theta_g[h, n, p] = relu(sum_k emb[n, p, k] * W_G[h, k])."""
    emb = np.asarray(emb, dtype=np.float64)
    if emb.ndim != 3 or emb.shape[0] != emb.shape[1]:
        raise DimensionError(f"geometry embedding must be [N, N, K], got {emb.shape}")
    if W_G.ndim != 2 or W_G.shape[1] != emb.shape[2]:
        raise DimensionError(f"W_G {W_G.shape} does not fit embedding width {emb.shape[2]}")
    n, heads = emb.shape[0], W_G.shape[0]
    flat = constant(emb.reshape(n * n, emb.shape[2]))
    pre = transpose(matmul(flat, transpose(W_G)))  # [H, N*N]
    return GeometricBias(theta_g=relu(reshape(pre, (heads, n, n))))


def geometry_embedding(boxes: BoxesLike, d_g: int, eps_center: float = 1e-3,
                       log_base: float = 10.0,
                       center_clamp: Literal["ratio", "absolute"] = "ratio") -> np.ndarray:
    """relative_geometry followed by sinusoid_embed; computed once per image."""
    return sinusoid_embed(
        relative_geometry(boxes, eps_center=eps_center, log_base=log_base, center_clamp=center_clamp),
        d_g,
    )
