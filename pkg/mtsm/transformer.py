# mtsm/transformer.py
"""
Encoder-decoder caption network.

Encoder: project detector features with W (no positional encoding; box
geometry enters through the attention gate), then L post-norm layers of
geometry-gated self-attention + FFN.
Decoder: scaled token embedding + sinusoidal positions, then L post-norm
layers of causal self-attention, cross-attention to the encoder memory and
FFN; a linear head produces vocabulary logits.

Parameters live in a flat, ordered name -> Tensor map (ModelParams) so
checkpoints and gradient checks can address them by stable names.
"""
from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from mtsm.attention import HeadParams, causal_mask, multi_head_attention
from mtsm.box_geometry import geometric_bias, geometry_embedding
from mtsm.config import VERSION
from mtsm.errors import CheckpointError, ContractError, DimensionError, EmptyDetectionsError
from mtsm.models import ModelConfig, TrainConfig
from mtsm.tensor import (
    Tensor,
    add,
    add_bias,
    constant,
    dropout,
    embedding,
    layer_norm,
    linear,
    matmul,
    relu,
    scale,
)

if TYPE_CHECKING:
    from mtsm.data_pipeline import DetectionSet, Vocabulary

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mtsm-checkpoint/1"


# ==============================================================================
# PARAMETERS
# ==============================================================================

class ModelParams:
    """Ordered name -> Tensor map of every trainable weight."""

    def __init__(self, tensors: Optional[Dict[str, Tensor]] = None):
        self._tensors: Dict[str, Tensor] = {}
        for name, t in (tensors or {}).items():
            self.register(name, t)

    def register(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._tensors:
            raise ContractError(f"parameter '{name}' registered twice")
        tensor.requires_grad = True
        tensor.name = name
        self._tensors[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> List[str]:
        return list(self._tensors)

    def tensors(self) -> List[Tensor]:
        return list(self._tensors.values())

    def count(self) -> int:
        """Total number of scalar weights."""
        return sum(t.size for t in self._tensors.values())

    def zero_grad(self):
        for t in self._tensors.values():
            t.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.numpy() for name, t in self._tensors.items()}

    def load_state_dict(self, arrays: Dict[str, np.ndarray]):
        missing = set(self._tensors) - set(arrays)
        extra = set(arrays) - set(self._tensors)
        if missing or extra:
            raise CheckpointError(
                f"parameter names differ (missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]})"
            )
        for name, t in self._tensors.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise CheckpointError(f"parameter '{name}' has shape {arr.shape}, expected {t.shape}")
            t.data = arr.copy()

    def attention(self, prefix: str, heads: int) -> HeadParams:
        return HeadParams(
            w_q=tuple(self[f"{prefix}.head{h}.W_q"] for h in range(heads)),
            w_k=tuple(self[f"{prefix}.head{h}.W_k"] for h in range(heads)),
            w_v=tuple(self[f"{prefix}.head{h}.W_v"] for h in range(heads)),
            w_o=self[f"{prefix}.W_o"],
        )


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape: Tuple[int, ...]) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def parameter_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Every parameter name and shape, in registration order."""
    d, dk, H, V = config.d_model, config.d_k, config.H, config.vocab_size
    shapes: Dict[str, Tuple[int, ...]] = {"feature_proj.W": (config.d_feat, d)}

    def attn(prefix: str):
        for h in range(H):
            for w in ("W_q", "W_k", "W_v"):
                shapes[f"{prefix}.head{h}.{w}"] = (d, dk)
        shapes[f"{prefix}.W_o"] = (H * dk, d)

    def ffn(prefix: str):
        shapes[f"{prefix}.W1"] = (d, config.d_ff)
        shapes[f"{prefix}.b1"] = (config.d_ff,)
        shapes[f"{prefix}.W2"] = (config.d_ff, d)
        shapes[f"{prefix}.b2"] = (d,)

    def norm(prefix: str):
        shapes[f"{prefix}.gain"] = (d,)
        shapes[f"{prefix}.bias"] = (d,)

    if config.geometry and config.share_geometry and config.L > 0:
        shapes["encoder.geometry.W_G"] = (H, 4 * config.d_g)
    for l in range(config.L):
        p = f"encoder.{l}"
        attn(f"{p}.self_attn")
        if config.geometry and not config.share_geometry:
            shapes[f"{p}.geometry.W_G"] = (H, 4 * config.d_g)
        norm(f"{p}.norm1")
        ffn(f"{p}.ffn")
        norm(f"{p}.norm2")
    shapes["embedding.tokens"] = (V, d)
    for l in range(config.L):
        p = f"decoder.{l}"
        attn(f"{p}.self_attn")
        norm(f"{p}.norm1")
        attn(f"{p}.cross_attn")
        norm(f"{p}.norm2")
        ffn(f"{p}.ffn")
        norm(f"{p}.norm3")
    shapes["head.W"] = (d, V)
    shapes["head.b"] = (V,)
    return shapes


def expected_param_count(config: ModelConfig) -> int:
    """
    d_feat*d + L*(A + G + F + 4d) + L*(2A + F + 6d) + 2*V*d + V + G_shared
    with A = 4*H*d*d_k (attention), F = 2*d*d_ff + d_ff + d (FFN),
    G = H*4*d_g per encoder layer (or once when shared, 0 without geometry).
    """
    d, dk, H, V, L = config.d_model, config.d_k, config.H, config.vocab_size, config.L
    A = 3 * H * d * dk + H * dk * d
    F = 2 * d * config.d_ff + config.d_ff + d
    G = H * 4 * config.d_g if config.geometry else 0
    per_layer_g = 0 if config.share_geometry else G
    shared_g = G if (config.share_geometry and L > 0) else 0
    encoder = L * (A + per_layer_g + F + 4 * d)
    decoder = L * (2 * A + F + 6 * d)
    return config.d_feat * d + encoder + decoder + 2 * V * d + V + shared_g


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Scaled-uniform weights, unit gains, zero biases."""
    rng = np.random.default_rng(seed)
    params = ModelParams()
    for name, shape in parameter_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain":
            data = np.ones(shape)
        elif leaf in ("bias", "b1", "b2", "b"):
            data = np.zeros(shape)
        else:
            data = _xavier(rng, shape[0], shape[1], shape)
        params.register(name, Tensor(data))
    return params


# ==============================================================================
# BUILDING BLOCKS
# ==============================================================================

def sinusoid_positions(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def project_features(features, W: Tensor, max_objects: Optional[int] = None) -> Tensor:
    """features [N, d_feat] @ W [d_feat, d_model]."""
    shape = features.shape if isinstance(features, Tensor) else np.shape(features)
    # checked before wrapping: Tensor rejects zero-length axes itself
    if len(shape) != 2 or shape[0] == 0:
        raise EmptyDetectionsError("no detected objects to project")
    feats = features if isinstance(features, Tensor) else constant(np.asarray(features, dtype=np.float64))
    if max_objects is not None and feats.shape[0] > max_objects:
        raise ContractError(f"{feats.shape[0]} objects exceed max_objects={max_objects}")
    if feats.shape[1] != W.shape[0]:
        raise DimensionError(f"features have width {feats.shape[1]}, projection expects {W.shape[0]}")
    return matmul(feats, W)


def _feed_forward(x: Tensor, params: ModelParams, prefix: str, config: ModelConfig,
                  rng: Optional[np.random.Generator]) -> Tensor:
    hidden = relu(linear(x, params[f"{prefix}.W1"], params[f"{prefix}.b1"]))
    out = linear(hidden, params[f"{prefix}.W2"], params[f"{prefix}.b2"])
    return dropout(out, config.dropout_rate, rng)


def _add_norm(x: Tensor, sub: Tensor, params: ModelParams, prefix: str) -> Tensor:
    return layer_norm(add(x, sub), params[f"{prefix}.gain"], params[f"{prefix}.bias"])


# ==============================================================================
# ENCODER / DECODER
# ==============================================================================

def encode(det: "DetectionSet", params: ModelParams, config: ModelConfig,
           rng: Optional[np.random.Generator] = None) -> Tensor:
    """Memory [N, d_model] for one image."""
    x = project_features(det.features, params["feature_proj.W"], config.max_objects)
    emb = None
    if config.geometry and config.L > 0:
        emb = geometry_embedding(det.boxes, config.d_g, config.eps_center,
                                 config.log_base, config.center_clamp)
    for l in range(config.L):
        p = f"encoder.{l}"
        theta_g = None
        if emb is not None:
            w_g = params["encoder.geometry.W_G" if config.share_geometry else f"{p}.geometry.W_G"]
            theta_g = geometric_bias(emb, w_g).theta_g
        attn = multi_head_attention(
            x, x, params.attention(f"{p}.self_attn", config.H),
            theta_g=theta_g, eps_g=config.eps_g,
            dropout_rate=config.dropout_rate, rng=rng,
        )
        x = _add_norm(x, attn, params, f"{p}.norm1")
        x = _add_norm(x, _feed_forward(x, params, f"{p}.ffn", config, rng), params, f"{p}.norm2")
    return x


def decode(tokens: Sequence[int], memory: Tensor, params: ModelParams, config: ModelConfig,
           rng: Optional[np.random.Generator] = None) -> Tensor:
    """Logits [T, vocab_size] for a BOS-led token prefix."""
    T = len(tokens)
    if T == 0:
        raise DimensionError("decode needs at least one token")
    if T > config.max_len + 1:
        raise ContractError(f"{T} decoder positions exceed max_len + 1 = {config.max_len + 1}")
    x = scale(embedding(params["embedding.tokens"], tokens), math.sqrt(config.d_model))
    x = add(x, constant(sinusoid_positions(T, config.d_model)))
    x = dropout(x, config.dropout_rate, rng)
    mask = causal_mask(T)
    for l in range(config.L):
        p = f"decoder.{l}"
        self_attn = multi_head_attention(
            x, x, params.attention(f"{p}.self_attn", config.H), mask=mask,
            dropout_rate=config.dropout_rate, rng=rng,
        )
        x = _add_norm(x, self_attn, params, f"{p}.norm1")
        cross = multi_head_attention(
            x, memory, params.attention(f"{p}.cross_attn", config.H),
            dropout_rate=config.dropout_rate, rng=rng,
        )
        x = _add_norm(x, cross, params, f"{p}.norm2")
        x = _add_norm(x, _feed_forward(x, params, f"{p}.ffn", config, rng), params, f"{p}.norm3")
    return add_bias(matmul(x, params["head.W"]), params["head.b"])


def forward(det: "DetectionSet", tokens: Sequence[int], params: ModelParams, config: ModelConfig,
            rng: Optional[np.random.Generator] = None) -> Tensor:
    return decode(tokens, encode(det, params, config, rng), params, config, rng)


class CaptionModel:
    """Config + parameters with the forward operations bound to them."""

    def __init__(self, config: ModelConfig, params: Optional[ModelParams] = None, seed: int = 0):
        self.config = config
        self.seed = seed
        self.params = params if params is not None else init_params(config, seed)
        if self.params.count() != expected_param_count(config):
            raise ContractError(
                f"registered {self.params.count()} weights, config implies {expected_param_count(config)}"
            )

    def encode(self, det: "DetectionSet", rng: Optional[np.random.Generator] = None) -> Tensor:
        return encode(det, self.params, self.config, rng)

    def decode(self, tokens: Sequence[int], memory: Tensor,
               rng: Optional[np.random.Generator] = None) -> Tensor:
        return decode(tokens, memory, self.params, self.config, rng)

    def forward(self, det: "DetectionSet", tokens: Sequence[int],
                rng: Optional[np.random.Generator] = None) -> Tensor:
        return forward(det, tokens, self.params, self.config, rng)

    def next_token_logprobs(self, tokens: Sequence[int], memory: Tensor) -> np.ndarray:
        """Log-probabilities of the token after `tokens` (no dropout, nothing recorded)."""
        logits = self.decode(tokens, memory).data[-1]
        shifted = logits - logits.max()
        return shifted - np.log(np.exp(shifted).sum())


# ==============================================================================
# CHECKPOINTS
# ==============================================================================

@dataclass
class Checkpoint:
    """Everything needed to resume training or decode."""
    model_config: ModelConfig
    params: Dict[str, np.ndarray]
    vocab_tokens: List[str]
    vocab_min_count: int
    epoch: int
    seed: int
    train_config: Optional[TrainConfig] = None
    adam_m: Dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: Dict[str, np.ndarray] = field(default_factory=dict)
    adam_step: int = 0
    loss_history: List[float] = field(default_factory=list)
    vocab_corpus_hash: str = ""

    def to_model(self) -> CaptionModel:
        params = init_params(self.model_config, self.seed)
        params.load_state_dict(self.params)
        return CaptionModel(self.model_config, params, seed=self.seed)

    def vocabulary(self) -> "Vocabulary":
        from mtsm.data_pipeline import Vocabulary
        return Vocabulary(self.vocab_tokens, self.vocab_min_count, self.vocab_corpus_hash)


def save_checkpoint(path: Path, ckpt: Checkpoint) -> Path:
    """Write an .npz archive atomically (temp file in the same directory, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": VERSION,
        "model_config": ckpt.model_config.model_dump(),
        "train_config": ckpt.train_config.model_dump() if ckpt.train_config else None,
        "vocab_tokens": ckpt.vocab_tokens,
        "vocab_min_count": ckpt.vocab_min_count,
        "vocab_corpus_hash": ckpt.vocab_corpus_hash,
        "epoch": ckpt.epoch,
        "seed": ckpt.seed,
        "adam_step": ckpt.adam_step,
        "loss_history": ckpt.loss_history,
        "param_names": list(ckpt.params),
    }
    arrays = {"meta": np.array(json.dumps(meta))}
    arrays.update({f"param/{k}": v for k, v in ckpt.params.items()})
    arrays.update({f"adam_m/{k}": v for k, v in ckpt.adam_m.items()})
    arrays.update({f"adam_v/{k}": v for k, v in ckpt.adam_v.items()})

    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            np.savez(f, **arrays)
        os.replace(tmp_name, path)
    except Exception as e:
        tmp_path = Path(tmp_name)
        if tmp_path.exists():
            tmp_path.unlink()
        raise CheckpointError(f"failed to write checkpoint {path}: {e}") from e
    logger.info(f"Checkpoint written: {path} (epoch {ckpt.epoch})")
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as archive:
            meta = json.loads(str(archive["meta"]))
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise CheckpointError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")

            def section(prefix: str) -> Dict[str, np.ndarray]:
                out = {}
                for name in meta["param_names"]:
                    key = f"{prefix}/{name}"
                    if key in archive.files:
                        out[name] = archive[key].copy()
                return out

            params, adam_m, adam_v = section("param"), section("adam_m"), section("adam_v")
    except CheckpointError:
        raise
    except Exception as e:
        raise CheckpointError(f"failed to read checkpoint {path}: {e}") from e

    return Checkpoint(
        model_config=ModelConfig(**meta["model_config"]),
        train_config=TrainConfig(**meta["train_config"]) if meta.get("train_config") else None,
        params=params,
        vocab_tokens=list(meta["vocab_tokens"]),
        vocab_min_count=int(meta["vocab_min_count"]),
        vocab_corpus_hash=meta.get("vocab_corpus_hash", ""),
        epoch=int(meta["epoch"]),
        seed=int(meta["seed"]),
        adam_m=adam_m,
        adam_v=adam_v,
        adam_step=int(meta["adam_step"]),
        loss_history=[float(x) for x in meta.get("loss_history", [])],
    )
