# mtsm/training.py
"""
Masked cross-entropy training with Adam and an epoch-wise learning-rate decay.

One step = one batch of (image, caption) pairs. The batch loss is the sum of
token losses divided by the batch's non-PAD token count, so every token
weighs the same regardless of which caption it came from.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import psutil

from mtsm.data_pipeline import PAD, TrainingExample, Vocabulary
from mtsm.errors import ContractError, DegenerateBatchError, DimensionError, NonFiniteGradientError
from mtsm.models import EpochLogLine, TrainConfig
from mtsm.tensor import Graph, Tensor, add, apply, backward, scale
from mtsm.transformer import CaptionModel, Checkpoint, ModelParams, save_checkpoint

logger = logging.getLogger(__name__)


# ==============================================================================
# LOSS
# ==============================================================================

def masked_xe_loss(logits: Tensor, targets: Sequence[int], pad_id: int = PAD,
                   reduction: str = "mean") -> Tensor:
    """
    -log softmax(logits)[t, target_t], averaged ("mean") or summed ("sum")
    over positions whose target is not `pad_id`.
    """
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [T, V], got {logits.shape}")
    tgt = np.asarray(targets, dtype=np.int64)
    T, V = logits.shape
    if tgt.shape != (T,):
        raise DimensionError(f"{tgt.size} targets for {T} logit rows")
    if tgt.min() < 0 or tgt.max() >= V:
        raise DimensionError(f"target ids must lie in [0, {V})")
    live = tgt != pad_id
    count = int(live.sum())
    if count == 0:
        raise DegenerateBatchError("every target position is padding")
    if reduction not in ("mean", "sum"):
        raise ContractError(f"unknown reduction '{reduction}'")
    norm = float(count) if reduction == "mean" else 1.0

    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(T)
    nll = -log_p[rows, tgt]
    value = np.asarray((nll * live).sum() / norm)

    def _back(g):
        grad = np.exp(log_p)
        grad[rows, tgt] -= 1.0
        return (grad * live[:, None] * (float(g) / norm),)

    return apply("masked_xe", value, (logits,), _back)


# ==============================================================================
# SCHEDULE / OPTIMIZER
# ==============================================================================

def epoch_lr(epoch: int, cfg: TrainConfig) -> float:
    """base_lr * gamma ** epoch, constant within an epoch."""
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    return cfg.base_lr * cfg.lr_decay_gamma ** epoch


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: ModelParams, cfg: Optional[TrainConfig] = None) -> "OptimizerState":
        cfg = cfg or TrainConfig()
        return cls(
            m={name: np.zeros(t.shape) for name, t in params.items()},
            v={name: np.zeros(t.shape) for name, t in params.items()},
            beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps,
        )


def adam_step(params: ModelParams, grads: Dict[str, np.ndarray], state: OptimizerState, lr: float):
    """Bias-corrected Adam, applied in place. All gradients are checked before any update."""
    for name in params:
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != params[name].shape:
            raise DimensionError(f"gradient for '{name}' has shape {g.shape}, expected {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)

    state.step += 1
    b1, b2, t = state.beta1, state.beta2, state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / (1.0 - b1 ** t)
        v_hat = state.v[name] / (1.0 - b2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients together so their global L2 norm is at most max_norm."""
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if norm > max_norm:
        factor = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * factor
    return norm


# ==============================================================================
# STEPS
# ==============================================================================

def _token_count(batch: Sequence[TrainingExample]) -> int:
    return sum(1 for ex in batch for t in ex.targets if t != PAD)


def batch_loss(model: CaptionModel, batch: Sequence[TrainingExample],
               rng: Optional[np.random.Generator] = None) -> Tensor:
    """Token-weighted mean XE over a batch; records on the active graph if any."""
    if not batch:
        raise DegenerateBatchError("empty batch")
    tokens = _token_count(batch)
    if tokens == 0:
        raise DegenerateBatchError("batch has no non-PAD targets")
    loss = None
    for ex in batch:
        logits = model.forward(ex.det, ex.inputs, rng)
        part = masked_xe_loss(logits, ex.targets, reduction="sum")
        loss = part if loss is None else add(loss, part)
    return scale(loss, 1.0 / tokens)


def train_step(model: CaptionModel, batch: Sequence[TrainingExample], state: OptimizerState,
               lr: float, clip_norm: Optional[float] = None,
               rng: Optional[np.random.Generator] = None) -> float:
    with Graph() as graph:
        loss = batch_loss(model, batch, rng)
    grads_by_tensor = backward(graph, loss, wrt=model.params.tensors())
    grads = {name: grads_by_tensor[t] for name, t in model.params.items()}
    if clip_norm is not None:
        clip_grad_norm(grads, clip_norm)
    adam_step(model.params, grads, state, lr)
    return loss.item()


def evaluate_loss(model: CaptionModel, examples: Sequence[TrainingExample]) -> float:
    """Token-weighted mean XE without dropout."""
    return batch_loss(model, examples).item()


# ==============================================================================
# LOOP
# ==============================================================================

@dataclass
class TrainOutputs:
    checkpoint_path: Optional[Path] = None
    log_path: Optional[Path] = None
    history: List[EpochLogLine] = field(default_factory=list)


def _rss_mb() -> Optional[float]:
    try:
        return psutil.Process().memory_info().rss / 2**20
    except psutil.Error:
        return None


def train(model: CaptionModel, dataset: Sequence[TrainingExample], cfg: TrainConfig,
          vocab: Vocabulary, checkpoint_path: Optional[Path] = None,
          log_path: Optional[Path] = None, resume: Optional[Checkpoint] = None,
          outputs: Optional[TrainOutputs] = None) -> Checkpoint:
    """
    Run epochs [start, cfg.epochs). Shuffling and dropout draw from
    generators seeded by (seed, epoch[, step]), so a resumed run follows
    the uninterrupted trajectory exactly.
    """
    if len(dataset) == 0:
        raise ContractError("training dataset is empty")
    if len(vocab) != model.config.vocab_size:
        raise ContractError(f"vocabulary has {len(vocab)} ids, model expects {model.config.vocab_size}")

    state = OptimizerState.fresh(model.params, cfg)
    start_epoch = 0
    history: List[float] = []
    if resume is not None:
        model.params.load_state_dict(resume.params)
        if resume.adam_m:
            state.m = {k: v.copy() for k, v in resume.adam_m.items()}
            state.v = {k: v.copy() for k, v in resume.adam_v.items()}
            state.step = resume.adam_step
        start_epoch = resume.epoch
        history = list(resume.loss_history)
        logger.info(f"Resuming at epoch {start_epoch} (optimizer step {state.step})")

    outputs = outputs if outputs is not None else TrainOutputs()
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        if resume is None:
            log_path.write_text("")
        outputs.log_path = log_path

    def snapshot(epoch: int) -> Checkpoint:
        return Checkpoint(
            model_config=model.config,
            train_config=cfg,
            params=model.params.state_dict(),
            vocab_tokens=vocab.tokens,
            vocab_min_count=vocab.min_count,
            vocab_corpus_hash=vocab.corpus_hash,
            epoch=epoch,
            seed=cfg.seed,
            adam_m={k: v.copy() for k, v in state.m.items()},
            adam_v={k: v.copy() for k, v in state.v.items()},
            adam_step=state.step,
            loss_history=list(history),
        )

    ckpt = snapshot(start_epoch)
    for epoch in range(start_epoch, cfg.epochs):
        started = time.perf_counter()
        lr = epoch_lr(epoch, cfg)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(dataset))
        weighted, tokens = 0.0, 0
        for step, begin in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [dataset[i] for i in order[begin:begin + cfg.batch_size]]
            rng = np.random.default_rng([cfg.seed, epoch, step]) if model.config.dropout_rate > 0 else None
            n_tok = _token_count(batch)
            weighted += train_step(model, batch, state, lr, cfg.clip_norm, rng) * n_tok
            tokens += n_tok
        mean_loss = weighted / tokens
        history.append(mean_loss)

        line = EpochLogLine(epoch=epoch, mean_loss=mean_loss, lr=lr,
                            wall_seconds=time.perf_counter() - started, rss_mb=_rss_mb())
        outputs.history.append(line)
        logger.info(f"epoch {epoch + 1}/{cfg.epochs} loss={mean_loss:.4f} lr={lr:.3g} "
                    f"({line.wall_seconds:.1f}s)")
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as f:
                f.write(line.model_dump_json() + "\n")

        ckpt = snapshot(epoch + 1)
        last = epoch + 1 == cfg.epochs
        periodic = cfg.checkpoint_every > 0 and (epoch + 1) % cfg.checkpoint_every == 0
        if checkpoint_path is not None and (last or periodic):
            save_checkpoint(checkpoint_path, ckpt)
            outputs.checkpoint_path = Path(checkpoint_path)
    return ckpt
