# mtsm/decoding.py
"""
Autoregressive caption generation.

Both decoders re-run the full decoder on the growing prefix each step
(no key/value cache) and return word ids without BOS/EOS.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from mtsm.data_pipeline import BOS, EOS, DetectionSet
from mtsm.errors import ContractError
from mtsm.tensor import Tensor
from mtsm.transformer import CaptionModel


@dataclass(frozen=True)
class Beam:
    tokens: Tuple[int, ...]  # generated ids after BOS, EOS included when finished
    log_prob: float
    finished: bool = False

    def words(self) -> List[int]:
        return list(self.tokens[:-1] if self.finished and self.tokens and self.tokens[-1] == EOS else self.tokens)

    def score(self, length_penalty: float = 0.0) -> float:
        if length_penalty == 0.0:
            return self.log_prob
        return self.log_prob / max(len(self.tokens), 1) ** length_penalty


def _limit(model: CaptionModel, max_len: Optional[int]) -> int:
    limit = model.config.max_len if max_len is None else max_len
    if limit < 1 or limit > model.config.max_len:
        raise ContractError(f"max_len must be in 1..{model.config.max_len}, got {limit}")
    return limit


def greedy_decode(model: CaptionModel, det: DetectionSet, max_len: Optional[int] = None,
                  memory: Optional[Tensor] = None) -> List[int]:
    """Append the most probable token (lowest id on ties) until EOS or max_len words."""
    limit = _limit(model, max_len)
    memory = memory if memory is not None else model.encode(det)
    words: List[int] = []
    while len(words) < limit:
        nxt = int(np.argmax(model.next_token_logprobs([BOS] + words, memory)))
        if nxt == EOS:
            break
        words.append(nxt)
    return words


def beam_decode(model: CaptionModel, det: DetectionSet, beam_width: int = 3,
                max_len: Optional[int] = None, length_penalty: float = 0.0,
                memory: Optional[Tensor] = None) -> List[int]:
    return beam_search(model, det, beam_width, max_len, length_penalty, memory)[0].words()


def beam_search(model: CaptionModel, det: DetectionSet, beam_width: int = 3,
                max_len: Optional[int] = None, length_penalty: float = 0.0,
                memory: Optional[Tensor] = None) -> List[Beam]:
    """
    Keep the `beam_width` best prefixes by summed log-probability; finished
    beams stay in the pool and compete with open ones. Ties go to the
    lexicographically smaller id sequence. Returns the final pool ranked by
    log_prob / length ** length_penalty.
    """
    if beam_width < 1:
        raise ContractError(f"beam_width must be >= 1, got {beam_width}")
    limit = _limit(model, max_len)
    memory = memory if memory is not None else model.encode(det)

    def rank(b: Beam, penalty: float):
        return (-b.score(penalty), b.tokens)

    beams = [Beam(tokens=(), log_prob=0.0)]
    for _ in range(limit):
        if all(b.finished for b in beams):
            break
        candidates: List[Beam] = []
        for b in beams:
            if b.finished:
                candidates.append(b)
                continue
            logp = model.next_token_logprobs((BOS,) + b.tokens, memory)
            for tok in np.argsort(-logp, kind="stable")[:beam_width]:
                tok = int(tok)
                candidates.append(Beam(b.tokens + (tok,), b.log_prob + float(logp[tok]), tok == EOS))
        candidates.sort(key=lambda c: rank(c, 0.0))
        beams = candidates[:beam_width]

    # open beams that ran out of length are complete without EOS
    beams = [b if b.finished else Beam(b.tokens, b.log_prob, True) for b in beams]
    beams.sort(key=lambda c: rank(c, length_penalty))
    return beams


def sequence_log_prob(model: CaptionModel, det: DetectionSet, words: Sequence[int],
                      ends_with_eos: bool = True, memory: Optional[Tensor] = None) -> float:
    """Summed log-probability of `words` (plus EOS when requested) under the model."""
    memory = memory if memory is not None else model.encode(det)
    prefix = [BOS]
    total = 0.0
    for tok in list(words) + ([EOS] if ends_with_eos else []):
        total += float(model.next_token_logprobs(prefix, memory)[tok])
        prefix.append(tok)
    return total


def decode_corpus(model: CaptionModel, detections: Sequence[DetectionSet],
                  beam_width: int = 1, max_len: Optional[int] = None,
                  length_penalty: float = 0.0) -> List[List[int]]:
    """Decode every image; beam_width 1 uses the greedy decoder."""
    out = []
    for det in detections:
        if beam_width == 1:
            out.append(greedy_decode(model, det, max_len))
        else:
            out.append(beam_decode(model, det, beam_width, max_len, length_penalty))
    return out
