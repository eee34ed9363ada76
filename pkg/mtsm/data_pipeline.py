# mtsm/data_pipeline.py
"""
Captions, vocabulary, detection files and the synthetic scene generator.

File formats (all line-delimited JSON unless noted):
- detections: {"image_id", "boxes": [[cx, cy, w, h], ...], "scores": [...],
  "features": [[...], ...]}  one image per line, raw detector output
- captions:   {"image_id", "caption"}  one caption per line
- vocabulary: plain text; header "#mtsm-vocab min_count=<k> corpus_sha256=<hex>",
  then one token per line, id = line index + 4
"""
from __future__ import annotations

import hashlib
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from mtsm.errors import (
    ContractError,
    EmptyCaptionError,
    EmptyDetectionsError,
    InvalidBoxError,
    MissingFileError,
    ParseError,
    VocabError,
)
from mtsm.models import Box, CaptionLine, DetectionRecord

logger = logging.getLogger(__name__)

MAX_CAPTION_WORDS = 51
MIN_SCORE = 0.7
MAX_OBJECTS = 78

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

_PUNCTUATION = re.compile(r"[^\w\s]|_")


# ==============================================================================
# CAPTIONS
# ==============================================================================

def preprocess_caption(text: str, max_words: int = MAX_CAPTION_WORDS) -> List[str]:
    """Lowercase, drop everything but letters/digits/whitespace, split, truncate."""
    tokens = _PUNCTUATION.sub("", text.lower()).split()
    if not tokens:
        raise EmptyCaptionError(f"caption {text!r} is empty after cleaning")
    return tokens[:max_words]


# ==============================================================================
# VOCABULARY
# ==============================================================================

class Vocabulary:
    """
    Token <-> id map. Ids 0-3 are PAD/BOS/EOS/UNK; corpus tokens start at 4.
    """

    def __init__(self, tokens: Sequence[str], min_count: int = 5, corpus_hash: str = ""):
        self.itos: List[str] = list(RESERVED_TOKENS) + list(tokens)
        self.stoi: Dict[str, int] = {}
        for i, tok in enumerate(self.itos):
            if tok in self.stoi:
                raise VocabError(f"duplicate vocabulary entry {tok!r}")
            self.stoi[tok] = i
        self.min_count = min_count
        self.corpus_hash = corpus_hash

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi and self.stoi[token] >= len(RESERVED_TOKENS)

    @property
    def tokens(self) -> List[str]:
        """Non-reserved tokens in id order."""
        return self.itos[len(RESERVED_TOKENS):]

    def encode(self, words: Sequence[str]) -> List[int]:
        ids = []
        for w in words:
            i = self.stoi.get(w, UNK)
            ids.append(UNK if i < len(RESERVED_TOKENS) else i)
        return ids

    def encode_caption(self, text: str) -> List[int]:
        """Preprocessed word ids, without BOS/EOS."""
        return self.encode(preprocess_caption(text))

    def decode(self, ids: Sequence[int]) -> List[str]:
        words = []
        for i in ids:
            if not (0 <= i < len(self.itos)):
                raise VocabError(f"token id {i} outside vocabulary of size {len(self.itos)}")
            words.append(self.itos[i])
        return words

    def to_text(self, ids: Sequence[int]) -> str:
        """Caption string, skipping reserved ids other than UNK."""
        return " ".join(self.itos[i] for i in ids if i == UNK or i >= len(RESERVED_TOKENS))

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [f"#mtsm-vocab min_count={self.min_count} corpus_sha256={self.corpus_hash}"]
        lines.extend(self.tokens)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        logger.info(f"Wrote vocabulary of {len(self.tokens)} tokens to {path}")
        return path

    @classmethod
    def load(cls, path: Path) -> "Vocabulary":
        path = Path(path)
        if not path.exists():
            raise MissingFileError(f"vocabulary file not found: {path}")
        lines = path.read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith("#mtsm-vocab"):
            raise ParseError("missing '#mtsm-vocab' header", path, 1)
        header = dict(part.split("=", 1) for part in lines[0].split()[1:] if "=" in part)
        try:
            min_count = int(header.get("min_count", "5"))
        except ValueError as e:
            raise ParseError(f"bad min_count in header: {e}", path, 1) from e
        return cls(lines[1:], min_count, header.get("corpus_sha256", ""))


def corpus_hash(counts: Counter) -> str:
    """Order-insensitive digest of token counts."""
    h = hashlib.sha256()
    for tok, n in sorted(counts.items()):
        h.update(f"{tok}\t{n}\n".encode("utf-8"))
    return h.hexdigest()


def build_vocab(corpus: Iterable[Sequence[str]], min_count: int = 5) -> Vocabulary:
    """
    Tokens seen at least `min_count` times, ordered by (count desc, token asc).
    `corpus` yields preprocessed token lists.
    """
    counts: Counter = Counter()
    captions = 0
    for tokens in corpus:
        counts.update(tokens)
        captions += 1
    if captions == 0:
        raise ContractError("cannot build a vocabulary from an empty corpus")
    kept = sorted((tok for tok, n in counts.items() if n >= min_count), key=lambda t: (-counts[t], t))
    logger.info(f"Vocabulary: {len(kept)} of {len(counts)} distinct tokens occur >= {min_count} times")
    return Vocabulary(kept, min_count, corpus_hash(counts))


# ==============================================================================
# DETECTIONS
# ==============================================================================

@dataclass
class DetectionSet:
    """Filtered detections for one image."""
    image_id: str
    boxes: np.ndarray     # [N, 4] (cx, cy, w, h)
    scores: np.ndarray    # [N]
    features: np.ndarray  # [N, d_feat]

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.features = np.asarray(self.features, dtype=np.float64)
        n = self.boxes.shape[0]
        if n == 0:
            raise EmptyDetectionsError(f"image {self.image_id}: no detections")
        if self.features.ndim != 2 or self.features.shape[0] != n or self.scores.shape[0] != n:
            raise ContractError(
                f"image {self.image_id}: {n} boxes, {self.scores.shape[0]} scores, "
                f"feature rows {self.features.shape[0] if self.features.ndim == 2 else '?'}"
            )

    @property
    def num_objects(self) -> int:
        return self.boxes.shape[0]

    def to_record(self) -> DetectionRecord:
        return DetectionRecord(
            image_id=self.image_id,
            boxes=[tuple(float(v) for v in b) for b in self.boxes],
            scores=[float(s) for s in self.scores],
            features=[[float(v) for v in row] for row in self.features],
        )


@dataclass
class LoadStats:
    images_read: int = 0
    images_skipped: int = 0
    boxes_dropped_by_score: int = 0
    boxes_dropped_by_cap: int = 0


def filter_detections(record: DetectionRecord, min_score: float = MIN_SCORE,
                      max_objects: int = MAX_OBJECTS,
                      stats: Optional[LoadStats] = None) -> Optional[DetectionSet]:
    """
    Threshold then cap: keep scores >= min_score, then the max_objects
    highest (ties by record order). Kept boxes stay in record order.
    Returns None when nothing survives.
    """
    scores = np.asarray(record.scores, dtype=np.float64)
    keep = np.nonzero(scores >= min_score)[0]
    dropped_score = len(scores) - keep.size
    dropped_cap = 0
    if keep.size > max_objects:
        order = np.argsort(-scores[keep], kind="stable")[:max_objects]
        dropped_cap = keep.size - max_objects
        keep = np.sort(keep[order])
    if stats is not None:
        stats.boxes_dropped_by_score += dropped_score
        stats.boxes_dropped_by_cap += dropped_cap
    if keep.size == 0:
        return None

    boxes = np.asarray(record.boxes, dtype=np.float64)[keep]
    for i, b in zip(keep, boxes):
        try:
            Box(cx=b[0], cy=b[1], w=b[2], h=b[3])
        except ValidationError as e:
            raise InvalidBoxError(
                f"image {record.image_id}: box {int(i)} {tuple(b)} invalid: {e.errors()[0]['msg']}"
            ) from e
    # features are 32-bit decimals on disk
    features = np.asarray(record.features, dtype=np.float32)[keep].astype(np.float64)
    return DetectionSet(record.image_id, boxes, scores[keep], features)


def load_detections(path: Path, min_score: float = MIN_SCORE, max_objects: int = MAX_OBJECTS,
                    stats: Optional[LoadStats] = None) -> Iterator[DetectionSet]:
    """Stream filtered DetectionSets; images with no surviving box are skipped and counted."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"detections file not found: {path}")
    stats = stats if stats is not None else LoadStats()
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = DetectionRecord.model_validate_json(line)
            except ValidationError as e:
                err = e.errors()[0]
                loc = ".".join(str(p) for p in err.get("loc", ()))
                raise ParseError(f"{loc}: {err.get('msg')}" if loc else err.get("msg", "invalid record"),
                                 path, line_no) from e
            stats.images_read += 1
            try:
                det = filter_detections(record, min_score, max_objects, stats)
            except InvalidBoxError as e:
                raise InvalidBoxError(f"{path}:{line_no}: {e.message}") from e
            if det is None:
                stats.images_skipped += 1
                logger.warning(f"Skipping image {record.image_id}: no box scored >= {min_score}")
                continue
            yield det
    if stats.images_skipped:
        logger.warning(f"{stats.images_skipped} of {stats.images_read} images skipped in {path}")


def write_detections(path: Path, sets: Iterable[DetectionSet]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for det in sets:
            f.write(det.to_record().model_dump_json() + "\n")
    return path


def load_captions(path: Path) -> List[CaptionLine]:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"captions file not found: {path}")
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                out.append(CaptionLine.model_validate_json(line))
            except ValidationError as e:
                raise ParseError(e.errors()[0].get("msg", "invalid caption record"), path, line_no) from e
    return out


def write_captions(path: Path, lines: Iterable[CaptionLine]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for c in lines:
            f.write(c.model_dump_json() + "\n")
    return path


def group_captions(lines: Iterable[CaptionLine]) -> Dict[str, List[str]]:
    """image_id -> captions, in file order."""
    grouped: Dict[str, List[str]] = {}
    for c in lines:
        grouped.setdefault(c.image_id, []).append(c.caption)
    return grouped


# ==============================================================================
# SYNTHETIC SCENES
# ==============================================================================

SHAPES = ("square", "circle", "triangle")
COLORS = ("red", "green", "blue", "yellow")
RELATION_MARGIN = 0.05
_CLASS_SEED = 20240917
_SIGNAL_SCALE = 0.1


@dataclass(frozen=True)
class SceneObject:
    color: str
    shape: str
    box: Tuple[float, float, float, float]

    @property
    def phrase(self) -> str:
        return f"a {self.color} {self.shape}"


@lru_cache(maxsize=8)
def _class_tables(d_feat: int) -> Tuple[np.ndarray, np.ndarray]:
    """Fixed class embeddings [classes, d_feat] and box projection [4, d_feat]."""
    rng = np.random.default_rng(_CLASS_SEED)
    classes = rng.standard_normal((len(SHAPES) * len(COLORS), d_feat))
    box_proj = rng.standard_normal((4, d_feat))
    return classes, box_proj


def describe_relations(objects: Sequence[SceneObject], margin: float = RELATION_MARGIN) -> List[str]:
    """
    Relation captions for every ordered pair whose centers differ by more
    than `margin`. The widest horizontal pair comes first, phrased
    left-to-right; image y grows downward, so smaller cy is "above".
    """
    horizontal: List[Tuple[float, str]] = []
    vertical: List[Tuple[float, str]] = []
    for i, a in enumerate(objects):
        for j, b in enumerate(objects):
            if i == j:
                continue
            dx = b.box[0] - a.box[0]
            dy = b.box[1] - a.box[1]
            if dx > margin:
                horizontal.append((dx, f"{a.phrase} left of {b.phrase}"))
            elif dx < -margin:
                horizontal.append((-dx, f"{a.phrase} right of {b.phrase}"))
            if dy > margin:
                vertical.append((dy, f"{a.phrase} above {b.phrase}"))
            elif dy < -margin:
                vertical.append((-dy, f"{a.phrase} below {b.phrase}"))
    # stable order: widest separation first, then text
    horizontal.sort(key=lambda r: (-r[0], r[1]))
    vertical.sort(key=lambda r: (-r[0], r[1]))
    lefts = [t for _, t in horizontal if " left of " in t]
    rights = [t for _, t in horizontal if " left of " not in t]
    return lefts + rights + [t for _, t in vertical]


def synth_scene(seed, num_objects: Optional[int] = None, d_feat: int = 32,
                image_id: Optional[str] = None,
                max_captions: Optional[int] = None) -> Tuple[DetectionSet, List[str]]:
    """
    Random non-overlapping-class scene with 2..6 objects and relation captions.
    Deterministic in `seed` (an int or a sequence of ints).
    """
    rng = np.random.default_rng(seed)
    n = int(num_objects) if num_objects is not None else int(rng.integers(2, 7))
    if not (2 <= n <= 6):
        raise ContractError(f"num_objects must be in 2..6, got {n}")

    class_ids = rng.choice(len(SHAPES) * len(COLORS), size=n, replace=False)
    while True:
        w = rng.uniform(0.08, 0.3, size=n)
        h = rng.uniform(0.08, 0.3, size=n)
        cx = rng.uniform(w / 2, 1 - w / 2)
        cy = rng.uniform(h / 2, 1 - h / 2)
        # at least one left/right relation must exist
        if cx.max() - cx.min() > RELATION_MARGIN:
            break

    objects = [
        SceneObject(COLORS[c % len(COLORS)], SHAPES[c // len(COLORS)],
                    (float(cx[i]), float(cy[i]), float(w[i]), float(h[i])))
        for i, c in enumerate(class_ids)
    ]
    boxes = np.array([o.box for o in objects])
    classes, box_proj = _class_tables(d_feat)
    features = classes[class_ids] + _SIGNAL_SCALE * boxes @ box_proj
    features = features.astype(np.float32).astype(np.float64)
    scores = np.round(rng.uniform(MIN_SCORE, 1.0, size=n), 4)

    captions = describe_relations(objects)
    if max_captions is not None:
        captions = captions[:max_captions]
    det = DetectionSet(image_id or f"synth-{rng.integers(0, 2**31):010d}", boxes, scores, features)
    return det, captions


def synth_corpus(num_scenes: int, seed: int, d_feat: int = 32,
                 captions_per_scene: Optional[int] = 1) -> Tuple[List[DetectionSet], List[CaptionLine]]:
    scenes, caption_lines = [], []
    for i in range(num_scenes):
        det, captions = synth_scene([seed, i], d_feat=d_feat, image_id=f"synth-{seed}-{i:05d}",
                                    max_captions=captions_per_scene)
        scenes.append(det)
        caption_lines.extend(CaptionLine(image_id=det.image_id, caption=c) for c in captions)
    return scenes, caption_lines


# ==============================================================================
# TRAINING PAIRS
# ==============================================================================

@dataclass
class TrainingExample:
    det: DetectionSet
    words: List[int] = field(default_factory=list)  # word ids, no BOS/EOS

    @property
    def inputs(self) -> List[int]:
        return [BOS] + self.words

    @property
    def targets(self) -> List[int]:
        return self.words + [EOS]


def make_examples(detections: Iterable[DetectionSet], captions: Iterable[CaptionLine],
                  vocab: Vocabulary) -> List[TrainingExample]:
    """One example per (image, caption) pair; captions of unknown images are ignored."""
    by_image = group_captions(captions)
    examples = []
    for det in detections:
        for text in by_image.get(det.image_id, []):
            examples.append(TrainingExample(det, vocab.encode_caption(text)))
    return examples
