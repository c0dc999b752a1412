"""Coordinate tokens: quantisation, sequence layouts, shuffling and parsing.

Token ids ``0 .. M-1`` are coordinate bins shared by both axes. ``M`` is EOS,
``M+1`` starts a box (REC) sequence and ``M+2`` a mask (RES) sequence. The
predictor only ever scores the ``M + 1`` classes ``0 .. M``.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .geometry import BoundingBox

TASKS = ("rec", "res", "multitask")
SHUFFLE_KINDS = ("none", "cyclic", "full_permutation")
DEFAULT_BOX_WEIGHTS = (1.5, 1.0, 1.0, 1.0, 1.0)

# coordinates that fell outside [0, extent] and were clamped
clamp_stats: Counter = Counter()


class CodecError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    bins: int

    def __post_init__(self):
        if self.bins < 2:
            raise CodecError(f"need at least 2 bins, got {self.bins}")

    @property
    def eos(self) -> int:
        return self.bins

    @property
    def task_rec(self) -> int:
        return self.bins + 1

    @property
    def task_res(self) -> int:
        return self.bins + 2

    @property
    def num_classes(self) -> int:
        return self.bins + 1

    @property
    def num_tokens(self) -> int:
        return self.bins + 3

    def task_token(self, task: str) -> int:
        return self.task_res if task == "res" else self.task_rec


@dataclass
class TokenSequence:
    task: str
    input_tokens: np.ndarray
    target_tokens: np.ndarray
    token_weights: np.ndarray

    def __len__(self):
        return len(self.target_tokens)

    def target_classes(self, vocab: Vocabulary) -> np.ndarray:
        """Targets as predictor classes. The in-stream RES marker of multitask
        sequences is scored as the end-of-segment class (EOS)."""
        return np.minimum(self.target_tokens, vocab.eos)


@dataclass(frozen=True)
class ShuffleMode:
    kind: str = "none"
    percentage: float = 0.0

    def __post_init__(self):
        if self.kind not in SHUFFLE_KINDS:
            raise CodecError(f"unknown shuffle kind {self.kind!r}")
        if not 0.0 <= self.percentage <= 1.0:
            raise CodecError(f"shuffle percentage must be in [0, 1], got {self.percentage}")


def quantize(coord, extent: float, m: int):
    """Bin index ``floor(coord / extent * m)`` clamped to ``[0, m-1]``.

    Works on scalars and arrays. Out-of-range coordinates are clamped and
    counted in ``clamp_stats["clamped"]``.
    """
    if m < 2:
        raise CodecError(f"need at least 2 bins, got {m}")
    c = np.asarray(coord, dtype=np.float64)
    outside = int(np.count_nonzero((c < 0) | (c > extent)))
    if outside:
        clamp_stats["clamped"] += outside
    bins = np.clip(np.floor(c / extent * m), 0, m - 1).astype(np.int64)
    return int(bins) if bins.ndim == 0 else bins


def dequantize(bins, extent: float, m: int):
    """Bin centre ``(bin + 0.5) / m * extent``."""
    b = np.asarray(bins)
    if np.any(b < 0) or np.any(b >= m):
        raise CodecError(f"bin out of range for {m} bins: {bins}")
    out = (b + 0.5) / m * extent
    return float(out) if out.ndim == 0 else out


def quantize_points(points, width: float, height: float, m: int) -> np.ndarray:
    """Interleaved ``x1, y1, x2, y2, ...`` bins for an ``(N, 2)`` point array."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return np.stack([quantize(p[:, 0], width, m), quantize(p[:, 1], height, m)], axis=1).reshape(-1)


def dequantize_points(tokens, width: float, height: float, m: int) -> np.ndarray:
    t = np.asarray(tokens, dtype=np.int64).reshape(-1, 2)
    return np.stack([dequantize(t[:, 0], width, m), dequantize(t[:, 1], height, m)], axis=1)


def _box_tokens(box: BoundingBox, width, height, vocab) -> np.ndarray:
    return quantize_points([(box.x1, box.y1), (box.x2, box.y2)], width, height, vocab.bins)


def build_box_sequence(box: BoundingBox, width: float, height: float, vocab: Vocabulary,
                       weights=DEFAULT_BOX_WEIGHTS) -> TokenSequence:
    coords = _box_tokens(box, width, height, vocab)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (5,):
        raise CodecError(f"box sequences take 5 token weights, got {len(w)}")
    return TokenSequence(
        task="rec",
        input_tokens=np.concatenate([[vocab.task_rec], coords]),
        target_tokens=np.concatenate([coords, [vocab.eos]]),
        token_weights=w.copy(),
    )


def select_shuffled(batch_size: int, percentage: float, rng) -> np.ndarray:
    """Sorted indices of the ``round(percentage * batch_size)`` sequences to shuffle."""
    k = int(round(percentage * batch_size))
    return np.sort(rng.permutation(batch_size)[:k])


def shuffle_points(points, mode: ShuffleMode, rng) -> np.ndarray:
    """Reorder one point sequence according to ``mode.kind``.

    Whether a given sequence is shuffled at all is decided per batch by
    :func:`select_shuffled`.
    """
    p = np.asarray(points)
    if mode.kind == "none" or len(p) == 0:
        return p
    if mode.kind == "cyclic":
        return np.roll(p, -int(rng.integers(len(p))), axis=0)
    return p[rng.permutation(len(p))]


def build_mask_sequence(points, width: float, height: float, vocab: Vocabulary,
                        shuffle: ShuffleMode = ShuffleMode(), rng=None) -> TokenSequence:
    p = np.asarray(points, dtype=np.float64)
    if len(p) < 3:
        raise CodecError(f"mask sequences need at least 3 points, got {len(p)}")
    if shuffle.kind != "none":
        p = shuffle_points(p, shuffle, rng)
    coords = quantize_points(p, width, height, vocab.bins)
    return TokenSequence(
        task="res",
        input_tokens=np.concatenate([[vocab.task_res], coords]),
        target_tokens=np.concatenate([coords, [vocab.eos]]),
        token_weights=np.ones(len(coords) + 1),
    )


def build_multitask_sequence(box: BoundingBox, points, width: float, height: float,
                             vocab: Vocabulary, shuffle: ShuffleMode = ShuffleMode(), rng=None,
                             first_weight: float = DEFAULT_BOX_WEIGHTS[0]) -> TokenSequence:
    """``[REC, box, RES, mask]`` in, ``[box, RES, mask, EOS]`` out."""
    if box is None or points is None:
        raise CodecError("multitask sequences need both a box and mask points")
    b = _box_tokens(box, width, height, vocab)
    m = build_mask_sequence(points, width, height, vocab, shuffle, rng)
    coords = m.target_tokens[:-1]
    weights = np.ones(4 + 1 + len(coords) + 1)
    weights[0] = first_weight
    return TokenSequence(
        task="multitask",
        input_tokens=np.concatenate([[vocab.task_rec], b, [vocab.task_res], coords]),
        target_tokens=np.concatenate([b, [vocab.task_res], coords, [vocab.eos]]),
        token_weights=weights,
    )


@dataclass
class Parsed:
    """A decoded prediction. ``degenerate`` marks streams that could not form
    the requested structure; metrics score those as IoU 0."""

    box: BoundingBox | None = None
    points: np.ndarray | None = None
    degenerate: bool = False
    notes: list[str] = field(default_factory=list)


def _parse_box(tokens, width, height, vocab) -> BoundingBox | None:
    coords = [int(t) for t in tokens if t < vocab.bins][:4]
    if len(coords) < 4:
        return None
    (x1, y1), (x2, y2) = dequantize_points(coords, width, height, vocab.bins)
    return BoundingBox.ordered(x1, y1, x2, y2)


def _parse_points(tokens, width, height, vocab) -> np.ndarray:
    coords = []
    for t in tokens:
        if t >= vocab.bins:
            break
        coords.append(int(t))
    if len(coords) % 2:
        coords.pop()  # unpaired trailing x
    if not coords:
        return np.zeros((0, 2))
    return dequantize_points(coords, width, height, vocab.bins)


def parse_sequence(tokens, task: str, width: float, height: float, vocab: Vocabulary) -> Parsed:
    """Turn a predicted target stream back into a box and/or contour points."""
    tokens = [int(t) for t in tokens]
    if task == "rec":
        box = _parse_box(tokens, width, height, vocab)
        return Parsed(box=box, degenerate=box is None)
    if task == "res":
        pts = _parse_points(tokens, width, height, vocab)
        return Parsed(points=pts, degenerate=len(pts) < 3)
    if task == "multitask":
        if vocab.task_res in tokens:
            cut = tokens.index(vocab.task_res)
            box = _parse_box(tokens[:cut], width, height, vocab)
            pts = _parse_points(tokens[cut + 1:], width, height, vocab)
        else:
            box = _parse_box(tokens, width, height, vocab)
            pts = np.zeros((0, 2))
        return Parsed(box=box, points=pts, degenerate=box is None or len(pts) < 3)
    raise CodecError(f"unknown task {task!r}")


def format_tokens(task: str, bins: int, tokens) -> str:
    """One line: task name, bin count, whitespace-separated token ids."""
    return " ".join([task, str(bins), *(str(int(t)) for t in tokens)])


def parse_token_line(line: str) -> tuple[str, int, np.ndarray]:
    parts = line.split()
    if len(parts) < 2 or parts[0] not in TASKS:
        raise CodecError(f"bad token line: {line!r}")
    bins = int(parts[1])
    toks = np.asarray([int(p) for p in parts[2:]], dtype=np.int64)
    if toks.size and (toks.min() < 0 or toks.max() >= bins + 3):
        raise CodecError(f"token id out of range for {bins} bins")
    return parts[0], bins, toks
