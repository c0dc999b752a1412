"""Synthetic referring scenes and polygon-annotation fixtures.

Annotation file format (UTF-8 text, one record per line)::

    # seqground-annotations v1 vocab=<vocabulary file, relative to this file>
    <width> <height> "<query>" <x1> <y1> <x2> <y2> <px1> <py1> <px2> <py2> ...

Fields are whitespace separated; the query is double-quoted (shell quoting
rules). The box is in pixel-corner coordinates, the polygon lists at least
three ``x y`` vertices. Blank lines and lines starting with ``#`` after the
header are ignored. The vocabulary file holds one token per line; a token's
id is its zero-based line number.
"""

from __future__ import annotations

import logging
import shlex
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import BoundingBox, bounding_box_of, disk_mask, ellipse_mask, rasterize_polygon

log = logging.getLogger(__name__)

KINDS = ("circle", "square", "triangle", "ellipse")
COLORS = ("red", "green", "blue", "yellow")
SIZES = ("small", "large")
RELATIONS = ("left", "right", "top", "bottom")
TEMPLATES = ("color_kind", "relation_kind", "size_color_kind")

PAD, UNK = "<pad>", "<unk>"
HEADER = "# seqground-annotations v1"


class DataError(ValueError):
    pass


class WordVocab:
    def __init__(self, tokens):
        self.tokens = list(tokens)
        if self.tokens[:2] != [PAD, UNK]:
            raise DataError("vocabulary must start with <pad> and <unk>")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def encode(self, text: str) -> np.ndarray:
        return np.asarray([self.index.get(w, 1) for w in text.lower().split()], dtype=np.int64)

    def decode(self, ids) -> str:
        return " ".join(self.tokens[int(i)] for i in ids if int(i) != 0)

    @classmethod
    def default(cls) -> "WordVocab":
        return cls([PAD, UNK, *COLORS, *KINDS, *SIZES, *RELATIONS])

    @classmethod
    def load(cls, path) -> "WordVocab":
        return cls([ln.rstrip("\n") for ln in Path(path).read_text().splitlines() if ln.strip()])

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n")


@dataclass
class Shape:
    kind: str
    color: str
    size: str
    cx: float
    cy: float
    radius: float
    vertical: bool = False
    mask: np.ndarray | None = field(default=None, repr=False)

    @property
    def centroid(self) -> tuple[float, float]:
        rows, cols = np.nonzero(self.mask)
        return float(cols.mean()) + 0.5, float(rows.mean()) + 0.5


@dataclass
class GroundingSample:
    raster: np.ndarray
    query: str
    query_ids: np.ndarray
    gt_box: BoundingBox
    gt_mask: np.ndarray
    task: str = "rec"
    shapes: list[Shape] | None = field(default=None, repr=False)
    target: int | None = None

    @property
    def color_distractor(self) -> bool:
        """True when another shape shares the referent's colour, so colour alone cannot resolve it."""
        if not self.shapes or self.target is None:
            return False
        color = self.shapes[self.target].color
        return any(s.color == color for i, s in enumerate(self.shapes) if i != self.target)

    @property
    def width(self) -> int:
        return self.gt_mask.shape[1]

    @property
    def height(self) -> int:
        return self.gt_mask.shape[0]


@dataclass
class SceneConfig:
    size: int = 64
    min_shapes: int = 1
    max_shapes: int = 3
    small_radius: tuple[float, float] = (8.0, 11.0)
    large_radius: tuple[float, float] = (13.0, 17.0)
    gap: int = 1
    template_weights: tuple[float, float, float] = (0.5, 0.25, 0.25)
    max_retries: int = 50


def render_shape(kind: str, cx: float, cy: float, r: float, size: int, vertical: bool = False):
    if kind == "circle":
        return disk_mask(size, size, cx, cy, r)
    if kind == "square":
        h = 0.85 * r
        return rasterize_polygon([(cx - h, cy - h), (cx + h, cy - h), (cx + h, cy + h), (cx - h, cy + h)],
                                 size, size)
    if kind == "triangle":
        return rasterize_polygon([(cx, cy - r), (cx + r, cy + 0.8 * r), (cx - r, cy + 0.8 * r)], size, size)
    if kind == "ellipse":
        return ellipse_mask(size, size, cx, cy, r, 0.55 * r, np.pi / 2 if vertical else 0.0)
    raise DataError(f"unknown shape kind {kind!r}")


def _dilate(mask: np.ndarray, k: int) -> np.ndarray:
    out = mask.copy()
    for _ in range(k):
        grown = out.copy()
        grown[1:] |= out[:-1]
        grown[:-1] |= out[1:]
        grown[:, 1:] |= out[:, :-1]
        grown[:, :-1] |= out[:, 1:]
        out = grown
    return out


def sample_scene(rng, cfg: SceneConfig) -> list[Shape]:
    n = int(rng.integers(cfg.min_shapes, cfg.max_shapes, endpoint=True))
    shapes: list[Shape] = []
    occupied = np.zeros((cfg.size, cfg.size), dtype=bool)
    attempts = 0
    while len(shapes) < n and attempts < 200:
        attempts += 1
        size = SIZES[int(rng.integers(2))]
        r = rng.uniform(*(cfg.small_radius if size == "small" else cfg.large_radius))
        if 2 * r + 2 >= cfg.size:
            continue
        cx = rng.uniform(r + 1, cfg.size - r - 1)
        cy = rng.uniform(r + 1, cfg.size - r - 1)
        kind = KINDS[int(rng.integers(len(KINDS)))]
        vertical = bool(rng.integers(2))
        mask = render_shape(kind, cx, cy, r, cfg.size, vertical)
        if not mask.any() or (_dilate(mask, cfg.gap) & occupied).any():
            continue
        color = COLORS[int(rng.integers(len(COLORS)))]
        shapes.append(Shape(kind, color, size, cx, cy, r, vertical, mask))
        occupied |= mask
    return shapes


def _relation_winner(shapes, kind, rel, margin=2.0):
    members = [i for i, s in enumerate(shapes) if s.kind == kind]
    if len(members) < 2:
        return None
    axis = 0 if rel in ("left", "right") else 1
    keys = sorted((shapes[i].centroid[axis], i) for i in members)
    if rel in ("right", "bottom"):
        keys = keys[::-1]
        if keys[0][0] - keys[1][0] < margin:
            return None
    elif keys[1][0] - keys[0][0] < margin:
        return None
    return keys[0][1]


def query_matches(shapes: list[Shape], query: str) -> list[int]:
    """Indices of the shapes a template query describes."""
    words = query.split()
    if len(words) == 2 and words[0] in RELATIONS:
        win = _relation_winner(shapes, words[1], words[0], margin=0.0)
        return [] if win is None else [win]
    if len(words) == 2:
        color, kind = words
        return [i for i, s in enumerate(shapes) if s.color == color and s.kind == kind]
    if len(words) == 3:
        size, color, kind = words
        return [i for i, s in enumerate(shapes) if s.size == size and s.color == color and s.kind == kind]
    raise DataError(f"not a template query: {query!r}")


def describe(shapes: list[Shape], target: int, template: str) -> str | None:
    s = shapes[target]
    if template == "color_kind":
        q = f"{s.color} {s.kind}"
    elif template == "size_color_kind":
        q = f"{s.size} {s.color} {s.kind}"
    else:
        for rel in RELATIONS:
            if _relation_winner(shapes, s.kind, rel) == target:
                q = f"{rel} {s.kind}"
                break
        else:
            return None
    return q if query_matches(shapes, q) == [target] else None


def rasterize_scene(shapes: list[Shape], size: int) -> np.ndarray:
    raster = np.zeros((size, size, len(COLORS)), dtype=np.float32)
    for s in shapes:
        raster[s.mask, COLORS.index(s.color)] = 1.0
    return raster


def generate_sample(rng, cfg: SceneConfig = SceneConfig(), vocab: WordVocab | None = None,
                    task: str = "rec") -> GroundingSample:
    """One scene, a uniquely-resolving query, and the referent's box and mask."""
    vocab = vocab or WordVocab.default()
    weights = np.asarray(cfg.template_weights, dtype=np.float64)
    for _ in range(cfg.max_retries):
        shapes = sample_scene(rng, cfg)
        if not shapes:
            continue
        target = int(rng.integers(len(shapes)))
        order = rng.choice(len(TEMPLATES), len(TEMPLATES), replace=False, p=weights / weights.sum())
        for t in order:
            query = describe(shapes, target, TEMPLATES[t])
            if query is not None:
                mask = shapes[target].mask
                return GroundingSample(
                    raster=rasterize_scene(shapes, cfg.size),
                    query=query,
                    query_ids=vocab.encode(query),
                    gt_box=bounding_box_of(mask),
                    gt_mask=mask,
                    task=task,
                    shapes=shapes,
                    target=target,
                )
    raise DataError("could not generate a uniquely described scene")


def generate_dataset(n: int, seed: int, cfg: SceneConfig = SceneConfig(), task: str = "rec",
                     vocab: WordVocab | None = None) -> list[GroundingSample]:
    rng = np.random.default_rng(seed)
    vocab = vocab or WordVocab.default()
    return [generate_sample(rng, cfg, vocab, task) for _ in range(n)]


def split_dataset(samples, fractions=(0.9, 0.1), seed: int = 0):
    """Seeded shuffle, then consecutive slices sized by ``fractions``."""
    fr = np.asarray(fractions, dtype=np.float64)
    if np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise DataError(f"fractions must be non-negative and sum to 1, got {fractions}")
    order = np.random.default_rng(seed).permutation(len(samples))
    bounds = np.round(np.cumsum(fr) * len(samples)).astype(int)
    starts = np.concatenate([[0], bounds[:-1]])
    return tuple([samples[i] for i in order[a:b]] for a, b in zip(starts, bounds))


def load_polygon_annotations(path, vocab: WordVocab | None = None, stats: Counter | None = None,
                             box_tolerance: float = 2.0) -> list[GroundingSample]:
    """Read an annotation file into samples with blank rasters.

    Malformed records are logged with their index and skipped
    (``stats["skipped"]``); boxes that disagree with the polygon's pixel bounds
    by more than ``box_tolerance`` px bump ``stats["box_mismatch"]``.
    """
    path = Path(path)
    stats = stats if stats is not None else Counter()
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(HEADER):
        raise DataError(f"{path}: missing '{HEADER}' header")
    if vocab is None:
        ref = dict(kv.split("=", 1) for kv in lines[0][len(HEADER):].split() if "=" in kv).get("vocab")
        vocab = WordVocab.load(path.parent / ref) if ref else WordVocab.default()
    samples = []
    index = -1
    for line in lines[1:]:
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        index += 1
        try:
            sample = _parse_record(line, vocab)
        except (ValueError, IndexError) as exc:
            log.warning("%s: record %d skipped: %s", path, index, exc)
            stats["skipped"] += 1
            continue
        derived = bounding_box_of(sample.gt_mask)
        if max(abs(a - b) for a, b in zip(sample.gt_box, derived)) > box_tolerance:
            log.warning("%s: record %d box %s disagrees with polygon bounds %s",
                        path, index, tuple(sample.gt_box), tuple(derived))
            stats["box_mismatch"] += 1
        stats["loaded"] += 1
        samples.append(sample)
    return samples


def _parse_record(line: str, vocab: WordVocab) -> GroundingSample:
    fields = shlex.split(line)
    width, height = int(fields[0]), int(fields[1])
    if width <= 0 or height <= 0:
        raise ValueError("non-positive image size")
    query = fields[2]
    nums = [float(v) for v in fields[3:]]
    if len(nums) < 4 + 6 or (len(nums) - 4) % 2:
        raise ValueError("need 4 box values and at least 3 polygon points")
    box = BoundingBox(*nums[:4])
    if box.x1 > box.x2 or box.y1 > box.y2:
        raise ValueError("box corners out of order")
    poly = np.asarray(nums[4:]).reshape(-1, 2)
    mask = rasterize_polygon(poly, width, height)
    if not mask.any():
        raise ValueError("polygon covers no pixel centre")
    ids = vocab.encode(query)
    if ids.size == 0:
        raise ValueError("empty query")
    return GroundingSample(
        raster=np.zeros((height, width, len(COLORS)), dtype=np.float32),
        query=query,
        query_ids=ids,
        gt_box=box,
        gt_mask=mask,
    )


def write_annotations(path, samples, vocab_name: str = "vocab.txt", polygons=None) -> None:
    """Write samples in the annotation format; ``polygons`` defaults to each mask's outline."""
    from .geometry import extract_contour

    out = [f"{HEADER} vocab={vocab_name}"]
    for i, s in enumerate(samples):
        poly = polygons[i] if polygons is not None else extract_contour(s.gt_mask).outline
        nums = [*s.gt_box, *np.asarray(poly, dtype=np.float64).reshape(-1)]
        query = s.query.replace('"', '\\"')
        out.append(f'{s.width} {s.height} "{query}" ' + " ".join(repr(float(v)) for v in nums))
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")
