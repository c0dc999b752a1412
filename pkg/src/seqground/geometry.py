"""Mask contours, contour point sampling, polygon fill and IoU.

Coordinate conventions
----------------------
Masks are ``(height, width)`` boolean arrays. Continuous coordinates put pixel
``(col, row)`` on the unit square ``[col, col+1] x [row, row+1]``, y pointing
down, so polygons, boxes and sampled points live in ``[0, width] x [0, height]``.
``mass_center`` is the exception: it reports the mean pixel *index*.

"Clockwise" is as seen on screen (y down), which is a positive shoelace area.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage

STRATEGIES = ("center_based", "uniform")

# Moore neighbourhood, clockwise on screen starting at west
_MOORE = ((-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1))
_MOORE_INDEX = {d: i for i, d in enumerate(_MOORE)}

# crack-following headings, clockwise on screen: E, S, W, N
_HEADINGS = ((1, 0), (0, 1), (-1, 0), (0, -1))


class GeometryError(ValueError):
    pass


class BoundingBox(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(self.x2 - self.x1, 0.0) * max(self.y2 - self.y1, 0.0)

    @classmethod
    def ordered(cls, x1, y1, x2, y2) -> "BoundingBox":
        return cls(float(min(x1, x2)), float(min(y1, y2)), float(max(x1, x2)), float(max(y1, y2)))


@dataclass(frozen=True)
class Contour:
    """Outer boundary of one connected component.

    ``points`` are boundary pixel indices from Moore tracing (8-adjacent,
    clockwise, starting at the topmost-then-leftmost pixel). Components with
    fewer than three boundary pixels are inflated: ``points`` then holds the
    unit-step lattice corners of their pixel squares.

    ``outline`` is the polygon through the midpoints of the component's unit
    pixel edges, in continuous coordinates, starting at the middle of the start
    pixel's top edge. Its interior holds exactly the component's pixel centres
    (holes filled) and it is the polyline that point sampling walks along.
    """

    points: np.ndarray
    outline: np.ndarray
    degenerate: bool = False

    @property
    def clockwise(self) -> bool:
        return signed_area(self.outline) > 0

    @property
    def start(self) -> np.ndarray:
        return self.outline[0]


def _check_mask(mask) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise GeometryError(f"mask must be 2-D, got shape {mask.shape}")
    if not mask.any():
        raise GeometryError("empty mask")
    return mask


def signed_area(poly) -> float:
    """Shoelace area; positive for clockwise-on-screen polygons."""
    p = np.asarray(poly, dtype=np.float64)
    if len(p) < 3:
        return 0.0
    q = np.roll(p, -1, axis=0)
    return 0.5 * float(np.sum(p[:, 0] * q[:, 1] - q[:, 0] * p[:, 1]))


def largest_component(mask) -> np.ndarray:
    """Largest 8-connected component; ties go to the one found first in raster order."""
    mask = _check_mask(mask)
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    if n == 1:
        return labels == 1
    counts = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(counts)) + 1)


def _moore_trace(comp: np.ndarray) -> list[tuple[int, int]]:
    h, w = comp.shape
    rows, cols = np.nonzero(comp)
    start = (int(cols[0]), int(rows[0]))  # nonzero is row-major: topmost, then leftmost

    def fg(x, y):
        return 0 <= x < w and 0 <= y < h and comp[y, x]

    p, back = start, 0  # the west neighbour of the start pixel is background
    seen = {(start, back): 0}
    chain = [start]
    for _ in range(8 * comp.size + 16):
        for i in range(1, 9):
            d = (back + i) % 8
            q = (p[0] + _MOORE[d][0], p[1] + _MOORE[d][1])
            if fg(*q):
                break
        else:
            return chain  # isolated pixel
        prev = _MOORE[(d - 1) % 8]
        back = _MOORE_INDEX[(prev[0] - _MOORE[d][0], prev[1] - _MOORE[d][1])]
        p = q
        first = seen.get((p, back))
        if first == 0:  # Jacob's stopping criterion
            return chain
        if first is not None:
            # start re-entered from another side (pinch): the walk is periodic
            return chain[:len(chain) - first]
        seen[(p, back)] = len(chain)
        chain.append(p)
    raise GeometryError("contour tracing did not terminate")


def _crack_loop(comp: np.ndarray) -> np.ndarray:
    """Clockwise pixel-edge boundary, one lattice vertex per unit step.

    Starts at the top-left corner of the component's first pixel.
    """
    pad = np.pad(comp, 1)
    rows, cols = np.nonzero(comp)
    sx, sy = int(cols[0]), int(rows[0])

    def fg(x, y):
        return bool(pad[y + 1, x + 1])

    def has_edge(vx, vy, k):
        # interior on the right-hand side of the directed edge
        if k == 0:
            return fg(vx, vy) and not fg(vx, vy - 1)
        if k == 1:
            return fg(vx - 1, vy) and not fg(vx, vy)
        if k == 2:
            return fg(vx - 1, vy - 1) and not fg(vx - 1, vy)
        return fg(vx, vy - 1) and not fg(vx - 1, vy - 1)

    vx, vy, k = sx, sy, 0
    verts = [(sx, sy)]
    limit = 4 * (comp.size + comp.shape[0] + comp.shape[1]) + 8
    for _ in range(limit):
        vx, vy = vx + _HEADINGS[k][0], vy + _HEADINGS[k][1]
        if (vx, vy) == (sx, sy):
            return np.asarray(verts, dtype=np.int64)
        # prefer left, straight, right: keeps diagonal neighbours on one loop
        for k in ((k - 1) % 4, k, (k + 1) % 4):
            if has_edge(vx, vy, k):
                break
        else:
            raise GeometryError("broken outline")
        verts.append((vx, vy))
    raise GeometryError("outline tracing did not terminate")


def extract_contour(mask) -> Contour:
    """Clockwise outer contour of the largest 8-connected component of ``mask``."""
    comp = largest_component(mask)
    loop = _crack_loop(comp)
    # midpoints of the unit boundary edges: straight along diagonal staircases,
    # and each convex corner only loses an eighth of a pixel
    outline = (loop + np.roll(loop, -1, axis=0)) / 2.0
    chain = _moore_trace(comp)
    if len(chain) < 3:
        return Contour(points=loop, outline=outline, degenerate=True)
    return Contour(points=np.asarray(chain, dtype=np.int64), outline=outline)


def mass_center(mask) -> np.ndarray:
    """Mean ``(x, y)`` pixel index of the foreground."""
    mask = _check_mask(mask)
    rows, cols = np.nonzero(mask)
    return np.array([cols.mean(), rows.mean()])


def _closed_lengths(poly: np.ndarray):
    seg = np.roll(poly, -1, axis=0) - poly
    lengths = np.hypot(seg[:, 0], seg[:, 1])
    return seg, lengths, np.concatenate([[0.0], np.cumsum(lengths)])


def resample_uniform(poly, n: int) -> np.ndarray:
    """``n`` points at equal arc-length steps along a closed polyline, from its first vertex."""
    poly = np.asarray(poly, dtype=np.float64)
    seg, lengths, cum = _closed_lengths(poly)
    total = cum[-1]
    s = np.arange(n) * (total / n)
    i = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(poly) - 1)
    t = np.where(lengths[i] > 0, (s - cum[i]) / np.where(lengths[i] > 0, lengths[i], 1), 0.0)
    return poly[i] + seg[i] * t[:, None]


def cast_rays(poly, center, n: int) -> np.ndarray:
    """Farthest crossing of each of ``n`` rays with a closed polyline.

    Ray ``k`` leaves ``center`` at angle ``2*pi*k/n``; angle 0 points right and
    angles grow clockwise on screen. A ray with no crossing falls back to the
    polyline vertex closest in angle.
    """
    poly = np.asarray(poly, dtype=np.float64)
    c = np.asarray(center, dtype=np.float64)
    theta = 2 * np.pi * np.arange(n) / n
    u = np.stack([np.cos(theta), np.sin(theta)], axis=1)           # (n, 2)
    a = poly - c                                                    # (P, 2)
    e = np.roll(poly, -1, axis=0) - poly                            # (P, 2)
    # solve t*u = a + s*e  for ray parameter t >= 0 and segment parameter s in [0, 1]
    denom = u[:, None, 0] * e[None, :, 1] - u[:, None, 1] * e[None, :, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (a[None, :, 0] * e[None, :, 1] - a[None, :, 1] * e[None, :, 0]) / denom
        s = (a[None, :, 0] * u[:, None, 1] - a[None, :, 1] * u[:, None, 0]) / denom
    tol = 1e-9
    hit = (np.abs(denom) > tol) & (t >= 0) & (s >= -tol) & (s <= 1 + tol)
    t = np.where(hit, t, -np.inf)
    best = t.max(axis=1)
    out = c + u * np.where(np.isfinite(best), best, 0.0)[:, None]
    missing = ~np.isfinite(best)
    if missing.any():
        ang = np.arctan2(a[:, 1], a[:, 0]) % (2 * np.pi)
        for k in np.nonzero(missing)[0]:
            diff = np.abs((ang - theta[k] + np.pi) % (2 * np.pi) - np.pi)
            out[k] = poly[int(np.argmin(diff))]
    return out


def sample_contour(mask, n: int, strategy: str = "uniform") -> np.ndarray:
    """Serialise ``mask`` into ``n`` clockwise contour points, shape ``(n, 2)``."""
    if n < 3:
        raise GeometryError(f"need at least 3 sample points, got {n}")
    contour = extract_contour(mask)
    if strategy == "uniform":
        return resample_uniform(contour.outline, n)
    if strategy == "center_based":
        comp = largest_component(mask)
        return cast_rays(contour.outline, mass_center(comp) + 0.5, n)
    raise GeometryError(f"unknown sampling strategy {strategy!r}")


def rasterize_polygon(points, width: int, height: int) -> np.ndarray:
    """Even-odd scanline fill of the closed polygon through ``points``.

    A pixel is set when its centre is inside. Crossings are taken on the
    half-open span ``(top, bottom]`` of each edge, and a filled span covers
    centres in ``(left, right]``.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise GeometryError(f"need at least 3 polygon points, got {len(pts)}")
    mask = np.zeros((height, width), dtype=bool)
    x0, y0 = pts[:, 0], pts[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    lo, hi = np.minimum(y0, y1), np.maximum(y0, y1)
    dy = y1 - y0
    slope = np.divide(x1 - x0, dy, out=np.zeros_like(dy), where=dy != 0)
    yc = np.arange(height) + 0.5
    cross = (lo[None, :] < yc[:, None]) & (yc[:, None] <= hi[None, :])
    for row in np.nonzero(cross.any(axis=1))[0]:
        idx = cross[row]
        xs = np.sort(x0[idx] + (yc[row] - y0[idx]) * slope[idx])
        for a, b in zip(xs[0::2], xs[1::2]):
            j0 = max(int(np.floor(a - 0.5)) + 1, 0)
            j1 = min(int(np.floor(b - 0.5)), width - 1)
            if j1 >= j0:
                mask[row, j0:j1 + 1] = True
    return mask


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return float(inter / union) if union > 0 else 0.0


def mask_iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise GeometryError(f"mask_iou: dimension mismatch {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def bounding_box_of(mask) -> BoundingBox:
    """Tight box over foreground pixels, each pixel covering a unit square."""
    mask = _check_mask(mask)
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    return BoundingBox(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def reassemble(mask, n: int, strategy: str) -> np.ndarray:
    """Rasterise the polygon of ``n`` sampled contour points back onto the mask grid."""
    h, w = np.asarray(mask).shape
    return rasterize_polygon(sample_contour(mask, n, strategy), w, h)


def disk_mask(height: int, width: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    return (xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2 <= r * r


def star_blob(height: int, width: int, rng, radius=(8.0, 20.0), harmonics: int = 4,
              roughness: float = 0.35) -> np.ndarray:
    """Star-shaped blob: a disk whose radius is perturbed by a few harmonics."""
    r0 = rng.uniform(*radius)
    margin = min(r0 * (1 + roughness) + 1, min(height, width) / 2 - 1)
    cx = rng.uniform(margin, width - margin)
    cy = rng.uniform(margin, height - margin)
    amps = rng.uniform(0, roughness, harmonics) / np.arange(1, harmonics + 1) ** 0.5
    phases = rng.uniform(0, 2 * np.pi, harmonics)
    freqs = rng.choice(np.arange(2, 8), harmonics, replace=False)
    yy, xx = np.mgrid[0:height, 0:width]
    dx, dy = xx + 0.5 - cx, yy + 0.5 - cy
    ang = np.arctan2(dy, dx)
    rad = r0 * (1 + sum(a * np.sin(f * ang + p) for a, f, p in zip(amps, freqs, phases)))
    blob = np.hypot(dx, dy) <= rad
    return largest_component(blob) if blob.any() else disk_mask(height, width, cx, cy, r0)


def ellipse_mask(height, width, cx, cy, a, b, theta=0.0) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    dx, dy = xx + 0.5 - cx, yy + 0.5 - cy
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1


def random_blob(height: int, width: int, rng, parts=(2, 5)) -> np.ndarray:
    """Irregular blob: a chain of 2-5 random ellipses, each centred on the blob so far.

    Unlike :func:`star_blob` the result usually has limbs and concavities that
    are not visible from its centroid.
    """
    s = min(height, width) / 64.0
    mask = np.zeros((height, width), dtype=bool)
    cx, cy = rng.uniform(0.35 * width, 0.65 * width), rng.uniform(0.35 * height, 0.65 * height)
    for i in range(int(rng.integers(parts[0], parts[1], endpoint=True))):
        a, b = rng.uniform(3, 14) * s, rng.uniform(2, 7) * s
        theta = rng.uniform(0, np.pi)
        if i:
            ys, xs = np.nonzero(mask)
            j = rng.integers(len(xs))
            cx, cy = xs[j] + 0.5, ys[j] + 0.5
        mask |= ellipse_mask(height, width, cx, cy, a, b, theta)
    return largest_component(mask)


def convex_shape(height: int, width: int, rng) -> np.ndarray:
    """A random disk or axis-aligned rectangle fully inside the raster."""
    if rng.random() < 0.5:
        r = rng.uniform(0.12, 0.35) * min(height, width)
        cx, cy = rng.uniform(r + 1, width - r - 1), rng.uniform(r + 1, height - r - 1)
        return disk_mask(height, width, cx, cy, r)
    w = int(rng.integers(0.2 * width, 0.7 * width))
    h = int(rng.integers(0.2 * height, 0.7 * height))
    x0 = int(rng.integers(1, width - w))
    y0 = int(rng.integers(1, height - h))
    mask = np.zeros((height, width), dtype=bool)
    mask[y0:y0 + h, x0:x0 + w] = True
    return mask
