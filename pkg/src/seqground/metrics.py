"""Grounding metrics and the contour-sampling upper-bound sweep."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .geometry import mask_iou, reassemble

THRESHOLDS = (0.5, 0.7, 0.9)


class MetricsError(ValueError):
    pass


def _nonempty(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise MetricsError("no IoU values")
    return arr


def precision_at(ious, threshold: float) -> float:
    """Fraction of IoUs strictly greater than ``threshold``."""
    if not 0.0 < threshold < 1.0:
        raise MetricsError(f"threshold must be in (0, 1), got {threshold}")
    arr = _nonempty(ious)
    return float(np.count_nonzero(arr > threshold)) / arr.size


def mean_iou(ious) -> float:
    return float(_nonempty(ious).mean())


def inconsistency_error(box_ious, mask_ious, threshold: float = 0.5) -> float:
    """Rate of samples where exactly one of box and mask is correct."""
    b = np.asarray(box_ious, dtype=np.float64).reshape(-1)
    m = np.asarray(mask_ious, dtype=np.float64).reshape(-1)
    if b.shape != m.shape:
        raise MetricsError(f"length mismatch: {b.size} box vs {m.size} mask IoUs")
    if b.size == 0:
        raise MetricsError("no IoU values")
    return float(np.count_nonzero((b > threshold) != (m > threshold))) / b.size


def upper_bound_sweep(masks, ns, strategy: str = "uniform") -> list[tuple[int, float]]:
    """(n, mIoU) of masks reassembled from ``n`` sampled contour points."""
    masks = list(masks)
    if not masks:
        raise MetricsError("empty mask corpus")
    return [(int(n), mean_iou([mask_iou(reassemble(mk, n, strategy), mk) for mk in masks])) for n in ns]


@dataclass
class EvalReport:
    task: str
    count: int
    degenerate: int = 0
    precision: dict[float, float] = field(default_factory=dict)
    miou: float | None = None
    box_precision: float | None = None
    inconsistency: float | None = None

    @classmethod
    def from_ious(cls, task: str, ious, degenerate: int = 0, box_ious=None) -> "EvalReport":
        """Precision/mIoU over ``ious`` (mask IoUs for segmentation tasks, box
        IoUs for REC). ``box_ious`` adds box precision and the inconsistency
        error for multitask evaluations."""
        arr = _nonempty(ious)
        rep = cls(task=task, count=int(arr.size), degenerate=int(degenerate),
                  precision={t: precision_at(arr, t) for t in THRESHOLDS}, miou=mean_iou(arr))
        if box_ious is not None:
            rep.box_precision = precision_at(box_ious, 0.5)
            rep.inconsistency = inconsistency_error(box_ious, arr)
        return rep

    def to_dict(self) -> dict[str, str]:
        out = {"task": self.task, "count": str(self.count), "degenerate": str(self.degenerate)}
        for t, v in sorted(self.precision.items()):
            out[f"prec@{t:g}"] = f"{v:.6f}"
        for key, v in (("miou", self.miou), ("box_prec@0.5", self.box_precision),
                       ("inconsistency", self.inconsistency)):
            if v is not None:
                out[key] = f"{v:.6f}"
        return out

    def to_kv(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_kv(cls, text: str) -> "EvalReport":
        d = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        opt = lambda k: float(d[k]) if k in d else None  # noqa: E731
        return cls(task=d["task"], count=int(d["count"]), degenerate=int(d["degenerate"]),
                   precision={float(k[5:]): float(v) for k, v in d.items() if k.startswith("prec@")},
                   miou=opt("miou"), box_precision=opt("box_prec@0.5"), inconsistency=opt("inconsistency"))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        w.writerows(self.to_dict().items())
        return buf.getvalue()
