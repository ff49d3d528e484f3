"""Binary change-mask metrics: confusion counts, mIOU, fwIOU, F1.

Class 0 is background, class 1 is change. ``p[i][j]`` counts pixels of true
class i predicted as class j.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ChangeMask


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def p(self) -> np.ndarray:
        return np.array([[self.tn, self.fp], [self.fn, self.tp]], dtype=np.int64)

    @property
    def s_i(self) -> np.ndarray:
        return self.p.sum(axis=1)

    @property
    def s(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


def confusion(pred: ChangeMask | np.ndarray, gt: ChangeMask | np.ndarray) -> Confusion:
    p = pred.bits if isinstance(pred, ChangeMask) else np.asarray(pred, dtype=bool)
    g = gt.bits if isinstance(gt, ChangeMask) else np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return Confusion(tp, fp, fn, p.size - tp - fp - fn)


def _class_iou(c: Confusion) -> np.ndarray:
    p = c.p
    diag = np.diag(p).astype(float)
    union = p.sum(axis=1) + p.sum(axis=0) - np.diag(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, diag / np.where(union > 0, union, 1), np.nan)


def miou(c: Confusion) -> float:
    """Mean per-class IoU; a class absent from both masks scores 1."""
    iou = _class_iou(c)
    return float(np.mean(np.where(np.isnan(iou), 1.0, iou)))


def fwiou(c: Confusion) -> float:
    """Frequency-weighted IoU; classes with no true pixels contribute 0."""
    if c.s == 0:
        return 1.0
    iou = _class_iou(c)
    s_i = c.s_i.astype(float)
    terms = np.where(s_i > 0, s_i * np.nan_to_num(iou), 0.0)
    return float(terms.sum() / c.s)


def f1(c: Confusion) -> float:
    den = 2 * c.tp + c.fp + c.fn
    if den == 0:
        return 1.0
    return 2 * c.tp / den


def iou(c: Confusion) -> float:
    """IoU of the change class alone; 1 when both masks are empty."""
    den = c.tp + c.fp + c.fn
    return 1.0 if den == 0 else c.tp / den


def summarize(c: Confusion) -> dict:
    return {
        "fwIOU": fwiou(c),
        "mIOU": miou(c),
        "F1": f1(c),
        "tp": c.tp,
        "fp": c.fp,
        "fn": c.fn,
        "tn": c.tn,
    }


def evaluate_pairs(pairs: dict[str, tuple[np.ndarray, np.ndarray]], macro: bool = False) -> dict:
    """Per-pair and aggregate scores for ``{name: (pred, gt)}``.

    The aggregate is computed on summed confusions (micro) or as the mean of
    per-pair scores (``macro``).
    """
    per = {}
    total = Confusion(0, 0, 0, 0)
    for name in sorted(pairs):
        c = confusion(*pairs[name])
        per[name] = summarize(c)
        total = total + c
    if macro and per:
        agg = {k: float(np.mean([v[k] for v in per.values()])) for k in ("fwIOU", "mIOU", "F1")}
        agg["averaging"] = "macro"
    else:
        agg = summarize(total)
        agg["averaging"] = "micro"
    return {"pairs": per, "all": agg}
