"""Tissue-only ROC-AUC, cohort reports and annotation statistics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional
from xml.sax.saxutils import escape

import numpy as np

from . import kernels


def auc(scores, labels) -> Optional[float]:
    """Mann-Whitney AUC with ties counted as one half; ``None`` if a class is missing."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(np.int64)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="mergesort")
    rank_sum = kernels.positive_rank_sum(scores[order], labels[order])
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores, labels):
    """False/true positive rates at every distinct threshold, from (0, 0) to (1, 1)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(np.int64)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(s[1:] != s[:-1]), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    n_pos, n_neg = max(int(y.sum()), 1), max(int(y.size - y.sum()), 1)
    return np.r_[0.0, fp / n_neg], np.r_[0.0, tp / n_pos]


def error_reduction(value, reference):
    """Relative reduction of the AUC error ``1 - AUC`` against a reference AUC."""
    if reference is None or value is None or reference == 1:
        return None
    return (value - reference) / (1 - reference)


@dataclass
class CohortReport:
    method: str
    cohort: str
    pooled_auc: Optional[float]
    slide_aucs: list = field(default_factory=list)  # (slide id, auc) for two-class slides
    skipped: int = 0
    n_slides: int = 0
    n_tiles: int = 0
    reference_auc: Optional[float] = None

    @property
    def mean_slide_auc(self):
        if not self.slide_aucs:
            return None
        return float(np.mean([a for _, a in self.slide_aucs]))

    @property
    def error_reduction(self):
        return error_reduction(self.pooled_auc, self.reference_auc)


def eval_scores(slide_ids, scores, truths, method="", cohort="", keep=None) -> CohortReport:
    """Report from per-slide scores and truths.

    ``keep`` optionally gives per-slide boolean masks of evaluable units
    (tissue pixels for maps); everything is evaluable otherwise.
    """
    pooled_s, pooled_t, per_slide = [], [], []
    skipped = 0
    for k, (sid, s, t) in enumerate(zip(slide_ids, scores, truths)):
        if t is None:
            raise ValueError(f"slide {sid} has no ground truth")
        s = np.asarray(s, dtype=np.float64).ravel()
        t = np.asarray(t).ravel()
        if keep is not None:
            m = np.asarray(keep[k], dtype=bool).ravel()
            s, t = s[m], t[m]
        pooled_s.append(s)
        pooled_t.append(t)
        a = auc(s, t)
        if a is None:
            skipped += 1
        else:
            per_slide.append((sid, a))
    all_s = np.concatenate(pooled_s) if pooled_s else np.zeros(0)
    all_t = np.concatenate(pooled_t) if pooled_t else np.zeros(0)
    return CohortReport(method, cohort, auc(all_s, all_t), per_slide, skipped,
                        len(pooled_s), int(all_s.size))


def eval_cohort(score_fn, bags, method="", cohort="") -> CohortReport:
    """Score every bag with ``score_fn(features) -> tile scores`` and report."""
    scores = [score_fn(b.features) for b in bags]
    return eval_scores([b.id for b in bags], scores, [b.truth for b in bags], method, cohort)


def eval_maps(slide_ids, maps, truth_masks, method="", cohort="") -> CohortReport:
    """Pixel-level report over stitched maps, background pixels excluded."""
    return eval_scores(slide_ids, [m.values for m in maps], truth_masks, method, cohort,
                       keep=[~m.background for m in maps])


@dataclass
class AnnotationStats:
    n: int
    n_nonzero: int
    mult5: float
    mult20: float
    histogram: np.ndarray  # counts per rounded integer percent 0..100


def annotation_stats(percents) -> AnnotationStats:
    """Incidence of multiples of 5 and 20 among non-zero annotations (rounded to integers)."""
    rounded = np.array([math.floor(float(p) + 0.5) for p in percents], dtype=np.int64)
    nonzero = rounded[rounded != 0]
    hist = np.bincount(rounded, minlength=101)[:101]
    if nonzero.size == 0:
        return AnnotationStats(rounded.size, 0, 0.0, 0.0, hist)
    return AnnotationStats(
        rounded.size, int(nonzero.size),
        float(np.count_nonzero(nonzero % 5 == 0) / nonzero.size),
        float(np.count_nonzero(nonzero % 20 == 0) / nonzero.size),
        hist,
    )


def roc_svg(curves, title="ROC", size=320):
    """Standalone SVG line plot of one or more ROC curves.

    ``curves`` maps a label to ``(fpr, tpr)``.
    """
    pad = 40
    span = size - 2 * pad
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"]

    def pt(x, y):
        return f"{pad + x * span:.2f},{size - pad - y * span:.2f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
        f'<text x="{size / 2:.0f}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<line x1="{pad}" y1="{size - pad}" x2="{size - pad}" y2="{size - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{size - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{size - pad}" x2="{size - pad}" y2="{pad}" stroke="#bbb" stroke-dasharray="4 3"/>',
        f'<text x="{size / 2:.0f}" y="{size - 8}" text-anchor="middle" font-size="11">false positive rate</text>',
        f'<text x="12" y="{size / 2:.0f}" text-anchor="middle" font-size="11" '
        f'transform="rotate(-90 12 {size / 2:.0f})">true positive rate</text>',
    ]
    for tick in (0.0, 0.5, 1.0):
        parts.append(f'<text x="{pad + tick * span:.1f}" y="{size - pad + 14}" text-anchor="middle" font-size="10">{tick:g}</text>')
        parts.append(f'<text x="{pad - 6}" y="{size - pad - tick * span + 3:.1f}" text-anchor="end" font-size="10">{tick:g}</text>')
    for i, (label, (fpr, tpr)) in enumerate(curves.items()):
        color = palette[i % len(palette)]
        points = " ".join(pt(x, y) for x, y in zip(fpr, tpr))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{points}"/>')
        parts.append(f'<text x="{size - pad - 4}" y="{size - pad - 10 - 14 * i}" text-anchor="end" '
                     f'font-size="10" fill="{color}">{escape(str(label))}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
