"""Slide bags, proxy-label assignment and the masked cross-entropy loss."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

log = logging.getLogger(__name__)

EPS = 1e-7


@dataclass
class SlideBag:
    """One slide: tile features, its tumor percentage and optional labels."""

    id: str
    features: np.ndarray
    percent: float
    slide_label: Optional[int] = None
    truth: Optional[np.ndarray] = None
    true_percent: Optional[float] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"slide {self.id}: features must be a non-empty (n, D) matrix")
        if not 0.0 <= self.percent <= 100.0:
            raise ValueError(f"slide {self.id}: percent {self.percent} outside [0, 100]")
        if self.slide_label is not None:
            if self.slide_label not in (0, 1):
                raise ValueError(f"slide {self.id}: slide_label must be 0 or 1")
            if self.percent == 0 and self.slide_label != 0:
                raise ValueError(f"slide {self.id}: percent 0 requires slide_label 0")
        if self.truth is not None:
            self.truth = np.asarray(self.truth, dtype=np.int8)
            if self.truth.shape != (self.n,):
                raise ValueError(f"slide {self.id}: truth length {self.truth.shape} != {self.n}")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def label(self) -> int:
        """Binary slide label; falls back to ``percent > 0`` when absent."""
        if self.slide_label is not None:
            return self.slide_label
        return int(self.percent > 0)


@dataclass
class ProxyTarget:
    targets: np.ndarray
    mask: np.ndarray

    @property
    def n_pos(self) -> int:
        return int(np.count_nonzero((self.targets == 1) & (self.mask == 1)))

    @property
    def n_neg(self) -> int:
        return int(np.count_nonzero((self.targets == 0) & (self.mask == 1)))


@dataclass(frozen=True)
class Margins:
    r_low: float = 0.0
    r_high: float = 0.0
    a_low: float = 0.0
    a_high: float = 0.0

    def __post_init__(self):
        for name in ("r_low", "r_high", "a_low", "a_high"):
            if getattr(self, name) < 0:
                raise ValueError(f"margin {name} must be >= 0")

    @property
    def is_zero(self) -> bool:
        return self.r_low == self.r_high == self.a_low == self.a_high == 0


def _round_count(n, pct):
    # round-half-up of n * pct / 100; n * pct is exact for integer percents
    return int(math.floor(n * pct / 100.0 + 0.5))


def _clamp(v, lo=0.0, hi=100.0):
    return min(max(v, lo), hi)


def percentile_counts(n, percent, margins=Margins()):
    """Number of tiles forced to 1 and to 0 for a slide of ``n`` tiles."""
    if n < 1:
        raise ValueError("n must be >= 1")
    n_pos = _round_count(n, _clamp((1 - margins.r_high) * percent - margins.a_high))
    if margins.is_zero:
        return n_pos, n - n_pos
    n_neg = _round_count(n, _clamp((1 - margins.r_low) * (100 - percent) - margins.a_low))
    return n_pos, min(n_neg, n - n_pos)


def rank_order(probs):
    """Indices from highest to lowest probability, ties by ascending index."""
    return np.argsort(-np.asarray(probs, dtype=np.float64), kind="stable")


def _top_bottom(probs, n_pos, n_neg):
    n = probs.shape[0]
    order = rank_order(probs)
    targets = np.zeros(n, dtype=np.int8)
    mask = np.zeros(n, dtype=np.int8)
    targets[order[:n_pos]] = 1
    mask[order[:n_pos]] = 1
    if n_neg:
        mask[order[n - n_neg:]] = 1
    return ProxyTarget(targets, mask)


def _check_probs(probs):
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or probs.size == 0:
        raise ValueError("probs must be a non-empty vector")
    if not np.all(np.isfinite(probs)):
        raise ValueError("probs contain non-finite values")
    return probs


def assign_weseg(probs, percent, margins=Margins()):
    """Proxy targets: top ranked tiles -> 1, bottom ranked -> 0, the band between masked."""
    probs = _check_probs(probs)
    n_pos, n_neg = percentile_counts(probs.shape[0], percent, margins)
    return _top_bottom(probs, n_pos, n_neg)


def assign_alphabeta(probs, slide_label, alpha, beta):
    """Fixed-fraction labeler: all 0 on normal slides, top alpha% / bottom beta% otherwise."""
    probs = _check_probs(probs)
    if alpha + beta > 100:
        raise ValueError(f"alpha + beta = {alpha + beta} exceeds 100")
    n = probs.shape[0]
    if slide_label == 0:
        return ProxyTarget(np.zeros(n, dtype=np.int8), np.ones(n, dtype=np.int8))
    n_pos = _round_count(n, alpha)
    n_neg = min(_round_count(n, beta), n - n_pos)
    return _top_bottom(probs, n_pos, n_neg)


def supervised_targets(bag: SlideBag) -> Optional[ProxyTarget]:
    """Dense targets for 0% / 100% slides; ``None`` when the slide is unusable."""
    return dense_targets(bag.n, bag.percent)


def dense_targets(n, percent) -> Optional[ProxyTarget]:
    if percent == 0:
        fill = 0
    elif percent == 100:
        fill = 1
    else:
        return None
    return ProxyTarget(np.full(n, fill, dtype=np.int8), np.ones(n, dtype=np.int8))


def masked_bce(probs, target: ProxyTarget):
    """Mean binary cross-entropy over masked-in tiles and its gradient w.r.t. ``probs``.

    Probabilities are clipped to [EPS, 1 - EPS]; the gradient is evaluated at
    the clipped value.
    """
    probs = np.asarray(probs, dtype=np.float64)
    mask = target.mask.astype(bool)
    m = int(np.count_nonzero(mask))
    grad = np.zeros_like(probs)
    if m == 0:
        log.warning("masked_bce: empty mask, no error signal")
        return 0.0, grad
    q = np.clip(probs[mask], EPS, 1 - EPS)
    t = target.targets[mask].astype(np.float64)
    losses = -(t * np.log(q) + (1 - t) * np.log1p(-q))
    grad[mask] = (q - t) / (q * (1 - q)) / m
    return float(losses.sum() / m), grad


def bce(prob, label):
    """Scalar cross-entropy and its derivative, with the same clipping as ``masked_bce``."""
    q = min(max(float(prob), EPS), 1 - EPS)
    loss = -math.log(q) if label else -math.log1p(-q)
    return loss, (q - label) / (q * (1 - q))
