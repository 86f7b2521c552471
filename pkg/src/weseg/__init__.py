"""Weakly supervised tile segmentation from slide-level tumor percentages."""
from .core import (Margins, ProxyTarget, SlideBag, assign_alphabeta, assign_weseg, masked_bce,
                   percentile_counts, supervised_targets)

__version__ = "0.1.0"

__all__ = [
    "Margins", "ProxyTarget", "SlideBag", "assign_alphabeta", "assign_weseg", "masked_bce",
    "percentile_counts", "supervised_targets",
]
