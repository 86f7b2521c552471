"""Synthetic cohorts: Gaussian tile-feature bags, raster slides and annotation noise."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import SlideBag

# fraction of normal slides among binary-labelled slides: 2248 / 12783
NORMAL_FRACTION = 2248 / 12783
# reported incidences among non-zero percentage annotations
MULT20_INCIDENCE = 0.449
MULT5_INCIDENCE = 0.891


@dataclass
class SynthSpec:
    dim: int = 30
    d_prime: float = 2.0
    sigma: float = 1.0
    n_tiles: tuple = (30, 90)
    w0: float = NORMAL_FRACTION
    seed: int = 0
    mu0: Optional[np.ndarray] = field(default=None, repr=False)
    mu1: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.mu0 is None:
            self.mu0 = np.zeros(self.dim)
        if self.mu1 is None:
            # spread the separation evenly so |mu1 - mu0| / sigma == d_prime
            self.mu1 = self.mu0 + self.sigma * self.d_prime / math.sqrt(self.dim) * np.ones(self.dim)
        self.mu0 = np.asarray(self.mu0, dtype=np.float64)
        self.mu1 = np.asarray(self.mu1, dtype=np.float64)
        if self.mu0.shape != (self.dim,) or self.mu1.shape != (self.dim,):
            raise ValueError("class means must have length dim")
        if not self.separability > 0:
            raise ValueError("class means must differ (d' > 0)")
        if not 0 <= self.w0 <= 1:
            raise ValueError("w0 must lie in [0, 1]")
        lo, hi = self.n_tiles
        if not 1 <= lo <= hi:
            raise ValueError("n_tiles must be a range 1 <= lo <= hi")

    @property
    def separability(self) -> float:
        return float(np.linalg.norm(self.mu1 - self.mu0) / self.sigma)

    def bayes_auc(self) -> float:
        """Tile-level AUC of the optimal scorer: Phi(d' / sqrt(2))."""
        return 0.5 * (1 + math.erf(self.separability / 2))

    def bayes_scores(self, features):
        """Log-likelihood-ratio direction; monotone in the optimal tile score."""
        return np.asarray(features) @ (self.mu1 - self.mu0)


def slide_rng(seed, index):
    return np.random.default_rng([seed, index])


def round_half_up(x):
    return int(math.floor(x + 0.5))


def sample_percent(rng, w0):
    if rng.random() < w0:
        return 0.0
    return 100.0 * (1.0 - rng.random())  # uniform on (0, 100]


def gen_feature_bags(spec: SynthSpec, count, start=0, prefix="slide", percents=None):
    """``count`` bags with exact per-tile truth; slide ``i`` is seeded by (seed, start + i).

    ``percents`` pins the tumor percentages instead of drawing them.
    """
    if percents is not None and len(percents) != count:
        raise ValueError("percents must have one entry per bag")
    bags = []
    lo, hi = spec.n_tiles
    for i in range(start, start + count):
        rng = slide_rng(spec.seed, i)
        percent = sample_percent(rng, spec.w0)
        if percents is not None:
            percent = float(percents[i - start])
        n = int(rng.integers(lo, hi + 1))
        k = round_half_up(percent * n / 100.0)
        truth = np.zeros(n, dtype=np.int8)
        truth[:k] = 1
        rng.shuffle(truth)
        means = np.where(truth[:, None] == 1, spec.mu1, spec.mu0)
        feats = means + spec.sigma * rng.standard_normal((n, spec.dim))
        bags.append(SlideBag(f"{prefix}{i:05d}", feats, percent, int(percent > 0), truth,
                             true_percent=percent))
    return bags


# -- annotation noise --------------------------------------------------------

def round_to_multiple(p, m):
    return m * math.floor(p / m + 0.5)


def _rounded_share(step, m, upper=100.0):
    """Share of U(0, upper] whose nearest multiple of ``step`` is a non-zero multiple of ``m``.

    Values rounding to 0 are remapped to ``step`` before the test.
    """
    total = 0.0
    for v in range(step, int(upper) + 1, step):
        lo = 0.0 if v == step else v - step / 2
        hi = min(v + step / 2, upper)
        if v % m == 0:
            total += max(hi - lo, 0.0)
    return total / upper


def _kept_shares(upper=100.0):
    """For an untouched uniform percent read at integer precision: (P(0), P(mult 5), P(mult 20))."""
    return 0.5 / upper, _rounded_share(1, 5, upper), _rounded_share(1, 20, upper)


@dataclass(frozen=True)
class NoiseModel:
    q20: float
    q5: float


def calibrate_noise(mult20=MULT20_INCIDENCE, mult5=MULT5_INCIDENCE) -> NoiseModel:
    """Branch probabilities reproducing the two incidences for uniform non-zero percents.

    Incidences are measured after rounding to whole percents, so untouched
    values also land on multiples now and then. With branch masses
    ``a = q20``, ``b = (1 - q20) q5``, ``r = 1 - a - b`` each incidence is a
    ratio of linear forms in (a, b); cross-multiplying gives a 2x2 system.
    """
    c = _rounded_share(5, 20)
    z, k5, k20 = _kept_shares()
    # rows: a*(1 - P) + b*(hit - P) + r*(k - P*(1 - z)) = 0 with r = 1 - a - b
    keep5, keep20 = k5 - mult5 * (1 - z), k20 - mult20 * (1 - z)
    mat = np.array([[(1 - mult5) - keep5, (1 - mult5) - keep5],
                    [(1 - mult20) - keep20, (c - mult20) - keep20]])
    a, b = np.linalg.solve(mat, [-keep5, -keep20])
    q20 = float(a)
    q5 = float(b / (1 - a)) if a < 1 else 0.0
    if not (0 <= q20 <= 1 and 0 <= q5 <= 1):
        raise ValueError("incidences are not reachable by the rounding model")
    return NoiseModel(q20, q5)


DEFAULT_NOISE = calibrate_noise()


def perturb_annotation(percent_true, rng, noise: NoiseModel = DEFAULT_NOISE):
    """Annotator-style rounding: to 20 with prob q20, else to 5 with prob q5, else kept.

    Zero stays zero and rounding never turns a tumor slide into a 0% one.
    """
    if percent_true == 0:
        return 0.0
    u = rng.random()
    if u < noise.q20:
        out = round_to_multiple(percent_true, 20) or 20
    elif rng.random() < noise.q5:
        out = round_to_multiple(percent_true, 5) or 5
    else:
        out = percent_true
    return float(min(max(out, 0.0), 100.0))


def perturb_cohort(bags, seed, noise: NoiseModel = DEFAULT_NOISE):
    """Replace each bag's percent by a noisy annotation; ``true_percent`` keeps the original."""
    out = []
    for i, bag in enumerate(bags):
        rng = np.random.default_rng([seed, i, 1])
        true = bag.true_percent if bag.true_percent is not None else bag.percent
        out.append(SlideBag(bag.id, bag.features, perturb_annotation(true, rng, noise),
                            bag.slide_label, bag.truth, true_percent=true, meta=dict(bag.meta)))
    return out


# -- raster slides -----------------------------------------------------------

BACKGROUND_RGB = (240, 240, 240)
BENIGN_RGB = (225, 165, 195)
TUMOR_RGB = (120, 60, 150)
NOISE_AMPLITUDE = 15


def _tumor_field(rng, height, width, blobs=6):
    yy, xx = np.mgrid[0:height, 0:width]
    field_ = np.zeros((height, width))
    for _ in range(blobs):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        s = rng.uniform(0.1, 0.3) * min(height, width)
        field_ += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    return field_


def gen_raster_slide(spec: SynthSpec, width, height, percent, tile_size=512, index=0):
    """RGB slide with an elliptical tissue region, ``percent``% of it tumor.

    Returns ``(image, truth)``: uint8 (h, w, 3) and a bool tumor mask.
    """
    if width < tile_size or height < tile_size:
        raise ValueError("image smaller than one tile")
    rng = slide_rng(spec.seed, index)
    yy, xx = np.mgrid[0:height, 0:width]
    cy, cx = (height - 1) / 2, (width - 1) / 2
    tissue = ((yy - cy) / (0.42 * height)) ** 2 + ((xx - cx) / (0.42 * width)) ** 2 <= 1.0
    n_tissue = int(tissue.sum())
    k = round_half_up(percent / 100.0 * n_tissue)
    if (percent > 0 and n_tissue == 0) or abs(k - percent / 100.0 * n_tissue) > 0.01 * max(n_tissue, 1):
        raise ValueError(f"cannot place {percent}% tumor within 1% on {n_tissue} tissue pixels")
    truth = np.zeros((height, width), dtype=bool)
    if k:
        field_ = _tumor_field(rng, height, width)[tissue]
        # highest field values first; ties by pixel order
        order = np.argsort(-field_, kind="stable")[:k]
        flat = np.flatnonzero(tissue.ravel())[order]
        truth.ravel()[flat] = True
    image = np.empty((height, width, 3), dtype=np.int16)
    image[:] = BACKGROUND_RGB
    image[tissue] = BENIGN_RGB
    image[truth] = TUMOR_RGB
    jitter = rng.integers(-NOISE_AMPLITUDE, NOISE_AMPLITUDE + 1, size=image.shape, dtype=np.int16)
    image = np.clip(image + jitter, 0, 255).astype(np.uint8)
    return image, truth


@dataclass
class RasterSlide:
    bag: SlideBag
    image: np.ndarray
    truth_mask: np.ndarray
    tiled: object  # tiler.TiledImage


def gen_raster_cohort(spec: SynthSpec, count, width, height, tile_size=512, overlap=128,
                      start=0, prefix="raster"):
    """Raster slides plus the tile-feature bags derived from them.

    A tissue tile is labelled tumor when at least half of its tissue pixels are.
    """
    from . import tiler

    slides = []
    for i in range(start, start + count):
        percent = sample_percent(np.random.default_rng([spec.seed, i, 2]), spec.w0)
        image, mask = gen_raster_slide(spec, width, height, percent, tile_size, index=i)
        tiled = tiler.tile_image(image, tile_size, overlap)
        tissue_px = image.min(axis=2) <= tiler.kernels.BRIGHT_LEVEL
        truth = []
        for k in tiled.tissue_index:
            tumor = tiler.crop(mask, tiled.grid, k).sum()
            tissue = max(int(tiler.crop(tissue_px, tiled.grid, k).sum()), 1)
            truth.append(int(2 * tumor >= tissue))
        bag = SlideBag(f"{prefix}{i:05d}", tiled.features, percent, int(percent > 0),
                       np.array(truth, dtype=np.int8), true_percent=percent)
        slides.append(RasterSlide(bag, image, mask, tiled))
    return slides
