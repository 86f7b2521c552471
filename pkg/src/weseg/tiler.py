"""Overlapping tile grids, background filtering, tile features and map stitching."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels

TILE_SIZE = 512
OVERLAP = 128
HIST_BINS = 8
FEATURE_DIM = 3 * HIST_BINS + 6
BACKGROUND_FRACTION = 0.9


@dataclass(frozen=True)
class TileGrid:
    width: int
    height: int
    tile_size: int
    overlap: int
    positions: tuple  # ((x, y), ...) row-major

    @property
    def stride(self) -> int:
        return self.tile_size - self.overlap

    def __len__(self):
        return len(self.positions)

    def xs(self):
        return np.array([p[0] for p in self.positions], dtype=np.int64)

    def ys(self):
        return np.array([p[1] for p in self.positions], dtype=np.int64)


def _axis_positions(dim, tile, stride):
    pos = list(range(0, dim - tile + 1, stride))
    if pos[-1] != dim - tile:
        pos.append(dim - tile)
    return pos


def tile_grid(width, height, tile_size=TILE_SIZE, overlap=OVERLAP) -> TileGrid:
    """Top-left corners of tiles every ``tile_size - overlap`` pixels.

    Adjacent tiles share ``overlap`` pixels; the last tile on each axis is
    pulled back to ``dim - tile_size`` so the far edge is covered.
    """
    if tile_size > width or tile_size > height:
        raise ValueError(f"tile size {tile_size} exceeds image {width}x{height}")
    if not 0 <= overlap < tile_size:
        raise ValueError(f"overlap {overlap} must be in [0, tile_size)")
    stride = tile_size - overlap
    xs = _axis_positions(width, tile_size, stride)
    ys = _axis_positions(height, tile_size, stride)
    positions = tuple((x, y) for y in ys for x in xs)
    return TileGrid(width, height, tile_size, overlap, positions)


def crop(image, grid: TileGrid, k):
    x, y = grid.positions[k]
    return image[y:y + grid.tile_size, x:x + grid.tile_size]


def is_background(tile) -> bool:
    """At least 90% of pixels have every channel strictly above 200."""
    tile = np.ascontiguousarray(tile, dtype=np.uint8)
    _, bright = kernels.channel_tally(tile, HIST_BINS)
    n = tile.shape[0] * tile.shape[1]
    # integer form of bright / n >= 0.9
    return 10 * bright >= 9 * n


def extract_features(tile):
    """30-d descriptor: three normalised 8-bin channel histograms, channel means, channel stds."""
    tile = np.ascontiguousarray(tile, dtype=np.uint8)
    hist, _ = kernels.channel_tally(tile, HIST_BINS)
    n = tile.shape[0] * tile.shape[1]
    mean, std = kernels.channel_moments_numpy(tile)
    return np.concatenate([hist.ravel() / n, mean, std])


def flip_tile(tile, horizontal=False, vertical=False):
    if horizontal:
        tile = tile[:, ::-1]
    if vertical:
        tile = tile[::-1]
    return tile


def random_flip(tile, rng):
    h, v = rng.integers(0, 2, size=2)
    return flip_tile(tile, bool(h), bool(v))


@dataclass
class TiledImage:
    grid: TileGrid
    background: np.ndarray  # per-tile bool
    features: np.ndarray  # (n_tissue, FEATURE_DIM)

    @property
    def tissue_index(self):
        return np.flatnonzero(~self.background)


def tile_image(image, tile_size=TILE_SIZE, overlap=OVERLAP, rng=None) -> TiledImage:
    """Tile an RGB raster, flag background tiles and featurise the rest.

    With ``rng`` each tissue tile is randomly flipped before featurisation.
    """
    h, w = image.shape[:2]
    grid = tile_grid(w, h, tile_size, overlap)
    background = np.zeros(len(grid), dtype=bool)
    feats = []
    for k in range(len(grid)):
        tile = crop(image, grid, k)
        if is_background(tile):
            background[k] = True
            continue
        if rng is not None:
            tile = random_flip(tile, rng)
        feats.append(extract_features(tile))
    features = np.array(feats).reshape(-1, FEATURE_DIM)
    return TiledImage(grid, background, features)


@dataclass
class SegmentationMap:
    values: np.ndarray  # (h, w) float64; 0 on background
    background: np.ndarray  # (h, w) bool


def stitch_map(grid: TileGrid, tile_scores, background=None) -> SegmentationMap:
    """Per-pixel mean of the scores of every covering tissue tile.

    ``tile_scores`` holds one score per non-background tile, in grid order.
    Pixels covered only by background tiles are flagged background.
    """
    if background is None:
        background = np.zeros(len(grid), dtype=bool)
    background = np.asarray(background, dtype=bool)
    if background.shape != (len(grid),):
        raise ValueError("background flags must have one entry per grid tile")
    tissue = np.flatnonzero(~background)
    scores = np.asarray(tile_scores, dtype=np.float64)
    if scores.shape != (tissue.size,):
        raise ValueError(f"expected {tissue.size} tile scores, got {scores.shape}")
    xs, ys = grid.xs()[tissue], grid.ys()[tissue]
    total, count = kernels.stitch_accumulate(xs, ys, scores, grid.tile_size, grid.height, grid.width)
    values = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return SegmentationMap(values, count == 0)
