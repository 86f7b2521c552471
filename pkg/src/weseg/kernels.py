"""Hot inner loops, each in two flavours.

``*_numpy`` functions are vectorised numpy; ``*_loop`` functions are plain
loops compiled with numba when it is installed. The public names bind to the
loop flavour unless ``WESEG_NUMBA=0`` (stitching always uses numpy). Both flavours return identical results
(integer tallies, or float sums accumulated in the same order).
"""
import numpy as np

from ._accel import USE_NUMBA, njit

BRIGHT_LEVEL = 200


# -- stitching ---------------------------------------------------------------

def stitch_accumulate_numpy(xs, ys, scores, tile, height, width):
    total = np.zeros((height, width), dtype=np.float64)
    count = np.zeros((height, width), dtype=np.int64)
    for x, y, s in zip(xs, ys, scores):
        total[y:y + tile, x:x + tile] += s
        count[y:y + tile, x:x + tile] += 1
    return total, count


@njit
def stitch_accumulate_loop(xs, ys, scores, tile, height, width):
    total = np.zeros((height, width), dtype=np.float64)
    count = np.zeros((height, width), dtype=np.int64)
    for k in range(xs.shape[0]):
        y1 = min(ys[k] + tile, height)
        x1 = min(xs[k] + tile, width)
        s = scores[k]
        for y in range(ys[k], y1):
            trow = total[y]
            crow = count[y]
            for x in range(xs[k], x1):
                trow[x] += s
                crow[x] += 1
    return total, count


# -- rank statistics ---------------------------------------------------------

def positive_rank_sum_numpy(sorted_scores, sorted_labels):
    """Sum of mid-ranks (1-based) of the positives in an ascending score order."""
    n = sorted_scores.shape[0]
    if n == 0:
        return 0.0
    # group boundaries of tied runs
    starts = np.flatnonzero(np.r_[True, sorted_scores[1:] != sorted_scores[:-1]])
    ends = np.r_[starts[1:], n]
    mid = (starts + ends + 1) / 2.0
    pos_per_group = np.add.reduceat(sorted_labels.astype(np.int64), starts)
    return float(np.dot(pos_per_group, mid))


@njit
def positive_rank_sum_loop(sorted_scores, sorted_labels):
    n = sorted_scores.shape[0]
    total = 0.0
    i = 0
    while i < n:
        j = i + 1
        while j < n and sorted_scores[j] == sorted_scores[i]:
            j += 1
        npos = 0
        for k in range(i, j):
            npos += sorted_labels[k]
        total += npos * ((i + j + 1) / 2.0)
        i = j
    return total


# -- tile pixel tallies ------------------------------------------------------

def channel_tally_numpy(tile, bins):
    """Per-channel histogram counts and the number of bright pixels.

    ``tile`` is uint8 (h, w, 3); bins split 0..255 into ``bins`` equal widths.
    """
    flat = tile.reshape(-1, 3)
    shift = 256 // bins
    hist = np.empty((3, bins), dtype=np.int64)
    for c in range(3):
        hist[c] = np.bincount(flat[:, c] // shift, minlength=bins)
    bright = int(np.count_nonzero(flat.min(axis=1) > BRIGHT_LEVEL))
    return hist, bright


@njit
def channel_tally_loop(tile, bins):
    h, w, _ = tile.shape
    shift = 256 // bins
    hist = np.zeros((3, bins), dtype=np.int64)
    bright = 0
    for y in range(h):
        for x in range(w):
            r = tile[y, x, 0]
            g = tile[y, x, 1]
            b = tile[y, x, 2]
            hist[0, r // shift] += 1
            hist[1, g // shift] += 1
            hist[2, b // shift] += 1
            if r > 200 and g > 200 and b > 200:
                bright += 1
    return hist, bright


def channel_moments_numpy(tile):
    """Per-channel mean and population std of intensities scaled to [0, 1].

    Sums are taken in integers, so the result does not depend on pixel order.
    """
    flat = tile.reshape(-1, 3).astype(np.int64)
    n = flat.shape[0]
    s = flat.sum(axis=0)
    ss = (flat * flat).sum(axis=0)
    # n^2 * variance, exact
    spread = n * ss - s * s
    return s / (n * 255.0), np.sqrt(spread.astype(np.float64)) / (n * 255.0)


# slice adds are memory bound and numpy already runs them at full speed;
# the benchmark shows the compiled loop slower, so stitching stays on numpy
stitch_accumulate = stitch_accumulate_numpy
if USE_NUMBA:
    positive_rank_sum = positive_rank_sum_loop
    channel_tally = channel_tally_loop
else:
    positive_rank_sum = positive_rank_sum_numpy
    channel_tally = channel_tally_numpy
