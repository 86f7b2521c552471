"""Training loops for WeSeg and the baselines, early stopping, LR search, refinement."""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import core, nn
from .core import Margins, SlideBag

log = logging.getLogger(__name__)

METHOD_KINDS = ("weseg", "alphabeta", "attention_mil", "supervised")
REFINE_THRESHOLD = 0.5


@dataclass(frozen=True)
class Method:
    kind: str
    alpha: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        if self.kind not in METHOD_KINDS:
            raise ValueError(f"unknown method {self.kind!r}")
        if self.kind == "alphabeta" and self.alpha + self.beta > 100:
            raise ValueError("alpha + beta must not exceed 100")

    @classmethod
    def parse(cls, text):
        """``weseg``, ``supervised``, ``attention_mil`` or ``alphabeta:ALPHA:BETA``."""
        kind, *rest = text.split(":")
        if kind == "alphabeta":
            if len(rest) != 2:
                raise ValueError("alphabeta needs alpha and beta, e.g. alphabeta:50:0")
            return cls(kind, float(rest[0]), float(rest[1]))
        if rest:
            raise ValueError(f"method {kind!r} takes no parameters")
        return cls(kind)

    def __str__(self):
        if self.kind == "alphabeta":
            return f"alphabeta:{self.alpha:g}:{self.beta:g}"
        return self.kind

    @property
    def uses_attention(self):
        return self.kind == "attention_mil"


@dataclass
class TrainConfig:
    method: Method = Method("weseg")
    lr: float = 1e-3
    slides_per_batch: int = 8
    tiles_per_slide: int = 30
    patience: int = 50
    max_epochs: int = 200
    margins: Margins = Margins()
    hidden: tuple = (64, 32)
    seed: int = 0
    record_wall_time: bool = False

    def __post_init__(self):
        if isinstance(self.method, str):
            self.method = Method.parse(self.method)
        for name in ("slides_per_batch", "tiles_per_slide", "max_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")


# -- standardisation ---------------------------------------------------------

@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, features):
        return (np.asarray(features, dtype=np.float64) - self.mean) / self.std

    def to_dict(self):
        return {"mean": [float(x) for x in self.mean], "std": [float(x) for x in self.std]}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64))


def fit_standardizer(bags) -> Standardizer:
    """Per-dimension mean and population std over every training tile."""
    if not bags:
        raise ValueError("cannot fit a standardizer on an empty cohort")
    x = np.concatenate([b.features for b in bags])
    if x.shape[0] < 2:
        raise ValueError("need at least two tiles")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std == 0] = 1.0
    return Standardizer(mean, std)


def standardize_bags(bags, standardizer: Standardizer):
    return [dataclasses.replace(b, features=standardizer.apply(b.features)) for b in bags]


# -- models ------------------------------------------------------------------

def init_model(method: Method, input_dim, config: TrainConfig):
    return nn.init_mlp(input_dim, config.hidden, seed=config.seed, attention=method.uses_attention)


def tile_scores(params, method: Method, features):
    """Full-bag tile scores in [0, 1] for already standardised features."""
    out, _ = nn.mlp_forward(params, features)
    if not method.uses_attention:
        return out
    bag_prob, a, _ = nn.attention_pool(params, out)
    return nn.attention_scores(a, bag_prob)


@dataclass
class TrainedModel:
    params: nn.ModelParams
    standardizer: Standardizer
    method: Method

    def scores(self, raw_features):
        return tile_scores(self.params, self.method, self.standardizer.apply(raw_features))

    def checkpoint_extra(self, **more):
        return {"method": str(self.method), "standardizer": self.standardizer.to_dict(), **more}

    def save(self, path, **more):
        nn.save_checkpoint(path, self.params, self.checkpoint_extra(**more))

    @classmethod
    def load(cls, path):
        params, extra = nn.load_checkpoint(path)
        return cls(params, Standardizer.from_dict(extra["standardizer"]), Method.parse(extra["method"]))


# -- per-slide targets and losses --------------------------------------------

def slide_target(method: Method, probs, bag: SlideBag, margins: Margins):
    if method.kind == "weseg":
        return core.assign_weseg(probs, bag.percent, margins)
    if method.kind == "alphabeta":
        return core.assign_alphabeta(probs, bag.label, method.alpha, method.beta)
    if method.kind == "supervised":
        target = core.dense_targets(probs.size, bag.percent)
        if target is None:
            raise ValueError(f"slide {bag.id} ({bag.percent}%) is not usable for supervised training")
        return target
    raise ValueError(f"{method.kind} has no tile targets")


def usable(method: Method, bag: SlideBag):
    return method.kind != "supervised" or bag.percent in (0, 100)


def sample_tiles(rng, n, k):
    """``k`` tile indices: without replacement when the slide has enough tiles."""
    if n >= k:
        return rng.choice(n, size=k, replace=False)
    return rng.integers(0, n, size=k)


def batch_loss_and_grads(method: Method, params, tiles, bags, margins):
    """Mean per-slide loss over a batch and its parameter gradients.

    ``tiles[j]`` holds the (standardised) feature rows used for ``bags[j]``.
    """
    m = len(bags)
    sizes = [t.shape[0] for t in tiles]
    bounds = np.cumsum([0] + sizes)
    out, cache = nn.mlp_forward(params, np.concatenate(tiles))
    if not np.all(np.isfinite(out)):
        raise nn.NonFiniteGradient("non-finite predictions")
    total = 0.0
    if method.uses_attention:
        att_grads = None
        dh = np.zeros_like(out)
        for j, bag in enumerate(bags):
            emb = out[bounds[j]:bounds[j + 1]]
            bag_prob, _, acache = nn.attention_pool(params, emb)
            loss, g = core.bce(bag_prob, bag.label)
            total += loss
            grads_j, dh_j = nn.attention_backward(params, acache, g / m)
            dh[bounds[j]:bounds[j + 1]] = dh_j
            att_grads = grads_j if att_grads is None else [a + b for a, b in zip(att_grads, grads_j)]
        return total / m, nn.mlp_backward(params, cache, dh) + att_grads
    grad_probs = np.zeros_like(out)
    for j, bag in enumerate(bags):
        probs = out[bounds[j]:bounds[j + 1]]
        target = slide_target(method, probs, bag, margins)
        loss, g = core.masked_bce(probs, target)
        total += loss
        grad_probs[bounds[j]:bounds[j + 1]] = g / m
    return total / m, nn.mlp_backward(params, cache, grad_probs)


def train_step(method: Method, params, state, batch, config: TrainConfig, rng):
    """One Adam step on a batch of standardised slides.

    Targets for the labeler-based methods are rebuilt from the current
    predictions on the sampled tiles.
    """
    if not batch:
        raise ValueError("empty batch")
    tiles = [b.features[sample_tiles(rng, b.n, config.tiles_per_slide)] for b in batch]
    loss, grads = batch_loss_and_grads(method, params, tiles, batch, config.margins)
    params, state = nn.adam_step(params, grads, state, config.lr)
    return params, state, loss


def validation_loss(method: Method, params, bags, margins=Margins()):
    """Method's own loss on full bags, averaged over the usable slides."""
    losses = []
    for bag in bags:
        if not usable(method, bag):
            continue
        out, _ = nn.mlp_forward(params, bag.features)
        if method.uses_attention:
            bag_prob, _, _ = nn.attention_pool(params, out)
            losses.append(core.bce(bag_prob, bag.label)[0])
        else:
            losses.append(core.masked_bce(out, slide_target(method, out, bag, margins))[0])
    if not losses:
        raise ValueError(f"no validation slides usable by {method}")
    return float(np.mean(losses))


# -- training loop -----------------------------------------------------------

class TrainingDiverged(FloatingPointError):
    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    wall_ms: float


@dataclass
class TrainResult:
    model: TrainedModel
    history: list
    best_epoch: int
    best_val: float
    config: TrainConfig

    @property
    def params(self):
        return self.model.params


HISTORY_FIELDS = ("epoch", "train_loss", "val_loss", "lr", "wall_ms")


def history_csv(history):
    lines = [",".join(HISTORY_FIELDS)]
    for r in history:
        lines.append(f"{r.epoch},{r.train_loss!r},{r.val_loss!r},{r.lr!r},{r.wall_ms!r}")
    return "\n".join(lines) + "\n"


def run_training(train_bags, val_bags, config: TrainConfig,
                 on_improve: Optional[Callable] = None) -> TrainResult:
    """Train until ``patience`` epochs pass without a validation improvement.

    An epoch visits every usable training slide once, in a seeded shuffled
    order, ``slides_per_batch`` at a time. ``on_improve(model, epoch)`` is
    called whenever the validation loss reaches a new minimum.
    """
    method = config.method
    if {b.id for b in train_bags} & {b.id for b in val_bags}:
        raise ValueError("training and validation slides overlap")
    for b in [*train_bags, *val_bags]:
        if not np.all(np.isfinite(b.features)):
            raise ValueError(f"slide {b.id} has non-finite features")
    standardizer = fit_standardizer(train_bags)
    train = [b for b in standardize_bags(train_bags, standardizer) if usable(method, b)]
    val = standardize_bags(val_bags, standardizer)
    if not train:
        raise ValueError(f"no training slides usable by {method}")
    if not any(usable(method, b) for b in val):
        raise ValueError(f"no validation slides usable by {method}")
    params = init_model(method, train[0].dim, config)
    state = nn.AdamState.zeros_like(params)
    rng = np.random.default_rng([config.seed, 7])

    history = []
    best_params, best_val, best_epoch = params, math.inf, 0
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), config.slides_per_batch):
            batch = [train[i] for i in order[start:start + config.slides_per_batch]]
            try:
                params, state, loss = train_step(method, params, state, batch, config, rng)
            except nn.NonFiniteGradient as exc:
                raise TrainingDiverged(str(exc), {"epoch": epoch, "batch_start": int(start),
                                                  "slides": [b.id for b in batch]}) from exc
            if not math.isfinite(loss):
                raise TrainingDiverged("non-finite training loss",
                                       {"epoch": epoch, "batch_start": int(start),
                                        "slides": [b.id for b in batch], "loss": repr(loss)})
            losses.append(loss)
        val_loss = validation_loss(method, params, val, config.margins)
        if not math.isfinite(val_loss):
            raise TrainingDiverged("non-finite validation loss", {"epoch": epoch})
        wall = (time.perf_counter() - t0) * 1000 if config.record_wall_time else 0.0
        history.append(EpochRecord(epoch, float(np.mean(losses)), val_loss, config.lr, wall))
        if val_loss < best_val:
            best_params, best_val, best_epoch = params, val_loss, epoch
            stale = 0
            if on_improve is not None:
                on_improve(TrainedModel(params, standardizer, method), epoch)
        else:
            stale += 1
            if stale >= config.patience:
                log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break
    return TrainResult(TrainedModel(best_params, standardizer, method), history,
                       best_epoch, best_val, config)


@dataclass
class SearchTrial:
    lr: float
    best_val: float
    best_epoch: int
    epochs: int


def sample_learning_rates(seed, trials, low=-6.0, high=-3.0):
    """Log-uniform learning rates in [10**low, 10**high]."""
    u = np.random.default_rng([seed, 11]).uniform(low, high, size=trials)
    return [float(10.0 ** x) for x in u]


def lr_random_search(train_bags, val_bags, base: TrainConfig, trials=8):
    """Train once per sampled learning rate; the lowest best validation loss wins.

    Returns ``(best_lr, trials, best_result)``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    report, best = [], None
    for lr in sample_learning_rates(base.seed, trials):
        result = run_training(train_bags, val_bags, dataclasses.replace(base, lr=lr))
        report.append(SearchTrial(lr, result.best_val, result.best_epoch, len(result.history)))
        if best is None or result.best_val < best.best_val:
            best = result
    return best.config.lr, report, best


def refine_annotations(model: TrainedModel, bags, threshold=REFINE_THRESHOLD):
    """New percent per slide: share of tiles scored >= threshold.

    Normal slides stay at 0; a tumor slide never drops below one tile's worth.
    """
    out = []
    for bag in bags:
        if bag.label == 0:
            percent = 0.0
        else:
            hits = int(np.count_nonzero(model.scores(bag.features) >= threshold))
            percent = 100.0 * max(hits, 1) / bag.n
        out.append(dataclasses.replace(bag, percent=percent))
    return out
