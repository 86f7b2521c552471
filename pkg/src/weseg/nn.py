"""Small tile-scoring MLP, attention pooling, Adam and gradient checking.

Everything is plain numpy with hand-written backward passes.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

log = logging.getLogger(__name__)

ATTENTION_HIDDEN = 128
ACTIVATIONS = ("relu", "sigmoid", "identity")
CHECKPOINT_FORMAT = "weseg-checkpoint"
CHECKPOINT_VERSION = 1


def sigmoid(z):
    # split by sign to avoid overflow in exp
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(z, act):
    if act == "relu":
        return np.maximum(z, 0.0)
    if act == "sigmoid":
        return sigmoid(z)
    return z


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray
    act: str

    def __post_init__(self):
        if self.act not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.act!r}")
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ValueError(f"bad layer shapes W{self.W.shape} b{self.b.shape}")


@dataclass
class Attention:
    """Tanh attention scorer over embeddings plus a linear bag classifier."""

    V: np.ndarray  # (H, D_emb)
    w: np.ndarray  # (H,)
    c: np.ndarray  # (D_emb,)
    c0: np.ndarray  # (1,)


@dataclass
class ModelParams:
    layers: list
    attention: Optional[Attention] = None

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.W.shape[0] != nxt.W.shape[1]:
                raise ValueError("layer dimensions do not chain")
        if self.attention is not None:
            d_emb = self.layers[-1].W.shape[0]
            a = self.attention
            if a.V.shape != (ATTENTION_HIDDEN, d_emb) or a.w.shape != (ATTENTION_HIDDEN,):
                raise ValueError("attention shapes do not match the embedding size")
            if a.c.shape != (d_emb,) or a.c0.shape != (1,):
                raise ValueError("bag classifier shapes do not match the embedding size")
        elif self.layers[-1].act != "sigmoid" or self.layers[-1].W.shape[0] != 1:
            raise ValueError("tile scorer must end in a single sigmoid unit")

    @property
    def input_dim(self) -> int:
        return self.layers[0].W.shape[1]

    def tensors(self):
        """All parameter arrays in a fixed order (shared with gradients and Adam)."""
        out = []
        for layer in self.layers:
            out += [layer.W, layer.b]
        if self.attention is not None:
            a = self.attention
            out += [a.V, a.w, a.c, a.c0]
        return out

    def with_tensors(self, arrays):
        arrays = list(arrays)
        layers = []
        for i, layer in enumerate(self.layers):
            layers.append(Layer(arrays[2 * i], arrays[2 * i + 1], layer.act))
        attention = None
        if self.attention is not None:
            attention = Attention(*arrays[2 * len(self.layers):])
        return ModelParams(layers, attention)

    def copy(self):
        return self.with_tensors([t.copy() for t in self.tensors()])


def _glorot(rng, fan_out, fan_in):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def init_mlp(input_dim, hidden=(64, 32), seed=0, attention=False):
    """MLP ``input_dim -> hidden... -> 1 sigmoid``.

    With ``attention=True`` the sigmoid head is dropped: the last hidden layer
    is the tile embedding and an attention block is attached on top.
    """
    rng = np.random.default_rng(seed)
    dims = [input_dim, *hidden]
    layers = [Layer(_glorot(rng, d_out, d_in), np.zeros(d_out), "relu")
              for d_in, d_out in zip(dims, dims[1:])]
    if not attention:
        layers.append(Layer(_glorot(rng, 1, dims[-1]), np.zeros(1), "sigmoid"))
        return ModelParams(layers)
    d_emb = dims[-1]
    att = Attention(
        V=_glorot(rng, ATTENTION_HIDDEN, d_emb),
        w=_glorot(rng, 1, ATTENTION_HIDDEN)[0],
        c=_glorot(rng, 1, d_emb)[0],
        c0=np.zeros(1),
    )
    return ModelParams(layers, att)


@dataclass
class ForwardCache:
    inputs: list  # input to each layer
    pre: list  # pre-activation of each layer
    outputs: np.ndarray


def mlp_forward(params: ModelParams, features):
    """Row-wise forward pass; returns per-tile outputs and a cache for backprop.

    For a sigmoid-headed scorer the output is a length-n probability vector,
    otherwise the (n, D_emb) embedding matrix.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ValueError(f"features of shape {x.shape} do not match input dim {params.input_dim}")
    inputs, pre = [], []
    for layer in params.layers:
        inputs.append(x)
        z = x @ layer.W.T + layer.b
        pre.append(z)
        x = _activate(z, layer.act)
    out = x[:, 0] if params.attention is None else x
    return out, ForwardCache(inputs, pre, x)


def mlp_backward(params: ModelParams, cache: ForwardCache, grad_out):
    """Gradients of the loss for every layer tensor, given d(loss)/d(outputs)."""
    if len(cache.pre) != len(params.layers):
        raise ValueError("cache does not belong to these parameters")
    for layer, z in zip(params.layers, cache.pre):
        if z.shape[1] != layer.W.shape[0]:
            raise ValueError("stale cache: layer shapes changed since the forward pass")
    g = np.asarray(grad_out, dtype=np.float64)
    if g.ndim == 1:
        g = g[:, None]
    if g.shape != cache.outputs.shape:
        raise ValueError(f"upstream gradient {g.shape} does not match outputs {cache.outputs.shape}")
    grads = []
    for layer, x, z in zip(reversed(params.layers), reversed(cache.inputs), reversed(cache.pre)):
        if layer.act == "relu":
            g = g * (z > 0)
        elif layer.act == "sigmoid":
            s = sigmoid(z)
            g = g * s * (1 - s)
        grads.append(g.sum(axis=0))
        grads.append(g.T @ x)
        g = g @ layer.W
    grads.reverse()
    return grads


@dataclass
class AttentionCache:
    h: np.ndarray
    u: np.ndarray
    a: np.ndarray
    z: np.ndarray
    bag_prob: float


def attention_pool(params: ModelParams, embeddings):
    """Attention-weighted bag probability; returns ``(bag_prob, weights, cache)``."""
    att = params.attention
    if att is None:
        raise ValueError("model has no attention parameters")
    h = np.asarray(embeddings, dtype=np.float64)
    u = np.tanh(h @ att.V.T)
    s = u @ att.w
    s = s - s.max()
    e = np.exp(s)
    a = e / e.sum()
    z = a @ h
    bag_prob = float(sigmoid(np.array([z @ att.c + att.c0[0]]))[0])
    return bag_prob, a, AttentionCache(h, u, a, z, bag_prob)


def attention_backward(params: ModelParams, cache: AttentionCache, grad_bag_prob):
    """Gradients for (V, w, c, c0) and d(loss)/d(embeddings)."""
    att = params.attention
    y = cache.bag_prob
    gl = grad_bag_prob * y * (1 - y)
    dc = gl * cache.z
    dc0 = np.array([gl])
    dz = gl * att.c
    dh = cache.a[:, None] * dz[None, :]
    da = cache.h @ dz
    ds = cache.a * (da - cache.a @ da)
    dw = ds @ cache.u
    dpre = (ds[:, None] * att.w[None, :]) * (1 - cache.u ** 2)
    dV = dpre.T @ cache.h
    dh += dpre @ att.V
    return [dV, dw, dc, dc0], dh


def attention_scores(weights, bag_prob):
    """Min-max scaled attention weights as tile scores; zero when the bag is called normal."""
    a = np.asarray(weights, dtype=np.float64)
    if bag_prob < 0.5:
        return np.zeros_like(a)
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.full_like(a, 0.5)
    return (a - lo) / (hi - lo)


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ModelParams):
        return cls([np.zeros_like(p) for p in params.tensors()],
                   [np.zeros_like(p) for p in params.tensors()])


def adam_step(params: ModelParams, grads, state: AdamState, lr):
    """One bias-corrected Adam update. Returns new params and state; inputs untouched."""
    tensors = params.tensors()
    if len(grads) != len(tensors) or any(g.shape != p.shape for g, p in zip(grads, tensors)):
        raise ValueError("gradient shapes do not match parameters")
    if not all(np.all(np.isfinite(g)) for g in grads):
        log.error("adam_step: non-finite gradient, step rejected")
        raise NonFiniteGradient("non-finite gradient")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(tensors, grads, state.m, state.v):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return params.with_tensors(new_p), AdamState(new_m, new_v, t, b1, b2, state.eps)


def finite_diff_check(loss_fn: Callable, params: ModelParams, step=1e-5,
                      max_coords=None, seed=0, floor=1e-3, kink_fn=None, details=None):
    """Largest relative error between analytic and central-difference gradients.

    ``loss_fn(params) -> (loss, grads)`` with grads ordered like
    ``params.tensors()``. The relative error of a coordinate is
    ``|g - fd| / max(|g|, |fd|, floor * G)`` with ``G`` the largest analytic
    gradient magnitude, so coordinates a thousand times smaller than the
    dominant ones are compared on the scale of the gradient rather than their
    own (central differences carry ~1e-11 round-off at step 1e-5).

    ``kink_fn(params)``, when given, returns the boolean activation pattern of
    the model; coordinates whose +/- perturbations land on different patterns
    straddle a ReLU kink, where central differences are meaningless, and are
    skipped. With ``max_coords`` a seeded sample of coordinates is checked.
    Counts of checked/skipped coordinates go into ``details`` if provided.
    """
    work = params.copy()
    tensors = work.tensors()
    _, grads = loss_fn(work)
    scale = floor * max(float(np.abs(g).max()) for g in grads)
    coords = [(k, idx) for k, t in enumerate(tensors) for idx in np.ndindex(t.shape)]
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(coords), size=max_coords, replace=False))
        coords = [coords[i] for i in pick]
    worst = 0.0
    skipped = 0
    for k, idx in coords:
        t = tensors[k]
        orig = t[idx]
        t[idx] = orig + step
        up, _ = loss_fn(work)
        pat_up = kink_fn(work) if kink_fn else None
        t[idx] = orig - step
        down, _ = loss_fn(work)
        pat_down = kink_fn(work) if kink_fn else None
        t[idx] = orig
        if kink_fn is not None and not np.array_equal(pat_up, pat_down):
            skipped += 1
            continue
        fd = (up - down) / (2 * step)
        g = grads[k][idx]
        err = abs(g - fd) / max(abs(g), abs(fd), scale, 1e-300)
        worst = max(worst, err)
    if details is not None:
        details.update(checked=len(coords) - skipped, skipped=skipped)
    return worst


def relu_pattern(params: ModelParams, features):
    """Concatenated on/off state of every ReLU unit; a ``kink_fn`` helper."""
    _, cache = mlp_forward(params, features)
    return np.concatenate([(z > 0).ravel() for z, layer in zip(cache.pre, params.layers)
                           if layer.act == "relu"])


# -- checkpoints -------------------------------------------------------------

def _array_doc(a):
    return {"shape": list(a.shape), "data": [float(x) for x in a.ravel(order="C")]}


def _array_from(doc):
    return np.array(doc["data"], dtype=np.float64).reshape(doc["shape"])


def checkpoint_text(params: ModelParams, extra: Optional[dict] = None) -> str:
    """Serialise params (plus free-form ``extra`` metadata) to versioned JSON text.

    Floats are written with ``repr``, which round-trips float64 bit-exactly.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "layers": [{"activation": layer.act, "W": _array_doc(layer.W), "b": _array_doc(layer.b)}
                   for layer in params.layers],
        "attention": None,
        "extra": extra or {},
    }
    if params.attention is not None:
        a = params.attention
        doc["attention"] = {"V": _array_doc(a.V), "w": _array_doc(a.w),
                            "c": _array_doc(a.c), "c0": _array_doc(a.c0)}
    return json.dumps(doc, indent=1) + "\n"


def parse_checkpoint(text: str):
    """Inverse of :func:`checkpoint_text`; returns ``(params, extra)``."""
    doc = json.loads(text)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a weseg checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    layers = [Layer(_array_from(d["W"]), _array_from(d["b"]), d["activation"]) for d in doc["layers"]]
    attention = None
    if doc["attention"] is not None:
        a = doc["attention"]
        attention = Attention(_array_from(a["V"]), _array_from(a["w"]),
                              _array_from(a["c"]), _array_from(a["c0"]))
    return ModelParams(layers, attention), doc["extra"]


def save_checkpoint(path, params, extra=None):
    with open(path, "w") as fh:
        fh.write(checkpoint_text(params, extra))


def load_checkpoint(path):
    with open(path) as fh:
        return parse_checkpoint(fh.read())
