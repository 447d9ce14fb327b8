"""Minimal reverse-mode autodiff over float64 numpy arrays.

A forward pass builds a fresh graph of :class:`Tensor` nodes; ``backward``
walks it in reverse topological order.  Everything is double precision and
single-owner during a training step, so runs are bitwise reproducible for a
fixed seed.
"""
from __future__ import annotations

import hashlib
import json
import math
import os

import numpy as np

from .errors import DimMismatch

# Active finite-difference kink watch: when set to a list, relu appends the
# minimum |pre-activation| of every call so checks can mask kink crossings.
_KINK_WATCH: list | None = None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad)


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor):
    """Accumulate d(loss)/d(node) into every reachable node's ``grad``."""
    if loss.data.size != 1:
        raise ValueError("backward expects a scalar loss")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if id(node) in seen:
            continue
        if expanded:
            seen.add(id(node))
            topo.append(node)
            continue
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, parents=(a, b))

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    out._backward = bwd
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, parents=(a, b))

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    out._backward = bwd
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c, parents=(a,))
    out._backward = lambda g: _accum(a, g * c)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., n, m) @ (..., m, p); either operand may be unbatched 2-D."""
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimMismatch(f"matmul {a.data.shape} @ {b.data.shape}")
    out = Tensor(np.matmul(a.data, b.data), parents=(a, b))

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accum(a, _unbroadcast(ga, a.data.shape))
        _accum(b, _unbroadcast(gb, b.data.shape))

    out._backward = bwd
    return out


def transpose_last2(a: Tensor) -> Tensor:
    out = Tensor(np.swapaxes(a.data, -1, -2), parents=(a,))
    out._backward = lambda g: _accum(a, np.swapaxes(g, -1, -2))
    return out


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    out = Tensor(a.data.reshape(shape), parents=(a,))
    out._backward = lambda g: _accum(a, g.reshape(old))
    return out


def concat_last(parts: list[Tensor]) -> Tensor:
    out = Tensor(np.concatenate([p.data for p in parts], axis=-1), parents=tuple(parts))
    sizes = [p.data.shape[-1] for p in parts]

    def bwd(g):
        start = 0
        for p, n in zip(parts, sizes):
            _accum(p, g[..., start : start + n])
            start += n

    out._backward = bwd
    return out


def index_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a (N, d) tensor; duplicate indices accumulate grads."""
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(a.data[idx], parents=(a,))

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        _accum(a, ga)

    out._backward = bwd
    return out


def expand_batch(a: Tensor, n: int) -> Tensor:
    """Prepend a broadcast batch axis of size ``n``."""
    out = Tensor(np.broadcast_to(a.data, (n,) + a.data.shape).copy(), parents=(a,))
    out._backward = lambda g: _accum(a, g.sum(axis=0))
    return out


def relu(a: Tensor) -> Tensor:
    if _KINK_WATCH is not None and a.data.size:
        _KINK_WATCH.append(float(np.min(np.abs(a.data))))
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, 0.0), parents=(a,))
    out._backward = lambda g: _accum(a, g * mask)
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y, parents=(a,))
    out._backward = lambda g: _accum(a, g * (1.0 - y * y))
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(y, parents=(a,))
    out._backward = lambda g: _accum(a, g * y * (1.0 - y))
    return out


def softmax_last(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y, parents=(a,))

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(a, (g - dot) * y)

    out._backward = bwd
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data, parents=(x, gamma, beta))
    n = x.data.shape[-1]

    def bwd(g):
        _accum(gamma, _unbroadcast(g * xhat, gamma.data.shape))
        _accum(beta, _unbroadcast(g, beta.data.shape))
        gx = g * gamma.data
        term = gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        _accum(x, term * inv)

    out._backward = bwd
    return out


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b over the last axis."""
    return add(matmul(x, w), b)


def softmax_attention(q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
    """Scaled dot-product attention; rows of the weight matrix sum to 1."""
    d = q.data.shape[-1]
    if k.data.shape[-1] != d:
        raise DimMismatch("query/key dims differ")
    scores = scale(matmul(q, transpose_last2(k)), 1.0 / math.sqrt(d))
    weights = softmax_last(scores)
    out = matmul(weights, v)
    if return_weights:
        return out, weights
    return out


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(np.array(a.data.sum()), parents=(a,))
    out._backward = lambda g: _accum(a, np.broadcast_to(g, a.data.shape).copy())
    return out


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


def mean_axis(a: Tensor, axis: int) -> Tensor:
    n = a.data.shape[axis]
    out = Tensor(a.data.mean(axis=axis), parents=(a,))

    def bwd(g):
        _accum(a, np.repeat(np.expand_dims(g, axis), n, axis=axis) / n)

    out._backward = bwd
    return out


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    diff = pred.data - target
    out = Tensor(np.array((diff * diff).mean()), parents=(pred,))
    out._backward = lambda g: _accum(pred, g * 2.0 * diff / diff.size)
    return out


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy against targets in [0, 1] (numerically stable)."""
    z, t = logits.data, np.asarray(targets, dtype=np.float64)
    loss = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = Tensor(np.array(loss.mean()), parents=(logits,))
    sig = 1.0 / (1.0 + np.exp(-z))
    out._backward = lambda g: _accum(logits, g * (sig - t) / z.size)
    return out


def cross_entropy_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy; logits (B, M) or (M,), integer labels."""
    z = logits.data if logits.data.ndim == 2 else logits.data[None, :]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    zmax = z.max(axis=-1, keepdims=True)
    logp = z - zmax - np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))
    out = Tensor(np.array(-logp[np.arange(len(labels)), labels].mean()), parents=(logits,))
    p = np.exp(logp)

    def bwd(g):
        gz = p.copy()
        gz[np.arange(len(labels)), labels] -= 1.0
        gz /= len(labels)
        _accum(logits, (g * gz).reshape(logits.data.shape))

    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# grid ops: 3x3 convolution, nearest upsample, stride-2 downsample
# ---------------------------------------------------------------------------

def conv3x3(x: Tensor, k: Tensor) -> Tensor:
    """Zero-padded 'same' 3x3 convolution; x (B, h, w, cin), k (3, 3, cin, cout).

    im2col form: one matmul forward, one for the kernel gradient, and a
    9-slice scatter for the input gradient.
    """
    if x.data.ndim != 4 or k.data.shape[:2] != (3, 3) or x.data.shape[3] != k.data.shape[2]:
        raise DimMismatch(f"conv3x3 {x.data.shape} * {k.data.shape}")
    b, h, w, cin = x.data.shape
    cout = k.data.shape[3]
    xp = np.zeros((b, h + 2, w + 2, cin))
    xp[:, 1:-1, 1:-1, :] = x.data
    windows = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    # windows: (b, h, w, cin, 3, 3) -> columns (b*h*w, 3*3*cin)
    cols = np.ascontiguousarray(windows.transpose(0, 1, 2, 4, 5, 3)).reshape(-1, 9 * cin)
    kmat = k.data.reshape(9 * cin, cout)
    out = Tensor((cols @ kmat).reshape(b, h, w, cout), parents=(x, k))

    def bwd(g):
        gflat = g.reshape(-1, cout)
        _accum(k, (cols.T @ gflat).reshape(3, 3, cin, cout))
        gcols = (gflat @ kmat.T).reshape(b, h, w, 3, 3, cin)
        gxp = np.zeros_like(xp)
        for di in range(3):
            for dj in range(3):
                gxp[:, di : di + h, dj : dj + w, :] += gcols[:, :, :, di, dj, :]
        _accum(x, gxp[:, 1:-1, 1:-1, :])

    out._backward = bwd
    return out


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbor x2 upsampling of (B, h, w, c)."""
    y = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    out = Tensor(y, parents=(x,))
    b, h, w, c = x.data.shape

    def bwd(g):
        _accum(x, g.reshape(b, h, 2, w, 2, c).sum(axis=(2, 4)))

    out._backward = bwd
    return out


def downsample2(x: Tensor) -> Tensor:
    """Stride-2 subsampling of (B, h, w, c) starting at index 0."""
    out = Tensor(x.data[:, ::2, ::2, :].copy(), parents=(x,))

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[:, ::2, ::2, :] = g
        _accum(x, gx)

    out._backward = bwd
    return out


def identity_kernel(c: int) -> np.ndarray:
    """3x3 kernel acting as the identity map on c channels."""
    k = np.zeros((3, 3, c, c))
    k[1, 1] = np.eye(c)
    return k


# ---------------------------------------------------------------------------
# parameters, checkpointing, optimizer
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


class ParamSet:
    """Named parameter tensors with gradient slots and a creation seed."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng(np.random.SeedSequence([0x9E3779B9, self.seed]))

    def add(self, name: str, shape, init: str = "fan_in") -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        shape = tuple(int(s) for s in shape)
        if init == "fan_in":
            fan = shape[0] if len(shape) > 1 else max(shape[0], 1)
            bound = 1.0 / math.sqrt(fan)
            data = self._rng.uniform(-bound, bound, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True)
        t.grad = np.zeros(shape)
        self.params[name] = t
        return t

    def set(self, name: str, data: np.ndarray) -> Tensor:
        """Install explicit values (used by tests and identity configs)."""
        if name in self.params:
            t = self.params[name]
            if t.data.shape != np.asarray(data).shape:
                raise DimMismatch(f"shape mismatch for {name!r}")
            t.data = np.array(data, dtype=np.float64)
            return t
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
        t.grad = np.zeros_like(t.data)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = np.zeros_like(t.data)

    def n_values(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def state_dict(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "seed": self.seed,
            "params": {
                name: {"shape": list(t.data.shape), "data": t.data.ravel().tolist()}
                for name, t in self.params.items()
            },
        }

    def save(self, path: str):
        with open(path, "w") as fh:
            json.dump(self.state_dict(), fh)

    @classmethod
    def from_state_dict(cls, state: dict) -> "ParamSet":
        if state.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {state.get('format_version')}")
        ps = cls(seed=state.get("seed", 0))
        for name, entry in state["params"].items():
            ps.set(name, np.array(entry["data"], dtype=np.float64).reshape(entry["shape"]))
        return ps

    @classmethod
    def load(cls, path: str) -> "ParamSet":
        with open(path) as fh:
            return cls.from_state_dict(json.load(fh))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()


def adamw_update(p, g, m, v, t, lr, beta1, beta2, eps, weight_decay):
    """One decoupled-weight-decay adaptive-moment update; returns (p, m, v)."""
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * g * g
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    p = p - lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p)
    return p, m, v


class AdamW:
    def __init__(self, params: ParamSet, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.state = {
            name: (np.zeros_like(t.data), np.zeros_like(t.data))
            for name, t in params.params.items()
        }

    def step(self):
        self.t += 1
        for name, t in self.params.params.items():
            if t.grad is None:
                continue
            m, v = self.state[name]
            t.data, m, v = adamw_update(
                t.data, t.grad, m, v, self.t, self.lr, self.beta1, self.beta2, self.eps, self.weight_decay
            )
            self.state[name] = (m, v)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def finite_diff_check(f, params: ParamSet, step: float = 1e-5, n_coords: int = 50, seed: int = 0) -> float:
    """Max relative error between backward() and central differences.

    Checks a random subsample of at least ``n_coords`` coordinates (all of
    them when the set is smaller).  Coordinates whose perturbed evaluations
    come within ``10 * step`` of a relu kink are excluded.  Relative error
    uses a unit floor: |fd - grad| / max(1, |fd|, |grad|).
    """
    global _KINK_WATCH
    params.zero_grad()
    loss = f(params)
    backward(loss)
    grads = {name: t.grad.copy() for name, t in params.params.items()}

    names = sorted(params.params)
    sizes = [params.params[n].data.size for n in names]
    total = int(np.sum(sizes))
    rng = np.random.default_rng(seed)
    chosen = np.arange(total) if total <= n_coords else np.sort(rng.choice(total, size=n_coords, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    max_err = 0.0
    for flat_idx in chosen:
        pi = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
        name = names[pi]
        local = int(flat_idx - offsets[pi])
        orig = float(params.params[name].data.ravel()[local])
        evals = []
        kink_free = True
        for delta in (step, -step):
            arr = params.params[name].data.copy()
            arr.ravel()[local] = orig + delta
            params.params[name].data = arr
            _KINK_WATCH = []
            try:
                evals.append(float(f(params).data))
                if _KINK_WATCH and min(_KINK_WATCH) <= 10.0 * step:
                    kink_free = False
            finally:
                _KINK_WATCH = None
        arr = params.params[name].data.copy()
        arr.ravel()[local] = orig
        params.params[name].data = arr
        if not kink_free:
            continue
        fd = (evals[0] - evals[1]) / (2.0 * step)
        an = grads[name].ravel()[local]
        err = abs(fd - an) / max(1.0, abs(fd), abs(an))
        max_err = max(max_err, err)
    return max_err
