"""A small reverse-mode differentiation kernel over 2-D float64 arrays.

The numeric kernels (``*_forward`` / ``*_backward``) are plain functions on
arrays. ``Tensor`` records which kernel produced it and ``Tensor.backward``
walks the graph in reverse topological order, accumulating gradients.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DEBUG = bool(os.environ.get("NCA_AMT_DEBUG"))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: Sequence["Tensor"] = (), _backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        if self.data.ndim > 2:
            raise ValueError("tensors are at most 2-D")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = tuple(_parents)
        self._backward = _backward
        self.name = name
        if DEBUG and not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values produced ({name or 'tensor'})")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {self.data.shape}")
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for p, g in zip(node._parents, grads):
                if g is not None and p.requires_grad:
                    p._accumulate(g)
            if node._parents:
                node.grad = None if node is not self else node.grad

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# numeric kernels

def linear_forward(x, w, b):
    if x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ValueError(f"shape mismatch: x {x.shape}, W {w.shape}, b {b.shape}")
    return x @ w + b


def linear_backward(dy, x, w):
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


def batchnorm_forward(x, gamma, beta, eps: float = 1e-5):
    """Training-mode normalization with batch statistics (biased variance)."""
    n = x.shape[0]
    if n < 2:
        raise ValueError("batch normalization in train mode needs a batch of at least 2")
    mean = x.mean(axis=0)
    xc = x - mean
    var = (xc * xc).mean(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    cache = (xhat, inv_std, gamma)
    return gamma * xhat + beta, mean, var, cache


def batchnorm_backward(dy, cache):
    xhat, inv_std, gamma = cache
    n = dy.shape[0]
    dbeta = dy.sum(axis=0)
    dgamma = (dy * xhat).sum(axis=0)
    dxhat = dy * gamma
    dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dx, dgamma, dbeta


def batchnorm_eval(x, gamma, beta, running_mean, running_var, eps: float = 1e-5):
    inv_std = 1.0 / np.sqrt(running_var + eps)
    return gamma * (x - running_mean) * inv_std + beta, inv_std


def log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_xent_forward(logits, labels):
    """Mean negative log-likelihood and its gradient ``(p - onehot) / n``."""
    n, k = logits.shape
    labels = np.asarray(labels)
    if k < 2:
        raise ValueError("softmax cross-entropy needs at least two classes")
    if labels.shape != (n,) or np.any(labels < 0) or np.any(labels >= k):
        raise ValueError("labels out of range or wrong shape")
    labels = labels.astype(np.int64)
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                    np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def sigmoid_bce_forward(logits, targets):
    """Per-class binary cross-entropy summed over classes, averaged over the batch."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise ValueError(f"targets {targets.shape} do not match logits {logits.shape}")
    if not np.all((targets == 0) | (targets == 1)):
        raise ValueError("targets must be binary")
    n = logits.shape[0]
    # -[y log p + (1-y) log(1-p)] = softplus(z) - y z, with a stable softplus
    per = np.maximum(logits, 0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    loss = per.sum() / n
    grad = (sigmoid(logits) - targets) / n
    return float(loss), grad


# ---------------------------------------------------------------------------
# graph ops

def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    xd, wd = x.data, w.data
    y = linear_forward(xd, wd, b.data)
    return Tensor(y, _parents=(x, w, b), _backward=lambda g: linear_backward(g, xd, wd),
                  name="linear")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # maximum propagates NaN, so a bad input still surfaces as a non-finite loss
    return Tensor(np.maximum(x.data, 0.0), _parents=(x,), _backward=lambda g: (g * mask,),
                  name="relu")


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return Tensor(a.data + b.data, _parents=(a, b), _backward=lambda g: (g, g), name="add")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor(x.data * c, _parents=(x,), _backward=lambda g: (g * c,), name="scale")


def grad_reverse(x: Tensor, scale: float = 1.0) -> Tensor:
    """Identity forward; backward multiplies the incoming gradient by ``-scale``."""
    if scale < 0:
        raise ValueError("grad_reverse scale must be nonnegative")
    s = -float(scale)
    return Tensor(x.data.copy(), _parents=(x,), _backward=lambda g: (g * s,), name="grad_reverse")


def softmax_xent(logits: Tensor, labels) -> Tensor:
    loss, grad = softmax_xent_forward(logits.data, labels)
    return Tensor(loss, _parents=(logits,), _backward=lambda g: (grad * g,), name="softmax_xent")


def sigmoid_bce(logits: Tensor, targets) -> Tensor:
    loss, grad = sigmoid_bce_forward(logits.data, targets)
    return Tensor(loss, _parents=(logits,), _backward=lambda g: (grad * g,), name="sigmoid_bce")


# ---------------------------------------------------------------------------
# layers

class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator | None = None,
                 gain: float = 2.0):
        if d_in <= 0 or d_out <= 0:
            raise ValueError("layer dims must be positive")
        w = np.zeros((d_in, d_out)) if rng is None else \
            rng.standard_normal((d_in, d_out)) * np.sqrt(gain / d_in)
        self.W = parameter(w, "W")
        self.b = parameter(np.zeros(d_out), "b")

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.W, self.b)

    def parameters(self) -> list[Tensor]:
        return [self.W, self.b]

    def state(self) -> dict[str, np.ndarray]:
        return {}


class BatchNorm1d:
    def __init__(self, dim: int, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = parameter(np.ones(dim), "gamma")
        self.beta = parameter(np.zeros(dim), "beta")
        self.eps = eps
        self.momentum = momentum
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.training = True

    def __call__(self, x: Tensor) -> Tensor:
        g, b = self.gamma, self.beta
        if not self.training:
            y, inv_std = batchnorm_eval(x.data, g.data, b.data, self.running_mean,
                                        self.running_var, self.eps)
            xhat = (x.data - self.running_mean) * inv_std
            gd = g.data
            return Tensor(y, _parents=(x, g, b), name="batchnorm",
                          _backward=lambda d: (d * gd * inv_std, (d * xhat).sum(axis=0),
                                               d.sum(axis=0)))
        y, mean, var, cache = batchnorm_forward(x.data, g.data, b.data, self.eps)
        m = self.momentum
        self.running_mean = (1 - m) * self.running_mean + m * mean
        self.running_var = (1 - m) * self.running_var + m * var
        return Tensor(y, _parents=(x, g, b), _backward=lambda d: batchnorm_backward(d, cache),
                      name="batchnorm")

    def set_population_stats(self, mean: np.ndarray, var: np.ndarray) -> None:
        self.running_mean = mean.copy()
        self.running_var = var.copy()

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]

    def state(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``f`` with respect to array ``x`` (in place)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


# ---------------------------------------------------------------------------
# checkpoints: flat little-endian f64 blob + JSON shape manifest

def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write ``<path>.bin`` and ``<path>.json``; arrays are concatenated in key order."""
    path = Path(path)
    entries, offset = [], 0
    blobs = []
    for key in arrays:
        a = np.ascontiguousarray(np.asarray(arrays[key], dtype="<f8"))
        entries.append({"name": key, "shape": list(a.shape), "offset": offset})
        offset += a.size
        blobs.append(a.tobytes())
    path.with_suffix(".bin").write_bytes(b"".join(blobs))
    doc = {"dtype": "<f8", "count": offset, "tensors": entries, "meta": meta or {}}
    path.with_suffix(".json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    doc = json.loads(path.with_suffix(".json").read_text())
    flat = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    if flat.size != doc["count"]:
        raise ValueError(f"{path}: checkpoint holds {flat.size} values, manifest says {doc['count']}")
    out = {}
    for e in doc["tensors"]:
        size = int(np.prod(e["shape"])) if e["shape"] else 1
        out[e["name"]] = flat[e["offset"]:e["offset"] + size].reshape(e["shape"]).astype(np.float64)
    return out, doc.get("meta", {})


def collect(modules: Iterable) -> list[Tensor]:
    params: list[Tensor] = []
    for mod in modules:
        params.extend(mod.parameters())
    return params
