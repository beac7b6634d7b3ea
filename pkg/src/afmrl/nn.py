"""A small dense-tensor autograd, the layers built on it, and RMSProp.

Everything is float64. Operations broadcast like numpy; gradients are summed
back to each operand's shape.
"""
from __future__ import annotations

import contextlib
import json
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    # -- plumbing ---------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    def zero_grad(self):
        self.grad = None

    def _accum(self, g: np.ndarray):
        if g.shape != self.data.shape:
            g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        if self._backward is None and not self.requires_grad:
            raise RuntimeError("backward called on a tensor with no recorded computation")
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward needs an explicit gradient for non-scalar outputs")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accum(g)
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.data.shape:
                    pg = _unbroadcast(pg, p.data.shape)
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # -- op construction ---------------------------------------------------
    @staticmethod
    def _make(data, parents: tuple, backward) -> "Tensor":
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            return Tensor(data, True, parents, backward)
        return Tensor(data)

    # arithmetic
    def __add__(self, other):
        o = as_tensor(other)
        return Tensor._make(self.data + o.data, (self, o), lambda g: (g, g))

    __radd__ = __add__

    def __sub__(self, other):
        o = as_tensor(other)
        return Tensor._make(self.data - o.data, (self, o), lambda g: (g, -g))

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other):
        o = as_tensor(other)
        a, b = self.data, o.data
        return Tensor._make(a * b, (self, o), lambda g: (g * b, g * a))

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = as_tensor(other)
        a, b = self.data, o.data
        return Tensor._make(a / b, (self, o), lambda g: (g / b, -g * a / (b * b)))

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, k: float):
        a = self.data
        return Tensor._make(a ** k, (self,), lambda g: (g * k * a ** (k - 1),))

    def __matmul__(self, other):
        o = as_tensor(other)
        a, b = self.data, o.data

        def back(g):
            if a.ndim == 1 and b.ndim == 1:
                return g * b, g * a
            if b.ndim == 1:
                return np.multiply.outer(g, b), np.einsum("...i,...ij->j", g, a)
            if a.ndim == 1:
                return np.einsum("...j,...kj->k", g, b), np.einsum("k,...j->...kj", a, g)
            return g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g

        return Tensor._make(a @ b, (self, o), back)

    def __rmatmul__(self, other):
        return as_tensor(other) @ self

    def __getitem__(self, idx):
        a = self.data

        def back(g):
            out = np.zeros_like(a)
            np.add.at(out, idx, g)
            return (out,)

        return Tensor._make(a[idx], (self,), back)

    # shape
    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def transpose(self) -> "Tensor":
        return Tensor._make(np.swapaxes(self.data, -1, -2), (self,), lambda g: (np.swapaxes(g, -1, -2),))

    def reshape(self, *shape) -> "Tensor":
        old = self.data.shape
        return Tensor._make(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    # reductions
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.data.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod([self.data.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis, keepdims) * (1.0 / n)

    # elementwise
    def relu(self) -> "Tensor":
        mask = self.data > 0
        return Tensor._make(self.data * mask, (self,), lambda g: (g * mask,))

    def elu(self) -> "Tensor":
        a = self.data
        neg = np.expm1(np.minimum(a, 0.0))
        out = np.where(a > 0, a, neg)
        return Tensor._make(out, (self,), lambda g: (g * np.where(a > 0, 1.0, neg + 1.0),))

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        a = self.data
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,))

    def abs(self) -> "Tensor":
        a = self.data
        return Tensor._make(np.abs(a), (self,), lambda g: (g * np.sign(a),))

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g * 0.5 / out,))

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),))

    def softmax(self, axis: int = -1) -> "Tensor":
        z = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        s = e / e.sum(axis=axis, keepdims=True)
        return Tensor._make(s, (self,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))

    def log_softmax(self, axis: int = -1) -> "Tensor":
        z = self.data - self.data.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
        out = z - lse
        s = np.exp(out)
        return Tensor._make(out, (self,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))

    def row_normalize(self) -> "Tensor":
        """Divide each row (last axis) by its sum; all-zero rows stay zero."""
        a = self.data
        r = a.sum(axis=-1, keepdims=True)
        safe = np.where(r != 0, r, 1.0)
        out = a / safe
        live = (r != 0).astype(np.float64)

        def back(g):
            return ((g - (g * out).sum(axis=-1, keepdims=True)) / safe * live,)

        return Tensor._make(out, (self,), back)

    def frobenius(self) -> "Tensor":
        """sqrt of the sum of squares; the gradient at the zero matrix is taken as 0."""
        a = self.data
        n = float(np.sqrt((a * a).sum()))
        return Tensor._make(np.array(n), (self,), lambda g: (g * a / n if n > 0 else np.zeros_like(a),))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return Tensor._make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts),
                        lambda g: tuple(np.split(g, cuts, axis=axis)))


def where(mask, a, b) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    ta, tb = as_tensor(a), as_tensor(b)
    return Tensor._make(np.where(mask, ta.data, tb.data), (ta, tb),
                        lambda g: (np.where(mask, g, 0.0), np.where(mask, 0.0, g)))


def mse(pred: Tensor, target) -> Tensor:
    d = pred - as_tensor(target).detach()
    return (d * d).mean()


# ---------------------------------------------------------------------------
# layers


class Module:
    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for name, v in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(v, Tensor) and v.requires_grad:
                out.append((key, v))
            elif isinstance(v, Module):
                out.extend(v.named_parameters(key + "."))
            elif isinstance(v, (list, tuple)):
                for k, item in enumerate(v):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{key}.{k}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        if set(params) != set(state):
            raise ValueError(f"parameter names differ: {sorted(set(params) ^ set(state))}")
        for k, p in params.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {p.data.shape}")
            p.data = v.copy()


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


ACTIVATIONS = ("relu", "identity", "softmax", "elu", "tanh")


def activate(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return x.relu()
    if kind == "identity":
        return x
    if kind == "softmax":
        return x.softmax(-1)
    if kind == "elu":
        return x.elu()
    if kind == "tanh":
        return x.tanh()
    raise ValueError(f"unknown activation {kind!r}")


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, activation: str = "identity",
                 rng: Optional[np.random.Generator] = None, bias: bool = True):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng or np.random.default_rng(0)
        self.n_in, self.n_out = n_in, n_out
        self.activation = activation
        self.W = Tensor(glorot(rng, n_in, n_out), requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True) if bias else None

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"expected last dimension {self.n_in}, got {x.shape}")
        y = x @ self.W
        if self.b is not None:
            y = y + self.b
        return activate(y, self.activation)


class MLP(Module):
    def __init__(self, sizes: Sequence[int], activation: str = "relu", out_activation: str = "identity",
                 rng: Optional[np.random.Generator] = None):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        rng = rng or np.random.default_rng(0)
        n = len(sizes) - 1
        self.layers = [Dense(sizes[k], sizes[k + 1], activation if k < n - 1 else out_activation, rng)
                       for k in range(n)]

    def __call__(self, x) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


# ---------------------------------------------------------------------------
# optimiser


class RMSProp:
    """v <- rho v + (1 - rho) g^2 ;  p <- p - lr g / sqrt(v + eps)."""

    def __init__(self, params: Iterable[Tensor], lr: float = 5e-4, rho: float = 0.99, eps: float = 1e-5,
                 clip: Optional[float] = None):
        self.params = list(params)
        self.lr, self.rho, self.eps, self.clip = lr, rho, eps, clip
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if self.clip is not None:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads))
            if norm > self.clip:
                grads = [g * (self.clip / norm) for g in grads]
        for p, g, v in zip(self.params, grads, self.v):
            v *= self.rho
            v += (1.0 - self.rho) * g * g
            p.data = p.data - self.lr * g / np.sqrt(v + self.eps)


def rmsprop_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], v: Sequence[np.ndarray],
                 lr: float = 5e-4, rho: float = 0.99, eps: float = 1e-5) -> list[np.ndarray]:
    """Functional form on raw arrays; updates ``v`` in place and returns new parameters."""
    out = []
    for p, g, s in zip(params, grads, v):
        if p.shape != g.shape or p.shape != s.shape:
            raise ValueError("parameter, gradient and accumulator shapes must match")
        s *= rho
        s += (1.0 - rho) * g * g
        out.append(p - lr * g / np.sqrt(s + eps))
    return out


# ---------------------------------------------------------------------------
# checkpoints: <stem>.bin holds float64 little-endian values, <stem>.json the layout


def save_checkpoint(state: dict[str, np.ndarray], path) -> tuple[Path, Path]:
    stem = Path(path).with_suffix("")
    manifest, offset, chunks = [], 0, []
    for name, arr in state.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        chunks.append(arr.ravel())
    bin_path, json_path = stem.with_suffix(".bin"), stem.with_suffix(".json")
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    (np.concatenate(chunks) if chunks else np.zeros(0, "<f8")).tofile(bin_path)
    json_path.write_text(json.dumps({"dtype": "float64", "order": "C", "params": manifest}, indent=1))
    return bin_path, json_path


def load_checkpoint(path) -> dict[str, np.ndarray]:
    stem = Path(path).with_suffix("")
    meta = json.loads(stem.with_suffix(".json").read_text())
    flat = np.fromfile(stem.with_suffix(".bin"), dtype="<f8")
    out = {}
    for entry in meta["params"]:
        size = int(np.prod(entry["shape"]))
        out[entry["name"]] = flat[entry["offset"]:entry["offset"] + size].reshape(entry["shape"]).copy()
    return out
