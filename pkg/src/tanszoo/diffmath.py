"""Small dense reverse-mode autodiff over numpy arrays.

Only the handful of ops the encoders, predictor and contrastive losses need
are provided. Every op records a backward closure on its output; calling
``backward()`` on a scalar walks the recorded graph in reverse topological
order and accumulates gradients into the leaves.
"""

from __future__ import annotations

import collections
from typing import Callable, Iterable, Sequence

import numpy as np

NORM_EPS = 1e-12
ADAM_EPS = 1e-8

# Degenerate-input events (zero-norm rows, zero-vector cosines).
diagnostics: collections.Counter = collections.Counter()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, parents: tuple = (), backward=None, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() needs a scalar output")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if not isinstance(node, Parameter):
                    node.grad = None

    # operator sugar; only same-shape tensors or python scalars
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.shape), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """Trainable leaf. Holds its own gradient and Adam moments."""

    __slots__ = ("m", "v")

    def __init__(self, data):
        super().__init__(np.array(data, dtype=np.float64, copy=True), requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)

    def _accumulate(self, g):
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def constant(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _as_tensor(x, shape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.broadcast_to(np.asarray(x, dtype=np.float64), shape))


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)

        def back(g):
            a._accumulate(g)

        return Tensor(a.data + c, (a,), back)
    _check_same(a, b, "add")

    def back(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return Tensor(a.data + b.data, (a, b), back)


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _check_same(a, b, "sub")

    def back(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return Tensor(a.data - b.data, (a, b), back)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product with a tensor, constant array or scalar."""
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=np.float64)
        if c.ndim and c.shape != a.shape:
            raise ValueError(f"mul: shape mismatch {a.shape} vs {c.shape}")

        def back(g):
            a._accumulate(g * c)

        return Tensor(a.data * c, (a,), back)
    _check_same(a, b, "mul")

    def back(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return Tensor(a.data * b.data, (a, b), back)


def square(x: Tensor) -> Tensor:
    def back(g):
        x._accumulate(2.0 * x.data * g)

    return Tensor(x.data * x.data, (x,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")

    def back(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return Tensor(a.data @ b.data, (a, b), back)


def transpose(x: Tensor) -> Tensor:
    def back(g):
        x._accumulate(g.T)

    return Tensor(x.data.T, (x,), back)


def linear(x: Tensor, W: Tensor, bias: Tensor) -> Tensor:
    """``x @ W + bias`` for ``x`` of shape (b, n), ``W`` (n, m), ``bias`` (m,)."""
    x = constant(x)
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ValueError(f"linear: shape mismatch {x.shape} @ {W.shape}")
    if bias.shape != (W.shape[1],):
        raise ValueError(f"linear: bias shape {bias.shape} does not match {W.shape}")

    def back(g):
        if x.requires_grad:
            x._accumulate(g @ W.data.T)
        if W.requires_grad:
            W._accumulate(x.data.T @ g)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    return Tensor(x.data @ W.data + bias.data, (x, W, bias), back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def back(g):
        x._accumulate(g * mask)

    return Tensor(np.where(mask, x.data, 0.0), (x,), back)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(np.atleast_1d(x.data)).reshape(x.shape)

    def back(g):
        x._accumulate(g * s * (1.0 - s))

    return Tensor(s, (x,), back)


def total(x: Tensor, axis: int | None = None) -> Tensor:
    """Sum over ``axis`` (all axes when None)."""

    def back(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.shape))
        else:
            x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return Tensor(x.data.sum(axis=axis), (x,), back)


def mean(x: Tensor) -> Tensor:
    return mul(total(x), 1.0 / x.data.size)


def mean_pool(x: Tensor) -> Tensor:
    """Average the rows of an (n, d) tensor into a (d,) vector."""
    n = x.shape[0]
    if n == 0:
        raise ValueError("mean_pool of an empty set")

    def back(g):
        x._accumulate(np.broadcast_to(g / n, x.shape))

    return Tensor(x.data.mean(axis=0), (x,), back)


def segment_mean(x: Tensor, sizes: Sequence[int]) -> Tensor:
    """Mean-pool consecutive row blocks of ``x``; returns (len(sizes), d)."""
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    if bounds[-1] != x.shape[0] or min(sizes) < 1:
        raise ValueError("segment sizes do not tile the input")
    out = np.stack([x.data[bounds[i]:bounds[i + 1]].mean(axis=0) for i in range(len(sizes))])

    def back(g):
        gx = np.empty_like(x.data)
        for i, n in enumerate(sizes):
            gx[bounds[i]:bounds[i + 1]] = g[i] / n
        x._accumulate(gx)

    return Tensor(out, (x,), back)


def l2_normalize(x: Tensor) -> Tensor:
    """Scale each row (or a single vector) to unit Euclidean norm.

    Computes ``x / (||x|| + NORM_EPS)``; all-zero rows stay zero and are
    counted under ``diagnostics["zero_norm"]``.
    """
    x = constant(x)
    vec = x.data.ndim == 1
    X = x.data[None, :] if vec else x.data
    norms = np.sqrt(np.sum(X * X, axis=1, keepdims=True))
    zero = norms[:, 0] == 0.0
    if zero.any():
        diagnostics["zero_norm"] += int(zero.sum())
    denom = norms + NORM_EPS
    Y = X / denom

    def back(g):
        G = g[None, :] if vec else g
        dot = np.sum(G * X, axis=1, keepdims=True)
        safe = np.where(norms > 0, norms, 1.0)
        gx = G / denom - X * dot / (safe * denom * denom)
        x._accumulate(gx[0] if vec else gx)

    return Tensor(Y[0] if vec else Y, (x,), back)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [constant(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.concatenate([[0], np.cumsum(sizes)])

    def back(g):
        for i, p in enumerate(parts):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(bounds[i], bounds[i + 1])
                p._accumulate(g[tuple(sl)])

    return Tensor(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), back)


def stack(rows: Sequence[Tensor]) -> Tensor:
    rows = [constant(r) for r in rows]

    def back(g):
        for i, r in enumerate(rows):
            if r.requires_grad:
                r._accumulate(g[i])

    return Tensor(np.stack([r.data for r in rows]), tuple(rows), back)


def diag(x: Tensor) -> Tensor:
    n = x.shape[0]
    if x.data.ndim != 2 or x.shape[1] != n:
        raise ValueError("diag needs a square matrix")

    def back(g):
        x._accumulate(np.diag(g))

    return Tensor(np.diag(x.data).copy(), (x,), back)


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two vectors; 0 (with a diagnostic) if either is zero."""
    a, b = constant(a), constant(b)
    _check_same(a, b, "cosine")
    na = float(np.sqrt(a.data @ a.data))
    nb = float(np.sqrt(b.data @ b.data))
    if na == 0.0 or nb == 0.0:
        diagnostics["zero_cosine"] += 1
        return Tensor(0.0, (a, b), lambda g: None)
    c = float(a.data @ b.data) / (na * nb)

    def back(g):
        if a.requires_grad:
            a._accumulate(g * (b.data / (na * nb) - c * a.data / (na * na)))
        if b.requires_grad:
            b._accumulate(g * (a.data / (na * nb) - c * b.data / (nb * nb)))

    return Tensor(c, (a, b), back)


def check_gradients(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    h: float = 1e-5,
    coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> float:
    """Maximum relative error between reverse-mode and central-difference gradients.

    ``f`` must rebuild its graph from the current parameter values on every
    call. Relative error per coordinate is ``|a - n| / max(|a| + |n|, floor)``.
    With ``coords_per_param`` set, only that many randomly chosen coordinates
    per parameter are probed.
    """
    for p in params:
        p.zero_grad()
    f().backward()
    analytic = [p.grad.copy() for p in params]
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if coords_per_param is not None and coords_per_param < flat.size:
            idx = rng.choice(flat.size, size=coords_per_param, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            up = f().item()
            flat[i] = old - h
            down = f().item()
            flat[i] = old
            num = (up - down) / (2.0 * h)
            a = ga.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(abs(a) + abs(num), floor))
    for p in params:
        p.zero_grad()
    return worst


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def adam_step(
    params: Iterable[Parameter],
    lr: float = 1e-2,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = ADAM_EPS,
    t: int = 1,
) -> None:
    """One bias-corrected Adam update; ``t`` is the 1-based step count."""
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p in params:
        p.m = beta1 * p.m + (1.0 - beta1) * p.grad
        p.v = beta2 * p.v + (1.0 - beta2) * p.grad * p.grad
        p.data -= lr * (p.m / c1) / (np.sqrt(p.v / c2) + eps)
