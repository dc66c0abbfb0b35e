"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array and remembers how it was produced.
Calling :meth:`Tensor.backward` on a scalar walks the graph once in reverse
topological order and accumulates ``grad`` on every tensor that requires it.

Only the operations the matching network needs are provided; there is no
general broadcasting. Bias-style additions go through :func:`affine`.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_PRECISIONS = {"f32": np.float32, "f64": np.float64}
_dtype = np.float32
_grad_enabled = True
_decisions: list | None = None


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def set_precision(name: str) -> None:
    """Select the global float precision, ``"f32"`` or ``"f64"``."""
    global _dtype
    if name not in _PRECISIONS:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}")
    _dtype = _PRECISIONS[name]


def get_dtype() -> type:
    return _dtype


def precision_name() -> str:
    return "f64" if _dtype is np.float64 else "f32"


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the global precision."""
    old = precision_name()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(old)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block; results never require gradient."""
    global _grad_enabled
    old, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = old


@contextlib.contextmanager
def record_decisions():
    """Collect the branch pattern of every non-smooth op evaluated in the block.

    Yields a list that fills with one boolean/int array per ReLU, abs,
    recurrent ReLU or bin maximum. Two evaluations with equal patterns lie on
    the same smooth piece of the function.
    """
    global _decisions
    old, _decisions = _decisions, []
    try:
        yield _decisions
    finally:
        _decisions = old


def _note(pattern: np.ndarray) -> None:
    if _decisions is not None:
        _decisions.append(pattern)


class Tensor:
    """A node in the differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        arr = np.asarray(data)
        if arr.dtype != _dtype:
            arr = arr.astype(_dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

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

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Back-propagate from this tensor.

        ``grad`` defaults to 1 for scalars. Gradients accumulate into ``.grad``
        of every leaf and intermediate that requires gradient, so call
        :meth:`zero_grad` on parameters between steps.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without an explicit gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise ShapeError(f"gradient shape {grad.shape} does not match tensor shape {self.shape}")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and not node._parents:
                node._accumulate(g)
            elif node.requires_grad and node._backward is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=_dtype, copy=True), requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        bad = np.argwhere(~np.isfinite(data))[0]
        raise NonFiniteError(f"{op}: non-finite value at index {tuple(int(i) for i in bad)}")
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (),
                  _backward=backward if needs else None)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# elementwise ---------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two equally shaped tensors."""
    _same_shape("hadamard", a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "hadamard")


def scale(a: Tensor, c) -> Tensor:
    """Multiply by a constant scalar or a constant array of the same shape."""
    c = np.asarray(c, dtype=a.data.dtype)
    if c.ndim and c.shape != a.shape:
        raise ShapeError(f"scale: constant shape {c.shape} does not match {a.shape}")
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def shift(a: Tensor, c) -> Tensor:
    """Add a constant scalar or a constant array of the same shape."""
    c = np.asarray(c, dtype=a.data.dtype)
    if c.ndim and c.shape != a.shape:
        raise ShapeError(f"shift: constant shape {c.shape} does not match {a.shape}")
    return _result(a.data + c, (a,), lambda g: (g,), "shift")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split branches so exp never overflows
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _note(mask)
    return _result(np.where(mask, x.data, 0).astype(x.data.dtype), (x,),
                   lambda g: (g * mask,), "relu")


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    _note(sign)
    return _result(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def softplus(x: Tensor) -> Tensor:
    """ln(1 + e^x) evaluated as max(x, 0) + ln(1 + e^-|x|)."""
    xd = x.data
    out = np.maximum(xd, 0) + np.log1p(np.exp(-np.abs(xd)))

    def backward(g):
        s = np.empty_like(xd)
        pos = xd >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
        ex = np.exp(xd[~pos])
        s[~pos] = ex / (1.0 + ex)
        return (g * s,)

    return _result(out, (x,), backward, "softplus")


# reductions and reshaping --------------------------------------------------

def total(x: Tensor) -> Tensor:
    """Sum of all entries, as a 0-d tensor."""
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def flip(x: Tensor, axis: int) -> Tensor:
    return _result(np.flip(x.data, axis=axis).copy(), (x,), lambda g: (np.flip(g, axis=axis).copy(),), "flip")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in xs], axis=axis)

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _result(out, tuple(xs), backward, "concat")


def take(x: Tensor, index, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate gradient."""
    index = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, (slice(None),) * (axis % len(shape)) + (index,), g)
        return (gx,)

    return _result(np.take(x.data, index, axis=axis), (x,), backward, "take")


def symmetric_scatter(values: Tensor, rows, cols, n: int) -> Tensor:
    """Place ``values[k]`` at ``(rows[k], cols[k])`` and ``(cols[k], rows[k])`` of an n x n matrix."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    out = np.zeros((n, n), dtype=values.data.dtype)
    out[rows, cols] = values.data
    out[cols, rows] = values.data
    covered = np.zeros((n, n), dtype=bool)
    covered[rows, cols] = covered[cols, rows] = True
    if not covered.all():
        raise ShapeError("symmetric_scatter: pairs do not cover the whole matrix")
    diag = rows == cols

    def backward(g):
        return (np.where(diag, g[rows, cols], g[rows, cols] + g[cols, rows]),)

    return _result(out, (values,), backward, "symmetric_scatter")


# linear maps ---------------------------------------------------------------

def affine(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """Apply ``W^T x + b`` to the last axis of ``x``.

    ``x`` has shape ``(..., n)``, ``W`` is ``(n, m)`` and ``b`` is ``(m,)``.
    """
    n = x.shape[-1]
    if W.ndim != 2 or W.shape[0] != n:
        raise ShapeError(f"affine: input dim {n} does not match weight shape {W.shape}")
    m = W.shape[1]
    if b is not None and b.shape != (m,):
        raise ShapeError(f"affine: bias shape {b.shape} does not match output dim {m}")
    xd, Wd = x.data, W.data
    out = xd @ Wd
    if b is not None:
        out = out + b.data

    def backward(g):
        g2 = g.reshape(-1, m)
        gx = g @ Wd.T
        gW = xd.reshape(-1, n).T @ g2
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    parents = (x, W) if b is None else (x, W, b)
    return _result(out, parents, backward, "affine")


def l2_normalize(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """Scale every row (last axis) to unit length.

    Rows with zero norm are passed through unchanged; the returned boolean
    array marks them.
    """
    xd = x.data
    norm = np.sqrt(np.sum(xd * xd, axis=-1, keepdims=True))
    degenerate = norm[..., 0] == 0
    safe = np.where(norm == 0, 1, norm)
    y = xd / safe

    def backward(g):
        dot = np.sum(g * y, axis=-1, keepdims=True)
        proj = np.where(norm == 0, 0, dot)
        return ((g - y * proj) / safe,)

    return _result(y, (x,), backward, "l2_normalize"), degenerate


def rowwise_dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product along the last axis."""
    _same_shape("rowwise_dot", a, b)
    ad, bd = a.data, b.data
    out = np.sum(ad * bd, axis=-1)

    def backward(g):
        g = g[..., None]
        return g * bd, g * ad

    return _result(out, (a, b), backward, "rowwise_dot")


def matmul_t(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b.T`` for two matrices with equal row length."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"matmul_t: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd.T, (a, b), lambda g: (g @ bd, g.T @ ad), "matmul_t")


# spatial -------------------------------------------------------------------

def conv2d(x: Tensor, W: Tensor, b: Tensor, stride: int = 1, pad: int | None = None) -> Tensor:
    """2-D convolution on ``(N, H, W, C)`` maps with a ``(kh, kw, C, C_out)`` kernel.

    ``pad`` defaults to ``kh // 2`` zero padding on every side.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d: expected (N, H, W, C) input, got {x.shape}")
    kh, kw, cin, cout = W.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv2d: input channels {x.shape[-1]} do not match kernel {W.shape}")
    if b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match {cout} output channels")
    if pad is None:
        pad = kh // 2
    n, h, w, _ = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} too large for input {h}x{w}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    Wd = W.data
    out = np.zeros((n, ho, wo, cout), dtype=x.data.dtype)
    for p in range(kh):
        for q in range(kw):
            patch = xp[:, p:p + stride * (ho - 1) + 1:stride, q:q + stride * (wo - 1) + 1:stride, :]
            out += patch @ Wd[p, q]
    out += b.data

    def backward(g):
        gxp = np.zeros_like(xp)
        gW = np.zeros_like(Wd)
        g2 = g.reshape(-1, cout)
        for p in range(kh):
            for q in range(kw):
                sl = (slice(None), slice(p, p + stride * (ho - 1) + 1, stride),
                      slice(q, q + stride * (wo - 1) + 1, stride), slice(None))
                gxp[sl] += g @ Wd[p, q].T
                gW[p, q] = xp[sl].reshape(-1, cin).T @ g2
        gx = gxp[:, pad:pad + h, pad:pad + w, :]
        return gx, gW, g2.sum(axis=0)

    return _result(out, (x, W, b), backward, "conv2d")


def spatial_mean_tile(x: Tensor) -> Tensor:
    """Replace every cell of an ``(N, K, K, D)`` map by the map's spatial mean."""
    n, h, w, d = x.shape
    mean = x.data.mean(axis=(1, 2), keepdims=True)
    out = np.broadcast_to(mean, x.shape).copy()

    def backward(g):
        gm = g.sum(axis=(1, 2), keepdims=True) / (h * w)
        return (np.broadcast_to(gm, x.shape).copy(),)

    return _result(out, (x,), backward, "spatial_mean_tile")


def bin_edges(k: int, level: int) -> list[tuple[int, int]]:
    """Cell ranges of the ``level`` x ``level`` pyramid partition of ``k`` cells."""
    edges = []
    for i in range(level):
        start = (i * k) // level
        end = -((-(i + 1) * k) // level)
        edges.append((start, end))
    return edges


def bin_max(x: Tensor, level: int) -> Tensor:
    """Max over each bin of a ``level`` x ``level`` partition, shape ``(N, level, level, D)``."""
    n, h, w, d = x.shape
    if level < 1 or level > min(h, w):
        raise ShapeError(f"bin_max: level {level} invalid for a {h}x{w} grid")
    xd = x.data
    out = np.empty((n, level, level, d), dtype=xd.dtype)
    arg = []
    rows, cols = bin_edges(h, level), bin_edges(w, level)
    for bi, (r0, r1) in enumerate(rows):
        for bj, (c0, c1) in enumerate(cols):
            block = xd[:, r0:r1, c0:c1, :].reshape(n, -1, d)
            idx = block.argmax(axis=1)
            out[:, bi, bj, :] = np.take_along_axis(block, idx[:, None, :], axis=1)[:, 0, :]
            arg.append((bi, bj, r0, r1, c0, c1, idx))
            _note(idx)

    def backward(g):
        gx = np.zeros_like(xd)
        for bi, bj, r0, r1, c0, c1, idx in arg:
            bw = c1 - c0
            gb = np.zeros((n, (r1 - r0) * bw, d), dtype=g.dtype)
            np.put_along_axis(gb, idx[:, None, :], g[:, bi, bj, :][:, None, :], axis=1)
            gx[:, r0:r1, c0:c1, :] += gb.reshape(n, r1 - r0, bw, d)
        return (gx,)

    return _result(out, (x,), backward, "bin_max")


def bin_unpool(x: Tensor, k: int) -> Tensor:
    """Spread an ``(N, L, L, D)`` bin grid back over a ``k`` x ``k`` map."""
    n, level, _, d = x.shape
    edges = bin_edges(k, level)
    owner = np.empty(k, dtype=np.int64)
    for i, (s, e) in enumerate(edges):
        owner[s:e] = i
    out = x.data[:, owner][:, :, owner]

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(gx, (slice(None), owner[:, None], owner[None, :]), g)
        return (gx,)

    return _result(out, (x,), backward, "bin_unpool")


# four directional recurrence ----------------------------------------------

DIRECTIONS = ("left_to_right", "right_to_left", "top_to_bottom", "bottom_to_top")


def _to_canonical(a: np.ndarray, direction: str) -> np.ndarray:
    """View ``(N, K, K, H)`` so the sweep runs along axis 2 in increasing order."""
    if direction == "left_to_right":
        return a
    if direction == "right_to_left":
        return a[:, :, ::-1]
    if direction == "top_to_bottom":
        return a.transpose(0, 2, 1, 3)
    if direction == "bottom_to_top":
        return a.transpose(0, 2, 1, 3)[:, :, ::-1]
    raise ValueError(f"unknown direction {direction!r}; expected one of {DIRECTIONS}")


def irnn_sweep(x: Tensor, W_hh: Tensor, direction: str) -> Tensor:
    """ReLU recurrence across an ``(N, K, K, H)`` map in one direction.

    Each cell's state is ``max(h_prev @ W_hh + x_cell, 0)`` where ``h_prev``
    is the state of the neighbouring cell the sweep came from, and zero on
    the boundary.
    """
    if x.ndim != 4:
        raise ShapeError(f"irnn_sweep: expected (N, K, K, H) input, got {x.shape}")
    hdim = x.shape[-1]
    if W_hh.shape != (hdim, hdim):
        raise ShapeError(f"irnn_sweep: hidden size {hdim} does not match recurrent matrix {W_hh.shape}")
    xc = _to_canonical(x.data, direction)
    Wd = W_hh.data
    steps = xc.shape[2]
    out = np.empty(x.shape, dtype=x.data.dtype)
    hc = _to_canonical(out, direction)  # writable view into out
    pre = np.empty_like(hc)
    h_prev = np.zeros(xc[:, :, 0].shape, dtype=x.data.dtype)
    for j in range(steps):
        z = h_prev @ Wd + xc[:, :, j]
        pre[:, :, j] = z
        h_prev = np.maximum(z, 0)
        hc[:, :, j] = h_prev
    _note(pre > 0)

    def backward(g):
        gc = _to_canonical(g, direction)
        gx = np.empty(x.shape, dtype=g.dtype)
        gxc = _to_canonical(gx, direction)
        gW = np.zeros_like(Wd)
        carry = np.zeros_like(h_prev)
        for j in range(steps - 1, -1, -1):
            dz = (gc[:, :, j] + carry) * (pre[:, :, j] > 0)
            gxc[:, :, j] = dz
            if j > 0:
                hp = hc[:, :, j - 1]
                gW += hp.reshape(-1, hdim).T @ dz.reshape(-1, hdim)
                carry = dz @ Wd.T
        return gx, gW

    return _result(out, (x, W_hh), backward, "irnn_sweep")
