"""Multiplicative integration gating of two activation maps.

At every spatial location the two feature vectors are embedded by their own
linear maps, multiplied elementwise, and projected back:

    linear:  F = P^T ((U^T a + b_A) * (V^T b + b_B)) + b
    gated:   F = P^T (sigmoid(U^T a + b_A) * sigmoid(V^T b + b_B)) + b

Because each factor scales the other's gradient, the backward pass of one
stream is conditioned on the other stream's features.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

MODES = ("linear", "gated")


class ActivationMap:
    """A square ``K x K x D`` feature grid.

    ``values`` may carry a leading batch axis, i.e. ``(N, K, K, D)``; that is
    how every layer in this package consumes them.
    """

    def __init__(self, values):
        t = T.as_tensor(values)
        if t.ndim not in (3, 4):
            raise ShapeError(f"activation map must be K x K x D (optionally batched), got {t.shape}")
        h, w, d = t.shape[-3:]
        if h != w:
            raise ShapeError(f"activation map must be square, got {h}x{w}")
        if d < 1:
            raise ShapeError("activation map needs at least one channel")
        self.values = t

    @property
    def K(self) -> int:
        return self.values.shape[-2]

    @property
    def D(self) -> int:
        return self.values.shape[-1]

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def batched(self) -> Tensor:
        v = self.values
        return v if v.ndim == 4 else T.reshape(v, (1,) + v.shape)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


@dataclass
class MIGateParams:
    U: Tensor
    V: Tensor
    b_A: Tensor
    b_B: Tensor
    P: Tensor
    b: Tensor
    mode: str = "gated"
    tied: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"gate mode must be one of {MODES}, got {self.mode!r}")
        D, d = self.U.shape
        if d < 1:
            raise ShapeError("joint embedding dimension d must be >= 1")
        expected = {"V": (D, d), "b_A": (d,), "b_B": (d,), "P": (d, D), "b": (D,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"gate parameter {name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def D(self) -> int:
        return self.U.shape[0]

    @property
    def d(self) -> int:
        return self.U.shape[1]

    @classmethod
    def init(cls, D: int, d: int | None = None, mode: str = "gated", tied: bool = False,
             rng: np.random.Generator | None = None) -> "MIGateParams":
        """Glorot-uniform embeddings and projection, zero biases.

        With ``tied`` the second stream reuses the first stream's embedding,
        which makes the gate symmetric in its two inputs.
        """
        rng = rng if rng is not None else np.random.default_rng(0)
        d = D if d is None else d
        U = T.parameter(glorot(rng, D, d), "gate.U")
        V = U if tied else T.parameter(glorot(rng, D, d), "gate.V")
        b_A = T.parameter(np.zeros(d), "gate.b_A")
        b_B = b_A if tied else T.parameter(np.zeros(d), "gate.b_B")
        P = T.parameter(glorot(rng, d, D), "gate.P")
        b = T.parameter(np.zeros(D), "gate.b")
        return cls(U, V, b_A, b_B, P, b, mode=mode, tied=tied)

    def parameters(self) -> dict[str, Tensor]:
        if self.tied:
            return {"U": self.U, "b_A": self.b_A, "P": self.P, "b": self.b}
        return {"U": self.U, "V": self.V, "b_A": self.b_A, "b_B": self.b_B, "P": self.P, "b": self.b}

    def count(self) -> dict[str, int]:
        return {k: int(v.data.size) for k, v in self.parameters().items()}


def mi_forward(gA, gB, params: MIGateParams) -> Tensor:
    """Fuse two equally shaped activation maps location by location."""
    a = gA.values if isinstance(gA, ActivationMap) else gA
    b = gB.values if isinstance(gB, ActivationMap) else gB
    if a.shape != b.shape:
        raise ShapeError(f"gate inputs differ in shape: {a.shape} vs {b.shape}")
    if a.shape[-1] != params.D:
        raise ShapeError(f"gate expects {params.D} channels, inputs have {a.shape[-1]}")
    ea = T.affine(a, params.U, params.b_A)
    eb = T.affine(b, params.V, params.b_B)
    if params.mode == "gated":
        ea, eb = T.sigmoid(ea), T.sigmoid(eb)
    return T.affine(T.hadamard(ea, eb), params.P, params.b)


def joint_embedding(gA: Tensor, gB: Tensor, params: MIGateParams) -> Tensor:
    """The elementwise product before projection (bounded in (0, 1) in gated mode)."""
    ea = T.affine(gA, params.U, params.b_A)
    eb = T.affine(gB, params.V, params.b_B)
    if params.mode == "gated":
        ea, eb = T.sigmoid(ea), T.sigmoid(eb)
    return T.hadamard(ea, eb)


def mi_backward_closed_form(gA, gB, params: MIGateParams, upstream) -> tuple[np.ndarray, np.ndarray, dict[str, np.ndarray]]:
    """Hand-derived gradients of the linear gate with zero embedding biases and ``P = I``.

    Per location, with ``G = dL/dF``:
    ``dL/dgA = U diag(V^T gB) G`` and ``dL/dgB = V diag(U^T gA) G``.
    The second factor uses ``gA``; the symmetric chain rule leaves no other option.
    """
    a = np.asarray(gA.values.data if isinstance(gA, ActivationMap) else getattr(gA, "data", gA))
    b = np.asarray(gB.values.data if isinstance(gB, ActivationMap) else getattr(gB, "data", gB))
    G = np.asarray(getattr(upstream, "data", upstream))
    if params.mode != "linear":
        raise ValueError("closed-form gate backward only holds in linear mode")
    if np.any(params.b_A.data != 0) or np.any(params.b_B.data != 0):
        raise ValueError("closed-form gate backward requires zero embedding biases")
    if params.P.shape[0] != params.P.shape[1] or not np.array_equal(params.P.data, np.eye(params.P.shape[0])):
        raise ValueError("closed-form gate backward requires P = I")
    U, V = params.U.data, params.V.data
    ua = a @ U
    vb = b @ V
    dgA = (G * vb) @ U.T
    dgB = (G * ua) @ V.T
    flat = lambda x: x.reshape(-1, x.shape[-1])
    dU = flat(a).T @ flat(G * vb)
    dV = flat(b).T @ flat(G * ua)
    grads = {
        "U": dU,
        "V": dV,
        "b_A": flat(G * vb).sum(axis=0),
        "b_B": flat(G * ua).sum(axis=0),
        "P": flat(ua * vb).T @ flat(G),
        "b": flat(G).sum(axis=0),
    }
    return dgA, dgB, grads


@dataclass
class ConcatFusionParams:
    """Ablation of the gate: project the channel concatenation of both streams."""

    P: Tensor
    b: Tensor

    @classmethod
    def init(cls, D: int, rng: np.random.Generator | None = None) -> "ConcatFusionParams":
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls(T.parameter(glorot(rng, 2 * D, D), "concat.P"), T.parameter(np.zeros(D), "concat.b"))

    def parameters(self) -> dict[str, Tensor]:
        return {"P": self.P, "b": self.b}

    def count(self) -> dict[str, int]:
        return {k: int(v.data.size) for k, v in self.parameters().items()}


def concat_forward(gA: Tensor, gB: Tensor, params: ConcatFusionParams) -> Tensor:
    if gA.shape != gB.shape:
        raise ShapeError(f"fusion inputs differ in shape: {gA.shape} vs {gB.shape}")
    return T.affine(T.concat([gA, gB], axis=-1), params.P, params.b)
