"""Pair embeddings, cosine scores and the weighted binomial deviance loss."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .gate import glorot
from .tensor import ShapeError, Tensor


class DegenerateEmbeddingWarning(RuntimeWarning):
    """An embedding was exactly zero and could not be normalized."""


class BatchConstructionError(ValueError):
    """A batch lacks positive or negative pairs, so the loss weights are undefined."""


@dataclass
class HeadParams:
    W_fc: Tensor
    b_fc: Tensor

    def __post_init__(self):
        if self.W_fc.shape[1] < 2:
            raise ShapeError("embedding dimension must be at least 2")
        if self.b_fc.shape != (self.W_fc.shape[1],):
            raise ShapeError(f"head bias {self.b_fc.shape} does not match W_fc {self.W_fc.shape}")

    @property
    def E(self) -> int:
        return self.W_fc.shape[1]

    @classmethod
    def init(cls, K: int, D: int, E: int = 512, rng: np.random.Generator | None = None) -> "HeadParams":
        rng = rng if rng is not None else np.random.default_rng(0)
        n = K * K * D
        return cls(T.parameter(glorot(rng, n, E), "head.W_fc"), T.parameter(np.zeros(E), "head.b_fc"))

    def parameters(self) -> dict[str, Tensor]:
        return {"W_fc": self.W_fc, "b_fc": self.b_fc}


def residual_embed(g: Tensor, F_ctx: Tensor, head: HeadParams) -> Tensor:
    """Project the flattened ``|g - F_ctx|`` map and scale it to unit length.

    Accepts single ``K x K x D`` maps or ``(N, K, K, D)`` batches. A zero
    projection is returned as is, with a :class:`DegenerateEmbeddingWarning`.
    """
    if g.shape != F_ctx.shape:
        raise ShapeError(f"residual_embed: shapes differ, {g.shape} vs {F_ctx.shape}")
    single = g.ndim == 3
    n = 1 if single else g.shape[0]
    flat = T.reshape(T.absolute(T.sub(g, F_ctx)), (n, -1))
    if flat.shape[1] != head.W_fc.shape[0]:
        raise ShapeError(f"residual_embed: {flat.shape[1]} features, head expects {head.W_fc.shape[0]}")
    e, degenerate = T.l2_normalize(T.affine(flat, head.W_fc, head.b_fc))
    if degenerate.any():
        warnings.warn(f"{int(degenerate.sum())} zero embedding(s) left unnormalized", DegenerateEmbeddingWarning,
                      stacklevel=2)
    return T.reshape(e, (head.E,)) if single else e


def cosine_similarity_matrix(embA, embB) -> Tensor:
    """``S[i, j] = <a_i, b_j> / (|a_i| |b_j|)`` for two stacks of vectors."""
    a = T.as_tensor(embA) if not isinstance(embA, (list, tuple)) else T.as_tensor(np.stack(embA))
    b = T.as_tensor(embB) if not isinstance(embB, (list, tuple)) else T.as_tensor(np.stack(embB))
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_similarity_matrix: incompatible shapes {a.shape} and {b.shape}")
    for label, t in (("A", a), ("B", b)):
        zero = np.flatnonzero(~np.any(t.data != 0, axis=1))
        if zero.size:
            raise ValueError(f"cosine similarity undefined: vector {label}[{zero[0]}] is zero")
    na, _ = T.l2_normalize(a)
    nb, _ = T.l2_normalize(b)
    return T.matmul_t(na, nb)


def rowwise_cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of matching rows of two ``(N, E)`` stacks."""
    na, _ = T.l2_normalize(a)
    nb, _ = T.l2_normalize(b)
    return T.rowwise_dot(na, nb)


@dataclass
class LossConfig:
    alpha: float = 2.0
    beta: float = 0.5

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")


@dataclass
class Supervision:
    M: np.ndarray
    W: np.ndarray
    n1: int
    n2: int

    @classmethod
    def from_labels(cls, labels) -> "Supervision":
        """+1 for same identity, -1 otherwise; weights 1/n1 and 1/n2 over all n x n entries."""
        labels = np.asarray(labels)
        same = labels[:, None] == labels[None, :]
        M = np.where(same, 1.0, -1.0)
        n1, n2 = int(same.sum()), int((~same).sum())
        if n1 == 0 or n2 == 0:
            raise BatchConstructionError(f"batch has {n1} positive and {n2} negative pairs; both must be >= 1")
        W = np.where(same, 1.0 / n1, 1.0 / n2)
        return cls(M, W, n1, n2)


def binomial_deviance_loss(S: Tensor, sup: Supervision, cfg: LossConfig | None = None) -> Tensor:
    """``sum W * ln(1 + exp(-alpha (S - beta) M))`` with a stable softplus."""
    cfg = cfg or LossConfig()
    S = T.as_tensor(S)
    if S.shape != sup.M.shape:
        raise ShapeError(f"score matrix {S.shape} does not match supervision {sup.M.shape}")
    if sup.n1 < 1 or sup.n2 < 1:
        raise BatchConstructionError("loss weights undefined without both positive and negative pairs")
    z = T.scale(T.shift(S, -cfg.beta), -cfg.alpha * sup.M)
    return T.total(T.scale(T.softplus(z), sup.W))


def loss_gradient_closed_form(S: np.ndarray, sup: Supervision, cfg: LossConfig | None = None) -> np.ndarray:
    """``dL/dS = -W * alpha * M * sigmoid(-alpha (S - beta) M)``."""
    cfg = cfg or LossConfig()
    z = -cfg.alpha * (np.asarray(S) - cfg.beta) * sup.M
    return -sup.W * cfg.alpha * sup.M * (0.5 * (1 + np.tanh(0.5 * z)))
