"""Finite-difference suites, one per module plus the full network.

Each suite builds a small random problem in 64-bit precision and returns a
:class:`GradCheckReport`. Seeds are fixed; the defaults were chosen so that no
ReLU or absolute-value kink lies within ``eps`` of the evaluation point.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .context import IRNNLayerParams, SPPConfig, spp_pool, stacked_irnn_pool
from .encoder import ConvSpec, Encoder, EncoderConfig
from .gate import MIGateParams, mi_forward
from .gradcheck import GradCheckReport, grad_check
from .head import HeadParams, LossConfig, Supervision, binomial_deviance_loss, residual_embed, rowwise_cosine
from .model import MatchingModel, ModelConfig, upper_pairs


def _probe(x: T.Tensor, rng: np.random.Generator) -> T.Tensor:
    # random linear read-out so every output entry reaches the loss
    return T.total(T.hadamard(x, T.constant(rng.normal(size=x.shape))))


def check_tensor_core(seed: int = 0) -> GradCheckReport:
    rng = np.random.default_rng([seed, 101])
    x = T.parameter(rng.normal(size=(3, 4)), "x")
    W = T.parameter(rng.normal(size=(4, 5)), "W")
    b = T.parameter(rng.normal(size=5), "b")
    r = rng.normal(size=(3, 5))

    def f():
        h = T.affine(x, W, b)
        h = T.add(T.sigmoid(h), T.softplus(T.scale(h, 0.5)))
        return T.total(T.hadamard(T.absolute(h), T.constant(r)))

    return grad_check(f, {"x": x, "W": W, "b": b})


def check_mi_gate(seed: int = 0) -> GradCheckReport:
    rng = np.random.default_rng([seed, 102])
    D = 3
    gA = T.parameter(rng.normal(size=(2, 3, 3, D)), "gA")
    gB = T.parameter(rng.normal(size=(2, 3, 3, D)), "gB")
    params = MIGateParams.init(D, mode="gated", rng=rng)
    for p in params.parameters().values():
        p.data += 0.1 * rng.normal(size=p.shape)

    def f():
        return _probe(mi_forward(gA, gB, params), np.random.default_rng([seed, 103]))

    return grad_check(f, {"gA": gA, "gB": gB, **params.parameters()})


def check_spatial_context(seed: int = 0) -> GradCheckReport:
    rng = np.random.default_rng([seed, 104])
    F = T.parameter(rng.uniform(0.1, 1.0, size=(1, 3, 3, 2)), "F")
    l1 = IRNNLayerParams.init(2, 3, 2, rng, "irnn1")
    l2 = IRNNLayerParams.init(2, 3, 2, rng, "irnn2")
    for layer in (l1, l2):
        for p in layer.parameters().values():
            p.data += 0.05 * rng.normal(size=p.shape)
        layer.b_in.data += 0.5

    def f():
        ctx = stacked_irnn_pool(F, l1, l2, dropout_p=0.0)
        spp = spp_pool(F, SPPConfig([1, 2]))
        out_rng = np.random.default_rng([seed, 105])
        return T.add(_probe(ctx, out_rng), _probe(spp, out_rng))

    params = {"F": F, **{f"irnn1.{k}": v for k, v in l1.parameters().items()},
              **{f"irnn2.{k}": v for k, v in l2.parameters().items()}}
    return grad_check(f, params)


def check_encoder(seed: int = 0) -> GradCheckReport:
    rng = np.random.default_rng([seed, 106])
    cfg = EncoderConfig((6, 6, 2), (ConvSpec(3, 2, 3), ConvSpec(3, 1, 2, relu=False)), K=3, D=2)
    enc = Encoder(cfg, rng)
    images = rng.uniform(-1, 1, size=(2, 6, 6, 2))

    def f():
        return _probe(enc.encode_a(images), np.random.default_rng([seed, 107]))

    return grad_check(f, enc.sections()["encoder"])


def check_matching_head(seed: int = 0) -> GradCheckReport:
    rng = np.random.default_rng([seed, 108])
    K, D, n = 2, 3, 4
    g = T.parameter(rng.normal(size=(n, K, K, D)), "g")
    head = HeadParams.init(K, D, 4, rng)
    labels = np.array([0, 0, 1, 1])
    sup = Supervision.from_labels(labels)
    rows, cols = upper_pairs(n)
    ctx = rng.normal(size=(len(rows), K, K, D))

    def f():
        F_ctx = T.constant(ctx)
        eA = residual_embed(T.take(g, rows), F_ctx, head)
        eB = residual_embed(T.take(g, cols), F_ctx, head)
        S = T.symmetric_scatter(rowwise_cosine(eA, eB), rows, cols, n)
        return binomial_deviance_loss(S, sup, LossConfig())

    return grad_check(f, {"g": g, **head.parameters()})


def composite_model(seed: int = 0) -> tuple[MatchingModel, np.ndarray, np.ndarray]:
    """The micro network used for the end-to-end check: two pairs of 8x8 images."""
    enc = EncoderConfig((8, 8, 3), (ConvSpec(3, 2, 3),), K=4, D=3)
    cfg = ModelConfig(encoder=enc, context="irnn2", hidden=4, mid_channels=3, dropout=0.0, embed_dim=4)
    model = MatchingModel(cfg, seed=seed)
    images = np.random.default_rng(seed).uniform(-1, 1, size=(4, 8, 8, 3))
    return model, images, np.array([0, 0, 1, 1])


def check_composite(seed: int = 0) -> GradCheckReport:
    model, images, labels = composite_model(seed)

    def f():
        return model.batch_loss(images, labels)[0]

    return grad_check(f, model.parameters())


SUITES: dict[str, Callable[..., GradCheckReport]] = {
    "tensor-core": check_tensor_core,
    "mi-gate": check_mi_gate,
    "spatial-context": check_spatial_context,
    "encoder": check_encoder,
    "matching-head": check_matching_head,
    "composite": check_composite,
}


def run_all(seed: int = 0, tol: float = 1e-5) -> dict[str, GradCheckReport]:
    """Run every suite in 64-bit precision; reports keyed by module name."""
    out = {}
    with T.precision("f64"):
        for name, suite in SUITES.items():
            rep = suite(seed)
            rep.tol = tol
            out[name] = rep
    return out
