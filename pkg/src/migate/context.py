"""Spatial context models applied on top of the fused feature map.

The main model stacks two four-directional IRNN layers. Each layer projects
its input with a shared 1x1 convolution, sweeps ReLU recurrences left, right,
up and down across the grid, concatenates the four hidden states per cell and
mixes them back down with another 1x1 convolution. After one layer a cell
sees its row and column; after two it sees the whole grid.

Three alternatives share the same ``forward(F, training, rng)`` interface:
global average + unpool, two stacked 3x3 convolutions, and a spatial pyramid
whose per-bin maxima are spread back over their bins.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import tensor as T
from .gate import glorot
from .tensor import ShapeError, Tensor

CONTEXT_MODELS = ("irnn2", "spp", "global_avg", "stacked_conv")


class Direction(str, Enum):
    LEFT_TO_RIGHT = "left_to_right"
    RIGHT_TO_LEFT = "right_to_left"
    TOP_TO_BOTTOM = "top_to_bottom"
    BOTTOM_TO_TOP = "bottom_to_top"


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    x = T.as_tensor(x)
    return (T.reshape(x, (1,) + x.shape), True) if x.ndim == 3 else (x, False)


def irnn_sweep(x: Tensor, direction: Direction | str, W_hh: Tensor) -> Tensor:
    """One directional sweep over a ``K x K x H`` map or an ``(N, K, K, H)`` batch."""
    xb, single = _batched(x)
    out = T.irnn_sweep(xb, W_hh, Direction(direction).value)
    return T.reshape(out, out.shape[1:]) if single else out


@dataclass
class IRNNLayerParams:
    W_in: Tensor
    b_in: Tensor
    W_hh: dict[str, Tensor]
    W_mix: Tensor
    b_mix: Tensor

    @property
    def hidden(self) -> int:
        return self.W_in.shape[1]

    @property
    def c_in(self) -> int:
        return self.W_in.shape[0]

    @property
    def c_out(self) -> int:
        return self.W_mix.shape[1]

    @classmethod
    def init(cls, c_in: int, hidden: int = 512, c_out: int | None = None,
             rng: np.random.Generator | None = None, prefix: str = "irnn") -> "IRNNLayerParams":
        """Recurrent matrices start at the identity; 1x1 maps are Glorot-uniform."""
        rng = rng if rng is not None else np.random.default_rng(0)
        c_out = hidden if c_out is None else c_out
        W_hh = {d.value: T.parameter(np.eye(hidden), f"{prefix}.W_hh.{d.value}") for d in Direction}
        return cls(
            W_in=T.parameter(glorot(rng, c_in, hidden), f"{prefix}.W_in"),
            b_in=T.parameter(np.zeros(hidden), f"{prefix}.b_in"),
            W_hh=W_hh,
            W_mix=T.parameter(glorot(rng, 4 * hidden, c_out), f"{prefix}.W_mix"),
            b_mix=T.parameter(np.zeros(c_out), f"{prefix}.b_mix"),
        )

    def parameters(self) -> dict[str, Tensor]:
        out = {"W_in": self.W_in, "b_in": self.b_in}
        out.update({f"W_hh.{k}": v for k, v in self.W_hh.items()})
        out.update({"W_mix": self.W_mix, "b_mix": self.b_mix})
        return out


def four_dir_layer(x: Tensor, params: IRNNLayerParams) -> Tensor:
    x, single = _batched(x)
    if x.ndim != 4:
        raise ShapeError(f"four_dir_layer expects (N, K, K, C), got {x.shape}")
    if x.shape[-1] != params.c_in:
        raise ShapeError(f"four_dir_layer expects {params.c_in} input channels, got {x.shape[-1]}")
    z = T.affine(x, params.W_in, params.b_in)
    states = [irnn_sweep(z, d, params.W_hh[d.value]) for d in Direction]
    out = T.affine(T.concat(states, axis=-1), params.W_mix, params.b_mix)
    return T.reshape(out, out.shape[1:]) if single else out


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero with probability ``p``, scale survivors by 1/(1-p)."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0:
        return x
    keep = rng.random(x.shape) >= p
    return T.scale(x, keep / (1.0 - p))


def stacked_irnn_pool(F: Tensor, layer1: IRNNLayerParams, layer2: IRNNLayerParams,
                      dropout_p: float = 0.5, training: bool = False,
                      rng: np.random.Generator | None = None) -> Tensor:
    if layer2.c_out != F.shape[-1]:
        raise ShapeError(f"second IRNN layer must output {F.shape[-1]} channels, has {layer2.c_out}")
    h = four_dir_layer(F, layer1)
    if training and dropout_p > 0:
        h = dropout(h, dropout_p, rng)
    h = four_dir_layer(h, layer2)
    if training and dropout_p > 0:
        h = dropout(h, dropout_p, rng)
    return h


@dataclass
class SPPConfig:
    levels: list[int] = field(default_factory=lambda: [1, 2])

    def __post_init__(self):
        if not self.levels or any(l < 1 for l in self.levels):
            raise ValueError(f"pyramid levels must be a non-empty list of positive ints, got {self.levels}")


def spp_pool(F: Tensor, cfg: SPPConfig | None = None) -> Tensor:
    """Fixed-length pyramid descriptor of shape ``(N, D * sum(L^2))``.

    Each level's bins are flattened row-major, channel fastest.
    """
    cfg = cfg or SPPConfig()
    if F.ndim == 3:
        F = T.reshape(F, (1,) + F.shape)
    k = F.shape[1]
    if max(cfg.levels) > k:
        raise ShapeError(f"pyramid level {max(cfg.levels)} exceeds grid size {k}")
    n = F.shape[0]
    parts = [T.reshape(T.bin_max(F, level), (n, -1)) for level in cfg.levels]
    return T.concat(parts, axis=-1)


def global_avg_unpool(F: Tensor) -> Tensor:
    return T.spatial_mean_tile(F)


def stacked_conv_context(F: Tensor, kernels: list[tuple[Tensor, Tensor]]) -> Tensor:
    """Two 3x3 same-padded convolutions, each followed by ReLU."""
    if F.shape[1] < 5:
        raise ShapeError(f"stacked 3x3 context needs K >= 5, got K={F.shape[1]}")
    h = F
    for W, b in kernels:
        if W.shape[:2] != (3, 3):
            raise ShapeError(f"stacked context expects 3x3 kernels, got {W.shape[:2]}")
        h = T.relu(T.conv2d(h, W, b, stride=1, pad=1))
    return h


class IRNNContext:
    name = "irnn2"

    def __init__(self, D: int, hidden: int = 512, mid: int | None = None, dropout_p: float = 0.5,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        mid = hidden if mid is None else mid
        self.dropout_p = dropout_p
        self.layer1 = IRNNLayerParams.init(D, hidden, mid, rng, prefix="irnn1")
        self.layer2 = IRNNLayerParams.init(mid, hidden, D, rng, prefix="irnn2")

    def forward(self, F: Tensor, training: bool = False, rng=None) -> Tensor:
        return stacked_irnn_pool(F, self.layer1, self.layer2, self.dropout_p, training, rng)

    def sections(self) -> dict[str, dict[str, Tensor]]:
        return {"irnn1": self.layer1.parameters(), "irnn2": self.layer2.parameters()}


class GlobalAvgContext:
    name = "global_avg"

    def __init__(self, D: int, **_):
        pass

    def forward(self, F: Tensor, training: bool = False, rng=None) -> Tensor:
        return global_avg_unpool(F)

    def sections(self) -> dict[str, dict[str, Tensor]]:
        return {}


class StackedConvContext:
    name = "stacked_conv"

    def __init__(self, D: int, rng: np.random.Generator | None = None, **_):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.kernels = []
        for i in range(2):
            W = T.parameter(glorot(rng, 9 * D, 9 * D, (3, 3, D, D)), f"conv_ctx{i}.W")
            self.kernels.append((W, T.parameter(np.zeros(D), f"conv_ctx{i}.b")))

    def forward(self, F: Tensor, training: bool = False, rng=None) -> Tensor:
        return stacked_conv_context(F, self.kernels)

    def sections(self) -> dict[str, dict[str, Tensor]]:
        params = {}
        for i, (W, b) in enumerate(self.kernels):
            params[f"W{i}"], params[f"b{i}"] = W, b
        return {"context": params}


class SPPContext:
    """Pyramid maxima spread back over their bins and mixed by a 1x1 convolution."""

    name = "spp"

    def __init__(self, D: int, levels: list[int] | None = None, rng: np.random.Generator | None = None, **_):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = SPPConfig(list(levels) if levels else [1, 2])
        width = D * len(self.cfg.levels)
        self.W_mix = T.parameter(glorot(rng, width, D), "spp.W_mix")
        self.b_mix = T.parameter(np.zeros(D), "spp.b_mix")

    def forward(self, F: Tensor, training: bool = False, rng=None) -> Tensor:
        k = F.shape[1]
        if max(self.cfg.levels) > k:
            raise ShapeError(f"pyramid level {max(self.cfg.levels)} exceeds grid size {k}")
        maps = [T.bin_unpool(T.bin_max(F, level), k) for level in self.cfg.levels]
        return T.affine(T.concat(maps, axis=-1), self.W_mix, self.b_mix)

    def sections(self) -> dict[str, dict[str, Tensor]]:
        return {"context": {"W_mix": self.W_mix, "b_mix": self.b_mix}}


def build_context(name: str, D: int, hidden: int = 512, mid: int | None = None, dropout_p: float = 0.5,
                  spp_levels: list[int] | None = None, rng: np.random.Generator | None = None):
    if name == "irnn2":
        return IRNNContext(D, hidden, mid, dropout_p, rng)
    if name == "global_avg":
        return GlobalAvgContext(D)
    if name == "stacked_conv":
        return StackedConvContext(D, rng=rng)
    if name == "spp":
        return SPPContext(D, spp_levels, rng=rng)
    raise ValueError(f"unknown context model {name!r}; expected one of {CONTEXT_MODELS}")
