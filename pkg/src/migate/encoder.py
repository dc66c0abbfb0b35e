"""Small convolutional encoders producing ``K x K x D`` activation maps."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .formats import load_activation_map, save_activation_map  # noqa: F401  re-exported
from .gate import ActivationMap
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class ConvSpec:
    kernel: int
    stride: int
    channels: int
    relu: bool = True

    @classmethod
    def parse(cls, text: str) -> "ConvSpec":
        """``kernel:stride:channels`` with an optional ``:linear`` suffix."""
        parts = text.strip().split(":")
        if len(parts) not in (3, 4):
            raise ValueError(f"conv layer {text!r} must look like kernel:stride:channels[:linear]")
        relu = True
        if len(parts) == 4:
            if parts[3] != "linear":
                raise ValueError(f"unknown conv layer flag {parts[3]!r}")
            relu = False
        return cls(int(parts[0]), int(parts[1]), int(parts[2]), relu)

    def __str__(self) -> str:
        return f"{self.kernel}:{self.stride}:{self.channels}" + ("" if self.relu else ":linear")


def _default_layers() -> tuple[ConvSpec, ...]:
    return (ConvSpec(3, 2, 16), ConvSpec(3, 2, 32), ConvSpec(3, 2, 64), ConvSpec(3, 1, 64))


@dataclass
class EncoderConfig:
    input_size: tuple[int, int, int] = (64, 64, 3)
    layers: tuple[ConvSpec, ...] = field(default_factory=_default_layers)
    K: int = 8
    D: int = 64
    shared_streams: bool = True

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.layers = tuple(l if isinstance(l, ConvSpec) else ConvSpec.parse(l) for l in self.layers)
        if not self.layers:
            raise ValueError("encoder needs at least one conv layer")
        h, w, _ = self.input_size
        for spec in self.layers:
            pad = spec.kernel // 2
            h = (h + 2 * pad - spec.kernel) // spec.stride + 1
            w = (w + 2 * pad - spec.kernel) // spec.stride + 1
            if h < 1 or w < 1:
                raise ValueError(f"conv stack collapses the {self.input_size[:2]} input at layer {spec}")
        d = self.layers[-1].channels
        if (h, w, d) != (self.K, self.K, self.D):
            raise ValueError(f"conv stack yields {h}x{w}x{d}, configured output is {self.K}x{self.K}x{self.D}")


class ConvStream:
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, prefix: str):
        self.layers = []
        cin = cfg.input_size[2]
        for i, spec in enumerate(cfg.layers):
            fan_in = spec.kernel * spec.kernel * cin
            # He-uniform keeps activation scale through the ReLU stack
            limit = np.sqrt(6.0 / fan_in)
            W = T.parameter(rng.uniform(-limit, limit, (spec.kernel, spec.kernel, cin, spec.channels)),
                            f"{prefix}.conv{i}.W")
            b = T.parameter(np.zeros(spec.channels), f"{prefix}.conv{i}.b")
            self.layers.append((spec, W, b))
            cin = spec.channels

    def __call__(self, images: Tensor) -> Tensor:
        h = images
        for spec, W, b in self.layers:
            h = T.conv2d(h, W, b, stride=spec.stride)
            if spec.relu:
                h = T.relu(h)
        return h

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, (_, W, b) in enumerate(self.layers):
            out[f"conv{i}.W"], out[f"conv{i}.b"] = W, b
        return out


class Encoder:
    """One or two convolutional streams.

    With ``shared_streams`` both images go through the same parameters, so
    their gradient contributions add up in one place.
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.stream_a = ConvStream(cfg, rng, "enc_a")
        self.stream_b = self.stream_a if cfg.shared_streams else ConvStream(cfg, rng, "enc_b")
        self.mean = np.zeros(cfg.input_size[2])

    def _check(self, images: Tensor) -> Tensor:
        if images.ndim == 3:
            images = T.reshape(images, (1,) + images.shape)
        if images.shape[1:] != self.cfg.input_size:
            raise ShapeError(f"encoder expects images of shape {self.cfg.input_size}, got {images.shape[1:]}")
        return images

    def encode_a(self, images) -> Tensor:
        return self.stream_a(self._check(T.as_tensor(images)))

    def encode_b(self, images) -> Tensor:
        return self.stream_b(self._check(T.as_tensor(images)))

    def normalize(self, images_u8: np.ndarray) -> np.ndarray:
        """Scale 8-bit pixels to [0, 1] and subtract the per-channel mean."""
        return np.asarray(images_u8, dtype=T.get_dtype()) / 255.0 - self.mean.astype(T.get_dtype())

    def sections(self) -> dict[str, dict[str, Tensor]]:
        out = {"encoder": {f"a.{k}": v for k, v in self.stream_a.parameters().items()}}
        if not self.cfg.shared_streams:
            out["encoder"].update({f"b.{k}": v for k, v in self.stream_b.parameters().items()})
        return out


def encode(image, cfg: EncoderConfig, params: Encoder, stream: str = "a") -> ActivationMap:
    """Run one normalized ``H x W x C`` image through a stream and return its map."""
    t = T.as_tensor(image)
    out = params.encode_a(t) if stream == "a" else params.encode_b(t)
    if t.ndim == 3:
        out = T.reshape(out, out.shape[1:])
    return ActivationMap(out)
