"""The full pair-matching network.

encode both images -> fuse the two maps (gate or concatenation) -> spatial
context -> embed ``|g_A - F_ctx|`` and ``|g_B - F_ctx|`` with one shared FC
layer -> cosine of the two embeddings.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .context import CONTEXT_MODELS, build_context
from .encoder import ConvSpec, Encoder, EncoderConfig
from .gate import ConcatFusionParams, MIGateParams, concat_forward, mi_forward
from .head import HeadParams, LossConfig, Supervision, binomial_deviance_loss, residual_embed, rowwise_cosine
from .tensor import Tensor

FUSIONS = ("mi", "concat")


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: str = "mi"
    gate_mode: str = "gated"
    joint_dim: int | None = None
    context: str = "irnn2"
    hidden: int = 512
    mid_channels: int | None = None
    dropout: float = 0.5
    spp_levels: list[int] = field(default_factory=lambda: [1, 2])
    embed_dim: int = 512
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.context not in CONTEXT_MODELS:
            raise ValueError(f"context must be one of {CONTEXT_MODELS}, got {self.context!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"]["layers"] = [str(l) for l in self.encoder.layers]
        d["encoder"]["input_size"] = list(self.encoder.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        enc = dict(d.pop("encoder"))
        enc["layers"] = tuple(ConvSpec.parse(s) for s in enc["layers"])
        return cls(encoder=EncoderConfig(**enc), loss=LossConfig(**d.pop("loss")), **d)


def upper_pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs ``i <= j`` of an n x n matrix, row-major."""
    i, j = np.triu_indices(n)
    return i, j


class MatchingModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng([seed, 0])
        enc = cfg.encoder
        self.encoder = Encoder(enc, rng)
        if cfg.fusion == "mi":
            self.fusion = MIGateParams.init(enc.D, cfg.joint_dim, cfg.gate_mode, tied=enc.shared_streams, rng=rng)
        else:
            self.fusion = ConcatFusionParams.init(enc.D, rng)
        self.context = build_context(cfg.context, enc.D, cfg.hidden, cfg.mid_channels, cfg.dropout,
                                     cfg.spp_levels, rng)
        self.head = HeadParams.init(enc.K, enc.D, cfg.embed_dim, rng)

    # parameters ------------------------------------------------------------

    def sections(self) -> dict[str, dict[str, Tensor]]:
        out = dict(self.encoder.sections())
        out["gate"] = self.fusion.parameters()
        out.update(self.context.sections())
        out["head"] = self.head.parameters()
        return out

    def parameters(self) -> dict[str, Tensor]:
        return {f"{sec}.{name}": p for sec, params in self.sections().items() for name, p in params.items()}

    def parameter_counts(self) -> dict[str, dict[str, int]]:
        return {sec: {name: int(p.data.size) for name, p in params.items()}
                for sec, params in self.sections().items()}

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def state(self) -> dict[str, dict[str, np.ndarray]]:
        out = {sec: {k: v.data.copy() for k, v in params.items()} for sec, params in self.sections().items()}
        out["normalization"] = {"mean": self.encoder.mean.copy()}
        return out

    def load_state(self, state: dict[str, dict[str, np.ndarray]]) -> None:
        for sec, params in self.sections().items():
            if sec not in state:
                raise ValueError(f"checkpoint lacks section {sec!r}")
            for name, p in params.items():
                if name not in state[sec]:
                    raise ValueError(f"checkpoint section {sec!r} lacks {name!r}")
                arr = state[sec][name]
                if arr.shape != p.shape:
                    raise ValueError(f"checkpoint {sec}.{name} has shape {arr.shape}, model expects {p.shape}")
                p.data[...] = arr
        if "normalization" in state:
            self.encoder.mean = np.array(state["normalization"]["mean"], dtype=np.float64)

    # forward ---------------------------------------------------------------

    def fuse(self, gA: Tensor, gB: Tensor) -> Tensor:
        if self.cfg.fusion == "mi":
            return mi_forward(gA, gB, self.fusion)
        return concat_forward(gA, gB, self.fusion)

    def score_maps(self, gA: Tensor, gB: Tensor, training: bool = False, rng=None) -> Tensor:
        """Cosine score of each pair of activation maps, ``(P,)``."""
        F = self.fuse(gA, gB)
        F_ctx = self.context.forward(F, training, rng)
        eA = residual_embed(gA, F_ctx, self.head)
        eB = residual_embed(gB, F_ctx, self.head)
        return rowwise_cosine(eA, eB)

    def encode(self, images: np.ndarray) -> tuple[Tensor, Tensor]:
        """Normalized ``(N, H, W, C)`` images -> maps for stream A and stream B."""
        x = T.constant(images)
        gA = self.encoder.encode_a(x)
        gB = gA if self.encoder.cfg.shared_streams else self.encoder.encode_b(x)
        return gA, gB

    def pair_scores(self, images: np.ndarray, rows, cols, training: bool = False, rng=None) -> Tensor:
        gA, gB = self.encode(images)
        return self.score_maps(T.take(gA, rows), T.take(gB, cols), training, rng)

    def batch_loss(self, images: np.ndarray, labels, training: bool = False, rng=None) -> tuple[Tensor, Tensor]:
        """Binomial deviance over every pair in the batch; returns (loss, S)."""
        sup = Supervision.from_labels(labels)
        n = len(labels)
        rows, cols = upper_pairs(n)
        s = self.pair_scores(images, rows, cols, training, rng)
        S = T.symmetric_scatter(s, rows, cols, n)
        return binomial_deviance_loss(S, sup, self.cfg.loss), S

    def similarity_matrix(self, probes: np.ndarray, gallery: np.ndarray, chunk: int = 256) -> np.ndarray:
        """Scores of every (probe, gallery) pair with dropout off."""
        with T.no_grad():
            images = np.concatenate([probes, gallery], axis=0)
            gA, gB = self.encode(images)
            n_p, n_g = len(probes), len(gallery)
            rows, cols = np.meshgrid(np.arange(n_p), n_p + np.arange(n_g), indexing="ij")
            rows, cols = rows.ravel(), cols.ravel()
            out = np.empty(rows.size, dtype=T.get_dtype())
            for s in range(0, rows.size, chunk):
                r, c = rows[s:s + chunk], cols[s:s + chunk]
                out[s:s + chunk] = self.score_maps(T.take(gA, r), T.take(gB, c)).data
        return out.reshape(n_p, n_g)


def pair_similarity(imageA: np.ndarray, imageB: np.ndarray, model: MatchingModel) -> float:
    """Inference score of one normalized image pair."""
    with T.no_grad():
        s = model.pair_scores(np.stack([imageA, imageB]), [0], [1])
    return float(s.data[0])
