"""SGD training with plateau decay and validation-based early stopping."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Dataset, augment_dataset, epoch_batches, make_batch
from .evaluation import ScoreMatrix, mean_average_precision, single_shot_trials
from .formats import load_checkpoint, save_checkpoint
from .model import MatchingModel, ModelConfig
from .tensor import NonFiniteError

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, result: "TrainResult"):
        super().__init__(message)
        self.result = result


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 50
    batch_size: int = 128
    batches_per_epoch: int | None = None
    patience: int = 5
    decay_after: int = 2
    lr_decay: float = 0.1
    seed: int = 0
    augment_flip: bool = True
    augment_shift: bool = True

    def __post_init__(self):
        for name in ("lr", "epochs", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.patience < 0 or self.decay_after < 0:
            raise ValueError("patience and decay_after must be nonnegative")


def sgd_step(params: dict[str, T.Tensor], grads: dict[str, np.ndarray], state: dict[str, np.ndarray],
             lr: float, momentum: float) -> None:
    """``v <- momentum * v - lr * g``; ``theta <- theta + v``, in place."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise T.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
        v = state.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = momentum * v - lr * g
        state[name] = v
        p.data += v


@dataclass
class TrainState:
    epoch: int = 0
    lr: float = 0.01
    best_val: float = float("inf")
    best_epoch: int = -1
    since_best: int = 0
    since_decay: int = 0
    stopped: bool = False


@dataclass
class TrainResult:
    metrics: list[dict] = field(default_factory=list)
    best_state: dict | None = None
    state: TrainState = field(default_factory=TrainState)
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def _batch_images(model: MatchingModel, ds: Dataset, idx: np.ndarray) -> np.ndarray:
    return model.encoder.normalize(ds.images[idx])


def validation_loss(model: MatchingModel, val: Dataset) -> float:
    with T.no_grad():
        batch = make_batch(np.arange(len(val)), val.identities)
        loss, _ = model.batch_loss(_batch_images(model, val, batch.indices), batch.labels)
    return float(loss.data)


def save_training_checkpoint(path, model: MatchingModel, meta: dict, velocity: dict | None = None,
                             state: dict | None = None) -> None:
    sections = state if state is not None else model.state()
    sections = dict(sections)
    if velocity is not None:
        sections["optimizer"] = dict(velocity)
    save_checkpoint(path, sections, meta)


def load_model(path) -> tuple[MatchingModel, dict, dict]:
    """Rebuild a model from a checkpoint; returns (model, meta, raw sections)."""
    sections, meta = load_checkpoint(path)
    with T.precision(meta.get("precision", T.precision_name())):
        model = MatchingModel(ModelConfig.from_dict(meta["model"]), seed=0)
    model.load_state(sections)
    return model, meta, sections


def train(model: MatchingModel, data: Dataset, cfg: TrainConfig, out: str | Path | None = None,
          resume: str | Path | None = None, max_epochs: int | None = None) -> TrainResult:
    """Train on the ``train`` split, early-stop on the ``val`` split's loss.

    With ``out`` the best model goes to ``<out>.ckpt``, the latest resumable
    state to ``<out>.last.ckpt`` and per-epoch metrics to ``<out>.metrics.jsonl``.
    ``max_epochs`` caps the number of epochs run in this call (for resuming).
    """
    import json

    tr, val = data.subset("train"), data.subset("val")
    if len(tr) == 0 or len(val) == 0:
        raise ValueError("training needs non-empty train and val splits")
    model.encoder.mean = (tr.images.reshape(-1, tr.images.shape[-1]).astype(np.float64) / 255.0).mean(axis=0)
    if cfg.augment_flip or cfg.augment_shift:
        tr = augment_dataset(tr, flip=cfg.augment_flip, shift=cfg.augment_shift)

    result = TrainResult(state=TrainState(lr=cfg.lr))
    if resume is not None:
        sections, meta = load_checkpoint(resume)
        model.load_state(sections)
        result.velocity = {k: v.astype(T.get_dtype()) for k, v in sections.get("optimizer", {}).items()}
        result.state = TrainState(**meta["trainer"])
        result.metrics = list(meta.get("metrics", []))
        best_path = Path(str(out) + ".ckpt") if out else None
        if best_path and best_path.exists():
            result.best_state, _ = load_checkpoint(best_path)
    meta_base = {"model": model.cfg.to_dict(), "train": asdict(cfg), "precision": T.precision_name()}

    params = model.parameters()
    st = result.state
    ran = 0
    while st.epoch < cfg.epochs and not st.stopped and (max_epochs is None or ran < max_epochs):
        epoch = st.epoch
        losses = []
        try:
            for step, batch in enumerate(epoch_batches(tr.identities, cfg.seed, epoch, cfg.batch_size,
                                                       cfg.batches_per_epoch)):
                drop_rng = np.random.default_rng([cfg.seed, epoch, step, 2])
                model.zero_grad()
                loss, _ = model.batch_loss(_batch_images(model, tr, batch.indices), batch.labels,
                                           training=True, rng=drop_rng)
                loss.backward()
                sgd_step(params, {k: p.grad for k, p in params.items() if p.grad is not None},
                         result.velocity, st.lr, cfg.momentum)
                losses.append(float(loss.data))
            val_loss = validation_loss(model, val)
        except NonFiniteError as exc:
            if result.best_state is None:
                result.best_state = model.state()
            if out is not None:
                save_training_checkpoint(str(out) + ".ckpt", model, dict(meta_base, best_epoch=st.best_epoch),
                                         state=result.best_state)
            raise TrainingDiverged(f"training diverged in epoch {epoch}: {exc}", result) from exc

        record = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val_loss, "lr": st.lr}
        result.metrics.append(record)
        log.info("epoch %d train %.5f val %.5f lr %.2g", epoch, record["train_loss"], val_loss, st.lr)
        if val_loss < st.best_val:
            st.best_val, st.best_epoch, st.since_best, st.since_decay = val_loss, epoch, 0, 0
            result.best_state = model.state()
            if out is not None:
                save_training_checkpoint(str(out) + ".ckpt", model, dict(meta_base, best_epoch=epoch))
        else:
            st.since_best += 1
            st.since_decay += 1
            if st.since_best > cfg.patience:
                st.stopped = True
            elif cfg.decay_after and st.since_decay >= cfg.decay_after:
                st.lr *= cfg.lr_decay
                st.since_decay = 0
        st.epoch += 1
        ran += 1
        if out is not None:
            meta = dict(meta_base, trainer=asdict(st), metrics=result.metrics)
            save_training_checkpoint(str(out) + ".last.ckpt", model, meta, result.velocity)
            Path(str(out) + ".metrics.jsonl").write_text(
                "".join(json.dumps(m, sort_keys=True) + "\n" for m in result.metrics))
    return result


def evaluate(model: MatchingModel, ds: Dataset, trials: int = 10, seed: int = 0) -> tuple[np.ndarray, float]:
    """Single-shot CMC over ``trials`` draws, and multi-shot mAP of all probe- vs gallery-camera images."""
    images = model.encoder.normalize(ds.images)

    def scorer(p_idx, g_idx):
        return model.similarity_matrix(images[p_idx], images[g_idx])

    cmc = single_shot_trials(scorer, ds.identities, ds.cameras, trials, seed)
    probes = np.flatnonzero(ds.cameras == 0)
    gallery = np.flatnonzero(ds.cameras == 1)
    scores = scorer(probes, gallery)
    mAP = mean_average_precision(ScoreMatrix(scores, ds.identities[probes], ds.identities[gallery]))
    return cmc, mAP
