"""Command-line interface: ``migate {gen-data,train,eval,gradcheck}``.

Settings come from one INI file whose sections are named after the modules
(``[synthetic-data]``, ``[encoder]``, ``[mi-gate]``, ``[spatial-context]``,
``[matching-head]``, ``[training-pipeline]``, ``[evaluation]``). Flags override
the file. Exit codes: 0 success, 1 validation error, 2 numerical failure,
3 I/O error.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import tensor as T
from .context import CONTEXT_MODELS
from .encoder import ConvSpec, EncoderConfig
from .formats import FormatError, save_score_matrix
from .head import LossConfig
from .model import MatchingModel, ModelConfig
from .tensor import NonFiniteError

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("migate")


class ConfigError(ValueError):
    pass


# config --------------------------------------------------------------------

def read_config(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if path is None:
        return cp
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file {path} not found")
    try:
        cp.read_string(path.read_text(), source=str(path))
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}: key before any [section] header") from exc
    except configparser.ParsingError as exc:
        where = "; ".join(f"{path}: line {n}: cannot parse {text.strip()!r}" for n, text in exc.errors)
        raise ConfigError(where) from exc
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as exc:
        what = f"option {exc.option!r} in [{exc.section}]" if hasattr(exc, "option") else f"section [{exc.section}]"
        raise ConfigError(f"{path}: line {exc.lineno}: duplicate {what}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return cp


class _Section:
    """Typed lookups in one config section with named-field errors."""

    def __init__(self, cp: configparser.ConfigParser, name: str):
        self.name = name
        self.items = dict(cp.items(name)) if cp.has_section(name) else {}

    def _raw(self, key, default, required):
        if key in self.items:
            return self.items[key]
        if required:
            raise ConfigError(f"missing required field [{self.name}] {key}")
        return default

    def _convert(self, key, raw, kind):
        try:
            return kind(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{self.name}] {key} = {raw!r}: {exc}") from exc

    def str(self, key, default=None, required=False):
        return self._raw(key, default, required)

    def int(self, key, default=None, required=False):
        raw = self._raw(key, None, required)
        return default if raw is None else self._convert(key, raw, int)

    def float(self, key, default=None, required=False):
        raw = self._raw(key, None, required)
        return default if raw is None else self._convert(key, raw, float)

    def bool(self, key, default=False):
        raw = self._raw(key, None, False)
        if raw is None:
            return default
        low = raw.strip().lower()
        if low in ("1", "yes", "true", "on"):
            return True
        if low in ("0", "no", "false", "off"):
            return False
        raise ConfigError(f"[{self.name}] {key} = {raw!r}: expected a boolean")

    def ints(self, key, default=None):
        raw = self._raw(key, None, False)
        if raw is None:
            return default
        return [self._convert(key, v, int) for v in raw.replace(",", " ").split()]


def synthetic_spec(cp, seed: int | None = None):
    from .synthetic import SyntheticSpec

    s = _Section(cp, "synthetic-data")
    d = SyntheticSpec()
    split = s.ints("split")
    return SyntheticSpec(
        n_identities=s.int("identities", d.n_identities),
        images_per_camera=s.int("images_per_camera", d.images_per_camera),
        image_size=s.int("image_size", d.image_size),
        channels=s.int("channels", d.channels),
        glyph_size=s.int("glyph_size", d.glyph_size),
        library_size=s.int("library_size", d.library_size),
        glyphs_per_identity=s.int("glyphs_per_identity", d.glyphs_per_identity),
        max_translation=s.int("max_translation", d.max_translation),
        noise=s.float("noise", d.noise),
        seed=s.int("seed", d.seed) if seed is None else seed,
        split=tuple(split) if split else d.split,
    )


def _stack_output(input_size, layers) -> tuple[int, int]:
    h = input_size[0]
    for spec in layers:
        h = (h + 2 * (spec.kernel // 2) - spec.kernel) // spec.stride + 1
    return h, layers[-1].channels


def encoder_config(cp, image_shape: tuple[int, ...] | None = None) -> EncoderConfig:
    s = _Section(cp, "encoder")
    size = s.ints("input_size")
    if size is None:
        if image_shape is None:
            raise ConfigError("missing required field [encoder] input_size")
        size = list(image_shape)
    if len(size) != 3:
        raise ConfigError(f"[encoder] input_size needs height, width, channels; got {size}")
    raw_layers = s.str("layers")
    try:
        layers = (tuple(ConvSpec.parse(t) for t in raw_layers.split(",")) if raw_layers
                  else EncoderConfig.__dataclass_fields__["layers"].default_factory())
    except ValueError as exc:
        raise ConfigError(f"[encoder] layers: {exc}") from exc
    K, D = _stack_output(size, layers)
    cfg = EncoderConfig(tuple(size), layers, s.int("k", K), s.int("d", D), s.bool("shared_streams", True))
    if image_shape is not None and tuple(image_shape) != cfg.input_size:
        raise ConfigError(f"[encoder] input_size {cfg.input_size} does not match dataset images {tuple(image_shape)}")
    return cfg


def model_config(cp, image_shape=None, context: str | None = None) -> ModelConfig:
    gate, ctx, head = _Section(cp, "mi-gate"), _Section(cp, "spatial-context"), _Section(cp, "matching-head")
    d = ModelConfig.__dataclass_fields__
    return ModelConfig(
        encoder=encoder_config(cp, image_shape),
        fusion=gate.str("fusion", "mi"),
        gate_mode=gate.str("mode", "gated"),
        joint_dim=gate.int("joint_dim"),
        context=context or ctx.str("context", "irnn2"),
        hidden=ctx.int("hidden", d["hidden"].default),
        mid_channels=ctx.int("mid_channels"),
        dropout=ctx.float("dropout", d["dropout"].default),
        spp_levels=ctx.ints("spp_levels", [1, 2]),
        embed_dim=head.int("embed_dim", d["embed_dim"].default),
        loss=LossConfig(alpha=head.float("alpha", 2.0), beta=head.float("beta", 0.5)),
    )


def train_config(cp, seed: int | None = None):
    from .train import TrainConfig

    s = _Section(cp, "training-pipeline")
    d = TrainConfig()
    return TrainConfig(
        lr=s.float("lr", d.lr), momentum=s.float("momentum", d.momentum), epochs=s.int("epochs", d.epochs),
        batch_size=s.int("batch_size", d.batch_size), batches_per_epoch=s.int("batches_per_epoch"),
        patience=s.int("patience", d.patience), decay_after=s.int("decay_after", d.decay_after),
        lr_decay=s.float("lr_decay", d.lr_decay), seed=s.int("seed", d.seed) if seed is None else seed,
        augment_flip=s.bool("augment_flip", d.augment_flip), augment_shift=s.bool("augment_shift", d.augment_shift),
    )


def checkpoint_prefix(out: str, context: str) -> str:
    """Runs of different context models never overwrite each other."""
    return f"{out}-{context}"


def format_parameter_counts(model: MatchingModel) -> str:
    counts = model.parameter_counts()
    lines = ["parameters:"]
    for sec, params in counts.items():
        lines.append(f"  {sec:<14s} {sum(params.values()):>10d}")
        for name, n in params.items():
            lines.append(f"    {name:<24s} {n:>10d}")
    fusion = model.fusion
    if hasattr(fusion, "U"):
        v = "tied to U, 0 extra" if fusion.tied else str(fusion.V.data.size)
        lines.append(f"  gate matrices: U {fusion.U.data.size}, V {v}, P {fusion.P.data.size}")
    lines.append(f"  {'total':<14s} {sum(sum(p.values()) for p in counts.values()):>10d}")
    return "\n".join(lines)


# commands ------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .synthetic import generate_pair_dataset

    cp = read_config(args.config)
    root = _Section(cp, "synthetic-data").str("root", required=True)
    spec = synthetic_spec(cp, args.seed)
    data = generate_pair_dataset(spec, root, force=args.force)
    ds = data.dataset
    counts = {sp: int((ds.splits == sp).sum()) for sp in ("train", "val", "test")}
    print(f"wrote {len(ds)} images of {spec.n_identities} identities to {root} "
          f"(train {counts['train']}, val {counts['val']}, test {counts['test']})")
    return EXIT_OK


def _precision(args, section: _Section) -> str:
    return args.precision or section.str("precision", "f32")


def cmd_train(args) -> int:
    from .data import load_dataset
    from .train import TrainingDiverged, train

    cp = read_config(args.config)
    s = _Section(cp, "training-pipeline")
    dataset_root, out = s.str("dataset", required=True), s.str("out", required=True)
    if args.context is not None and args.context not in CONTEXT_MODELS:
        raise ConfigError(f"--context must be one of {CONTEXT_MODELS}")
    with T.precision(_precision(args, s)):
        ds = load_dataset(dataset_root)
        mcfg = model_config(cp, ds.images.shape[1:], args.context)
        tcfg = train_config(cp, args.seed)
        model = MatchingModel(mcfg, seed=tcfg.seed)
        print(format_parameter_counts(model))
        prefix = checkpoint_prefix(out, mcfg.context)
        Path(prefix).parent.mkdir(parents=True, exist_ok=True)
        resume = args.resume
        if resume is None and args.resume_last:
            resume = prefix + ".last.ckpt"
        try:
            result = train(model, ds, tcfg, out=prefix, resume=resume)
        except TrainingDiverged as exc:
            print(f"error: {exc}; best checkpoint kept at {prefix}.ckpt", file=sys.stderr)
            return EXIT_NUMERICAL
    last = result.metrics[-1] if result.metrics else {}
    print(f"trained {len(result.metrics)} epochs; best val loss {result.state.best_val:.6f} "
          f"at epoch {result.state.best_epoch}; final train loss {last.get('train_loss', float('nan')):.6f}")
    print(f"checkpoint: {prefix}.ckpt")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import load_dataset
    from .evaluation import format_cmc_table
    from .train import evaluate, load_model

    cp = read_config(args.config)
    s, tr = _Section(cp, "evaluation"), _Section(cp, "training-pipeline")
    ckpt = args.checkpoint
    if ckpt is None:
        out = tr.str("out", required=True)
        ckpt = checkpoint_prefix(out, args.context or _Section(cp, "spatial-context").str("context", "irnn2")) + ".ckpt"
    dataset_root = args.dataset or s.str("dataset") or tr.str("dataset", required=True)
    split = args.split or s.str("split", "test")
    trials = args.trials if args.trials is not None else s.int("trials", 10)
    seed = args.seed if args.seed is not None else s.int("seed", 0)
    if trials < 1:
        raise ConfigError("trials must be at least 1")

    model, meta, _ = load_model(ckpt)
    with T.precision(meta.get("precision", "f32")):
        ds = load_dataset(dataset_root).subset(split)
        if len(ds) == 0:
            raise ConfigError(f"dataset {dataset_root} has no {split!r} images")
        if ds.images.shape[1:] != model.cfg.encoder.input_size:
            raise ConfigError(f"checkpoint expects images of shape {model.cfg.encoder.input_size}, "
                              f"dataset has {ds.images.shape[1:]}")
        cmc, mAP = evaluate(model, ds, trials, seed)
        if args.scores:
            probes, gallery = np.flatnonzero(ds.cameras == 0), np.flatnonzero(ds.cameras == 1)
            images = model.encoder.normalize(ds.images)
            save_score_matrix(model.similarity_matrix(images[probes], images[gallery]), args.scores)

    table = format_cmc_table(cmc)
    prefix = args.out or str(Path(ckpt).with_suffix("")) + f".{split}"
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    Path(prefix + ".cmc.txt").write_text(table)
    mean, std = cmc.mean(axis=0), cmc.std(axis=0)
    records = [{"rank": r + 1, "mean": float(mean[r]), "std": float(std[r]),
                "trials": [float(v) for v in cmc[:, r]]} for r in range(cmc.shape[1])]
    records.append({"mAP": mAP, "split": split, "trials": trials, "seed": seed, "checkpoint": str(ckpt)})
    Path(prefix + ".metrics.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    print(table, end="")
    print(f"rank-1 {mean[0]:.4f} +- {std[0]:.4f}   mAP {mAP:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import run_all

    cp = read_config(args.config)
    s = _Section(cp, "gradcheck")
    seed = args.seed if args.seed is not None else s.int("seed", 0)
    tol = args.tol if args.tol is not None else s.float("tol", 1e-5)
    reports = run_all(seed, tol)
    failed = [name for name, rep in reports.items() if not rep.passed]
    print(f"{'module':<18s} {'max rel error':>14s}  status")
    for name, rep in reports.items():
        print(f"{name:<18s} {rep.max_rel_error:14.3e}  {'ok' if rep.passed else 'FAIL'}")
        if not rep.passed:
            where, idx = rep.worst
            print(f"  worst entry {where}{list(idx)}; kink crossings {sum(rep.kink_crossings.values())}")
    if failed:
        print(f"gradient check failed in: {', '.join(failed)}")
        return EXIT_NUMERICAL
    print("all gradient checks passed")
    return EXIT_OK


# entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="migate", description="Pair matching with gated fusion and spatial recurrence.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="INI file with module-named sections")
        sp.add_argument("--seed", type=int, help="override the configured seed")
        return sp

    g = common(sub.add_parser("gen-data", help="write a synthetic two-camera dataset"))
    g.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    t = common(sub.add_parser("train", help="train a model and write checkpoints"))
    t.add_argument("--context", help=f"spatial context model: {', '.join(CONTEXT_MODELS)}")
    t.add_argument("--precision", choices=("f32", "f64"))
    t.add_argument("--resume", help="checkpoint (.last.ckpt) to continue from")
    t.add_argument("--resume-last", action="store_true", help="continue from this run's own .last.ckpt")

    e = common(sub.add_parser("eval", help="CMC and mAP of a trained checkpoint"))
    e.add_argument("--checkpoint", help="defaults to the configured output for --context")
    e.add_argument("--context", help="pick the checkpoint trained with this context model")
    e.add_argument("--dataset")
    e.add_argument("--split", help="split to evaluate (default test)")
    e.add_argument("--trials", type=int, help="number of random probe/gallery draws (default 10)")
    e.add_argument("--out", help="prefix for the .cmc.txt and .metrics.jsonl files")
    e.add_argument("--scores", help="also write the probe x gallery score matrix here")
    e.add_argument("--precision", choices=("f32", "f64"), help="ignored; evaluation uses the checkpoint's")

    c = common(sub.add_parser("gradcheck", help="finite-difference checks of every module"), config_required=False)
    c.add_argument("--tol", type=float)
    c.add_argument("--precision", choices=("f32", "f64"), help="ignored; checks always run in f64")
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def _thread_limit():
    raw = os.environ.get("MIGATE_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"MIGATE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"MIGATE_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _thread_limit():
            return COMMANDS[args.command](args)
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FileExistsError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
