import json

import numpy as np
import pytest

from migate import tensor as T
from migate.cli import EXIT_IO, EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION, main

CONFIG = """\
[synthetic-data]
root = {root}/data
identities = 4
images_per_camera = 4
split = 2 1 1
image_size = 16
glyph_size = 4
library_size = 4
max_translation = 4

[encoder]
layers = 3:2:4, 3:2:4

[spatial-context]
hidden = 4
mid_channels = 4
dropout = 0.0

[matching-head]
embed_dim = 8

[training-pipeline]
dataset = {root}/data
out = {root}/runs/model
epochs = 2
batch_size = 8
lr = 0.05
augment_flip = false
augment_shift = false

[evaluation]
trials = 3
"""


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(CONFIG.format(root=tmp_path))
    return path


@pytest.fixture
def generated(cfg):
    assert main(["gen-data", "--config", str(cfg)]) == EXIT_OK
    return cfg


def test_gen_data_creates_identity_dirs(generated, tmp_path, capsys):
    dirs = [p for p in (tmp_path / "data").iterdir() if p.is_dir()]
    assert len(dirs) == 4
    assert (tmp_path / "data" / "manifest.txt").exists()


def test_gen_data_refuses_rerun(generated, capsys):
    assert main(["gen-data", "--config", str(generated)]) != EXIT_OK
    assert "force" in capsys.readouterr().err
    assert main(["gen-data", "--config", str(generated), "--force"]) == EXIT_OK


def test_missing_field_named(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text("[synthetic-data]\nidentities = 4\n")
    assert main(["gen-data", "--config", str(path)]) == EXIT_VALIDATION
    assert "[synthetic-data] root" in capsys.readouterr().err


def test_parse_error_reports_line(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text("[synthetic-data]\nroot = x\nthis line is broken\n")
    assert main(["gen-data", "--config", str(path)]) == EXIT_VALIDATION
    assert "line 3" in capsys.readouterr().err


@pytest.mark.parametrize("text,where", [("root = x\n", "line 1"),
                                        ("[a]\nx = 1\nx = 2\n", "line 3"),
                                        ("[a]\n[a]\n", "line 2")])
def test_structural_config_errors(text, where, tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text(text)
    assert main(["gen-data", "--config", str(path)]) == EXIT_VALIDATION
    assert where in capsys.readouterr().err


def test_bad_value_named(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text(f"[synthetic-data]\nroot = {tmp_path}/d\nidentities = many\n")
    assert main(["gen-data", "--config", str(path)]) == EXIT_VALIDATION
    assert "identities" in capsys.readouterr().err


def test_missing_config_is_io_error(tmp_path):
    assert main(["gen-data", "--config", str(tmp_path / "nope.ini")]) == EXIT_IO


def test_train_missing_dataset(cfg, capsys):
    assert main(["train", "--config", str(cfg)]) == EXIT_IO


def test_train_contexts_and_summary(generated, tmp_path, capsys):
    assert main(["train", "--config", str(generated), "--context", "irnn2"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "gate matrices: U 16, V tied to U, 0 extra, P 16" in out
    assert main(["train", "--config", str(generated), "--context", "spp"]) == EXIT_OK
    runs = tmp_path / "runs"
    assert (runs / "model-irnn2.ckpt").exists() and (runs / "model-spp.ckpt").exists()
    assert main(["train", "--config", str(generated), "--context", "bogus"]) == EXIT_VALIDATION


def test_train_seed_reproducible(generated, tmp_path):
    metrics = []
    for _ in range(2):
        assert main(["train", "--config", str(generated), "--seed", "7"]) == EXIT_OK
        metrics.append((tmp_path / "runs" / "model-irnn2.metrics.jsonl").read_text())
    assert metrics[0] == metrics[1]


def test_untied_summary_counts_V(generated, tmp_path, capsys):
    text = generated.read_text().replace("[encoder]\n", "[encoder]\nshared_streams = false\n")
    generated.write_text(text)
    assert main(["train", "--config", str(generated)]) == EXIT_OK
    assert "U 16, V 16, P 16" in capsys.readouterr().out


def test_eval_tables(generated, tmp_path, capsys):
    assert main(["train", "--config", str(generated)]) == EXIT_OK
    assert main(["eval", "--config", str(generated), "--trials", "1"]) == EXIT_OK
    table = (tmp_path / "runs" / "model-irnn2.test.cmc.txt").read_text().splitlines()
    assert len(table[1].split()) == 4
    assert main(["eval", "--config", str(generated), "--scores", str(tmp_path / "s.mism")]) == EXIT_OK
    table = (tmp_path / "runs" / "model-irnn2.test.cmc.txt").read_text().splitlines()
    rows = [list(map(float, l.split())) for l in table[1:]]
    assert [int(r[0]) for r in rows] == [1, 2, 3, 4]
    for r in rows:
        assert r[-2] == pytest.approx(np.mean(r[1:4]), abs=1e-4)
    recs = [json.loads(l) for l in (tmp_path / "runs" / "model-irnn2.test.metrics.jsonl").read_text().splitlines()]
    assert recs[-1]["trials"] == 3 and 0 < recs[-1]["mAP"] <= 1
    from migate.formats import load_score_matrix
    assert load_score_matrix(tmp_path / "s.mism").shape == (4, 4)


def test_eval_shape_mismatch(generated, tmp_path, capsys):
    assert main(["train", "--config", str(generated)]) == EXIT_OK
    from migate.synthetic import SyntheticSpec, generate_pair_dataset
    generate_pair_dataset(SyntheticSpec(n_identities=4, images_per_camera=4, split=(2, 1, 1), image_size=20,
                                        glyph_size=4, library_size=4, max_translation=4), tmp_path / "other")
    code = main(["eval", "--config", str(generated), "--dataset", str(tmp_path / "other")])
    assert code == EXIT_VALIDATION
    assert "shape" in capsys.readouterr().err


def test_eval_corrupt_checkpoint(generated, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE" + bytes(20))
    assert main(["eval", "--config", str(generated), "--checkpoint", str(bad)]) == EXIT_IO


def test_gradcheck_passes(capsys):
    assert main(["gradcheck"]) == EXIT_OK
    out = capsys.readouterr().out
    for module in ("tensor-core", "mi-gate", "spatial-context", "encoder", "matching-head", "composite"):
        assert module in out


def test_gradcheck_catches_sign_error(monkeypatch, capsys):
    real = T.conv2d

    def broken_conv(x, W, b, stride=1, pad=None):
        out = real(x, W, b, stride, pad)
        inner = out._backward
        return T._result(out.data.copy(), (x, W, b), lambda g: tuple(-v for v in inner(g)), "conv2d")

    monkeypatch.setattr(T, "conv2d", broken_conv)
    assert main(["gradcheck"]) == EXIT_NUMERICAL
    out = capsys.readouterr().out
    assert "failed in: encoder" in out
    assert "mi-gate" in out and "tensor-core" in out


def test_thread_env_validated(monkeypatch, capsys):
    monkeypatch.setenv("MIGATE_THREADS", "zero")
    assert main(["gradcheck"]) == EXIT_VALIDATION
    monkeypatch.setenv("MIGATE_THREADS", "1")
    assert main(["gradcheck"]) == EXIT_OK
