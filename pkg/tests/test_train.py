import json

import numpy as np
import pytest

from migate import tensor as T
from migate.data import (Dataset, Sample, augment_dataset, augment_flip, augment_shift, epoch_batches,
                         load_dataset, make_batch, sample_batch, shift_amounts, shift_image)
from migate.encoder import ConvSpec, EncoderConfig
from migate.formats import load_checkpoint
from migate.head import BatchConstructionError
from migate.model import MatchingModel, ModelConfig, pair_similarity
from migate.synthetic import SyntheticSpec, generate_pair_dataset, make_pair_dataset
from migate.train import TrainConfig, TrainState, evaluate, load_model, sgd_step, train


def tiny_spec(**kw):
    base = dict(n_identities=4, images_per_camera=4, image_size=16, glyph_size=4, library_size=4,
                max_translation=4, split=(2, 1, 1), noise=0.0)
    base.update(kw)
    return SyntheticSpec(**base)


def tiny_model_cfg(**kw):
    enc = EncoderConfig((16, 16, 3), (ConvSpec(3, 2, 4), ConvSpec(3, 2, 4)), K=4, D=4)
    base = dict(encoder=enc, hidden=4, mid_channels=4, embed_dim=8, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def tiny_train_cfg(**kw):
    base = dict(lr=0.05, epochs=3, batch_size=8, augment_flip=False, augment_shift=False, patience=5)
    base.update(kw)
    return TrainConfig(**base)


# augmentation ----------------------------------------------------------------

def one_hot(h=12, w=12, r=4, c=7):
    img = np.zeros((h, w, 3), np.uint8)
    img[r, c] = 255
    return img


def test_flip_involution_and_index(rng):
    s = Sample(rng.integers(0, 256, size=(6, 5, 3), dtype=np.uint8), 3, 1)
    assert np.array_equal(augment_flip(augment_flip(s)).image, s.image)
    f = augment_flip(Sample(one_hot(r=2, c=1), 0, 0))
    assert f.image[2, 12 - 1 - 1, 0] == 255 and f.identity == 0


def test_flip_doubles_dataset(rng):
    ds = Dataset(rng.integers(0, 256, size=(5, 8, 8, 3), dtype=np.uint8), np.arange(5), np.zeros(5, int),
                 np.array(["train"] * 5))
    assert len(augment_dataset(ds, flip=True, shift=False)) == 10
    assert len(augment_dataset(ds, flip=False, shift=True)) == 5 * 7
    out = augment_dataset(ds, flip=True, shift=True)
    assert len(out) == 5 * 14
    assert sorted(set(out.identities)) == list(range(5))
    assert all((out.identities == i).sum() == 14 for i in range(5))


def test_shift_family_order():
    s = Sample(one_hot(h=30, w=30, r=15, c=15), 1, 0)
    fam = augment_shift(s, dx=5, dy=10)
    where = [tuple(np.argwhere(f.image[..., 0] == 255)[0]) for f in fam]
    assert where == [(15, 10), (15, 20), (5, 10), (25, 10), (5, 20), (25, 20)]
    again = augment_shift(s, dx=5, dy=10)
    assert all(np.array_equal(a.image, b.image) for a, b in zip(fam, again))


def test_left_shift_moves_pixel():
    out = shift_image(one_hot(h=12, w=12, r=4, c=7), dx=-5)
    assert out[4, 2, 0] == 255 and out.sum() == 255 * 3


def test_shift_constant_image():
    img = np.full((10, 10, 3), 77, np.uint8)
    for f in augment_shift(Sample(img, 0, 0), dx=3, dy=4):
        assert np.array_equal(f.image, img)


def test_shift_uses_edge_replication():
    img = np.zeros((4, 6, 1), np.uint8)
    img[:, -1] = 9
    out = shift_image(img, dx=-2)
    np.testing.assert_array_equal(out[0, :, 0], [0, 0, 0, 9, 9, 9])


def test_shift_too_large():
    with pytest.raises(ValueError):
        shift_image(np.zeros((4, 4, 1), np.uint8), dx=4)


def test_shift_amounts_scale():
    assert shift_amounts(224, 224) == (5, 10)
    assert shift_amounts(64, 64) == (1, 2)
    assert shift_amounts(16, 16) == (1, 1)


def test_sample_rejects_negative_ids():
    with pytest.raises(ValueError):
        Sample(np.zeros((2, 2, 3), np.uint8), -1, 0)


# batches -----------------------------------------------------------------------

def test_batch_resampled_until_valid():
    ids = np.array([0] * 20 + [1, 2])
    batch = sample_batch(ids, np.random.default_rng(0), batch_size=4)
    labels = ids[batch.indices]
    assert len(set(labels)) >= 2 and np.bincount(labels).max() >= 2
    np.testing.assert_array_equal(np.diag(batch.supervision.M), 1)
    W, M = batch.supervision.W, batch.supervision.M
    assert W[M > 0].sum() == pytest.approx(1) and W[M < 0].sum() == pytest.approx(1)


def test_batch_errors():
    with pytest.raises(BatchConstructionError):
        sample_batch(np.array([1, 1, 1]), np.random.default_rng(0))
    with pytest.raises(BatchConstructionError):
        sample_batch(np.array([0, 1, 2, 3]), np.random.default_rng(0), max_tries=5)


def test_epoch_batches_deterministic():
    ids = np.repeat(np.arange(10), 4)
    a = epoch_batches(ids, seed=3, epoch=1, batch_size=8)
    b = epoch_batches(ids, seed=3, epoch=1, batch_size=8)
    c = epoch_batches(ids, seed=4, epoch=1, batch_size=8)
    d = epoch_batches(ids, seed=3, epoch=2, batch_size=8)
    key = lambda bs: [tuple(x.indices) for x in bs]
    assert key(a) == key(b) and key(a) != key(c) and key(a) != key(d)
    assert len(a) == 5 and all(len(x.indices) == 8 for x in a)


def test_make_batch_labels():
    batch = make_batch(np.array([2, 0, 1]), np.array([5, 6, 5]))
    np.testing.assert_array_equal(batch.labels, [5, 5, 6])
    assert batch.supervision.n1 == 5 and batch.supervision.n2 == 4


# sgd ---------------------------------------------------------------------------

def test_sgd_plain_step():
    p = {"t": T.parameter([0.0])}
    sgd_step(p, {"t": np.array([1.0])}, {}, lr=0.1, momentum=0.0)
    assert p["t"].data[0] == pytest.approx(-0.1)


def test_sgd_zero_gradient():
    p, state = {"t": T.parameter([2.0])}, {}
    sgd_step(p, {"t": np.array([0.0])}, state, lr=0.1, momentum=0.9)
    assert p["t"].data[0] == 2.0 and state["t"][0] == 0.0


def test_sgd_momentum_recurrence():
    p, state = {"t": T.parameter([0.0])}, {}
    for _ in range(2):
        sgd_step(p, {"t": np.array([1.0])}, state, lr=0.1, momentum=0.9)
    assert p["t"].data[0] == pytest.approx(-0.1 * (1 + 1.9))


def test_sgd_rejects_bad_gradients():
    p = {"t": T.parameter([0.0, 0.0])}
    with pytest.raises(T.NonFiniteError):
        sgd_step(p, {"t": np.array([np.nan, 0.0])}, {}, 0.1, 0.9)
    with pytest.raises(T.ShapeError):
        sgd_step(p, {"t": np.zeros(3)}, {}, 0.1, 0.9)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)


# training ----------------------------------------------------------------------

@pytest.mark.parametrize("seed", [0, 1, 2])
def test_loss_decreases_on_fixed_batch(seed):
    ds = make_pair_dataset(tiny_spec(seed=seed)).dataset.subset("train")
    model = MatchingModel(tiny_model_cfg(), seed=seed)
    imgs = model.encoder.normalize(ds.images)
    params, state, losses = model.parameters(), {}, []
    for _ in range(6):
        model.zero_grad()
        loss, _ = model.batch_loss(imgs, ds.identities)
        loss.backward()
        losses.append(float(loss.data))
        sgd_step(params, {k: p.grad for k, p in params.items()}, state, lr=0.005, momentum=0.0)
    assert all(b < a for a, b in zip(losses[:5], losses[1:6])), losses


def test_patience_zero_stops_at_first_plateau(monkeypatch):
    import migate.train as tr

    vals = iter([1.0, 0.9, 0.95, 0.5, 0.4])
    monkeypatch.setattr(tr, "validation_loss", lambda model, val: next(vals))
    data = make_pair_dataset(tiny_spec()).dataset
    res = train(MatchingModel(tiny_model_cfg()), data, tiny_train_cfg(epochs=5, patience=0))
    assert [m["epoch"] for m in res.metrics] == [0, 1, 2]
    assert res.state.stopped and res.state.best_epoch == 1


def test_plateau_decay(monkeypatch):
    import migate.train as tr

    vals = iter([1.0, 1.1, 1.2, 1.3, 1.4, 1.5])
    monkeypatch.setattr(tr, "validation_loss", lambda model, val: next(vals))
    data = make_pair_dataset(tiny_spec()).dataset
    res = train(MatchingModel(tiny_model_cfg()), data, tiny_train_cfg(epochs=5, patience=10, decay_after=2))
    assert [m["lr"] for m in res.metrics] == pytest.approx([0.05, 0.05, 0.05, 0.005, 0.005])


def test_training_files_and_resume(tmp_path):
    data = make_pair_dataset(tiny_spec()).dataset
    cfg = tiny_train_cfg(epochs=4)
    full = train(MatchingModel(tiny_model_cfg(), 1), data, cfg, out=tmp_path / "full")
    assert (tmp_path / "full.ckpt").exists() and (tmp_path / "full.last.ckpt").exists()
    lines = (tmp_path / "full.metrics.jsonl").read_text().splitlines()
    assert [json.loads(l)["epoch"] for l in lines] == [0, 1, 2, 3]

    train(MatchingModel(tiny_model_cfg(), 1), data, cfg, out=tmp_path / "part", max_epochs=2)
    resumed = train(MatchingModel(tiny_model_cfg(), 1), data, cfg, out=tmp_path / "part",
                    resume=tmp_path / "part.last.ckpt")
    assert resumed.metrics == full.metrics
    a, _ = load_checkpoint(tmp_path / "full.last.ckpt")
    b, _ = load_checkpoint(tmp_path / "part.last.ckpt")
    for sec in a:
        for k in a[sec]:
            assert a[sec][k].tobytes() == b[sec][k].tobytes()


def test_checkpoint_reload_scores_identically(tmp_path, rng):
    data = make_pair_dataset(tiny_spec()).dataset
    model = MatchingModel(tiny_model_cfg(), 2)
    train(model, data, tiny_train_cfg(epochs=2), out=tmp_path / "m")
    best, meta, _ = load_model(tmp_path / "m.ckpt")
    assert meta["model"]["context"] == "irnn2"
    test = data.subset("test")
    cmc, mAP = evaluate(best, test, trials=2)
    assert cmc.shape == (2, 4) and np.all(np.diff(cmc, axis=1) >= 0) and 0 < mAP <= 1


def test_divergence_aborts_and_keeps_checkpoint(tmp_path, monkeypatch):
    import migate.train as tr
    from migate.train import TrainingDiverged

    data = make_pair_dataset(tiny_spec()).dataset
    calls = {"n": 0}
    real = tr.sgd_step

    def exploding(params, grads, state, lr, momentum):
        calls["n"] += 1
        if calls["n"] > 2:
            grads = {k: np.full_like(g, np.nan) for k, g in grads.items()}
        return real(params, grads, state, lr, momentum)

    monkeypatch.setattr(tr, "sgd_step", exploding)
    with pytest.raises(TrainingDiverged) as info:
        train(MatchingModel(tiny_model_cfg()), data, tiny_train_cfg(epochs=5), out=tmp_path / "d")
    assert info.value.result.best_state is not None
    assert (tmp_path / "d.ckpt").exists()


def test_trained_model_prefers_itself(tmp_path):
    data = make_pair_dataset(tiny_spec(seed=3)).dataset
    model = MatchingModel(tiny_model_cfg(), 3)
    res = train(model, data, tiny_train_cfg(epochs=6))
    model.load_state(res.best_state)
    imgs = model.encoder.normalize(data.images[:12])
    for a in range(len(imgs)):
        self_score = pair_similarity(imgs[a], imgs[a], model)
        assert all(self_score >= pair_similarity(imgs[a], imgs[b], model) - 1e-12 for b in range(len(imgs)))


def test_load_dataset_layout(tmp_path):
    generate_pair_dataset(tiny_spec(), tmp_path / "d")
    ds = load_dataset(tmp_path / "d")
    mem = make_pair_dataset(tiny_spec()).dataset
    assert ds.images.tobytes() == mem.images.tobytes()
    np.testing.assert_array_equal(ds.splits, mem.splits)
    np.testing.assert_array_equal(ds.cameras, mem.cameras)
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing")
