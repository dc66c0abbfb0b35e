import filecmp
import itertools

import numpy as np
import pytest

from migate.synthetic import SyntheticSpec, generate_pair_dataset, make_pair_dataset, read_placements


def small(**kw):
    base = dict(n_identities=5, images_per_camera=3, image_size=20, glyph_size=4, library_size=5,
                max_translation=5, split=(1, 1, 1))
    base.update(kw)
    return SyntheticSpec(**base)


def test_same_seed_same_bytes(tmp_path):
    generate_pair_dataset(small(seed=4), tmp_path / "a")
    generate_pair_dataset(small(seed=4), tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    for sub in cmp.subdirs.values():
        _, mismatch, errors = filecmp.cmpfiles(sub.left, sub.right, sub.common_files, shallow=False)
        assert not mismatch and not errors
    other = make_pair_dataset(small(seed=5)).dataset
    assert other.images.tobytes() != make_pair_dataset(small(seed=4)).dataset.images.tobytes()


def test_zero_translation_zero_noise_views_identical():
    ds = make_pair_dataset(small(max_translation=0, noise=0.0)).dataset
    for i in range(5):
        a = ds.images[(ds.identities == i) & (ds.cameras == 0)]
        b = ds.images[(ds.identities == i) & (ds.cameras == 1)]
        assert np.array_equal(a, b)


def test_displacement_bounded_by_translation(tmp_path):
    t = 5
    spec = small(max_translation=t)
    generate_pair_dataset(spec, tmp_path / "d")
    places = read_placements(tmp_path / "d")
    by_id = {}
    for path, spots in places.items():
        ident, cam = int(path.split("/")[0]), int(path.split("/")[1][0])
        by_id.setdefault(ident, {0: [], 1: []})[cam].append(spots)
    for views in by_id.values():
        for sa, sb in itertools.product(views[0], views[1]):
            for pa, pb in zip(sa, sb):
                assert pa.glyph == pb.glyph
                assert abs(pa.row - pb.row) <= t and abs(pa.col - pb.col) <= t


def test_glyph_pixels_match_manifest():
    data = make_pair_dataset(small(noise=0.5))
    G = data.glyphs.shape[1]
    for img, spots in zip(data.dataset.images, data.placements):
        for p in spots:
            patch = img[p.row:p.row + G, p.col:p.col + G, 0]
            np.testing.assert_array_equal(patch == 255, data.glyphs[p.glyph])


def test_identities_get_distinct_subsets():
    data = make_pair_dataset(SyntheticSpec())
    subsets = {}
    for ident, spots in zip(data.dataset.identities, data.placements):
        subsets.setdefault(int(ident), frozenset(p.glyph for p in spots))
    assert len(set(subsets.values())) == 16
    assert all(len(s) == 2 for s in subsets.values())


def test_layout_and_splits(tmp_path):
    generate_pair_dataset(small(), tmp_path / "d")
    dirs = sorted(p.name for p in (tmp_path / "d").iterdir() if p.is_dir())
    assert dirs == [f"{i:04d}" for i in range(5)]
    names = sorted(p.name for p in (tmp_path / "d" / "0000").iterdir())
    assert names == [f"{c}_{j:03d}.ppm" for c in range(2) for j in range(3)]
    ds = make_pair_dataset(small()).dataset
    assert {s: int((ds.splits == s).sum()) for s in ("train", "val", "test")} == {"train": 10, "val": 10, "test": 10}


def test_refuses_to_overwrite(tmp_path):
    generate_pair_dataset(small(), tmp_path / "d")
    with pytest.raises(FileExistsError):
        generate_pair_dataset(small(), tmp_path / "d")
    generate_pair_dataset(small(seed=1), tmp_path / "d", force=True)


@pytest.mark.parametrize("kw", [
    dict(max_translation=16),           # >= image size - glyph size
    dict(n_identities=11),              # only C(5, 2) = 10 subsets
    dict(noise=1.5),
    dict(split=(1, 1, 2)),
    dict(n_identities=1),
])
def test_invalid_specs(kw):
    with pytest.raises(ValueError):
        small(**kw)


def raw_nn_accuracy(spec):
    ds = make_pair_dataset(spec).dataset
    X = ds.images.reshape(len(ds), -1).astype(float)
    a, b = np.flatnonzero(ds.cameras == 0), np.flatnonzero(ds.cameras == 1)
    d = ((X[a][:, None] - X[b][None]) ** 2).sum(-1)
    return np.mean(ds.identities[b][d.argmin(1)] == ds.identities[a])


def test_pixel_matching_degrades_with_translation():
    for seed in range(3):
        acc = [raw_nn_accuracy(SyntheticSpec(max_translation=t, seed=seed)) for t in (0, 2, 4, 8, 12)]
        assert all(b < a for a, b in zip(acc, acc[1:])), acc
