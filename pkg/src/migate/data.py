"""Image datasets on disk, augmentation and pair-batch sampling.

Layout: ``<root>/<identity>/<camera>_<index>.ppm`` with an optional
``manifest.txt`` whose lines read ``<relative path> <split> [extra fields]``.
Images without a manifest entry belong to the ``train`` split.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .formats import read_ppm
from .head import BatchConstructionError, Supervision

REFERENCE_SIZE = 224
_NAME = re.compile(r"^(\d+)_(\d+)\.(ppm|pgm)$")


@dataclass
class Sample:
    image: np.ndarray
    identity: int
    camera: int

    def __post_init__(self):
        if self.identity < 0 or self.camera < 0:
            raise ValueError(f"identity and camera must be nonnegative, got {self.identity}, {self.camera}")


@dataclass
class Dataset:
    images: np.ndarray
    identities: np.ndarray
    cameras: np.ndarray
    splits: np.ndarray
    paths: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.identities)

    def subset(self, split: str) -> "Dataset":
        idx = np.flatnonzero(self.splits == split)
        return Dataset(self.images[idx], self.identities[idx], self.cameras[idx], self.splits[idx],
                       [self.paths[i] for i in idx] if self.paths else [])

    def samples(self) -> list[Sample]:
        return [Sample(img, int(i), int(c)) for img, i, c in zip(self.images, self.identities, self.cameras)]

    @classmethod
    def from_samples(cls, samples: list[Sample], split: str = "train") -> "Dataset":
        return cls(np.stack([s.image for s in samples]), np.array([s.identity for s in samples]),
                   np.array([s.camera for s in samples]), np.array([split] * len(samples)))


def load_dataset(root) -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    splits: dict[str, str] = {}
    manifest = root / "manifest.txt"
    if manifest.exists():
        for n, line in enumerate(manifest.read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 2:
                raise ValueError(f"{manifest}:{n}: expected '<path> <split> ...'")
            splits[parts[0]] = parts[1]
    images, ids, cams, sp, paths = [], [], [], [], []
    for id_dir in sorted((d for d in root.iterdir() if d.is_dir()), key=lambda d: d.name):
        if not id_dir.name.isdigit():
            continue
        for f in sorted(id_dir.iterdir(), key=lambda p: p.name):
            m = _NAME.match(f.name)
            if not m:
                continue
            rel = f"{id_dir.name}/{f.name}"
            images.append(read_ppm(f))
            ids.append(int(id_dir.name))
            cams.append(int(m.group(1)))
            sp.append(splits.get(rel, "train"))
            paths.append(rel)
    if not images:
        raise FileNotFoundError(f"no images found under {root}")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ValueError(f"images under {root} differ in size: {sorted(shapes)}")
    return Dataset(np.stack(images), np.array(ids), np.array(cams), np.array(sp), paths)


# augmentation --------------------------------------------------------------

def augment_flip(s: Sample) -> Sample:
    """Mirror horizontally; column c goes to column W-1-c."""
    return replace(s, image=s.image[:, ::-1].copy())


def shift_image(image: np.ndarray, dx: int = 0, dy: int = 0) -> np.ndarray:
    """Translate by (dx, dy) pixels, filling uncovered borders by edge replication.

    Negative ``dx`` moves content left, negative ``dy`` moves it up.
    """
    h, w = image.shape[:2]
    if abs(dx) >= w or abs(dy) >= h:
        raise ValueError(f"shift ({dx}, {dy}) exceeds image extent {w}x{h}")
    cols = np.clip(np.arange(w) - dx, 0, w - 1)
    rows = np.clip(np.arange(h) - dy, 0, h - 1)
    return image[rows][:, cols].copy()


def shift_amounts(height: int, width: int) -> tuple[int, int]:
    """The 5 px horizontal / 10 px vertical shifts scaled from 224 px images, at least 1 px."""
    return max(1, (5 * width) // REFERENCE_SIZE), max(1, (10 * height) // REFERENCE_SIZE)


def augment_shift(s: Sample, dx: int | None = None, dy: int | None = None) -> list[Sample]:
    """Two-step shifting: left/right first, then up/down applied to each of those.

    Returns ``[left, right, left-up, left-down, right-up, right-down]``.
    """
    h, w = s.image.shape[:2]
    sx, sy = shift_amounts(h, w)
    dx = sx if dx is None else dx
    dy = sy if dy is None else dy
    first = [replace(s, image=shift_image(s.image, dx=-dx)), replace(s, image=shift_image(s.image, dx=dx))]
    second = [replace(f, image=shift_image(f.image, dy=v)) for f in first for v in (-dy, dy)]
    return first + second


def augment_dataset(ds: Dataset, flip: bool = True, shift: bool = True) -> Dataset:
    """Expand a split with shifted variants and then mirrored copies of everything."""
    out = []
    for s in ds.samples():
        family = [s] + (augment_shift(s) if shift else [])
        out.extend(family)
        if flip:
            out.extend(augment_flip(f) for f in family)
    res = Dataset.from_samples(out, ds.splits[0] if len(ds) else "train")
    return res


# batches -------------------------------------------------------------------

@dataclass
class PairBatch:
    indices: np.ndarray
    labels: np.ndarray
    supervision: Supervision


def _valid(labels: np.ndarray) -> bool:
    _, counts = np.unique(labels, return_counts=True)
    return len(counts) >= 2 and counts.max() >= 2


def make_batch(indices: np.ndarray, identities: np.ndarray) -> PairBatch:
    labels = identities[indices]
    return PairBatch(indices, labels, Supervision.from_labels(labels))


def sample_batch(identities: np.ndarray, rng: np.random.Generator, batch_size: int = 128,
                 max_tries: int = 100) -> PairBatch:
    """Draw ``batch_size`` images without replacement until the batch has a positive and a negative pair."""
    identities = np.asarray(identities)
    if len(np.unique(identities)) < 2:
        raise BatchConstructionError("dataset needs at least two identities")
    if len(identities) < 2:
        raise BatchConstructionError("dataset too small for a pair batch")
    size = min(batch_size, len(identities))
    for _ in range(max_tries):
        idx = rng.choice(len(identities), size=size, replace=False)
        if _valid(identities[idx]):
            return make_batch(idx, identities)
    raise BatchConstructionError(f"no valid batch of {size} images after {max_tries} draws")


def epoch_batches(identities: np.ndarray, seed: int, epoch: int, batch_size: int = 128,
                  n_batches: int | None = None) -> list[PairBatch]:
    """The batch sequence of one epoch; a pure function of (seed, epoch).

    The training set is shuffled and cut into consecutive batches; a batch
    lacking a positive or negative pair is replaced by a fresh random draw.
    """
    identities = np.asarray(identities)
    rng = np.random.default_rng([seed, epoch, 1])
    size = min(batch_size, len(identities))
    if n_batches is None:
        n_batches = max(1, len(identities) // size)
    batches = []
    order = rng.permutation(len(identities))
    for b in range(n_batches):
        if (b + 1) * size > len(order):
            order = np.concatenate([order, rng.permutation(len(identities))])
        idx = order[b * size:(b + 1) * size]
        if not _valid(identities[idx]):
            batches.append(sample_batch(identities, rng, size))
        else:
            batches.append(make_batch(idx, identities))
    return batches
