"""Synthetic two-camera matching data with planted glyphs.

Every identity owns a distinct subset of small binary glyphs at fixed
positions. Each image draws the identity's glyphs over a noisy background and
then translates the whole picture by an independent offset, so the two camera
views of one person are misaligned by at most ``max_translation`` pixels.
"""
from __future__ import annotations

import itertools
import shutil
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import Dataset
from .formats import write_ppm


@dataclass
class SyntheticSpec:
    n_identities: int = 16
    images_per_camera: int = 8
    image_size: int = 32
    channels: int = 3
    glyph_size: int = 8
    library_size: int = 8
    glyphs_per_identity: int = 2
    max_translation: int = 8
    noise: float = 0.3
    seed: int = 0
    split: tuple[int, int, int] = (5, 1, 2)

    def __post_init__(self):
        self.split = tuple(int(v) for v in self.split)
        if self.n_identities < 2:
            raise ValueError("need at least two identities")
        if self.images_per_camera < 1:
            raise ValueError("need at least one image per identity and camera")
        if self.max_translation < 0:
            raise ValueError("max_translation must be nonnegative")
        if self.max_translation >= self.image_size - self.glyph_size:
            raise ValueError(f"max_translation {self.max_translation} must be < image_size - glyph_size "
                             f"= {self.image_size - self.glyph_size}")
        if not 0 <= self.noise <= 1:
            raise ValueError(f"noise level must be in [0, 1], got {self.noise}")
        subsets = _n_subsets(self.library_size, self.glyphs_per_identity)
        if subsets < self.n_identities:
            raise ValueError(f"{self.library_size} glyphs give only {subsets} distinct subsets of "
                             f"{self.glyphs_per_identity}; need {self.n_identities}")
        if self.glyphs_per_identity * self.glyph_size + self.max_translation > self.image_size:
            raise ValueError("glyphs do not fit vertically; enlarge the image or shrink glyphs")
        if sum(self.split) != self.images_per_camera or min(self.split) < 0:
            raise ValueError(f"split {self.split} must be nonnegative and sum to images_per_camera "
                             f"= {self.images_per_camera}")


def _n_subsets(n: int, k: int) -> int:
    from math import comb
    return comb(n, k)


@dataclass
class Placement:
    glyph: int
    row: int
    col: int


@dataclass
class SyntheticData:
    dataset: Dataset
    placements: list[list[Placement]]
    glyphs: np.ndarray
    offsets: np.ndarray


def make_glyphs(rng: np.random.Generator, count: int, size: int) -> np.ndarray:
    """``count`` distinct binary patches, each roughly half on."""
    glyphs = []
    seen = set()
    while len(glyphs) < count:
        g = rng.random((size, size)) < 0.5
        key = g.tobytes()
        if key in seen or not g.any() or g.all():
            continue
        seen.add(key)
        glyphs.append(g)
    return np.stack(glyphs)


def make_pair_dataset(spec: SyntheticSpec) -> SyntheticData:
    """Build the dataset in memory; a pure function of ``spec``."""
    rng = np.random.default_rng([spec.seed, 7])
    glyphs = make_glyphs(rng, spec.library_size, spec.glyph_size)
    subsets = list(itertools.combinations(range(spec.library_size), spec.glyphs_per_identity))
    chosen = rng.choice(len(subsets), size=spec.n_identities, replace=False)

    S, G, t = spec.image_size, spec.glyph_size, spec.max_translation
    slot_h = (S - t) // spec.glyphs_per_identity
    base = []
    for i in range(spec.n_identities):
        spots = []
        for k, g in enumerate(subsets[chosen[i]]):
            r = k * slot_h + int(rng.integers(0, slot_h - G + 1))
            c = int(rng.integers(0, S - t - G + 1))
            spots.append((g, r, c))
        base.append(spots)

    names = ("train", "val", "test")
    split_of = [n for n, k in zip(names, spec.split) for _ in range(k)]
    images, ids, cams, splits, paths, placements, offsets = [], [], [], [], [], [], []
    for i in range(spec.n_identities):
        for cam in range(2):
            for j in range(spec.images_per_camera):
                img_rng = np.random.default_rng([spec.seed, 11, i, cam, j])
                dy, dx = (int(v) for v in img_rng.integers(0, t + 1, size=2))
                canvas = img_rng.random((S, S, spec.channels)) * spec.noise
                spots = []
                for g, r, c in base[i]:
                    patch = glyphs[g][:, :, None]
                    canvas[r + dy:r + dy + G, c + dx:c + dx + G] = np.where(patch, 1.0, 0.0)
                    spots.append(Placement(g, r + dy, c + dx))
                images.append(np.round(canvas * 255).astype(np.uint8))
                ids.append(i)
                cams.append(cam)
                splits.append(split_of[j])
                paths.append(f"{i:04d}/{cam}_{j:03d}.ppm")
                placements.append(spots)
                offsets.append((dy, dx))
    ds = Dataset(np.stack(images), np.array(ids), np.array(cams), np.array(splits), paths)
    return SyntheticData(ds, placements, glyphs, np.array(offsets))


def generate_pair_dataset(spec: SyntheticSpec, root, force: bool = False) -> SyntheticData:
    """Write the dataset layout plus ``manifest.txt`` (split and glyph placements per image)."""
    root = Path(root)
    if root.exists() and any(root.iterdir()):
        if not force:
            raise FileExistsError(f"{root} exists and is not empty; pass force to overwrite")
        shutil.rmtree(root)
    data = make_pair_dataset(spec)
    ds = data.dataset
    root.mkdir(parents=True, exist_ok=True)
    lines = ["# path split identity camera glyph:row:col ...",
             "# spec " + " ".join(f"{k}={v}" for k, v in asdict(spec).items())]
    for n, rel in enumerate(ds.paths):
        path = root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        write_ppm(path, ds.images[n])
        spots = " ".join(f"{p.glyph}:{p.row}:{p.col}" for p in data.placements[n])
        lines.append(f"{rel} {ds.splits[n]} {ds.identities[n]} {ds.cameras[n]} {spots}")
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")
    return data


def read_placements(root) -> dict[str, list[Placement]]:
    """Glyph placements recorded in a generated dataset's manifest."""
    out = {}
    for line in (Path(root) / "manifest.txt").read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        out[parts[0]] = [Placement(*(int(v) for v in p.split(":"))) for p in parts[4:]]
    return out
