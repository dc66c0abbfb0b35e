"""Ranking metrics and region-level similarity analysis.

Scores are similarities: higher means more alike. Ties are broken by gallery
index, lower index first.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass
class ScoreMatrix:
    scores: np.ndarray
    probe_ids: np.ndarray
    gallery_ids: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.probe_ids = np.asarray(self.probe_ids)
        self.gallery_ids = np.asarray(self.gallery_ids)
        if self.scores.shape != (len(self.probe_ids), len(self.gallery_ids)):
            raise ValueError(f"score matrix {self.scores.shape} does not match "
                             f"{len(self.probe_ids)} probes x {len(self.gallery_ids)} gallery labels")


def _ranking(row: np.ndarray) -> np.ndarray:
    # stable sort on -score keeps equal scores in gallery order
    return np.argsort(-row, kind="stable")


def cmc_single_shot(S: ScoreMatrix) -> np.ndarray:
    """Recognition rate at ranks 1..G; entry ``r-1`` is CMC(r)."""
    n_p, n_g = S.scores.shape
    hits = np.zeros(n_g)
    for p in range(n_p):
        match = np.flatnonzero(S.gallery_ids == S.probe_ids[p])
        if match.size != 1:
            raise ValueError(f"probe {p} (identity {S.probe_ids[p]}) has {match.size} gallery matches; "
                             "single-shot needs exactly one")
        rank = int(np.flatnonzero(_ranking(S.scores[p]) == match[0])[0])
        hits[rank] += 1
    return np.cumsum(hits) / n_p


def average_precision(row: np.ndarray, relevant: np.ndarray) -> float:
    order = _ranking(row)
    rel = relevant[order]
    if not rel.any():
        raise ValueError("average precision undefined without relevant items")
    positions = np.flatnonzero(rel) + 1
    return float(np.mean(np.arange(1, len(positions) + 1) / positions))


def mean_average_precision(S: ScoreMatrix) -> float:
    aps = []
    for p in range(S.scores.shape[0]):
        relevant = S.gallery_ids == S.probe_ids[p]
        if not relevant.any():
            raise ValueError(f"probe {p} (identity {S.probe_ids[p]}) has no gallery match")
        aps.append(average_precision(S.scores[p], relevant))
    return float(np.mean(aps))


# region similarities -------------------------------------------------------

def validate_metric(Wr: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    Wr = np.asarray(Wr, dtype=np.float64)
    if Wr.ndim != 2 or Wr.shape[0] != Wr.shape[1]:
        raise ValueError(f"region metric must be square, got {Wr.shape}")
    if not np.allclose(Wr, Wr.T, atol=tol):
        raise ValueError("region metric must be symmetric")
    smallest = np.linalg.eigvalsh(Wr).min()
    if smallest < -tol * max(1.0, np.abs(Wr).max()):
        raise ValueError(f"region metric is not positive semidefinite (eigenvalue {smallest:.3e})")
    return Wr


def region_similarity(xa, xb, Wr) -> float:
    """Quadratic form ``(xa - xb)^T Wr (xa - xb)``."""
    diff = np.asarray(xa, dtype=np.float64) - np.asarray(xb, dtype=np.float64)
    Wr = np.asarray(Wr, dtype=np.float64)
    if Wr.shape != (diff.size, diff.size):
        raise ValueError(f"region metric {Wr.shape} does not match descriptor length {diff.size}")
    return float(diff @ Wr @ diff)


def integrated_local_similarity(regions) -> float:
    """Sum of region similarities over ``(xa, xb, Wr)`` triples."""
    regions = list(regions)
    if not regions:
        raise ValueError("need at least one region")
    return float(sum(region_similarity(xa, xb, Wr) for xa, xb, Wr in regions))


def region_descriptor(amap: np.ndarray, window: tuple[int, int, int, int]) -> np.ndarray:
    """Channel-wise max over a ``(row0, row1, col0, col1)`` window of a ``K x K x D`` map."""
    r0, r1, c0, c1 = window
    if not (0 <= r0 < r1 <= amap.shape[0] and 0 <= c0 < c1 <= amap.shape[1]):
        raise ValueError(f"window {window} outside a {amap.shape[0]}x{amap.shape[1]} map")
    return amap[r0:r1, c0:c1].reshape(-1, amap.shape[-1]).max(axis=0)


# trial protocol ------------------------------------------------------------

@dataclass
class TrialResult:
    cmc: np.ndarray  # trials x gallery size
    mAP: float

    @property
    def mean(self) -> np.ndarray:
        return self.cmc.mean(axis=0)

    @property
    def std(self) -> np.ndarray:
        return self.cmc.std(axis=0)


def single_shot_trials(scorer: Callable[[np.ndarray, np.ndarray], np.ndarray], identities: np.ndarray,
                       cameras: np.ndarray, trials: int = 10, seed: int = 0,
                       probe_camera: int = 0, gallery_camera: int = 1) -> np.ndarray:
    """CMC for ``trials`` random single-shot draws.

    Each trial picks one probe-camera image and one gallery-camera image per
    identity seen by both cameras. ``scorer(probe_idx, gallery_idx)`` returns
    the score matrix for those dataset indices.
    """
    identities, cameras = np.asarray(identities), np.asarray(cameras)
    ids = np.array(sorted(set(identities[cameras == probe_camera]) & set(identities[cameras == gallery_camera])))
    if ids.size < 2:
        raise ValueError("single-shot evaluation needs at least two identities seen by both cameras")
    curves = []
    for t in range(trials):
        rng = np.random.default_rng([seed, t, 3])
        probes = np.array([rng.choice(np.flatnonzero((identities == i) & (cameras == probe_camera))) for i in ids])
        gallery = np.array([rng.choice(np.flatnonzero((identities == i) & (cameras == gallery_camera))) for i in ids])
        scores = scorer(probes, gallery)
        curves.append(cmc_single_shot(ScoreMatrix(scores, identities[probes], identities[gallery])))
    return np.stack(curves)


def format_cmc_table(cmc: np.ndarray) -> str:
    """Plain-text table: rank, one column per trial, mean and std."""
    trials, ranks = cmc.shape
    head = "rank " + " ".join(f"trial{t + 1:<3d}" for t in range(trials)) + "     mean      std"
    rows = [head]
    mean, std = cmc.mean(axis=0), cmc.std(axis=0)
    for r in range(ranks):
        cells = " ".join(f"{cmc[t, r]:8.4f}" for t in range(trials))
        rows.append(f"{r + 1:4d} {cells} {mean[r]:8.4f} {std[r]:8.4f}")
    return "\n".join(rows) + "\n"
