"""Pairwise diversity of real vs synthetic rare-class images.

Two pair metrics are compared: PSNR (pixel level) and a perceptual distance
measured in the penultimate embedding of the downstream classifier. The
latter is a stand-in for LPIPS and is labeled "perceptual-distance
(surrogate)" in every report.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from .data import Dataset
from .errors import InvalidArgument
from .rng import numpy_rng

PSNR_CAP_DB = 100.0
PERCEPTUAL_LABEL = "perceptual-distance (surrogate)"


def psnr(a, b) -> float:
    """PSNR in dB for images in [0, 1]; identical images give ``PSNR_CAP_DB``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgument(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def _psnr_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2, axis=tuple(range(1, a.ndim)))
    with np.errstate(divide="ignore"):
        out = 10.0 * np.log10(1.0 / mse)
    return np.minimum(np.where(mse == 0.0, PSNR_CAP_DB, out), PSNR_CAP_DB)


def _unit(e: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(e, axis=-1, keepdims=True)
    return e / np.where(norm == 0.0, 1.0, norm)


def cosine_distance(ea: np.ndarray, eb: np.ndarray) -> np.ndarray:
    d = 1.0 - np.sum(_unit(ea) * _unit(eb), axis=-1)
    return np.clip(d, 0.0, 2.0)


def perceptual_distance(model, a, b) -> float:
    """``1 - cos`` between the L2-normalized embeddings of ``a`` and ``b``; in [0, 2].

    ``model`` needs an ``embed(images) -> (N, D)`` method and a truthy
    ``trained`` attribute.
    """
    if not getattr(model, "trained", False):
        raise InvalidArgument("perceptual distance needs a trained embedding model")
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise InvalidArgument(f"shape mismatch: {a.shape} vs {b.shape}")
    e = np.asarray(model.embed(np.stack([a, b])), dtype=np.float64)
    return float(cosine_distance(e[0], e[1]))


@dataclass
class Distribution:
    values: np.ndarray
    bin_edges: np.ndarray
    counts: np.ndarray
    pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    @classmethod
    def from_values(cls, values, bins: int | np.ndarray = 20, pairs=None) -> "Distribution":
        v = np.asarray(values, dtype=np.float64)
        counts, edges = np.histogram(v, bins=bins)
        p = np.zeros((0, 2), dtype=np.int64) if pairs is None else np.asarray(pairs, dtype=np.int64)
        return cls(v, edges, counts, p)

    @property
    def count(self) -> int:
        return int(self.values.size)

    def summary(self) -> dict:
        v = self.values
        q1, med, q3 = np.percentile(v, [25, 50, 75])
        return {
            "count": self.count,
            "mean": float(v.mean()),
            "std": float(v.std()),
            "min": float(v.min()),
            "max": float(v.max()),
            "q1": float(q1),
            "median": float(med),
            "q3": float(q3),
        }

    def to_dict(self) -> dict:
        return {
            "summary": self.summary(),
            "histogram": {"bin_edges": [float(e) for e in self.bin_edges], "counts": [int(c) for c in self.counts]},
        }


def sample_pairs(n: int, max_pairs: int, seed: int) -> np.ndarray:
    """Distinct unordered index pairs ``(i, j)``, ``i < j``, as an ``(m, 2)`` array.

    All ``C(n, 2)`` pairs when that fits the budget, else a uniform sample of
    ``max_pairs`` without replacement.
    """
    if n < 2:
        raise InvalidArgument("need at least two images to form pairs")
    if max_pairs < 1:
        raise InvalidArgument("max_pairs must be >= 1")
    i, j = np.triu_indices(n, k=1)
    total = i.size
    if total <= max_pairs:
        return np.stack([i, j], axis=1).astype(np.int64)
    pick = np.sort(numpy_rng(seed).choice(total, size=max_pairs, replace=False))
    return np.stack([i[pick], j[pick]], axis=1).astype(np.int64)


def pairwise_distribution(
    images,
    metric: str | Callable = "psnr",
    max_pairs: int = 2000,
    seed: int = 0,
    bins: int | np.ndarray = 20,
    model=None,
) -> Distribution:
    """Metric values over sampled image pairs.

    ``metric`` is ``"psnr"``, ``"perceptual"`` (requires ``model``), or any
    callable ``f(img_a, img_b) -> float``.
    """
    imgs = np.asarray(images)
    pairs = sample_pairs(len(imgs), max_pairs, seed)
    if metric == "psnr":
        values = _psnr_rows(imgs[pairs[:, 0]], imgs[pairs[:, 1]])
    elif metric == "perceptual":
        if model is None or not getattr(model, "trained", False):
            raise InvalidArgument("perceptual metric needs a trained embedding model")
        emb = np.asarray(model.embed(imgs), dtype=np.float64)
        values = cosine_distance(emb[pairs[:, 0]], emb[pairs[:, 1]])
    elif callable(metric):
        values = np.array([metric(imgs[a], imgs[b]) for a, b in pairs], dtype=np.float64)
    else:
        raise InvalidArgument(f"unknown metric {metric!r}")
    return Distribution.from_values(values, bins=bins, pairs=pairs)


@dataclass
class DiversityReport:
    psnr_real: Distribution
    psnr_synth: Distribution
    percep_real: Distribution
    percep_synth: Distribution
    psnr_mean_shift: float
    percep_mean_shift: float
    psnr_ks: float
    percep_ks: float
    structure_preserved: bool
    collapse_suspected: bool
    delta_psnr: float
    collapse_std_ratio: float

    def to_dict(self) -> dict:
        return {
            "metrics": {"psnr": "PSNR (dB)", "perceptual": PERCEPTUAL_LABEL},
            "distributions": {
                "psnr_real": self.psnr_real.to_dict(),
                "psnr_synth": self.psnr_synth.to_dict(),
                "percep_real": self.percep_real.to_dict(),
                "percep_synth": self.percep_synth.to_dict(),
            },
            "shift": {
                "psnr_mean_shift_db": self.psnr_mean_shift,
                "percep_mean_shift": self.percep_mean_shift,
                "psnr_ks": self.psnr_ks,
                "percep_ks": self.percep_ks,
            },
            "verdict": {
                "structure_preserved": self.structure_preserved,
                "collapse_suspected": self.collapse_suspected,
                "heuristic": True,
                "delta_psnr_db": self.delta_psnr,
                "collapse_std_ratio": self.collapse_std_ratio,
            },
        }


def _ks(a: np.ndarray, b: np.ndarray) -> float:
    return float(stats.ks_2samp(a, b).statistic)


def compare_diversity(
    real_pos: Dataset,
    synth_pool: Dataset,
    model,
    budget: int = 2000,
    seed: int = 0,
    delta_psnr: float = 3.0,
    collapse_std_ratio: float = 0.25,
    bins: int = 20,
) -> DiversityReport:
    """Compare pairwise PSNR and perceptual-distance distributions.

    Both sets use the same pair budget and the same pairing seed. Verdicts are
    heuristics: ``structure_preserved`` when mean PSNR differs by at most
    ``delta_psnr`` dB; ``collapse_suspected`` when the synthetic perceptual
    spread falls below ``collapse_std_ratio`` times the real spread.
    """
    if len(real_pos) == 0 or len(synth_pool) == 0:
        raise InvalidArgument("both real and synthetic sets must be non-empty")
    real_imgs, synth_imgs = real_pos.images(), synth_pool.images()
    pr = pairwise_distribution(real_imgs, "psnr", budget, seed)
    ps = pairwise_distribution(synth_imgs, "psnr", budget, seed)
    qr = pairwise_distribution(real_imgs, "perceptual", budget, seed, model=model)
    qs = pairwise_distribution(synth_imgs, "perceptual", budget, seed, model=model)
    # shared bin edges per metric so histograms overlay directly
    for a, b in ((pr, ps), (qr, qs)):
        edges = np.histogram_bin_edges(np.concatenate([a.values, b.values]), bins=bins)
        for d in (a, b):
            d.counts, d.bin_edges = np.histogram(d.values, bins=edges)
    psnr_shift = float(ps.values.mean() - pr.values.mean())
    percep_shift = float(qs.values.mean() - qr.values.mean())
    return DiversityReport(
        psnr_real=pr,
        psnr_synth=ps,
        percep_real=qr,
        percep_synth=qs,
        psnr_mean_shift=psnr_shift,
        percep_mean_shift=percep_shift,
        psnr_ks=_ks(pr.values, ps.values),
        percep_ks=_ks(qr.values, qs.values),
        structure_preserved=abs(psnr_shift) <= delta_psnr,
        collapse_suspected=bool(qs.values.std() < collapse_std_ratio * qr.values.std()),
        delta_psnr=delta_psnr,
        collapse_std_ratio=collapse_std_ratio,
    )
