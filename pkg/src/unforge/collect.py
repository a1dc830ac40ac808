"""Reduced retain set construction and its combinatorics.

The collection protocol walks the clusters once: a cluster untouched by the
forget set contributes its condensed image, a touched cluster contributes its
residual real members. The analytic compression-ratio bound and the
coupon-collector threshold are implemented alongside a Monte-Carlo
verification of the balanced-cluster regime.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .clustering import ClusterIndex
from .condense import CondensedSet
from .data import LabeledDataset


@dataclass
class ReducedRetainSet:
    """Real residuals from forget-touched clusters plus condensed images from
    untouched ones."""

    real_indices: np.ndarray
    real_labels: np.ndarray
    condensed_images: np.ndarray
    condensed_labels: np.ndarray
    n_r: int

    @property
    def real_samples(self):
        return list(zip(self.real_indices.tolist(), self.real_labels.tolist()))

    def __len__(self) -> int:
        return self.n_r


@dataclass
class EtaEstimate:
    """Compression ratio N_r / N_R: empirical, analytic leading term, and
    Monte-Carlo mean/std."""

    empirical: float | None = None
    analytic_main: float | None = None
    mc_mean: float | None = None
    mc_std: float | None = None
    trials: int = 0

    def to_dict(self) -> dict:
        return {"empirical": self.empirical, "analytic_main": self.analytic_main,
                "mc_mean": self.mc_mean, "mc_std": self.mc_std, "trials": self.trials}


def collect_reduced_retain(clusters: ClusterIndex, condensed: CondensedSet,
                           forget, ds: LabeledDataset) -> ReducedRetainSet:
    """Single pass over clusters with a precomputed forget-membership mask."""
    forget = np.asarray(forget, dtype=np.int64)
    mask = np.zeros(len(ds), dtype=bool)
    mask[forget] = True

    real_idx, real_lab = [], []
    cond_pos, cond_lab = [], []
    for class_id, j, members, _label in clusters.clusters():
        pos = condensed.position(class_id, j)
        if pos is None:
            raise ValueError(f"condensed set has no image for cluster ({class_id},{j})")
        touched = mask[members]
        if not touched.any():
            cond_pos.append(pos)
            cond_lab.append(class_id)
        else:
            residual = members[~touched]
            real_idx.extend(residual.tolist())
            real_lab.extend(ds.labels[residual].tolist())

    real_indices = np.asarray(real_idx, dtype=np.int64)
    real_labels = np.asarray(real_lab, dtype=np.int64)
    if cond_pos:
        cond_images = condensed.images[np.asarray(cond_pos)]
        cond_labels = np.asarray(cond_lab, dtype=np.int64)
    else:
        cond_images = np.zeros((0, *ds.image_shape), dtype=np.float32)
        cond_labels = np.zeros(0, dtype=np.int64)
    return ReducedRetainSet(real_indices, real_labels, cond_images, cond_labels,
                            n_r=len(real_indices) + len(cond_labels))


def eta_analytic(c: int, k: int, n_d: int, n_r: int) -> float:
    """Leading term of the asymptotic compression-ratio bound,
    (1 - 1/cK)^(N_D - cK) * cK / N_R, evaluated in the log domain.

    The big-O remainder of the bound is deliberately excluded.
    """
    if c < 1 or k < 1:
        raise ValueError("c and K must be >= 1")
    if n_r > n_d or n_r <= 0:
        raise ValueError("need 0 < N_R <= N_D")
    ck = c * k
    exponent = n_d - ck
    if exponent == 0:
        return ck / n_r
    if ck == 1:
        return 0.0
    return math.exp(exponent * math.log1p(-1.0 / ck)) * ck / n_r


def min_retain_threshold(c: int, k: int, n_d: int) -> float:
    """Retain-set size above which the expected compression ratio stays
    below 1: N_D - cK*ln(cK) + 1 (natural log)."""
    ck = c * k
    if ck < 2:
        raise ValueError("cK must be >= 2")
    return n_d - ck * math.log(ck) + 1.0


def coupon_collector_first_coverage(n_bins: int, trials: int, seed: int = 0) -> np.ndarray:
    """Number of uniform draws until every bin has been hit, per trial."""
    rng = np.random.default_rng(seed)
    out = np.empty(trials, dtype=np.int64)
    chunk = max(8 * n_bins, 64)
    for t in range(trials):
        seen = np.zeros(n_bins, dtype=bool)
        drawn = 0
        remaining = n_bins
        while True:
            block = rng.integers(0, n_bins, size=chunk)
            vals, first = np.unique(block, return_index=True)
            novel = ~seen[vals]
            novel_first = np.sort(first[novel])
            if len(novel_first) >= remaining:
                out[t] = drawn + novel_first[remaining - 1] + 1
                break
            seen[vals[novel]] = True
            remaining -= int(novel.sum())
            drawn += chunk
    return out


def eta_monte_carlo(c: int, k: int, n_d: int, n_f: int, trials: int,
                    seed: int = 0) -> EtaEstimate:
    """Simulate uniform forget placement over balanced clusters and run the
    collection counting rule. Requires N_D divisible by cK (the bound's own
    balance assumption)."""
    ck = c * k
    if n_d % ck != 0:
        raise ValueError(f"N_D={n_d} not divisible by cK={ck}; the bound assumes "
                         "balanced clusters")
    if not (0 <= n_f <= n_d):
        raise ValueError("need 0 <= N_F <= N_D")
    n_r_retain = n_d - n_f
    analytic = eta_analytic(c, k, n_d, n_r_retain) if n_r_retain > 0 else None
    if n_f == n_d:
        return EtaEstimate(analytic_main=analytic, mc_mean=0.0, mc_std=0.0, trials=trials)
    size = n_d // ck
    rng = np.random.default_rng(seed)
    etas = np.empty(trials, dtype=np.float64)
    chunk = max(1, min(trials, 20_000))
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        if n_f == 0:
            etas[done:done + m] = ck / n_r_retain
            done += m
            continue
        u = rng.random((m, n_d))
        forget = np.argpartition(u, n_f - 1, axis=1)[:, :n_f]
        cid = np.sort(forget // size, axis=1)
        touched = 1 + (np.diff(cid, axis=1) != 0).sum(axis=1)
        n_red = (ck - touched) + touched * size - n_f
        etas[done:done + m] = n_red / n_r_retain
        done += m
    std = float(etas.std(ddof=1)) if trials > 1 else 0.0
    return EtaEstimate(analytic_main=analytic, mc_mean=float(etas.mean()),
                       mc_std=std, trials=trials)
