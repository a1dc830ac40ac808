"""Modular training: the offline anchoring phase and the online unlearning
phase over the three model segments.

Offline, the final segment is repeatedly reset to its pretrained weights and
re-anchored on a tiny remembrance set while the intermediate segment absorbs
the training knowledge with the beginning frozen as a feature extractor.
Online, only the beginning retrains epoch by epoch on the reduced retain set
(with scheduled final refreshes), and a single closing intermediate epoch
triggers the catastrophic forget.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .collect import ReducedRetainSet
from .data import LabeledDataset
from .metrics import GRAD_SAMPLE_CAP, _cap_samples
from .nnkit import PartitionedModel, Snapshot, TrainConfig, restore, train_segments


@dataclass
class RemembranceSet:
    """Exactly m images per class, drawn from the remembrance pool."""

    images: np.ndarray
    labels: np.ndarray
    per_class: int

    def __len__(self) -> int:
        return len(self.labels)


def draw_remembrance(pool: LabeledDataset, m_per_class: int, seed: int = 0,
                     exclude_classes=()) -> RemembranceSet:
    """Sample m images per class (excluded classes skipped, e.g. the
    forgotten class under whole-class forgetting)."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for class_id in range(pool.class_count):
        if class_id in exclude_classes:
            continue
        view = np.nonzero(pool.labels == class_id)[0]
        if len(view) < m_per_class:
            raise ValueError(f"remembrance pool has only {len(view)} samples of "
                             f"class {class_id}, need {m_per_class}")
        pick = rng.choice(view, size=m_per_class, replace=False)
        images.append(pool.images[pick])
        labels.append(pool.labels[pick])
    if not images:
        raise ValueError("remembrance set resolved empty")
    return RemembranceSet(np.concatenate(images), np.concatenate(labels), m_per_class)


@dataclass
class OfflineSchedule:
    r_iters: int = 10
    final_epochs: int = 20
    intermediate_epochs: int = 20
    lr_final: float = 1e-4
    lr_intermediate: float = 1e-5
    batch_size: int = 256
    subsample_fraction: float = 1.0  # fraction of the original dataset per iteration


@dataclass
class OnlineSchedule:
    s: int = 30
    s1: int = 15
    tau: int = 15
    lr: float = 1e-3
    lr_final: float = 1e-4
    lr_intermediate: float | None = None  # closing intermediate epoch; defaults to lr
    batch_size: int = 256

    def __post_init__(self) -> None:
        if not (0 < self.tau < self.s):
            raise ValueError("need 0 < tau < S")
        if self.lr_intermediate is None:
            self.lr_intermediate = self.lr

    def refresh_steps(self):
        """1-based steps at which the final segment is refreshed."""
        return [s for s in range(1, self.s + 1) if s < self.s - self.tau]


@dataclass
class ModularSchedule:
    offline: OfflineSchedule = field(default_factory=OfflineSchedule)
    online: OnlineSchedule = field(default_factory=OnlineSchedule)


def eta_epoch_rule(eta: float) -> int:
    """Compression-thresholded epoch budget: high eta keeps the full budget,
    strong compression shortens training to preserve utility."""
    if eta > 0.7:
        return 30
    if eta > 0.4:
        return 20
    return 10


def reduced_to_arrays(reduced: ReducedRetainSet, ds: LabeledDataset):
    """Materialize a reduced retain set as (images, labels) arrays."""
    parts_x, parts_y = [], []
    if len(reduced.real_indices):
        parts_x.append(ds.images[reduced.real_indices])
        parts_y.append(reduced.real_labels)
    if len(reduced.condensed_labels):
        parts_x.append(reduced.condensed_images)
        parts_y.append(reduced.condensed_labels)
    if not parts_x:
        raise ValueError("reduced retain set is empty: nothing to retain against")
    return np.concatenate(parts_x), np.concatenate(parts_y)


def _log(sink, records, **fields):
    records.append(fields)
    if sink is not None:
        sink(fields)


def offline_phase(model: PartitionedModel, ds: LabeledDataset,
                  remembrance: RemembranceSet, sched: OfflineSchedule,
                  original: Snapshot, *, loss="cross_entropy", seed: int = 0,
                  log_sink=None) -> list:
    """R iterations of {reset final to pretrained, re-anchor final on the
    remembrance set, train intermediate on the original dataset}. The
    beginning segment is never trained here."""
    if len(remembrance) == 0:
        raise ValueError("empty remembrance set")
    records: list = []
    rng = np.random.default_rng(seed)
    for r in range(sched.r_iters):
        t0 = time.perf_counter()
        restore(model, original, segments=("final",))
        _log(log_sink, records, phase="offline", step=r, segment="final",
             epochs=0, loss=None, wall_ms=1000 * (time.perf_counter() - t0),
             data="snapshot_reset", samples=0)

        t0 = time.perf_counter()
        log = train_segments(model, (remembrance.images, remembrance.labels),
                             TrainConfig(lr=sched.lr_final, batch_size=sched.batch_size,
                                         epochs=sched.final_epochs, seed=seed + 3 * r),
                             trainable=("final",), loss=loss)
        _log(log_sink, records, phase="offline", step=r, segment="final",
             epochs=sched.final_epochs, loss=log[-1]["loss"] if log else None,
             wall_ms=1000 * (time.perf_counter() - t0), data="remembrance",
             samples=len(remembrance))

        if sched.subsample_fraction < 1.0:
            m = max(1, int(round(sched.subsample_fraction * len(ds))))
            pick = rng.choice(len(ds), size=m, replace=False)
            data = (ds.images[pick], ds.labels[pick])
        else:
            data = (ds.images, ds.labels)
        t0 = time.perf_counter()
        log = train_segments(model, data,
                             TrainConfig(lr=sched.lr_intermediate,
                                         batch_size=sched.batch_size,
                                         epochs=sched.intermediate_epochs,
                                         seed=seed + 3 * r + 1),
                             trainable=("intermediate",), loss=loss)
        _log(log_sink, records, phase="offline", step=r, segment="intermediate",
             epochs=sched.intermediate_epochs, loss=log[-1]["loss"] if log else None,
             wall_ms=1000 * (time.perf_counter() - t0), data="original",
             samples=len(data[1]))
    return records


def online_phase(model: PartitionedModel, reduced: ReducedRetainSet,
                 ds: LabeledDataset, remembrance: RemembranceSet,
                 sched: OnlineSchedule, *, loss="cross_entropy", seed: int = 0,
                 log_sink=None):
    """S beginning-epochs on the reduced retain set with scheduled final
    refreshes, then one intermediate epoch. Returns (records, ut_seconds)."""
    x, y = reduced_to_arrays(reduced, ds)
    records: list = []
    t_start = time.perf_counter()
    for s in range(1, sched.s + 1):
        t0 = time.perf_counter()
        log = train_segments(model, (x, y),
                             TrainConfig(lr=sched.lr, batch_size=sched.batch_size,
                                         epochs=1, seed=seed + 100 + s),
                             trainable=("beginning",), loss=loss)
        _log(log_sink, records, phase="online", step=s, segment="beginning",
             epochs=1, loss=log[-1]["loss"], wall_ms=1000 * (time.perf_counter() - t0),
             data="reduced", samples=len(y))
        if s < sched.s - sched.tau:
            t0 = time.perf_counter()
            log = train_segments(model, (remembrance.images, remembrance.labels),
                                 TrainConfig(lr=sched.lr_final,
                                             batch_size=sched.batch_size,
                                             epochs=sched.s1, seed=seed + 200 + s),
                                 trainable=("final",), loss=loss)
            _log(log_sink, records, phase="online", step=s, segment="final",
                 epochs=sched.s1, loss=log[-1]["loss"],
                 wall_ms=1000 * (time.perf_counter() - t0), data="remembrance",
                 samples=len(remembrance))
    t0 = time.perf_counter()
    log = train_segments(model, (x, y),
                         TrainConfig(lr=sched.lr_intermediate, batch_size=sched.batch_size,
                                     epochs=1, seed=seed + 300),
                         trainable=("intermediate",), loss=loss)
    _log(log_sink, records, phase="online", step=sched.s + 1, segment="intermediate",
         epochs=1, loss=log[-1]["loss"], wall_ms=1000 * (time.perf_counter() - t0),
         data="reduced", samples=len(y))
    ut = time.perf_counter() - t_start
    return records, ut


def intermediate_gradient_profile(model_a: PartitionedModel,
                                  model_b: PartitionedModel, data,
                                  cap: int = GRAD_SAMPLE_CAP, seed: int = 0,
                                  bins: int = 40) -> dict:
    """Per-parameter absolute gradients of both models' intermediate segments
    under the same retain loss, with shared-bin histograms."""
    counts_a = sum(p.numel() for p in model_a.intermediate.parameters())
    counts_b = sum(p.numel() for p in model_b.intermediate.parameters())
    if counts_a != counts_b:
        raise ValueError(f"intermediate partitions differ: {counts_a} vs {counts_b}")
    images, labels = _cap_samples(data, cap, seed)
    x = torch.as_tensor(images, dtype=torch.float32)
    y = torch.as_tensor(labels, dtype=torch.int64)

    def abs_grads(model):
        was_training = model.training
        model.eval()
        params = list(model.intermediate.parameters())
        flags = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad_(True)
        loss = torch.nn.functional.cross_entropy(model(x), y)
        grads = torch.autograd.grad(loss, params)
        for p, flag in zip(params, flags):
            p.requires_grad_(flag)
        model.train(was_training)
        return torch.cat([g.reshape(-1).abs() for g in grads]).numpy().astype(np.float64)

    a, b = abs_grads(model_a), abs_grads(model_b)
    hi = max(a.max(), b.max()) or 1.0
    edges = np.linspace(0.0, hi, bins + 1)
    return {
        "a": {"abs_grads": a, "hist": np.histogram(a, bins=edges)[0], "std": float(a.std())},
        "b": {"abs_grads": b, "hist": np.histogram(b, bins=edges)[0], "std": float(b.std())},
        "edges": edges,
    }
