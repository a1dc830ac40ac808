"""Downstream applications: an Otsu-gated membership-inference defense via
partial unlearning, a model-inversion audit of unlearned models, and
unlearning inside a condensed (autoencoder-headed) model with a swappable
final head.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .collect import ReducedRetainSet, collect_reduced_retain
from .clustering import cluster_per_class
from .condense import condense_fdm, fit_inverter
from .data import DatasetBundle, LabeledDataset, SplitView
from .metrics import MiaPopulation, accuracy, mia_shadow, overfitting_profile
from .modular import ModularSchedule, OfflineSchedule, OnlineSchedule, RemembranceSet, \
    draw_remembrance, offline_phase, online_phase
from .nnkit import PartitionedModel, TrainConfig, snapshot, train_segments


def otsu_threshold(values, bins: int = 256) -> float:
    """Threshold maximizing between-class variance over a histogram of the
    values. Ties break toward the lowest cut."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2 or v.min() == v.max():
        raise ValueError("otsu needs at least two distinct values")
    hist, edges = np.histogram(v, bins=bins, range=(v.min(), v.max()))
    centers = 0.5 * (edges[:-1] + edges[1:])
    p = hist / hist.sum()
    w0 = np.cumsum(p)
    mu = np.cumsum(p * centers)
    mu_total = mu[-1]
    best_t, best_var = None, -1.0
    for t in range(1, bins):
        w_lo, w_hi = w0[t - 1], 1.0 - w0[t - 1]
        if w_lo == 0.0 or w_hi == 0.0:
            continue
        mu_lo = mu[t - 1] / w_lo
        mu_hi = (mu_total - mu[t - 1]) / w_hi
        var = w_lo * w_hi * (mu_lo - mu_hi) ** 2
        if var > best_var:
            best_var, best_t = var, t
    if best_t is None:
        raise ValueError("no valid threshold: all mass in one bin")
    return float(edges[best_t])


@dataclass
class OverfitPartition:
    om_values: np.ndarray
    threshold: float
    overfit_indices: np.ndarray  # smaller metric values mark stronger overfitting

    @classmethod
    def from_model(cls, model, ds: LabeledDataset, cap: int = 1024,
                   seed: int = 0, log_scale: bool = True) -> "OverfitPartition":
        """Otsu-binarize the per-sample overfitting metric. The metric is
        positive and heavy-tailed on converged models, so by default the
        histogram is built over log-values (geometric bins); the returned
        threshold is always on the original scale."""
        om = overfitting_profile(model, (ds.images, ds.labels), cap=cap, seed=seed)
        if log_scale:
            floor = max(om[om > 0].min() if (om > 0).any() else 1e-12, 1e-12)
            thr = float(np.exp(otsu_threshold(np.log(np.maximum(om, floor)))))
        else:
            thr = otsu_threshold(om)
        return cls(om_values=om, threshold=thr,
                   overfit_indices=np.nonzero(om < thr)[0])


def mia_defense(model: PartitionedModel, bundle: DatasetBundle,
                defense_epochs: int = 3, *, m_per_class: int = 10,
                offline_sched: OfflineSchedule | None = None,
                online_lr: float = 3e-3, online_lr_final: float = 1e-2,
                online_lr_intermediate: float = 1e-3, online_s1: int = 20,
                shadow_count: int = 4, shadow_epochs: int = 150,
                seed: int = 0, log_sink=None):
    """Unlearn the most overfitted training samples for a few epochs.

    The overfitting metric is computed per training sample, Otsu-binarized,
    and the low-metric side is treated as a forget set; the modular online
    phase then runs over the residual real samples. Returns the regularized
    model and a before/after report of shadow-MIA and test accuracy.
    """
    ds = bundle.train
    before_model = copy.deepcopy(model)
    test = (bundle.eval.images, bundle.eval.labels)

    rng = np.random.default_rng(seed)
    n_eval = len(bundle.eval)
    half = rng.permutation(n_eval)
    pool_idx, nonmember_idx = half[:n_eval // 2], half[n_eval // 2:]
    member_idx = rng.choice(len(ds), size=min(len(nonmember_idx), len(ds)),
                            replace=False)
    population = MiaPopulation(
        pool=(bundle.eval.images[pool_idx], bundle.eval.labels[pool_idx]),
        member=(ds.images[member_idx], ds.labels[member_idx]),
        nonmember=(bundle.eval.images[nonmember_idx], bundle.eval.labels[nonmember_idx]))

    mia_before = mia_shadow(model, population, shadow_count,
                            epochs=shadow_epochs, seed=seed)
    acc_before = accuracy(model, test)

    try:
        part = OverfitPartition.from_model(model, ds, seed=seed)
    except ValueError:
        report = {"mia_before": mia_before, "mia_after": mia_before,
                  "acc_before": acc_before, "acc_after": acc_before,
                  "overfit_count": 0, "noop": True}
        return before_model, report

    forget_mask = np.zeros(len(ds), dtype=bool)
    forget_mask[part.overfit_indices] = True
    retain_idx = np.nonzero(~forget_mask)[0]
    if defense_epochs == 0 or len(retain_idx) == 0:
        report = {"mia_before": mia_before, "mia_after": mia_before,
                  "acc_before": acc_before, "acc_after": acc_before,
                  "overfit_count": int(forget_mask.sum()), "noop": True}
        return before_model, report

    # residual real samples only: every cluster counts as touched
    reduced = ReducedRetainSet(
        real_indices=retain_idx, real_labels=ds.labels[retain_idx],
        condensed_images=np.zeros((0, *ds.image_shape), dtype=np.float32),
        condensed_labels=np.zeros(0, dtype=np.int64), n_r=len(retain_idx))
    remembrance = draw_remembrance(bundle.remembrance_pool, m_per_class, seed=seed)

    original = snapshot(model)
    sched = offline_sched or OfflineSchedule(r_iters=2, final_epochs=10,
                                             intermediate_epochs=5, lr_final=1e-3,
                                             lr_intermediate=1e-4)
    offline_phase(model, ds, remembrance, sched, original, seed=seed,
                  log_sink=log_sink)
    s = max(defense_epochs, 2)
    online = OnlineSchedule(s=s, s1=online_s1, tau=1, lr=online_lr,
                            lr_final=online_lr_final,
                            lr_intermediate=online_lr_intermediate,
                            batch_size=64)
    online_phase(model, reduced, ds, remembrance, online, seed=seed,
                 log_sink=log_sink)

    mia_after = mia_shadow(model, population, shadow_count,
                           epochs=shadow_epochs, seed=seed)
    acc_after = accuracy(model, test)
    report = {"mia_before": mia_before, "mia_after": mia_after,
              "acc_before": acc_before, "acc_after": acc_after,
              "overfit_count": int(forget_mask.sum()),
              "om_threshold": part.threshold, "noop": False}
    return model, report


def invert_unlearned(model: PartitionedModel, class_count: int, image_shape,
                     k: int = 1, *, epochs: int = 300, lr: float = 1e-2,
                     seed: int = 0) -> np.ndarray:
    """Model-inversion audit: reconstruct K images per class from the model
    alone. Synthetic cluster labels are uniform pseudo-clusters; with no
    member images the inversion loss is cross-entropy only."""
    n_labels = class_count * k
    label_ids = np.arange(n_labels)
    class_targets = label_ids // k
    inverter = fit_inverter(model, n_labels, label_ids, class_targets, image_shape,
                            epochs=epochs, lam=0.0, lr=lr, members=None, seed=seed)
    with torch.no_grad():
        images = inverter(torch.eye(n_labels)).clamp(0.0, 1.0).numpy()
    return images.reshape(class_count, k, *image_shape)


def reconstruction_distance(recons: np.ndarray, ds: LabeledDataset) -> np.ndarray:
    """Mean pixel L2 distance of each class's reconstructions to that class's
    true mean image."""
    c = recons.shape[0]
    out = np.empty(c)
    for class_id in range(c):
        view = ds.images[ds.labels == class_id]
        mean_img = view.mean(axis=0)
        d = np.linalg.norm(recons[class_id].reshape(recons.shape[1], -1)
                           - mean_img.reshape(1, -1), axis=1)
        out[class_id] = d.mean()
    return out


@dataclass
class CondensedModel:
    """Autoencoder-headed modular model acting as an unlearnable substitute
    for a condensed dataset."""

    model: PartitionedModel
    remembrance: RemembranceSet
    manifest: dict = field(default_factory=dict)


def ae_composite_loss(recon_weight: float = 1.0):
    """CE on the classification head plus reconstruction MSE at the
    autoencoder output (the intermediate segment's output)."""

    def loss_fn(model, xb, yb):
        recon = model.intermediate(model.beginning(xb))
        return F.cross_entropy(model.final(recon), yb) + \
            recon_weight * F.mse_loss(recon, xb)

    return loss_fn


def _head_module(arch: str, image_shape, class_count: int, width: int, seed: int):
    from .nnkit import build_model
    head = build_model(arch, image_shape, class_count, width=width, seed=seed)
    return torch.nn.Sequential(head.beginning, head.intermediate, head.final)


def condensed_model_unlearn(ae_model: PartitionedModel, bundle: DatasetBundle,
                            split: SplitView, new_final_arch: str = "mlp", *,
                            k: int = 4, m_per_class: int = 10,
                            schedule: ModularSchedule | None = None,
                            head_width: int = 64, head_epochs: int = 60,
                            head_lr: float = 1e-3, fdm_epochs: int = 60,
                            seed: int = 0, log_sink=None):
    """Modular unlearning on the autoencoder-headed model, then swap the
    final for a new architecture trained on remembrance samples only.

    Returns (augmented model, report) where the report pairs the swapped
    head's remembrance-only training against training the same head directly
    on the retain set.
    """
    if ae_model.arch_id != "autoencoder_ae":
        raise ValueError("condensed-model unlearning needs the autoencoder topology")
    ds = bundle.train
    with torch.no_grad():
        probe = ae_model.intermediate(ae_model.beginning(
            torch.as_tensor(ds.images[:1])))
    if tuple(probe.shape[1:]) != ds.image_shape:
        raise ValueError(f"autoencoder output {tuple(probe.shape[1:])} does not "
                         f"match image shape {ds.image_shape}")

    sched = schedule or ModularSchedule(
        offline=OfflineSchedule(r_iters=2, final_epochs=10, intermediate_epochs=5),
        online=OnlineSchedule(s=6, s1=5, tau=2))
    forget_classes = set(np.unique(ds.labels)) - set(np.unique(ds.labels[split.retain]))
    remembrance = draw_remembrance(bundle.remembrance_pool, m_per_class, seed=seed,
                                   exclude_classes=forget_classes)

    clusters = cluster_per_class(ds, ae_model, k, seed=seed)
    condensed = condense_fdm(clusters, ds, ae_model, epochs=fdm_epochs, seed=seed)
    reduced = collect_reduced_retain(clusters, condensed, split.forget, ds)

    original = snapshot(ae_model)
    loss_fn = ae_composite_loss()
    offline_phase(ae_model, ds, remembrance, sched.offline, original,
                  loss=loss_fn, seed=seed, log_sink=log_sink)
    online_phase(ae_model, reduced, ds, remembrance, sched.online,
                 loss=loss_fn, seed=seed, log_sink=log_sink)

    # swap the final for the new architecture; train it on remembrance only
    ae_model.final = _head_module(new_final_arch, ds.image_shape, ds.class_count,
                                  head_width, seed + 1)
    head_cfg = TrainConfig(lr=head_lr, batch_size=64, epochs=head_epochs, seed=seed)
    t0 = time.perf_counter()
    train_segments(ae_model, (remembrance.images, remembrance.labels), head_cfg,
                   trainable=("final",))
    augmented_time = time.perf_counter() - t0
    if log_sink is not None:
        log_sink({"phase": "head_swap", "segment": "final", "data": "remembrance",
                  "samples": len(remembrance), "epochs": head_epochs,
                  "wall_ms": 1000 * augmented_time})

    # reference: the same head trained directly on the retain set
    direct = _head_module(new_final_arch, ds.image_shape, ds.class_count,
                          head_width, seed + 1)
    direct_cfg = TrainConfig(lr=head_lr, batch_size=64, epochs=head_epochs, seed=seed)
    retain_data = (ds.images[split.retain], ds.labels[split.retain])
    t0 = time.perf_counter()
    _train_plain(direct, retain_data, direct_cfg)
    direct_time = time.perf_counter() - t0

    test = (bundle.eval.images, bundle.eval.labels)
    forget = (ds.images[split.forget], ds.labels[split.forget])
    report = {
        "augmented_test_acc": accuracy(ae_model, test),
        "direct_test_acc": _plain_accuracy(direct, test),
        "augmented_fa": accuracy(ae_model, forget),
        "augmented_time_s": augmented_time,
        "direct_time_s": direct_time,
        "remembrance_samples": len(remembrance),
        "head_arch": new_final_arch,
    }
    condensed_model = CondensedModel(model=ae_model, remembrance=remembrance,
                                     manifest={"k": k, "seed": seed,
                                               "forget_count": len(split.forget)})
    return condensed_model, report


def _train_plain(module: torch.nn.Module, data, cfg: TrainConfig) -> None:
    x = torch.as_tensor(np.asarray(data[0]), dtype=torch.float32)
    y = torch.as_tensor(np.asarray(data[1]), dtype=torch.int64)
    opt = torch.optim.Adam(module.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    module.train()
    for _ in range(cfg.epochs):
        perm = torch.from_numpy(rng.permutation(len(x)))
        for start in range(0, len(x), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            opt.zero_grad()
            loss = F.cross_entropy(module(x[idx]), y[idx])
            loss.backward()
            opt.step()
    module.eval()


def _plain_accuracy(module: torch.nn.Module, samples) -> float:
    x = torch.as_tensor(np.asarray(samples[0]), dtype=torch.float32)
    y = np.asarray(samples[1])
    module.eval()
    with torch.no_grad():
        pred = module(x).argmax(dim=1).numpy()
    return 100.0 * float((pred == y).mean())
