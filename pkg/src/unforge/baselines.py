"""Six reference unlearning methods under one dispatch.

R retrains from scratch on the retain set, CF finetunes the pretrained model
on it, D distills the pretrained teacher into a student on retain, BD mixes a
competent and an incompetent teacher over retain/forget streams, S adds a
decaying L1 penalty to CF, and P+U prunes by synaptic flow before finetuning.
All methods share the wall-clock harness so UT is comparable.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .data import DatasetBundle, SplitView
from .metrics import UnlearnReport, accuracy, mia_logistic, om_stats, \
    overfitting_profile, unlearning_metric
from .nnkit import PartitionedModel, TrainConfig, distill_loss, train_segments

BASELINE_METHODS = ("R", "CF", "D", "BD", "S", "PU")

# epochs_main defaults: 30 for random forgetting, 10 for class forgetting
EPOCHS_MAIN = {"random_fraction": 30, "whole_class": 10}


@dataclass
class BaselineConfig:
    method: str
    base: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-3, batch_size=256,
                                                                  epochs=30))
    t: float = 4.0          # distillation temperature
    hw: float = 1.0         # hard-label CE weight (D)
    sw: float = 0.1         # soft-label KL weight (D)
    ratio_r: float = 0.3    # retain subsample ratio (BD)
    beta: float = 0.5       # incompetent-teacher mixing weight (BD)
    kl_w: float = 1.0       # global KL scale (BD); 0 drops distillation entirely
    ce_w: float = 0.0       # CE anchor on the BD retain stream
    gamma: float = 1e-4     # initial L1 coefficient (S)
    epoch_l1: int = 15      # epochs from the end with gamma thresholded to 0 (S)
    pr: float = 0.95        # pruning fraction (PU)
    prune_iterations: int = 100
    pruner: str = "synflow"  # "synflow" | "magnitude"

    def __post_init__(self) -> None:
        if self.method not in BASELINE_METHODS:
            raise ValueError(f"unknown baseline {self.method!r}")
        if self.t <= 0:
            raise ValueError("temperature must be positive")
        if not (0 < self.ratio_r <= 1):
            raise ValueError("ratio_r must lie in (0,1]")
        if not (0 < self.pr < 1):
            raise ValueError("pr must lie in (0,1)")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")


def _reinitialized(model: PartitionedModel, seed: int) -> PartitionedModel:
    fresh = copy.deepcopy(model)
    torch.manual_seed(seed)
    for mod in fresh.modules():
        if hasattr(mod, "reset_parameters"):
            mod.reset_parameters()
        if hasattr(mod, "reset_running_stats"):
            mod.reset_running_stats()
    return fresh


def _prunable_weights(model: PartitionedModel):
    for name, mod in model.named_modules():
        if isinstance(mod, (torch.nn.Linear, torch.nn.Conv2d, torch.nn.ConvTranspose2d)):
            yield name, mod.weight


def synflow_masks(model: PartitionedModel, pr: float, input_shape,
                  iterations: int = 100) -> dict:
    """Data-free synaptic-flow scoring: parameters are replaced by their
    magnitudes, an all-ones input is pushed through, and |dR/dw * w| scores
    weights. Pruning proceeds on an exponential sparsity schedule with global
    thresholding. Returns {weight name -> keep mask}."""
    was_training = model.training
    model.eval()
    originals = {id(p): p.detach().clone() for p in model.parameters()}
    signs = {}
    with torch.no_grad():
        for p in model.parameters():
            signs[id(p)] = p.sign()
            p.abs_()
    weights = dict(_prunable_weights(model))
    masks = {name: torch.ones_like(w, dtype=torch.bool) for name, w in weights.items()}
    ones = torch.ones((1, *input_shape))
    try:
        for k in range(1, iterations + 1):
            keep_frac = (1.0 - pr) ** (k / iterations)
            with torch.no_grad():
                for name, w in weights.items():
                    w.mul_(masks[name])
            for p in model.parameters():
                p.requires_grad_(True)
            out = model(ones).sum()
            grads = torch.autograd.grad(out, list(weights.values()), allow_unused=True)
            scores = []
            for (name, w), g in zip(weights.items(), grads):
                s = (w.detach() * (g if g is not None else torch.zeros_like(w))).abs()
                s = torch.where(masks[name], s, torch.full_like(s, -1.0))
                scores.append(s.reshape(-1))
            flat = torch.cat(scores)
            keep = max(1, int(round(keep_frac * flat.numel())))
            threshold = torch.kthvalue(flat, flat.numel() - keep + 1).values
            offset = 0
            for name, w in weights.items():
                n = w.numel()
                sl = flat[offset:offset + n].reshape(w.shape)
                masks[name] = sl >= threshold
                offset += n
    finally:
        with torch.no_grad():
            for p in model.parameters():
                p.copy_(originals[id(p)])
        model.train(was_training)
    return masks


def magnitude_masks(model: PartitionedModel, pr: float) -> dict:
    weights = dict(_prunable_weights(model))
    flat = torch.cat([w.detach().abs().reshape(-1) for w in weights.values()])
    keep = max(1, int(round((1.0 - pr) * flat.numel())))
    threshold = torch.kthvalue(flat, flat.numel() - keep + 1).values
    return {name: w.detach().abs() >= threshold for name, w in weights.items()}


def apply_masks(model: PartitionedModel, masks: dict) -> None:
    with torch.no_grad():
        for name, w in _prunable_weights(model):
            if name in masks:
                w.mul_(masks[name])


def mask_sparsity(masks: dict) -> float:
    total = sum(m.numel() for m in masks.values())
    kept = sum(int(m.sum()) for m in masks.values())
    return 1.0 - kept / total


def _bd_stream(split: SplitView, bundle: DatasetBundle, cfg: BaselineConfig, seed: int):
    ds = bundle.train
    if cfg.ratio_r >= 1.0:
        sub = split.retain
    else:
        rng = np.random.default_rng(seed)
        n_sub = max(1, int(round(cfg.ratio_r * len(split.retain))))
        sub = np.sort(rng.choice(split.retain, size=n_sub, replace=False))
    if cfg.kl_w == 0.0:
        # forget rows carry only KL terms; with the KL scale at zero they
        # contribute nothing, so drop them to keep the CF reduction exact
        x = ds.images[sub]
        y = np.stack([ds.labels[sub], np.zeros(len(sub), dtype=np.int64)], axis=1)
        return x, y
    x = np.concatenate([ds.images[sub], ds.images[split.forget]])
    flags = np.concatenate([np.zeros(len(sub), dtype=np.int64),
                            np.ones(len(split.forget), dtype=np.int64)])
    labels = np.concatenate([ds.labels[sub], ds.labels[split.forget]])
    return x, np.stack([labels, flags], axis=1)


def run_baseline(cfg: BaselineConfig, model: PartitionedModel, bundle: DatasetBundle,
                 split: SplitView, *, seed: int = 0, epochs_main: int | None = None,
                 forget_class: int | None = None,
                 compute_um: bool = True) -> tuple[PartitionedModel, UnlearnReport]:
    """Run one reference method from the pretrained model and report
    RA/FA/MIA/UT (UM and OM attached when requested)."""
    ds = bundle.train
    retain = (ds.images[split.retain], ds.labels[split.retain])
    forget = (ds.images[split.forget], ds.labels[split.forget])
    base = cfg.base
    if epochs_main is not None:
        base = TrainConfig(lr=base.lr, batch_size=base.batch_size, epochs=epochs_main,
                           seed=base.seed)

    student = copy.deepcopy(model)
    t0 = time.perf_counter()
    if cfg.method == "R":
        student = _reinitialized(model, seed)
        train_segments(student, retain, base)
    elif cfg.method == "CF":
        train_segments(student, retain, base)
    elif cfg.method == "D":
        teacher = copy.deepcopy(model)
        teacher.eval()
        for p in teacher.parameters():
            p.requires_grad_(False)

        def d_loss(m, xb, yb):
            with torch.no_grad():
                t_logits = teacher(xb)
            return distill_loss(m(xb), t_logits, yb, cfg.t, cfg.hw, cfg.sw)

        train_segments(student, retain, base, loss=d_loss)
    elif cfg.method == "BD":
        competent = copy.deepcopy(model)
        incompetent = _reinitialized(model, seed + 1)
        for tm in (competent, incompetent):
            tm.eval()
            for p in tm.parameters():
                p.requires_grad_(False)
        x, y2 = _bd_stream(split, bundle, cfg, seed)

        def bd_loss(m, xb, yb):
            labels, flags = yb[:, 0], yb[:, 1].bool()
            logits = m(xb)
            if cfg.kl_w == 0.0:
                return F.cross_entropy(logits, labels) if cfg.ce_w == 1.0 \
                    else cfg.ce_w * F.cross_entropy(logits, labels)
            log_s = F.log_softmax(logits / cfg.t, dim=1)
            terms = []
            retain_rows = ~flags
            if retain_rows.any():
                if cfg.ce_w != 0.0:
                    terms.append(cfg.ce_w * F.cross_entropy(logits[retain_rows],
                                                            labels[retain_rows]))
                with torch.no_grad():
                    t_log = F.log_softmax(competent(xb[retain_rows]) / cfg.t, dim=1)
                kl = F.kl_div(log_s[retain_rows], t_log, reduction="batchmean",
                              log_target=True)
                terms.append(cfg.kl_w * (1 - cfg.beta) * cfg.t ** 2 * kl)
            if flags.any():
                with torch.no_grad():
                    t_log = F.log_softmax(incompetent(xb[flags]) / cfg.t, dim=1)
                kl = F.kl_div(log_s[flags], t_log, reduction="batchmean", log_target=True)
                terms.append(cfg.kl_w * cfg.beta * cfg.t ** 2 * kl)
            return sum(terms)

        train_segments(student, (x, y2), base, loss=bd_loss)
    elif cfg.method == "S":
        window = base.epochs - cfg.epoch_l1
        epoch_box = {"t": 0}

        def s_loss(m, xb, yb):
            ce = F.cross_entropy(m(xb), yb)
            t = epoch_box["t"]
            g = cfg.gamma * (1.0 - t / window) if (window > 0 and t < window) else 0.0
            if g <= 0.0:
                return ce
            l1 = sum(p.abs().sum() for p in m.parameters())
            return ce + g * l1

        train_segments(student, retain, base, loss=s_loss,
                       log_sink=lambda rec: epoch_box.__setitem__("t", rec["epoch"] + 1))
    elif cfg.method == "PU":
        if cfg.pruner == "synflow":
            masks = synflow_masks(student, cfg.pr, ds.image_shape,
                                  iterations=cfg.prune_iterations)
        else:
            masks = magnitude_masks(student, cfg.pr)
        apply_masks(student, masks)
        train_segments(student, retain, base,
                       post_step=lambda m: apply_masks(m, masks))
        student.prune_masks = masks
    ut = time.perf_counter() - t0

    ra = accuracy(student, retain)
    fa = accuracy(student, forget)
    eval_imgs, eval_labels = bundle.eval.images, bundle.eval.labels
    if forget_class is not None:
        keep = eval_labels == forget_class
        eval_imgs, eval_labels = eval_imgs[keep], eval_labels[keep]
    mia = mia_logistic(student, forget, (eval_imgs, eval_labels), seed=seed)
    um = unlearning_metric(student, retain, forget, seed=seed) if compute_um else None
    om = om_stats(overfitting_profile(student, retain, cap=64, seed=seed)) \
        if compute_um else None
    report = UnlearnReport(method=cfg.method, ra=ra, fa=fa, mia=mia, ut=ut,
                           um=um, om_stats=om)
    return student, report
