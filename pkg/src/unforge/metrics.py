"""Measurement: accuracies, the unlearning and overfitting metrics,
membership-inference attacks, the RBE ranking, and gradient diagnostics.

All metrics are read-only over the model: parameters are never mutated and
models are evaluated with normalization/dropout in eval mode.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import balanced_accuracy_score
from sklearn.model_selection import StratifiedKFold

from .nnkit import PartitionedModel, SEGMENTS, TrainConfig, build_model, train_segments

GRAD_SAMPLE_CAP = 512  # per-set cap for gradient-based metrics

METRIC_COLUMNS = ("RA", "FA", "MIA", "UT")
RBE_WEIGHTS = (1.0, 0.5, 1.0, 1.0)


@dataclass
class UnlearnReport:
    """All measurements for one unlearning run."""

    method: str
    ra: float
    fa: float
    mia: float
    ut: float
    um: float | None = None
    om_stats: dict | None = None
    eta: dict | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in ("ra", "fa", "mia"):
            v = getattr(self, name)
            if not (0.0 <= v <= 100.0):
                raise ValueError(f"{name}={v} outside [0,100]")
        if self.ut < 0:
            raise ValueError("UT must be >= 0")
        if self.um is not None and not math.isnan(self.um) and not (0.0 <= self.um <= 200.0):
            raise ValueError(f"UM={self.um} outside [0,200]")

    def to_dict(self) -> dict:
        return asdict(self)


def _eval_logits(model, images, batch_size: int = 1024) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    was_training = model.training
    model.eval()
    outs = []
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            outs.append(model(x[start:start + batch_size]))
    model.train(was_training)
    return torch.cat(outs) if outs else torch.zeros((0, 1))


def accuracy(model, samples) -> float:
    """Top-1 accuracy in percent over (images, labels)."""
    images, labels = samples
    if len(labels) == 0:
        raise ValueError("empty sample set")
    logits = _eval_logits(model, images)
    pred = logits.argmax(dim=1).numpy()
    return 100.0 * float((pred == np.asarray(labels)).mean())


def per_sample_losses(model, samples, batch_size: int = 1024) -> np.ndarray:
    images, labels = samples
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.int64)
    was_training = model.training
    model.eval()
    losses = []
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            logits = model(x[start:start + batch_size])
            losses.append(F.cross_entropy(logits, y[start:start + batch_size],
                                          reduction="none"))
    model.train(was_training)
    return torch.cat(losses).numpy().astype(np.float64)


def _cap_samples(samples, cap: int, seed: int):
    images, labels = samples
    n = len(labels)
    if n <= cap:
        return np.asarray(images), np.asarray(labels)
    idx = np.random.default_rng(seed).choice(n, size=cap, replace=False)
    return np.asarray(images)[idx], np.asarray(labels)[idx]


def _flat_mean_grad(model, samples, cap: int = GRAD_SAMPLE_CAP, seed: int = 0) -> np.ndarray:
    """Gradient of the mean cross-entropy loss over the (capped) sample set,
    flattened across the full parameter vector."""
    images, labels = _cap_samples(samples, cap, seed)
    x = torch.as_tensor(images, dtype=torch.float32)
    y = torch.as_tensor(labels, dtype=torch.int64)
    was_training = model.training
    model.eval()
    params = list(model.parameters())
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(True)
    loss = F.cross_entropy(model(x), y)
    grads = torch.autograd.grad(loss, params)
    for p, flag in zip(params, flags):
        p.requires_grad_(flag)
    model.train(was_training)
    return torch.cat([g.reshape(-1) for g in grads]).detach().numpy().astype(np.float64)


def unlearning_metric_from_grads(grad_retain, grad_forget) -> float:
    """100 * (1 - cosine similarity); 100 marks orthogonal gradients."""
    g_r = np.asarray(grad_retain, dtype=np.float64).ravel()
    g_f = np.asarray(grad_forget, dtype=np.float64).ravel()
    nr, nf = np.linalg.norm(g_r), np.linalg.norm(g_f)
    if nr == 0.0 or nf == 0.0:
        warnings.warn("unlearning metric undefined: a gradient has zero norm")
        return math.nan
    return 100.0 * (1.0 - float(g_r @ g_f) / (nr * nf))


def unlearning_metric(model, retain_samples, forget_samples,
                      cap: int = GRAD_SAMPLE_CAP, seed: int = 0) -> float:
    if len(retain_samples[1]) == 0 or len(forget_samples[1]) == 0:
        raise ValueError("both sample sets must be non-empty")
    g_r = _flat_mean_grad(model, retain_samples, cap, seed)
    g_f = _flat_mean_grad(model, forget_samples, cap, seed + 1)
    return unlearning_metric_from_grads(g_r, g_f)


def overfitting_metric(model, sample) -> float:
    """|loss - mean(|grad|)| for a single (input, label) pair; smaller means
    the model is more overfitted on the pair."""
    x, y = sample
    x = torch.as_tensor(np.asarray(x), dtype=torch.float32)
    if x.ndim == 3:
        x = x.unsqueeze(0)
    y = torch.as_tensor([int(y)], dtype=torch.int64)
    was_training = model.training
    model.eval()
    params = list(model.parameters())
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(True)
    loss = F.cross_entropy(model(x), y)
    if not torch.isfinite(loss):
        raise RuntimeError("non-finite loss in overfitting metric")
    grads = torch.autograd.grad(loss, params)
    for p, flag in zip(params, flags):
        p.requires_grad_(flag)
    model.train(was_training)
    mean_abs = torch.cat([g.reshape(-1).abs() for g in grads]).mean()
    return float(abs(loss.detach() - mean_abs))


def overfitting_profile(model, samples, cap: int = GRAD_SAMPLE_CAP,
                        seed: int = 0) -> np.ndarray:
    images, labels = _cap_samples(samples, cap, seed)
    return np.array([overfitting_metric(model, (images[i], labels[i]))
                     for i in range(len(labels))])


def om_stats(values: np.ndarray, bins: int = 20) -> dict:
    counts, edges = np.histogram(values, bins=bins)
    return {"mean": float(values.mean()), "min": float(values.min()),
            "hist": {"counts": counts.tolist(), "edges": edges.tolist()}}


# --- membership inference -----------------------------------------------------

def _rank_feature(train_ref: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Empirical-CDF position of each value against a sorted reference; this
    depends only on the ordering of losses, so the attack is invariant under
    any strictly monotone transform applied to all losses jointly."""
    ref = np.sort(train_ref)
    return (np.searchsorted(ref, values, side="left") / max(len(ref), 1)).reshape(-1, 1)


def mia_from_losses(member_losses, nonmember_losses, folds: int = 5,
                    seed: int = 0) -> float:
    x = np.concatenate([np.asarray(member_losses, dtype=np.float64),
                        np.asarray(nonmember_losses, dtype=np.float64)])
    y = np.concatenate([np.ones(len(member_losses), dtype=int),
                        np.zeros(len(nonmember_losses), dtype=int)])
    counts = np.bincount(y, minlength=2)
    if counts.min() < folds:
        raise ValueError("degenerate single-class folds: need at least "
                         f"{folds} samples per class, got {counts.tolist()}")
    skf = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    scores = []
    for train_idx, test_idx in skf.split(x.reshape(-1, 1), y):
        feat_train = _rank_feature(x[train_idx], x[train_idx])
        feat_test = _rank_feature(x[train_idx], x[test_idx])
        clf = LogisticRegression().fit(feat_train, y[train_idx])
        scores.append(balanced_accuracy_score(y[test_idx], clf.predict(feat_test)))
    return 100.0 * float(np.mean(scores))


def mia_logistic(model, forget_samples, test_samples, folds: int = 5,
                 seed: int = 0) -> float:
    """One-feature logistic attack on per-sample losses, forget=member vs
    test=non-member, balanced accuracy under stratified cross-validation."""
    if len(forget_samples[1]) == 0 or len(test_samples[1]) == 0:
        raise ValueError("both sample sets must be non-empty")
    return mia_from_losses(per_sample_losses(model, forget_samples),
                           per_sample_losses(model, test_samples),
                           folds=folds, seed=seed)


@dataclass
class MiaPopulation:
    """Data pools for the shadow attack: a pool the shadows train on, plus
    the target model's member (train) and non-member (held-out) samples."""

    pool: tuple
    member: tuple
    nonmember: tuple


def mia_shadow(target_model, population: MiaPopulation, shadow_count: int = 4, *,
               epochs: int = 150, width: int = 64, lr: float = 1e-3,
               seed: int = 0) -> float:
    """Shadow-model attack: MLP shadows trained on disjoint in/out halves of
    the pool, a logistic regressor on losses, evaluated on the target's
    member vs non-member samples."""
    pool_x, pool_y = np.asarray(population.pool[0]), np.asarray(population.pool[1])
    n_pool = len(pool_y)
    if n_pool < 8 * 2:
        raise ValueError(f"population of {n_pool} too small for shadow training")
    half = n_pool // 2
    class_count = int(pool_y.max()) + 1
    rng = np.random.default_rng(seed)

    att_losses, att_labels = [], []
    for s in range(shadow_count):
        perm = rng.permutation(n_pool)
        in_idx, out_idx = perm[:half], perm[half:]
        shadow = build_model("mlp", pool_x.shape[1:], class_count,
                             width=width, seed=seed * 1000 + s)
        cfg = TrainConfig(lr=lr, batch_size=min(256, half), epochs=epochs,
                          seed=seed * 1000 + s)
        train_segments(shadow, (pool_x[in_idx], pool_y[in_idx]), cfg)
        att_losses.append(per_sample_losses(shadow, (pool_x[in_idx], pool_y[in_idx])))
        att_labels.append(np.ones(len(in_idx), dtype=int))
        att_losses.append(per_sample_losses(shadow, (pool_x[out_idx], pool_y[out_idx])))
        att_labels.append(np.zeros(len(out_idx), dtype=int))

    x_att = np.concatenate(att_losses).reshape(-1, 1)
    y_att = np.concatenate(att_labels)
    clf = LogisticRegression().fit(x_att, y_att)

    member_losses = per_sample_losses(target_model, population.member)
    nonmember_losses = per_sample_losses(target_model, population.nonmember)
    x_eval = np.concatenate([member_losses, nonmember_losses]).reshape(-1, 1)
    y_eval = np.concatenate([np.ones(len(member_losses), dtype=int),
                             np.zeros(len(nonmember_losses), dtype=int)])
    return 100.0 * float(balanced_accuracy_score(y_eval, clf.predict(x_eval)))


# --- relative best error --------------------------------------------------------

@dataclass
class RbeTable:
    methods: list
    arch_ids: list
    raw: np.ndarray         # [arch, method, 4] in METRIC_COLUMNS order
    normalized: np.ndarray  # same shape, each column min-max mapped to [0,1]
    weights: tuple
    rbe: dict

    def ranking(self) -> list:
        return sorted(self.methods, key=lambda m: self.rbe[m])


def _column_best(values: np.ndarray, column: str, fa_reference: float | None):
    if column == "RA":
        return values.max()
    if column == "MIA":
        return values[np.argmin(np.abs(values - 50.0))]
    if column == "UT":
        return values.min()
    # FA: closeness to the reference (R baseline's FA for random forgetting,
    # 0 for class forgetting)
    return fa_reference


def rbe(table: dict, *, weights: tuple = RBE_WEIGHTS, forget_mode: str = "random_fraction",
        r_method: str = "R", normalization: str = "joint") -> RbeTable:
    """Relative best error over a methods x {RA, FA, MIA, UT} table.

    ``table`` maps arch_id -> {method -> (RA, FA, MIA, UT)} for one dataset.
    Per cell and column the absolute difference from the best value is taken
    (RA best = max, MIA best = closest to 50, UT best = min, FA best = the R
    baseline's FA for random forgetting or 0 for class forgetting), columns
    are min-max normalized over the whole dataset grouping (``joint``) or per
    architecture cell (``per_cell``), weighted-averaged, then averaged over
    architectures. Constant columns contribute 0.
    """
    arch_ids = sorted(table)
    methods = sorted(table[arch_ids[0]])
    if len(methods) < 2:
        raise ValueError("need at least 2 methods")
    for arch in arch_ids:
        if sorted(table[arch]) != methods:
            raise ValueError("method sets differ across architectures")

    raw = np.array([[list(table[arch][m]) for m in methods] for arch in arch_ids],
                   dtype=np.float64)
    diffs = np.empty_like(raw)
    for a, arch in enumerate(arch_ids):
        for k, col in enumerate(METRIC_COLUMNS):
            col_vals = raw[a, :, k]
            if col == "FA":
                if forget_mode == "random_fraction":
                    if r_method not in methods:
                        raise ValueError("random-forgetting RBE needs the R baseline "
                                         "as the FA reference")
                    ref = col_vals[methods.index(r_method)]
                else:
                    ref = 0.0
            else:
                ref = None
            best = _column_best(col_vals, col, ref)
            diffs[a, :, k] = np.abs(col_vals - best)

    if normalization == "joint":
        lo = diffs.min(axis=(0, 1), keepdims=True)
        hi = diffs.max(axis=(0, 1), keepdims=True)
    elif normalization == "per_cell":
        lo = diffs.min(axis=1, keepdims=True)
        hi = diffs.max(axis=1, keepdims=True)
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    span = hi - lo
    normalized = np.where(span > 0, (diffs - lo) / np.where(span > 0, span, 1.0), 0.0)

    w = np.asarray(weights, dtype=np.float64)
    scores = (normalized * w).sum(axis=2) / w.sum()  # [arch, method]
    per_method = scores.mean(axis=0)
    return RbeTable(methods=methods, arch_ids=arch_ids, raw=raw,
                    normalized=normalized, weights=tuple(weights),
                    rbe={m: float(v) for m, v in zip(methods, per_method)})


# --- gradient diagnostics --------------------------------------------------------

def layer_gradient_profile(model, samples, cap: int = GRAD_SAMPLE_CAP,
                           seed: int = 0):
    """Per-layer L2 norms of the mean-loss gradient, ordered shallow to deep.
    A layer is a parameterized leaf module; weight and bias norms combine."""
    images, labels = _cap_samples(samples, cap, seed)
    x = torch.as_tensor(images, dtype=torch.float32)
    y = torch.as_tensor(labels, dtype=torch.int64)
    was_training = model.training
    model.eval()
    layers = []
    for seg in SEGMENTS:
        for name, mod in model.segment(seg).named_modules():
            params = list(mod.parameters(recurse=False))
            if params:
                layers.append((f"{seg}.{name}", params))
    flags = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(True)
    loss = F.cross_entropy(model(x), y)
    flat = [p for _, ps in layers for p in ps]
    grads = torch.autograd.grad(loss, flat, allow_unused=True)
    for p, flag in zip(model.parameters(), flags):
        p.requires_grad_(flag)
    model.train(was_training)

    norms, names, pos = [], [], 0
    for name, ps in layers:
        gs = grads[pos:pos + len(ps)]
        pos += len(ps)
        sq = sum(float((g ** 2).sum()) for g in gs if g is not None)
        norms.append(math.sqrt(sq))
        names.append(name)
    return names, np.asarray(norms)


def _paper_variance(a: np.ndarray) -> float:
    # sum of squared deviations from the mean (not scaled by 1/n)
    return float(((a.mean() - a) ** 2).sum())


def hessian_eigen_diagnostic(model, samples=None, *, loss_fn=None,
                             fd_eps: float = 1e-3, grad_tol: float = 1e-2,
                             max_params: int = 200) -> dict:
    """Dense Hessian eigen-spectrum of a tiny model via central finite
    differences of analytic gradients.

    Reports the paper-convention variance (sum of squared deviations) of the
    eigenvalues and of their reciprocals, plus the mean eigenvalue. The loss
    defaults to sum-reduced cross-entropy over ``samples``. Non-positive
    eigenvalues mark the Hessian indefinite; reciprocals are then taken over
    the positive part only. Diagnostic output, not a pass/fail gate.
    """
    params = [p for p in model.parameters()]
    n = sum(p.numel() for p in params)
    if n > max_params:
        raise ValueError(f"{n} parameters exceed the dense-Hessian cap {max_params}")
    if loss_fn is None:
        if samples is None:
            raise ValueError("need samples or an explicit loss_fn")
        x = torch.as_tensor(np.asarray(samples[0]), dtype=torch.float32)
        y = torch.as_tensor(np.asarray(samples[1]), dtype=torch.int64)
        loss_fn = lambda m: F.cross_entropy(m(x), y, reduction="sum")

    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(True)
    originals = [p.detach().clone() for p in params]

    def set_theta(vec: np.ndarray) -> None:
        offset = 0
        with torch.no_grad():
            for p in params:
                k = p.numel()
                p.copy_(torch.as_tensor(vec[offset:offset + k],
                                        dtype=p.dtype).reshape(p.shape))
                offset += k

    def grad_at(vec: np.ndarray) -> np.ndarray:
        set_theta(vec)
        value = loss_fn(model)
        gs = torch.autograd.grad(value, params)
        return torch.cat([g.reshape(-1) for g in gs]).detach().numpy().astype(np.float64)

    theta0 = torch.cat([p.detach().reshape(-1) for p in params]).numpy().astype(np.float64)
    try:
        g0 = grad_at(theta0)
        hess = np.empty((n, n), dtype=np.float64)
        for i in range(n):
            step = np.zeros(n)
            step[i] = fd_eps
            hess[i] = (grad_at(theta0 + step) - grad_at(theta0 - step)) / (2 * fd_eps)
    finally:
        with torch.no_grad():
            for p, orig in zip(params, originals):
                p.copy_(orig)
        for p, flag in zip(params, flags):
            p.requires_grad_(flag)

    hess = 0.5 * (hess + hess.T)
    eig = np.linalg.eigvalsh(hess)
    grad_norm = float(np.linalg.norm(g0))
    converged = grad_norm <= grad_tol
    if not converged:
        warnings.warn(f"gradient norm {grad_norm:.3g} above tolerance {grad_tol}; "
                      "model may not be at a local minimum")
    positive = eig[eig > 0]
    indefinite = bool((eig <= 0).any())
    inv = 1.0 / positive if len(positive) else np.array([])
    return {
        "eigenvalues": eig,
        "mean_lambda": float(eig.mean()),
        "var_lambda": _paper_variance(eig),
        "var_inv_lambda": _paper_variance(inv) if len(inv) else math.nan,
        "indefinite": indefinite,
        "grad_norm": grad_norm,
        "converged": converged,
    }
