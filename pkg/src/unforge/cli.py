"""Experiment harness: config-driven pipelines, multi-cycle unlearning,
K-sweeps, and report emission.

A pipeline run persists every intermediate artifact (pretrained snapshot,
clusters, condensed set, reduced-retain manifest, reports, JSONL log) in its
output directory. Wall-clock numbers live in ``timing.json``; the
deterministic measurements in ``metrics.json`` reproduce byte-identically for
identical config and seeds. Exit codes: 0 success, 2 config error, 3 stage
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .applications import condensed_model_unlearn, invert_unlearned, mia_defense, \
    reconstruction_distance
from .baselines import BASELINE_METHODS, EPOCHS_MAIN, BaselineConfig, run_baseline
from .clustering import ClusterIndex, cluster_per_class
from .collect import EtaEstimate, ReducedRetainSet, collect_reduced_retain, \
    eta_analytic, eta_monte_carlo, min_retain_threshold
from .condense import CondensedSet, condense_fdm, condense_inversion
from .data import DatasetBundle, ForgetSpec, SplitView, load_dataset
from .metrics import UnlearnReport, accuracy, mia_logistic, om_stats, \
    overfitting_profile, rbe, unlearning_metric
from .modular import ModularSchedule, OfflineSchedule, OnlineSchedule, \
    draw_remembrance, eta_epoch_rule, offline_phase, online_phase
from .nnkit import ARCH_IDS, TrainConfig, build_model, load_snapshot, restore, \
    save_snapshot, snapshot, train_segments

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    dataset: dict = field(default_factory=lambda: {"name": "synthetic_gaussians"})
    arch: str = "mlp"
    width: int | None = None
    cuts: list | None = None
    pretrain: dict = field(default_factory=lambda: {"lr": 1e-3, "batch_size": 64,
                                                    "epochs": 30})
    forget: dict = field(default_factory=lambda: {"mode": "random_fraction",
                                                  "fraction": 0.1, "seed": 7})
    k: int = 4
    condenser: dict = field(default_factory=lambda: {"method": "fdm", "epochs": 100,
                                                     "lr": 1e-2, "lambda": 1.0})
    remembrance_per_class: int = 10
    schedule: dict = field(default_factory=lambda: {
        "offline": {"r_iters": 2, "final_epochs": 10, "intermediate_epochs": 5,
                    "lr_final": 1e-4, "lr_intermediate": 1e-5, "batch_size": 64},
        "online": {"s": 8, "s1": 5, "tau": 3, "lr": 1e-3, "lr_final": 1e-4,
                   "batch_size": 64}})
    baselines: list = field(default_factory=list)
    eta_trials: int = 0
    use_eta_epoch_rule: bool = False
    seed: int = 0
    output_dir: str = "runs/run"
    schema_version: int = SCHEMA_VERSION

    _KNOWN = ("dataset", "arch", "width", "cuts", "pretrain", "forget", "k",
              "condenser", "remembrance_per_class", "schedule", "baselines",
              "eta_trials", "use_eta_epoch_rule", "seed", "output_dir",
              "schema_version")

    def __post_init__(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if self.arch not in ARCH_IDS:
            raise ConfigError(f"unknown arch {self.arch!r}")
        if self.forget.get("mode") not in ("random_fraction", "whole_class"):
            raise ConfigError(f"unknown forget mode {self.forget.get('mode')!r}")
        if self.condenser.get("method") not in ("fdm", "inversion"):
            raise ConfigError(f"unknown condenser {self.condenser.get('method')!r}")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        for b in self.baselines:
            if b not in BASELINE_METHODS:
                raise ConfigError(f"unknown baseline {b!r}")

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        unknown = set(raw) - set(cls._KNOWN)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if overrides:
            for key, value in overrides.items():
                if value is None:
                    continue
                if key in ("dataset.name", "dataset.cache_dir"):
                    raw.setdefault("dataset", {})[key.split(".")[1]] = value
                elif key.startswith("forget."):
                    raw.setdefault("forget", {})[key.split(".")[1]] = value
                else:
                    raw[key] = value
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def schedules(self) -> ModularSchedule:
        try:
            return ModularSchedule(offline=OfflineSchedule(**self.schedule["offline"]),
                                   online=OnlineSchedule(**self.schedule["online"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad schedule: {exc}") from exc

    def forget_spec(self) -> ForgetSpec:
        f = self.forget
        return ForgetSpec(mode=f["mode"], fraction=f.get("fraction", 0.1),
                          class_id=f.get("class_id", 0), seed=f.get("seed", self.seed))

    def forget_class(self):
        return self.forget.get("class_id") if self.forget["mode"] == "whole_class" else None


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


class RunLog:
    """JSONL sink: one record per phase step."""

    def __init__(self, path: Path):
        self.path = path
        self.records: list = []
        path.write_text("")

    def __call__(self, record: dict) -> None:
        self.records.append(record)
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True, default=float) + "\n")


def _load_bundle(cfg: ExperimentConfig) -> DatasetBundle:
    d = dict(cfg.dataset)
    name = d.pop("name")
    cache_dir = d.pop("cache_dir", "cache")
    return load_dataset(name, cache_dir, **d)


def _build_model(cfg: ExperimentConfig, bundle: DatasetBundle):
    return build_model(cfg.arch, bundle.train.image_shape, bundle.train.class_count,
                       tuple(cfg.cuts) if cfg.cuts else None, width=cfg.width,
                       seed=cfg.seed)


def evaluate_report(model, bundle: DatasetBundle, split: SplitView,
                    forget_class: int | None, ut: float, method: str,
                    seed: int = 0) -> UnlearnReport:
    """Shared evaluation harness for MU and the baselines."""
    ds = bundle.train
    retain = (ds.images[split.retain], ds.labels[split.retain])
    forget = (ds.images[split.forget], ds.labels[split.forget])
    eval_imgs, eval_labels = bundle.eval.images, bundle.eval.labels
    if forget_class is not None:
        keep = eval_labels == forget_class
        eval_imgs, eval_labels = eval_imgs[keep], eval_labels[keep]
    return UnlearnReport(
        method=method,
        ra=accuracy(model, retain),
        fa=accuracy(model, forget),
        mia=mia_logistic(model, forget, (eval_imgs, eval_labels), seed=seed),
        ut=ut,
        um=unlearning_metric(model, retain, forget, seed=seed),
        om_stats=om_stats(overfitting_profile(model, retain, cap=64, seed=seed)))


def _stage(name: str):
    def wrap(fn):
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except (ConfigError, StageError):
                raise
            except Exception as exc:
                raise StageError(f"stage {name!r} failed: {exc}") from exc
        return inner
    return wrap


@_stage("pretrain")
def stage_pretrain(cfg: ExperimentConfig, bundle: DatasetBundle, run_dir: Path):
    model = _build_model(cfg, bundle)
    pre = cfg.pretrain
    train_cfg = TrainConfig(lr=pre.get("lr", 1e-3), batch_size=pre.get("batch_size", 64),
                            epochs=pre.get("epochs", 30), seed=cfg.seed)
    train_segments(model, (bundle.train.images, bundle.train.labels), train_cfg)
    snap = snapshot(model)
    save_snapshot(snap, run_dir / "pretrained.snap")
    return model, snap


@_stage("cluster")
def stage_cluster(cfg, bundle, model, run_dir: Path) -> ClusterIndex:
    clusters = cluster_per_class(bundle.train, model, cfg.k, seed=cfg.seed)
    (run_dir / "clusters.json").write_text(clusters.to_json())
    return clusters


@_stage("condense")
def stage_condense(cfg, bundle, model, clusters, run_dir: Path) -> CondensedSet:
    c = cfg.condenser
    if c["method"] == "fdm":
        condensed = condense_fdm(clusters, bundle.train, model,
                                 epochs=c.get("epochs", 200), lr=c.get("lr", 1e-2),
                                 seed=cfg.seed)
    else:
        condensed = condense_inversion(clusters, bundle.train, model,
                                       epochs=c.get("epochs", 50),
                                       lam=c.get("lambda", 1.0),
                                       lr=c.get("lr", 1e-3), seed=cfg.seed)
    condensed.save(run_dir / "condensed")
    return condensed


@_stage("collect")
def stage_collect(cfg, bundle, clusters, condensed, split, run_dir: Path):
    ds = bundle.train
    reduced = collect_reduced_retain(clusters, condensed, split.forget, ds)
    n_d, n_r_retain = len(ds), len(split.retain)
    eta = EtaEstimate(empirical=reduced.n_r / n_r_retain,
                      analytic_main=eta_analytic(ds.class_count, cfg.k, n_d, n_r_retain))
    if cfg.eta_trials > 0 and n_d % (ds.class_count * cfg.k) == 0:
        mc = eta_monte_carlo(ds.class_count, cfg.k, n_d, len(split.forget),
                             cfg.eta_trials, seed=cfg.seed)
        eta.mc_mean, eta.mc_std, eta.trials = mc.mc_mean, mc.mc_std, mc.trials
    _dump_json(run_dir / "reduced.json", {
        "real_indices": reduced.real_indices.tolist(),
        "real_labels": reduced.real_labels.tolist(),
        "condensed_count": int(len(reduced.condensed_labels)),
        "n_r": reduced.n_r})
    _dump_json(run_dir / "eta.json", {
        **eta.to_dict(),
        "threshold": min_retain_threshold(ds.class_count, cfg.k, n_d)
        if ds.class_count * cfg.k >= 2 else None})
    return reduced, eta


@_stage("unlearn")
def stage_unlearn(cfg, bundle, model, pretrained, reduced, run_dir: Path,
                  log: RunLog, online_override: OnlineSchedule | None = None):
    sched = cfg.schedules()
    forget_class = cfg.forget_class()
    exclude = {forget_class} if forget_class is not None else set()
    remembrance = draw_remembrance(bundle.remembrance_pool, cfg.remembrance_per_class,
                                   seed=cfg.seed, exclude_classes=exclude)
    offline_phase(model, bundle.train, remembrance, sched.offline, pretrained,
                  seed=cfg.seed, log_sink=log)
    online = online_override or sched.online
    _, ut = online_phase(model, reduced, bundle.train, remembrance, online,
                         seed=cfg.seed, log_sink=log)
    return model, ut, remembrance


def run_pipeline(cfg: ExperimentConfig) -> Path:
    """Pretrain, cluster, condense, collect, unlearn, evaluate; persist every
    artifact under the config's output directory."""
    torch.set_num_threads(1)  # fixed reduction order keeps reruns bit-identical
    run_dir = Path(cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    from . import __version__
    _dump_json(run_dir / "config.json", {**asdict(cfg), "code_version": __version__})
    log = RunLog(run_dir / "log.jsonl")

    bundle = _load_bundle(cfg)
    model, pretrained = stage_pretrain(cfg, bundle, run_dir)
    split = split_stage(cfg, bundle)
    clusters = stage_cluster(cfg, bundle, model, run_dir)
    condensed = stage_condense(cfg, bundle, model, clusters, run_dir)
    reduced, eta = stage_collect(cfg, bundle, clusters, condensed, split, run_dir)

    online_override = None
    if cfg.use_eta_epoch_rule:
        base = cfg.schedules().online
        s = eta_epoch_rule(eta.empirical)
        online_override = OnlineSchedule(s=s, s1=base.s1, tau=min(base.tau, s - 1),
                                         lr=base.lr, lr_final=base.lr_final,
                                         batch_size=base.batch_size)
    model, ut, _ = stage_unlearn(cfg, bundle, model, pretrained, reduced, run_dir,
                                 log, online_override)

    reports = {}
    mu_report = evaluate_report(model, bundle, split, cfg.forget_class(), ut, "MU",
                                seed=cfg.seed)
    mu_report.eta = eta.to_dict()
    reports["MU"] = mu_report
    _dump_json(run_dir / "report_MU.json", mu_report.to_dict())

    epochs_main = EPOCHS_MAIN[cfg.forget["mode"]]
    for method in cfg.baselines:
        base_model = _build_model(cfg, bundle)
        restore(base_model, pretrained)
        bl_cfg = BaselineConfig(method=method,
                                base=TrainConfig(lr=1e-3,
                                                 batch_size=cfg.pretrain.get("batch_size", 64),
                                                 epochs=epochs_main, seed=cfg.seed))
        _, report = run_baseline(bl_cfg, base_model, bundle, split, seed=cfg.seed,
                                 forget_class=cfg.forget_class())
        reports[method] = report
        _dump_json(run_dir / f"report_{method}.json", report.to_dict())

    _dump_json(run_dir / "timing.json",
               {m: r.ut for m, r in reports.items()})
    _dump_json(run_dir / "metrics.json",
               {m: {"ra": r.ra, "fa": r.fa, "mia": r.mia, "um": r.um,
                    "om_mean": r.om_stats["mean"] if r.om_stats else None,
                    "eta": r.eta}
                for m, r in sorted(reports.items())})

    if len(reports) >= 2:
        table = {cfg.arch: {m: (r.ra, r.fa, r.mia, r.ut) for m, r in reports.items()}}
        result = rbe(table, forget_mode=cfg.forget["mode"],
                     r_method="R" if "R" in reports else sorted(reports)[0])
        _dump_json(run_dir / "rbe.json", result.rbe)
        with open(run_dir / "rbe.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["method", "RA", "FA", "MIA", "UT", "RBE"])
            for m in result.methods:
                r = reports[m]
                writer.writerow([m, r.ra, r.fa, r.mia, r.ut, result.rbe[m]])
    return run_dir


@_stage("split")
def split_stage(cfg, bundle) -> SplitView:
    from .data import split_forget_retain
    return split_forget_retain(bundle.train, cfg.forget_spec())


def run_cycles(cfg: ExperimentConfig, cycles: int, per_cycle_fraction: float) -> list:
    """Sequential forget batches; each cycle rebuilds the reduced retain set
    against the cumulative forget set and replays the modular phases."""
    if cycles * per_cycle_fraction >= 1.0:
        raise ConfigError("cycles * fraction must stay below 1")
    torch.set_num_threads(1)
    run_dir = Path(cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    log = RunLog(run_dir / "log.jsonl")

    bundle = _load_bundle(cfg)
    ds = bundle.train
    model, pretrained = stage_pretrain(cfg, bundle, run_dir)
    clusters = stage_cluster(cfg, bundle, model, run_dir)
    condensed = stage_condense(cfg, bundle, model, clusters, run_dir)

    rng = np.random.default_rng(cfg.forget.get("seed", cfg.seed))
    n_batch = int(round(per_cycle_fraction * len(ds)))
    cumulative = np.zeros(len(ds), dtype=bool)
    remembrance = draw_remembrance(bundle.remembrance_pool, cfg.remembrance_per_class,
                                   seed=cfg.seed)
    sched = cfg.schedules()
    results = []
    for cycle in range(1, cycles + 1):
        pool = np.nonzero(~cumulative)[0]
        if len(pool) <= n_batch:
            raise StageError(f"retain set exhausted at cycle {cycle}")
        cumulative[rng.choice(pool, size=n_batch, replace=False)] = True
        forget_idx = np.nonzero(cumulative)[0]
        split = SplitView(forget=forget_idx, retain=np.nonzero(~cumulative)[0])
        reduced = collect_reduced_retain(clusters, condensed, split.forget, ds)
        eta_emp = reduced.n_r / len(split.retain)

        offline_phase(model, ds, remembrance, sched.offline, pretrained,
                      seed=cfg.seed + cycle, log_sink=log)
        _, ut = online_phase(model, reduced, ds, remembrance, sched.online,
                             seed=cfg.seed + cycle, log_sink=log)
        row = {
            "cycle": cycle,
            "forget_total": int(cumulative.sum()),
            "eta": eta_emp,
            "ra": accuracy(model, (ds.images[split.retain], ds.labels[split.retain])),
            "fa": accuracy(model, (ds.images[split.forget], ds.labels[split.forget])),
            "tra": accuracy(model, (ds.images, ds.labels)),
            "ut": ut,
        }
        results.append(row)
    _dump_json(run_dir / "cycles.json", results)
    _write_csv(run_dir / "cycles.csv", results)
    return results


def sweep_k(cfg: ExperimentConfig, k_list: list) -> list:
    """Per-K pipeline runs with the compression-thresholded epoch rule."""
    results = []
    base_dir = Path(cfg.output_dir)
    for k in k_list:
        sub = ExperimentConfig(**{**asdict(cfg), "k": int(k),
                                  "use_eta_epoch_rule": True,
                                  "output_dir": str(base_dir / f"k{k}")})
        run_dir = run_pipeline(sub)
        report = json.loads((run_dir / "report_MU.json").read_text())
        eta = json.loads((run_dir / "eta.json").read_text())
        results.append({"k": int(k), "eta": eta["empirical"], "ra": report["ra"],
                        "fa": report["fa"], "mia": report["mia"], "ut": report["ut"]})
    base_dir.mkdir(parents=True, exist_ok=True)
    _dump_json(base_dir / "sweep_k.json", results)
    _write_csv(base_dir / "sweep_k.csv", results)
    _plot_sweep(base_dir, results)
    return results


def _write_csv(path: Path, rows: list) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def _plot_sweep(base_dir: Path, results: list) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    ks = [r["k"] for r in results]
    fig, axes = plt.subplots(1, 4, figsize=(14, 3))
    for ax, key in zip(axes, ("ra", "fa", "mia", "ut")):
        ax.plot(ks, [r[key] for r in results], marker="o")
        ax.set_xlabel("K")
        ax.set_ylabel(key.upper())
    fig.tight_layout()
    fig.savefig(base_dir / "sweep_k.png", dpi=120)
    plt.close(fig)


# --- command-line interface -----------------------------------------------------

def _add_config_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--dataset", dest="dataset.name")
    p.add_argument("--cache-dir", dest="dataset.cache_dir")
    p.add_argument("--forget-mode", dest="forget.mode",
                   choices=["random_fraction", "whole_class"])
    p.add_argument("--forget-fraction", dest="forget.fraction", type=float)
    p.add_argument("--forget-class", dest="forget.class_id", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir", dest="output_dir")


_OVERRIDE_KEYS = ("dataset.name", "dataset.cache_dir", "forget.mode",
                  "forget.fraction", "forget.class_id", "seed", "output_dir")


def _config_from_args(args) -> ExperimentConfig:
    overrides = {k: v for k, v in vars(args).items()
                 if k in _OVERRIDE_KEYS and v is not None}
    return ExperimentConfig.from_file(args.config, overrides)


def _cmd_pipeline_stage(args, upto: str) -> int:
    cfg = _config_from_args(args)
    torch.set_num_threads(1)
    run_dir = Path(cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    bundle = _load_bundle(cfg)
    model, pretrained = stage_pretrain(cfg, bundle, run_dir)
    if upto == "pretrain":
        return 0
    clusters = stage_cluster(cfg, bundle, model, run_dir)
    if upto == "cluster":
        return 0
    condensed = stage_condense(cfg, bundle, model, clusters, run_dir)
    if upto == "condense":
        return 0
    split = split_stage(cfg, bundle)
    stage_collect(cfg, bundle, clusters, condensed, split, run_dir)
    return 0


def _cmd_unlearn(args) -> int:
    run_pipeline(_config_from_args(args))
    return 0


def _cmd_eta(args) -> int:
    estimate = EtaEstimate(analytic_main=eta_analytic(args.c, args.k, args.nd,
                                                      args.nd - args.nf))
    if args.trials > 0:
        mc = eta_monte_carlo(args.c, args.k, args.nd, args.nf, args.trials,
                             seed=args.seed)
        estimate.mc_mean, estimate.mc_std = mc.mc_mean, mc.mc_std
        estimate.trials = mc.trials
    payload = {**estimate.to_dict(),
               "threshold": min_retain_threshold(args.c, args.k, args.nd)}
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def _cmd_baseline(args) -> int:
    cfg = _config_from_args(args)
    torch.set_num_threads(1)
    run_dir = Path(cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    bundle = _load_bundle(cfg)
    snap_path = run_dir / "pretrained.snap"
    model = _build_model(cfg, bundle)
    if snap_path.exists():
        restore(model, load_snapshot(snap_path))
    else:
        model, _ = stage_pretrain(cfg, bundle, run_dir)
    split = split_stage(cfg, bundle)
    bl_cfg = BaselineConfig(method=args.method,
                            base=TrainConfig(lr=1e-3,
                                             batch_size=cfg.pretrain.get("batch_size", 64),
                                             epochs=EPOCHS_MAIN[cfg.forget["mode"]],
                                             seed=cfg.seed))
    _, report = run_baseline(bl_cfg, model, bundle, split, seed=cfg.seed,
                             forget_class=cfg.forget_class())
    _dump_json(run_dir / f"report_{args.method}.json", report.to_dict())
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True, default=float))
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _config_from_args(args)
    bundle = _load_bundle(cfg)
    model = _build_model(cfg, bundle)
    snap = load_snapshot(args.snapshot if args.snapshot
                         else Path(cfg.output_dir) / "pretrained.snap")
    restore(model, snap)
    split = split_stage(cfg, bundle)
    report = evaluate_report(model, bundle, split, cfg.forget_class(), 0.0,
                             args.method, seed=cfg.seed)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True, default=float))
    return 0


def _cmd_defend(args) -> int:
    cfg = _config_from_args(args)
    torch.set_num_threads(1)
    run_dir = Path(cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    bundle = _load_bundle(cfg)
    model, _ = stage_pretrain(cfg, bundle, run_dir)
    log = RunLog(run_dir / "defend_log.jsonl")
    _, report = mia_defense(model, bundle, args.defense_epochs, seed=cfg.seed,
                            log_sink=log)
    _dump_json(run_dir / "defense.json", report)
    print(json.dumps(report, indent=2, sort_keys=True, default=float))
    return 0


def _cmd_invert(args) -> int:
    cfg = _config_from_args(args)
    torch.set_num_threads(1)
    run_dir = Path(cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    bundle = _load_bundle(cfg)
    snap_path = run_dir / "pretrained.snap"
    model = _build_model(cfg, bundle)
    if snap_path.exists():
        restore(model, load_snapshot(snap_path))
    else:
        model, _ = stage_pretrain(cfg, bundle, run_dir)
    recons = invert_unlearned(model, bundle.train.class_count,
                              bundle.train.image_shape, args.k, seed=cfg.seed)
    np.save(run_dir / "inversion.npy", recons)
    distances = reconstruction_distance(recons, bundle.train)
    _dump_json(run_dir / "inversion.json",
               {"per_class_distance": distances.tolist(), "k": args.k})
    _plot_inversion(run_dir, recons)
    print(json.dumps({"per_class_distance": distances.tolist()}, indent=2))
    return 0


def _plot_inversion(run_dir: Path, recons: np.ndarray) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    c, k = recons.shape[:2]
    fig, axes = plt.subplots(c, k, figsize=(1.4 * k, 1.4 * c), squeeze=False)
    for i in range(c):
        for j in range(k):
            img = np.transpose(recons[i, j], (1, 2, 0))
            axes[i][j].imshow(img.squeeze(), cmap="gray", vmin=0, vmax=1)
            axes[i][j].axis("off")
    fig.tight_layout()
    fig.savefig(run_dir / "inversion.png", dpi=120)
    plt.close(fig)


def _cmd_condense_model(args) -> int:
    cfg = _config_from_args(args)
    torch.set_num_threads(1)
    run_dir = Path(cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    bundle = _load_bundle(cfg)
    ae_cfg = ExperimentConfig(**{**asdict(cfg), "arch": "autoencoder_ae", "cuts": None})
    model = _build_model(ae_cfg, bundle)
    from .applications import ae_composite_loss
    pre = cfg.pretrain
    train_segments(model, (bundle.train.images, bundle.train.labels),
                   TrainConfig(lr=pre.get("lr", 1e-3),
                               batch_size=pre.get("batch_size", 64),
                               epochs=pre.get("epochs", 30), seed=cfg.seed),
                   loss=ae_composite_loss())
    split = split_stage(ae_cfg, bundle)
    log = RunLog(run_dir / "condense_model_log.jsonl")
    _, report = condensed_model_unlearn(model, bundle, split, args.new_final_arch,
                                        k=cfg.k, seed=cfg.seed, log_sink=log)
    _dump_json(run_dir / "condensed_model.json", report)
    print(json.dumps(report, indent=2, sort_keys=True, default=float))
    return 0


def _cmd_cycles(args) -> int:
    cfg = _config_from_args(args)
    results = run_cycles(cfg, args.cycles, args.fraction)
    print(json.dumps(results, indent=2, sort_keys=True, default=float))
    return 0


def _cmd_sweep_k(args) -> int:
    cfg = _config_from_args(args)
    k_list = [int(tok) for tok in args.k_list.split(",") if tok]
    if not k_list:
        raise ConfigError("empty k list")
    results = sweep_k(cfg, k_list)
    print(json.dumps(results, indent=2, sort_keys=True, default=float))
    return 0


def _cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    rows = []
    for path in sorted(run_dir.glob("report_*.json")):
        rec = json.loads(path.read_text())
        rows.append({"method": rec["method"], "ra": rec["ra"], "fa": rec["fa"],
                     "mia": rec["mia"], "ut": rec["ut"], "um": rec.get("um")})
    if not rows:
        raise StageError(f"no reports found under {run_dir}")
    _write_csv(run_dir / "summary.csv", rows)
    print(json.dumps(rows, indent=2, sort_keys=True, default=float))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unforge",
                                     description="dataset-condensation unlearning toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, upto in (("pretrain", "pretrain"), ("cluster", "cluster"),
                       ("condense", "condense"), ("collect", "collect")):
        p = sub.add_parser(name, help=f"run the pipeline up to the {name} stage")
        _add_config_arg(p)
        p.set_defaults(func=lambda a, u=upto: _cmd_pipeline_stage(a, u))

    p = sub.add_parser("eta", help="compression-ratio analytics")
    p.add_argument("--c", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--nd", type=int, required=True)
    p.add_argument("--nf", type=int, required=True)
    p.add_argument("--trials", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_eta)

    p = sub.add_parser("unlearn", help="full pipeline incl. modular unlearning")
    _add_config_arg(p)
    p.set_defaults(func=_cmd_unlearn)

    p = sub.add_parser("baseline", help="run one reference unlearning method")
    _add_config_arg(p)
    p.add_argument("--method", required=True, choices=list(BASELINE_METHODS))
    p.set_defaults(func=_cmd_baseline)

    p = sub.add_parser("evaluate", help="evaluate a snapshot against a split")
    _add_config_arg(p)
    p.add_argument("--snapshot")
    p.add_argument("--method", default="snapshot")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("defend", help="Otsu-gated MIA defense")
    _add_config_arg(p)
    p.add_argument("--defense-epochs", type=int, default=3)
    p.set_defaults(func=_cmd_defend)

    p = sub.add_parser("invert", help="model-inversion audit images")
    _add_config_arg(p)
    p.add_argument("--k", type=int, default=1)
    p.set_defaults(func=_cmd_invert)

    p = sub.add_parser("condense-model", help="unlearning inside a condensed model")
    _add_config_arg(p)
    p.add_argument("--new-final-arch", default="mlp", choices=list(ARCH_IDS))
    p.set_defaults(func=_cmd_condense_model)

    p = sub.add_parser("cycles", help="multi-cycle unlearning")
    _add_config_arg(p)
    p.add_argument("--cycles", type=int, default=5)
    p.add_argument("--fraction", type=float, default=0.1)
    p.set_defaults(func=_cmd_cycles)

    p = sub.add_parser("sweep-k", help="K sweep with the eta epoch rule")
    _add_config_arg(p)
    p.add_argument("--k-list", required=True, help="comma-separated K values")
    p.set_defaults(func=_cmd_sweep_k)

    p = sub.add_parser("report", help="consolidate reports in a run directory")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # CLI boundary: every stage failure exits 3
        print(f"stage failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
