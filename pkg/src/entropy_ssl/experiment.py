"""Declarative experiment runs, sweeps and comparisons."""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .adaptation import DEFAULT_GRID, adapt_predictions, optimal_threshold_search, seen_confidence
from .backbone import ModelConfig, SSLTrainer, TrainConfig
from .collapse import GuardConfig, guard_training
from .errors import ConfigError, InvalidComparisonError, UndefinedScoreError
from .metrics import evaluate
from .records import (PredictionDump, RunLedgerRecord, dumps, write_jsonl, write_ledger,
                      write_manifest, write_predictions)
from .scenario import (DatasetBundle, LabeledDataset, build_balanced_fewshot, build_budget_labeled,
                       load_cifar, make_synthetic_blobs, split_classes, split_classes_by_superclass,
                       split_train_test)

logger = logging.getLogger(__name__)

OUTPUT_ENV = "ENTROPY_SSL_OUTPUT"
METRICS = ("acc_seen", "acc_unseen", "combined", "closed_acc", "unknown_acc", "auroc")


@dataclass
class ScenarioSpec:
    dataset: str = "blobs"  # blobs | cifar10 | cifar100
    data_root: str | None = None
    num_classes: int = 8
    dims: int = 16
    per_class: int = 400
    test_per_class: int = 100
    separation: float = 4.0
    max_train_per_class: int | None = None
    num_unseen: int = 2
    labeling: str = "balanced"  # balanced | budget
    k: int = 4
    budget: int = 100
    split: str = "random"  # random | superclass
    seed: int = 0

    def validate(self):
        if self.dataset not in ("blobs", "cifar10", "cifar100"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.labeling not in ("balanced", "budget"):
            raise ConfigError(f"unknown labeling mode {self.labeling!r}")
        if self.split not in ("random", "superclass"):
            raise ConfigError(f"unknown split mode {self.split!r}")
        return self


@dataclass
class RunConfig:
    name: str = "run"
    scenario: ScenarioSpec = field(default_factory=ScenarioSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    guard: GuardConfig = field(default_factory=GuardConfig)
    guard_enabled: bool = True
    prior_path: str | None = None
    grid: list | None = None
    output_dir: str | None = None
    repetitions: int = 1
    seeds: list | None = None
    regularizers: list | None = None  # sweep over these; defaults to [train.regularizer]
    eval_every: int = 1
    save_checkpoints: bool = True
    save_predictions: bool = True

    def validate(self):
        self.scenario.validate()
        try:
            self.train.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.seeds is not None and len(self.seeds) < self.repetitions:
            raise ConfigError("fewer seeds than repetitions")
        return self

    def run_seeds(self) -> list[int]:
        if self.seeds is not None:
            return [int(s) for s in self.seeds[:self.repetitions]]
        return [self.scenario.seed + i for i in range(self.repetitions)]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def resolved_output(self) -> Path:
        return Path(self.output_dir or os.environ.get(OUTPUT_ENV, "runs"))


_SECTIONS = {"scenario": ScenarioSpec, "model": ModelConfig, "train": TrainConfig, "guard": GuardConfig}


def _build(cls, data: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


def config_from_dict(data: dict | None) -> RunConfig:
    data = dict(data or {})
    kwargs = {}
    for key, cls in _SECTIONS.items():
        section = data.pop(key, None) or {}
        if not isinstance(section, dict):
            raise ConfigError(f"section {key!r} must be a mapping")
        kwargs[key] = _build(cls, section, key)
    return _build(RunConfig, {**data, **kwargs}, "config").validate()


_YAML_WORDS = {"on", "off", "yes", "no", "y", "n"}


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars."""
    data = dict(data or {})
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        # YAML 1.1 reads on/off/yes/no as booleans; keep them as words
        value = raw.strip() if raw.strip().lower() in _YAML_WORDS else yaml.safe_load(raw)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a scalar")
        node[parts[-1]] = value
    return data


def load_config(path=None, overrides=()) -> RunConfig:
    data = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                data = yaml.safe_load(fh) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(apply_overrides(data, overrides))


def _hash(obj) -> str:
    return hashlib.sha256(dumps(obj).encode()).hexdigest()[:16]


def scenario_hash(spec: ScenarioSpec) -> str:
    d = dataclasses.asdict(spec)
    d.pop("seed")
    return _hash(d)


# ------------------------------------------------------------------ scenario
def load_dataset(spec: ScenarioSpec, seed: int):
    """Return ``(train, test)`` labeled datasets for the scenario."""
    if spec.dataset == "blobs":
        full = make_synthetic_blobs(spec.num_classes, spec.dims, spec.per_class + spec.test_per_class,
                                    spec.separation, seed=seed)
        return split_train_test(full, spec.test_per_class, seed=seed)
    if spec.data_root is None:
        raise ConfigError(f"dataset {spec.dataset} needs scenario.data_root")
    train, test = load_cifar(spec.data_root, train=True), load_cifar(spec.data_root, train=False)
    if spec.max_train_per_class is not None:
        rng = np.random.default_rng(seed)
        keep = np.sort(np.concatenate([
            rng.permutation(np.flatnonzero(train.y == c))[:spec.max_train_per_class]
            for c in range(train.n_classes)]))
        train = LabeledDataset(train.X[keep], train.y[keep], train.n_classes, train.coarse)
    return train, test


def build_scenario(spec: ScenarioSpec, seed: int | None = None) -> DatasetBundle:
    seed = spec.seed if seed is None else seed
    train, test = load_dataset(spec, seed)
    if spec.labeling == "budget":
        return build_budget_labeled(train, spec.budget, seed=seed, test=test)
    classes = range(train.n_classes)
    if spec.split == "superclass":
        if train.coarse is None:
            raise ConfigError("superclass split needs a dataset with a superclass map")
        partition = split_classes_by_superclass(classes, train.coarse, spec.num_unseen, seed=seed)
    else:
        partition = split_classes(classes, spec.num_unseen, seed=seed)
    return build_balanced_fewshot(train, partition, spec.k, seed=seed, test=test)


# ---------------------------------------------------------------------- runs
def _load_prior(path, n_classes):
    if path is None:
        return None
    prior = np.loadtxt(path, dtype=np.float64, ndmin=1)
    if prior.size != n_classes:
        raise ConfigError(f"prior table has {prior.size} entries, expected {n_classes}")
    return prior / prior.sum()


def _safe_eval(preds, probs, truths, partition, reject_scores=None) -> dict | None:
    try:
        return evaluate(preds, probs, truths, partition, reject_scores).to_dict()
    except UndefinedScoreError:
        return None


def method_name(cfg: RunConfig) -> str:
    return "baseline" if cfg.train.regularizer == "off" else f"entropy-{cfg.train.regularizer}"


def run_experiment(cfg: RunConfig, seed: int | None = None, out_root=None) -> RunLedgerRecord:
    """Build the scenario, train under the guard, evaluate on the test split and persist.

    Runs with ``regularizer="off"`` are scored through the threshold + K-means
    adaptation with a ground-truth-optimal threshold; every other run is
    scored on the argmax of its full head.
    """
    cfg.validate()
    t0 = time.perf_counter()
    seed = cfg.run_seeds()[0] if seed is None else int(seed)
    method = method_name(cfg)
    run_id = f"{cfg.name}-{method}-s{seed}"
    out = Path(out_root or cfg.resolved_output()) / run_id
    out.mkdir(parents=True, exist_ok=True)

    bundle = build_scenario(cfg.scenario, seed)
    write_manifest(out / "manifest.jsonl", bundle.manifest(),
                   {**dataclasses.asdict(cfg.scenario), "seed": seed})
    part = bundle.partition
    train_cfg = dataclasses.replace(cfg.train, seed=seed)
    prior = _load_prior(cfg.prior_path, part.n_classes)
    trainer = SSLTrainer(bundle.X_labeled, bundle.y_labeled, bundle.X_unlabeled, part.n_classes,
                         train_cfg, cfg.model, prior=prior,
                         checkpoint_dir=out / "checkpoints" if cfg.save_checkpoints else None)

    epochs = []

    def on_epoch(tr, result):
        entry = {"epoch": tr.epoch, "losses": result.losses.to_dict(), "entropy": result.entropy,
                 "mask_rate": result.mask_rate, "mean_confidence": result.mean_confidence}
        if cfg.eval_every and tr.epoch % cfg.eval_every == 0 and len(bundle.y_test):
            pb = tr.predict(bundle.X_test)
            entry["eval"] = _safe_eval(pb.probs.argmax(1), pb.probs, bundle.y_test, part)
        epochs.append(entry)

    if cfg.guard_enabled:
        trainer, report, _ = guard_training(trainer, cfg.guard, on_epoch=on_epoch)
        stop_report = report.to_dict()
    else:
        for _ in range(train_cfg.max_epochs):
            on_epoch(trainer, trainer.run_epoch())
        stop_report = None

    if stop_report is not None:
        write_jsonl(out / "manifest.jsonl", [{"kind": "stop", **stop_report}], append=True)

    pb = trainer.predict(bundle.X_test)
    extra = {"n_labeled": int(len(bundle.y_labeled)), "n_unlabeled": int(len(bundle.X_unlabeled)),
             "n_seen": part.n_seen, "n_unseen": part.n_unseen}
    if method == "baseline" and part.n_unseen:
        grid = DEFAULT_GRID if cfg.grid is None else cfg.grid
        thr, _, _ = optimal_threshold_search(pb.probs, pb.features, bundle.y_test, part, grid, seed=seed)
        preds, _ = adapt_predictions(pb.probs, pb.features, part, thr, seed=seed)
        reject = 1.0 - seen_confidence(pb.probs, part)[0]
        extra["threshold"] = thr
    else:
        preds, reject = pb.probs.argmax(1), None
    final = _safe_eval(preds, pb.probs, bundle.y_test, part, reject)

    if cfg.save_predictions:
        write_predictions(out / "predictions.jsonl", PredictionDump(
            part, np.arange(len(preds)), bundle.y_test, preds, pb.probs, pb.features,
            meta={"run_id": run_id, "method": method,
                  **({"adapted_threshold": extra["threshold"]} if "threshold" in extra else {})}))
    record = RunLedgerRecord(
        run_id=run_id, config_hash=_hash({**cfg.to_dict(), "seed": seed}), method=method, seed=seed,
        scenario_hash=scenario_hash(cfg.scenario), epochs=epochs, stop_report=stop_report,
        final=final, extra=extra, wall_clock=round(time.perf_counter() - t0, 3))
    write_ledger(out / "ledger.jsonl", [record])
    logger.info("%s finished: %s", run_id, final)
    return record


def sweep(cfg: RunConfig, out_root=None) -> list[RunLedgerRecord]:
    """All repetitions for every regularizer in ``cfg.regularizers``."""
    regs = cfg.regularizers or [cfg.train.regularizer]
    records = []
    for reg in regs:
        sub = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, regularizer=reg))
        for seed in cfg.run_seeds():
            records.append(run_experiment(sub, seed, out_root))
    return records


# ---------------------------------------------------------------- comparison
def summarize(records) -> list[dict]:
    """Per-method mean and sample standard deviation of every final metric."""
    records = list(records)
    if not records:
        raise InvalidComparisonError("nothing to compare")
    if len({r.scenario_hash for r in records}) > 1:
        raise InvalidComparisonError("records come from different scenarios")
    rows = []
    for method in sorted({r.method for r in records}):
        group = [r for r in records if r.method == method and r.final is not None]
        row = {"method": method, "n": len(group), "seeds": [r.seed for r in group]}
        for m in METRICS:
            vals = np.array([r.final[m] for r in group])
            row[f"{m}_mean"] = float(vals.mean()) if len(vals) else None
            row[f"{m}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else None
        rows.append(row)
    return rows


def compare_runs(records, out_dir=None) -> list[dict]:
    """Summary table plus ``summary.json``, ``summary.csv`` and ``scores.png`` in ``out_dir``."""
    rows = summarize(records)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.json").write_text(dumps(rows) + "\n")
        cols = ["method", "n"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")]
        lines = [",".join(cols)] + [",".join("" if row[c] is None else str(row[c]) for c in cols)
                                    for row in rows]
        (out / "summary.csv").write_text("\n".join(lines) + "\n")
        plot_summary(rows, out / "scores.png")
    return rows


def plot_summary(rows, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    shown = ("combined", "acc_seen", "acc_unseen")
    fig, ax = plt.subplots(figsize=(1.5 + 1.2 * len(rows) * len(shown) / 2, 3.5))
    width = 0.8 / len(shown)
    x = np.arange(len(rows))
    for i, m in enumerate(shown):
        means = [r[f"{m}_mean"] or 0.0 for r in rows]
        errs = [r[f"{m}_std"] or 0.0 for r in rows]
        ax.bar(x + (i - (len(shown) - 1) / 2) * width, means, width, yerr=errs, capsize=3, label=m)
    ax.set_xticks(x, [r["method"] for r in rows])
    ax.set_ylim(0, 1)
    ax.set_ylabel("score")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
