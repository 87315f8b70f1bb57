"""Train -> prune -> fine-tune -> measure sweeps, with CSV and SVG output."""
from __future__ import annotations

import csv
import gc
import json
import logging
import math
import statistics
import time
from dataclasses import dataclass, field, fields, replace
from html import escape
from pathlib import Path

import numpy as np

from . import kernels, modelfile
from .costmodel import DeviceProfile, LayoutConfig, estimate_step_time, padded_bytes
from .data import CIFAR_MEAN, CIFAR_STD, Dataset, load_cifar10, select_classes, subsample, synth_dataset
from .engine import Hyperparams, TrainLog, init_velocity, train, train_step
from .errors import ConfigError, InvalidArgument
from .graph import PRESETS, ModelGraph, build_preset, param_count
from .importance import METHODS, SCOPES, make_plan, score
from .surgery import WeightPolicy, apply_plan

log = logging.getLogger(__name__)

CSV_HEADER = ["run_id", "method", "scope", "ratio", "reload", "seed", "epoch", "split", "accuracy",
              "loss", "param_count", "padded_weight_bytes", "padded_total_bytes", "est_step_ms",
              "measured_step_ms_median"]


@dataclass
class ExperimentConfig:
    preset: str = "tiny"
    dataset: str = "synthetic"
    data_dir: str = "data/cifar-10-batches-bin"
    class_subset: list[int] | None = None
    train_fraction: float = 1.0
    ratios: list[float] = field(default_factory=lambda: [0.0, 0.3, 0.6, 0.9])
    methods: list[str] = field(default_factory=lambda: ["bn_gamma", "l1"])
    scope: str = "per_layer"
    reload: list[bool] = field(default_factory=lambda: [True, False])
    seeds: list[int] = field(default_factory=lambda: [1])
    hyperparams: Hyperparams = field(default_factory=lambda: Hyperparams(max_epochs=10))
    layout: LayoutConfig = field(default_factory=LayoutConfig)
    profile: DeviceProfile = field(default_factory=DeviceProfile)
    out_dir: str = "runs/sweep"
    # not in the minimal field list, needed to pin desk-scale runs down
    test_fraction: float = 1.0
    data_seed: int = 0
    num_classes: int | None = None
    synth_train: int = 2000
    synth_test: int = 400
    synth_separation: float = 0.15
    step_warmup: int = 2
    step_reps: int = 5

    def __post_init__(self):
        if isinstance(self.hyperparams, dict):
            self.hyperparams = _build(Hyperparams, self.hyperparams, "hyperparams")
        if isinstance(self.layout, dict):
            self.layout = _build(LayoutConfig, self.layout, "layout")
        if isinstance(self.profile, dict):
            self.profile = _build(DeviceProfile, self.profile, "profile")
        self.validate()

    @property
    def classes(self) -> int:
        if self.num_classes is not None:
            return self.num_classes
        if self.class_subset:
            return len(self.class_subset)
        return 10

    def validate(self) -> None:
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {PRESETS}")
        if self.dataset not in ("cifar10", "synthetic"):
            raise ConfigError("dataset must be 'cifar10' or 'synthetic'")
        if not self.ratios or self.ratios[0] != 0.0:
            raise ConfigError("ratios must start with the 0.0 baseline")
        if list(self.ratios) != sorted(self.ratios) or len(set(self.ratios)) != len(self.ratios):
            raise ConfigError("ratios must be strictly ascending")
        if any(not 0.0 <= r < 1.0 for r in self.ratios):
            raise ConfigError("ratios must lie in [0, 1)")
        if not self.methods or any(m not in METHODS for m in self.methods):
            raise ConfigError(f"methods must be a non-empty subset of {METHODS}")
        if self.scope not in SCOPES:
            raise ConfigError(f"scope must be one of {SCOPES}")
        if not self.reload or any(not isinstance(r, bool) for r in self.reload):
            raise ConfigError("reload must be a non-empty list of booleans")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if not 0 < self.train_fraction <= 1 or not 0 < self.test_fraction <= 1:
            raise ConfigError("train_fraction and test_fraction must be in (0, 1]")
        if self.classes < 2:
            raise ConfigError("need at least two classes")
        if self.step_reps < 5:
            raise ConfigError("step_reps must be >= 5")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["hyperparams"] = self.hyperparams.to_dict()
        d["layout"] = self.layout.to_dict()
        d["profile"] = self.profile.to_dict()
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> ExperimentConfig:
        return _build(cls, doc, "config")

    @classmethod
    def from_json(cls, path) -> ExperimentConfig:
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(doc)


def _build(cls, doc, what):
    if not isinstance(doc, dict):
        raise ConfigError(f"{what} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown {what} fields: {sorted(unknown)}")
    try:
        return cls(**doc)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {what}: {exc}") from None


@dataclass
class RunRecord:
    run_id: str
    method: str
    scope: str
    ratio: float
    reload: bool | None
    seed: int
    epoch: int | None
    split: str
    accuracy: float | None
    loss: float | None
    param_count: int | None
    padded_weight_bytes: int | None
    padded_total_bytes: int | None
    est_step_ms: float | None
    measured_step_ms_median: float | None

    @property
    def series(self) -> str:
        if self.method == "baseline":
            return "baseline"
        return f"{self.method}/{'reload' if self.reload else 'no-reload'}"


# --------------------------------------------------------------------------
# datasets


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if cfg.dataset == "cifar10":
        train_ds, test_ds = load_cifar10(cfg.data_dir)
        if cfg.class_subset:
            train_ds = select_classes(train_ds, cfg.class_subset)
            test_ds = select_classes(test_ds, cfg.class_subset)
    else:
        shape = build_preset(cfg.preset, cfg.classes, materialize=False).input_shape
        full = synth_dataset(cfg.data_seed, cfg.synth_train + cfg.synth_test, cfg.classes, shape,
                             separation=cfg.synth_separation)
        train_ds, test_ds = full[:cfg.synth_train], full[cfg.synth_train:]
    train_ds = subsample(train_ds, cfg.train_fraction, cfg.data_seed)
    test_ds = subsample(test_ds, cfg.test_fraction, cfg.data_seed + 1)
    return train_ds, test_ds


# --------------------------------------------------------------------------
# measurement


@dataclass
class StepTiming:
    median_ms: float
    all_ms: list[float]
    warmup: int

    @property
    def unwarmed(self) -> bool:
        return self.warmup == 0


def measure_step_time(graph: ModelGraph, batch, warmup: int = 5, reps: int = 20,
                      hp: Hyperparams | None = None) -> StepTiming:
    """Wall time of full train steps (forward, backward, update) on one fixed batch.

    Steps run on a private copy of ``graph``. With ``warmup=0`` the first
    samples include one-off costs; ``StepTiming.unwarmed`` flags that.
    """
    if reps < 5:
        raise InvalidArgument("reps must be >= 5")
    if warmup < 0:
        raise InvalidArgument("warmup must be >= 0")
    hp = hp or Hyperparams()
    x, y = batch
    model = graph.copy()
    velocity = init_velocity(model)
    for _ in range(warmup):
        train_step(model, velocity, x, y, hp)
    samples = []
    gc_was_enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        for _ in range(reps):
            t0 = time.perf_counter()
            train_step(model, velocity, x, y, hp)
            samples.append((time.perf_counter() - t0) * 1e3)
    finally:
        if gc_was_enabled:
            gc.enable()
    if warmup == 0:
        log.warning("step time measured without warmup")
    return StepTiming(statistics.median(samples), samples, warmup)


# --------------------------------------------------------------------------
# pipeline


def _run_id(seed, method, scope, ratio, reload):
    if method == "baseline":
        return f"s{seed}-baseline"
    return f"s{seed}-{method}-{scope}-r{ratio:.3f}-{'reload' if reload else 'reinit'}"


def _measure_record(cfg, graph, tlog: TrainLog, step_batch, run_id, method, ratio, reload, seed,
                    model_dir: Path):
    hp = cfg.hyperparams
    path = model_dir / f"{run_id}.spmg"
    modelfile.save(graph, path)
    count = param_count(graph)
    reloaded = param_count(modelfile.load(path))
    if reloaded != count:
        raise RuntimeError(f"{run_id}: saved model has {reloaded} parameters, expected {count}")
    pb = padded_bytes(graph, cfg.layout, hp.batch_size)
    est = estimate_step_time(graph, cfg.layout, cfg.profile, hp.batch_size) * 1e3
    timing = measure_step_time(graph, step_batch, cfg.step_warmup, cfg.step_reps, hp)
    last = tlog.last
    return RunRecord(run_id, method, cfg.scope, ratio, reload, seed, last.epoch if last else 0, "test",
                     last.val_accuracy if last else None, last.val_loss if last else None,
                     count, pb.weight_bytes, pb.total, est, timing.median_ms)


def trainlog_rows(run_id, method, scope, ratio, reload, seed, tlog: TrainLog) -> list[RunRecord]:
    rows = []
    for r in tlog.records:
        rows.append(RunRecord(run_id, method, scope, ratio, reload, seed, r.epoch, "train",
                              r.train_accuracy, r.train_loss, None, None, None, None, None))
        rows.append(RunRecord(run_id, method, scope, ratio, reload, seed, r.epoch, "test",
                              r.val_accuracy, r.val_loss, None, None, None, None, None))
    return rows


def _failed(run_id, method, scope, ratio, reload, seed):
    return RunRecord(run_id, method, scope, ratio, reload, seed, None, "failed",
                     None, None, None, None, None, None, None)


def run_experiment(cfg: ExperimentConfig, datasets: tuple[Dataset, Dataset] | None = None) -> list[RunRecord]:
    """Run the sweep and write ``results.csv``, ``trainlog.csv``, SVG plots and model files.

    Returns the final-epoch held-out rows (one per run). A failing run point
    yields a ``split="failed"`` row and the sweep continues.
    """
    cfg.validate()
    out = Path(cfg.out_dir)
    model_dir = out / "models"
    model_dir.mkdir(parents=True, exist_ok=True)
    train_ds, test_ds = datasets if datasets is not None else load_datasets(cfg)
    resolved = cfg.to_dict()
    resolved["cifar_normalization"] = {"mean": CIFAR_MEAN, "std": CIFAR_STD}
    resolved["kernel_backend"] = kernels.BACKEND
    resolved["n_train"], resolved["n_test"] = len(train_ds), len(test_ds)
    (out / "config.json").write_text(json.dumps(resolved, indent=2), encoding="utf-8")

    step_batch = (train_ds.x[:cfg.hyperparams.batch_size], train_ds.y[:cfg.hyperparams.batch_size])
    records, trainlog = [], []
    for seed in cfg.seeds:
        hp = replace(cfg.hyperparams, seed=seed)
        run_cfg = replace(cfg, hyperparams=hp)
        run_id = _run_id(seed, "baseline", cfg.scope, 0.0, None)
        try:
            base, tlog = train(build_preset(cfg.preset, cfg.classes, seed), train_ds, test_ds, hp)
            records.append(_measure_record(run_cfg, base, tlog, step_batch, run_id,
                                           "baseline", 0.0, None, seed, model_dir))
            trainlog += trainlog_rows(run_id, "baseline", cfg.scope, 0.0, None, seed, tlog)
        except Exception:
            log.exception("baseline run %s failed", run_id)
            records.append(_failed(run_id, "baseline", cfg.scope, 0.0, None, seed))
            continue
        log.info("%s: accuracy %.4f", run_id, records[-1].accuracy)
        for ratio in cfg.ratios[1:]:
            for method in cfg.methods:
                for reload in cfg.reload:
                    run_id = _run_id(seed, method, cfg.scope, ratio, reload)
                    try:
                        plan = make_plan(score(base, method), ratio, cfg.scope)
                        policy = WeightPolicy("reload" if reload else "reinit", seed)
                        tuned, tlog = train(apply_plan(base, plan, policy), train_ds, test_ds, hp)
                        records.append(_measure_record(run_cfg, tuned, tlog, step_batch, run_id,
                                                       method, ratio, reload, seed, model_dir))
                        trainlog += trainlog_rows(run_id, method, cfg.scope, ratio, reload, seed, tlog)
                        log.info("%s: accuracy %.4f", run_id, records[-1].accuracy)
                    except Exception:
                        log.exception("run %s failed", run_id)
                        records.append(_failed(run_id, method, cfg.scope, ratio, reload, seed))
    emit_csv(records, out / "results.csv")
    if trainlog:
        emit_csv(trainlog, out / "trainlog.csv")
    ok = [r for r in records if r.split != "failed"]
    if ok:
        for metric, name in SVG_METRICS.items():
            emit_svg(ok, out / f"{name}.svg", metric)
    return records


# --------------------------------------------------------------------------
# CSV


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_csv(records: list[RunRecord], path) -> None:
    if not records:
        raise InvalidArgument("no records to write")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow([_fmt(getattr(r, name)) for name in CSV_HEADER])


_INT_FIELDS = {"seed", "epoch", "param_count", "padded_weight_bytes", "padded_total_bytes"}
_FLOAT_FIELDS = {"ratio", "accuracy", "loss", "est_step_ms", "measured_step_ms_median"}


def _parse(name, text):
    if name == "reload":
        return {"true": True, "false": False, "": None}[text]
    if name in _INT_FIELDS:
        return int(text) if text else None
    if name in _FLOAT_FIELDS:
        return float(text) if text else None
    return text


def read_csv(path) -> list[RunRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != CSV_HEADER:
            raise InvalidArgument(f"unexpected CSV header {header}")
        return [RunRecord(**{k: _parse(k, v) for k, v in zip(header, row)}) for row in reader]


# --------------------------------------------------------------------------
# SVG

SVG_METRICS = {
    "accuracy": "accuracy",
    "padded_total_bytes": "memory",
    "param_count": "params",
    "measured_step_ms_median": "step_time",
    "est_step_ms": "est_step_time",
}
_COLORS = ["#000000", "#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]


def series_points(records: list[RunRecord], metric: str) -> dict[str, list[tuple[float, float]]]:
    """Seed-averaged ``(ratio, value)`` points per series; pruned series start at the baseline mean."""
    buckets: dict[str, dict[float, list[float]]] = {}
    for r in records:
        value = getattr(r, metric)
        if value is None or (isinstance(value, float) and math.isnan(value)):
            continue
        buckets.setdefault(r.series, {}).setdefault(r.ratio, []).append(float(value))
    out = {}
    base = buckets.get("baseline", {})
    for name, by_ratio in buckets.items():
        pts = dict(by_ratio)
        if name != "baseline":
            pts = {**base, **pts}
        out[name] = sorted((ratio, float(np.mean(v))) for ratio, v in pts.items())
    return out


def emit_svg(records: list[RunRecord], path, metric: str = "accuracy",
             width: int = 640, height: int = 420) -> None:
    """Line chart of ``metric`` against pruned ratio, one polyline per (method, reload) series."""
    if not records:
        raise InvalidArgument("no records to plot")
    series = series_points(records, metric)
    ml, mr, mt, mb = 70, 170, 30, 50
    pw, ph = width - ml - mr, height - mt - mb
    xs = [x for pts in series.values() for x, _ in pts] or [0.0]
    ys = [y for pts in series.values() for _, y in pts] or [0.0]
    x0, x1 = 0.0, max(1.0, max(xs))
    y0, y1 = min(ys), max(ys)
    if y1 == y0:
        y0, y1 = y0 - 0.5 * (abs(y0) or 1), y1 + 0.5 * (abs(y1) or 1)

    def sx(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return mt + ph - (y - y0) / (y1 - y0) * ph

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
             f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    for i in range(6):
        xv = x0 + (x1 - x0) * i / 5
        yv = y0 + (y1 - y0) * i / 5
        parts.append(f'<text x="{sx(xv):.1f}" y="{mt + ph + 16}" text-anchor="middle">{xv:.1f}</text>')
        parts.append(f'<text x="{ml - 6}" y="{sy(yv) + 4:.1f}" text-anchor="end">{yv:.4g}</text>')
    parts.append(f'<text x="{ml + pw / 2}" y="{height - 12}" text-anchor="middle">pruned ratio</text>')
    parts.append(f'<text x="{ml + pw / 2}" y="{mt - 10}" text-anchor="middle">{escape(metric)}</text>')
    for k, (name, pts) in enumerate(sorted(series.items())):
        color = _COLORS[k % len(_COLORS)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
        parts.append(f'<polyline data-series="{escape(name)}" points="{coords}" fill="none" '
                     f'stroke="{color}" stroke-width="2"/>')
        for x, y in pts:
            parts.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3" fill="{color}"/>')
        ly = mt + 14 + 16 * k
        parts.append(f'<line x1="{ml + pw + 10}" y1="{ly - 4}" x2="{ml + pw + 30}" y2="{ly - 4}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{ml + pw + 34}" y="{ly}">{escape(name)}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")
