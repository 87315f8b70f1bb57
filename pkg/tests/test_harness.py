import csv
import json
import re

import numpy as np
import pytest

from chanprune import harness, modelfile
from chanprune.errors import ConfigError, InvalidArgument
from chanprune.graph import build_preset, param_count
from chanprune.harness import (CSV_HEADER, ExperimentConfig, RunRecord, emit_csv, emit_svg, measure_step_time,
                               read_csv, run_experiment)


def small_cfg(out, **kw):
    doc = dict(preset="tiny", dataset="synthetic", ratios=[0.0, 0.3], methods=["l1", "bn_gamma"],
               reload=[True, False], seeds=[1], hyperparams={"batch_size": 32, "max_epochs": 1},
               synth_train=64, synth_test=32, num_classes=2, step_warmup=1, step_reps=5, out_dir=str(out))
    doc.update(kw)
    return ExperimentConfig.from_dict(doc)


def record(i, method="l1", reload=True, ratio=0.3, acc=0.5):
    return RunRecord(f"r{i}", method, "per_layer", ratio, reload, 1, 10, "test", acc, 0.125 * i,
                     1000 + i, 4096, 123456789, 0.5, 12.25)


# ---------------------------------------------------------------- config


@pytest.mark.parametrize("bad", [dict(ratios=[0.3, 0.6]), dict(ratios=[0.0, 0.6, 0.3]), dict(ratios=[0.0, 1.0]),
                                 dict(methods=[]), dict(methods=["random"]), dict(seeds=[]),
                                 dict(scope="local"), dict(reload=["yes"]), dict(preset="resnet"),
                                 dict(hyperparams={"learning_rate": -1}), dict(bogus=1),
                                 dict(step_reps=3)])
def test_config_errors(tmp_path, bad):
    with pytest.raises(ConfigError):
        small_cfg(tmp_path, **bad)


def test_config_json_roundtrip(tmp_path):
    cfg = small_cfg(tmp_path)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()), encoding="utf-8")
    assert ExperimentConfig.from_json(path).to_dict() == cfg.to_dict()


def test_unreadable_config(tmp_path):
    (tmp_path / "c.json").write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json(tmp_path / "c.json")


# ---------------------------------------------------------------- CSV / SVG


def test_csv_line_count_and_header(tmp_path):
    recs = [record(i) for i in range(5)]
    emit_csv(recs, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text(encoding="utf-8").splitlines()
    assert len(lines) == 6
    assert lines[0] == ("run_id,method,scope,ratio,reload,seed,epoch,split,accuracy,loss,param_count,"
                        "padded_weight_bytes,padded_total_bytes,est_step_ms,measured_step_ms_median")
    assert lines[0].split(",") == CSV_HEADER


def test_csv_number_format(tmp_path):
    emit_csv([record(3)], tmp_path / "r.csv")
    row = next(csv.DictReader(open(tmp_path / "r.csv", encoding="utf-8")))
    assert row["padded_total_bytes"] == "123456789"
    assert row["loss"] == "0.375" and row["reload"] == "true"
    for name in ("ratio", "accuracy", "loss", "est_step_ms", "measured_step_ms_median"):
        assert re.fullmatch(r"-?\d+(\.\d+)?(e-?\d+)?", row[name])


def test_csv_roundtrip(tmp_path):
    recs = [record(i, reload=i % 2 == 0, acc=1 / (i + 3)) for i in range(4)]
    recs.append(RunRecord("f", "l1", "per_layer", 0.6, None, 2, None, "failed", *[None] * 7))
    emit_csv(recs, tmp_path / "r.csv")
    assert read_csv(tmp_path / "r.csv") == recs


def test_empty_records_rejected(tmp_path):
    with pytest.raises(InvalidArgument):
        emit_csv([], tmp_path / "r.csv")
    with pytest.raises(InvalidArgument):
        emit_svg([], tmp_path / "r.svg")


def test_svg_one_polyline_per_series(tmp_path):
    recs = [record(0, "baseline", None, 0.0), record(1, "l1", True), record(2, "l1", False),
            record(3, "bn_gamma", True), record(4, "l1", True, ratio=0.6)]
    emit_svg(recs, tmp_path / "a.svg", "accuracy")
    text = (tmp_path / "a.svg").read_text(encoding="utf-8")
    series = re.findall(r'<polyline data-series="([^"]+)"', text)
    assert sorted(series) == ["baseline", "bn_gamma/reload", "l1/no-reload", "l1/reload"]


def test_series_points_average_seeds():
    recs = [record(0, acc=0.4), record(1, acc=0.6), record(2, "baseline", None, 0.0, acc=0.9)]
    pts = harness.series_points(recs, "accuracy")
    assert pts["l1/reload"] == [(0.0, 0.9), (0.3, 0.5)]


# ---------------------------------------------------------------- step timing


def step_batch(n=16, classes=10):
    rng = np.random.default_rng(0)
    return rng.normal(size=(n, 32, 32, 3)).astype(np.float32), rng.integers(0, classes, n)


def test_step_time_reps_below_five(tiny):
    with pytest.raises(InvalidArgument):
        measure_step_time(tiny, step_batch(), warmup=1, reps=3)


def test_step_time_fields(tiny):
    t = measure_step_time(tiny, step_batch(), warmup=1, reps=5)
    assert len(t.all_ms) == 5 and t.median_ms == sorted(t.all_ms)[2]
    assert not t.unwarmed


def test_step_time_unwarmed_flag(tiny, caplog):
    t = measure_step_time(tiny, step_batch(), warmup=0, reps=5)
    assert t.unwarmed
    assert "without warmup" in caplog.text


def test_step_time_leaves_graph_alone(tiny):
    before = modelfile.dumps(tiny)
    measure_step_time(tiny, step_batch(), warmup=1, reps=5)
    assert modelfile.dumps(tiny) == before


# ---------------------------------------------------------------- pipeline


@pytest.fixture(scope="module")
def sweep(tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep")
    cfg = small_cfg(out)
    return cfg, run_experiment(cfg)


def test_sweep_row_count(sweep):
    cfg, recs = sweep
    assert len(recs) == 1 + 4
    assert [r.split for r in recs] == ["test"] * 5
    assert recs[0].method == "baseline" and recs[0].ratio == 0.0
    assert {(r.method, r.reload) for r in recs[1:]} == {("l1", True), ("l1", False),
                                                        ("bn_gamma", True), ("bn_gamma", False)}


def test_sweep_artifacts(sweep):
    cfg, recs = sweep
    out = harness.Path(cfg.out_dir)
    assert read_csv(out / "results.csv") == recs
    for name in ("accuracy", "memory", "params", "step_time", "est_step_time"):
        assert (out / f"{name}.svg").exists()
    conf = json.loads((out / "config.json").read_text(encoding="utf-8"))
    assert conf["cifar_normalization"]["mean"] == [0.4914, 0.4822, 0.4465]
    assert conf["hyperparams"]["bn_stat_momentum"] == 0.9
    trainlog = read_csv(out / "trainlog.csv")
    assert len(trainlog) == 5 * 2


def test_sweep_param_count_matches_model_files(sweep):
    cfg, recs = sweep
    for r in recs:
        g = modelfile.load(harness.Path(cfg.out_dir) / "models" / f"{r.run_id}.spmg")
        assert param_count(g) == r.param_count
        assert 0 <= r.accuracy <= 1 and r.padded_total_bytes >= r.padded_weight_bytes >= 0
        assert r.est_step_ms > 0 and r.measured_step_ms_median > 0
    base = recs[0]
    assert all(r.param_count < base.param_count for r in recs[1:])


def test_sweep_is_deterministic(sweep, tmp_path):
    cfg, recs = sweep
    again = run_experiment(small_cfg(tmp_path, methods=["l1"], reload=[True]))
    first = {r.run_id: r for r in recs}
    for r in again:
        assert (r.accuracy, r.loss) == (first[r.run_id].accuracy, first[r.run_id].loss)


def test_failed_point_recorded_and_sweep_continues(tmp_path, monkeypatch):
    real = harness.apply_plan
    calls = []

    def flaky(graph, plan, policy):
        calls.append(policy.mode)
        if len(calls) == 1:
            raise RuntimeError("boom")
        return real(graph, plan, policy)

    monkeypatch.setattr(harness, "apply_plan", flaky)
    recs = run_experiment(small_cfg(tmp_path, methods=["l1"]))
    assert [r.split for r in recs] == ["test", "failed", "test"]
    assert recs[1].accuracy is None
    assert read_csv(tmp_path / "results.csv")[1].split == "failed"


def test_baseline_uses_requested_preset_and_classes(tmp_path):
    cfg = small_cfg(tmp_path)
    assert cfg.classes == 2
    assert build_preset(cfg.preset, cfg.classes).num_classes == 2
