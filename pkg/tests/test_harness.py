import csv
import dataclasses
import json
import math
import os
import statistics

import numpy as np
import pytest

from imbameta import harness
from imbameta.errors import RunAbort
from imbameta.harness import (
    ConfigError, RunConfig, balance_ratio, build_report, code_paths, compare_reports, detect,
    dumps_report, load_reports, match_detections, run, run_to_dir,
)
from imbameta.streams import default_schedule, stream

TINY = dict(steps=(30, 30, 30), eval_episodes=20, capacity=12, B=8, m=2, variance_every=10)


def tiny(**kw):
    return RunConfig(**{**TINY, **kw})


# ------------------------------------------------------------------ config

@pytest.mark.parametrize("bad", [
    dict(method="nope"), dict(capacity=0), dict(n_way=1), dict(lr=-1.0), dict(alpha=0.0),
    dict(alpha=1.5), dict(B=1), dict(m=0), dict(delta=-1.0), dict(model_kind="cnn"),
    dict(steps=()), dict(steps=(5, 0)), dict(informative_dims=99), dict(replay_batch=-1),
    dict(detector_embedding="raw"), dict(moment_source="cubed"), dict(class_count=10),
])
def test_invalid_config_rejected(bad):
    with pytest.raises(ConfigError):
        RunConfig(**bad)


def test_from_mapping_converts_strings():
    cfg = RunConfig.from_mapping({"capacity": "25", "lr": "0.1", "steps": "3,4", "bandwidth": "none",
                                  "moment-source": "squared", "replay_batch": "0"})
    assert cfg.capacity == 25 and cfg.lr == 0.1 and cfg.steps == (3, 4)
    assert cfg.bandwidth is None and cfg.moment_source == "squared" and cfg.replay_size == 0


def test_from_mapping_errors():
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.from_mapping({"capacty": "3"})
    with pytest.raises(ConfigError, match="capacity"):
        RunConfig.from_mapping({"capacity": "many"})


def test_from_file_with_and_without_section(tmp_path):
    a = tmp_path / "a.ini"
    a.write_text("[run]\ncapacity = 7  # small\nmethod = sequential\n")
    b = tmp_path / "b.ini"
    b.write_text("capacity = 7\nmethod = sequential\n")
    ca, cb = RunConfig.from_file(a), RunConfig.from_file(b)
    assert ca == cb and ca.capacity == 7 and ca.method == "sequential"
    c = tmp_path / "c.ini"
    c.write_text("capacity = -3\n")
    with pytest.raises(ConfigError):
        RunConfig.from_file(c)


def test_config_round_trip_through_dict():
    cfg = tiny(method="uniform-replay", seed=4)
    back = RunConfig.from_mapping({k: str(v) if not isinstance(v, list) else ",".join(map(str, v))
                                   for k, v in cfg.to_dict().items() if v is not None})
    assert back == cfg


# ----------------------------------------------------------------- metrics

def test_match_detections_hand_cases():
    r = match_detections([105, 230, 400], [100, 200, 300], window=50)
    assert r["matched"] == 2 and r["delays"] == [5, 30]
    assert r["precision"] == pytest.approx(2 / 3) and r["recall"] == pytest.approx(2 / 3)
    assert r["mean_delay"] == pytest.approx(17.5)
    # one detection can match one boundary only
    r = match_detections([150], [100, 200], window=50)
    assert r["matched"] == 1 and r["delays"] == [50]
    r = match_detections([], [100], window=10)
    assert r["precision"] is None and r["recall"] == 0.0
    r = match_detections([5], [], window=10)
    assert r["precision"] == 0.0 and r["recall"] is None


def test_match_detections_window_is_inclusive():
    assert match_detections([110], [100], 10)["matched"] == 1
    assert match_detections([111], [100], 10)["matched"] == 0
    assert match_detections([90], [100], 10)["delays"] == [-10]


def test_balance_ratio():
    assert balance_ratio([30, 10, 20]) == 3.0
    assert balance_ratio([5, 0]) == math.inf
    assert math.isnan(balance_ratio([]))


# --------------------------------------------------------------------- run

@pytest.fixture(scope="module")
def tiny_ours():
    trace, art = [], {}
    return run(tiny(), trace, art), trace, art


def test_report_fields_and_ranges(tiny_ours):
    rep, trace, art = tiny_ours
    assert rep["schema_version"] == harness.SCHEMA_VERSION
    assert len(rep["per_domain"]) == 3
    for d in rep["per_domain"]:
        assert 0.0 <= d["accuracy"] <= 1.0 and d["stderr"] >= 0
    assert rep["average_accuracy"] == pytest.approx(np.mean([d["accuracy"] for d in rep["per_domain"]]))
    assert rep["memory"]["size"] == 12 == sum(rep["memory"]["truth_counts"].values())
    assert sum(rep["memory"]["truth_proportions"].values()) == pytest.approx(1.0)
    det = rep["detection"]
    assert det["boundaries"] == [31, 61] and det["window"] == 10
    for key in ("precision", "recall"):
        assert det[key] is None or 0.0 <= det[key] <= 1.0
    assert len(trace) == 90 and [r["step"] for r in trace] == list(range(1, 91))
    assert set(trace[0]) == set(harness.TRACE_COLUMNS)
    assert [v["step"] for v in rep["gradient_variance"]] == list(range(10, 91, 10))
    assert len(art["memory_snapshot"]) == 12


def test_no_class_leakage(tiny_ours):
    assert tiny_ours[0]["leakage"]["shared_train_test_classes"] == 0


def test_trace_memory_never_exceeds_capacity(tiny_ours):
    _, trace, _ = tiny_ours
    assert max(r["buffer_size"] for r in trace) == 12
    for r in trace:
        counts = [int(x.split(":")[1]) for x in r["label_counts"].split(";") if x]
        assert sum(counts) == r["buffer_size"]


def test_pets_weights_average_to_one_in_expectation(tiny_ours):
    # sum over the buffer of q * w is exactly 1, so batch mean weights hover near 1
    _, trace, _ = tiny_ours
    ws = [r["mean_weight"] for r in trace if r["mean_weight"] is not None]
    assert ws and all(w > 0 for w in ws)


def test_determinism_byte_identical():
    assert dumps_report(run(tiny(seed=3))) == dumps_report(run(tiny(seed=3)))


def test_different_seeds_differ():
    assert run(tiny(seed=1))["average_accuracy"] != run(tiny(seed=2))["average_accuracy"]


def test_sequential_equals_replay_with_empty_memory():
    one = dict(steps=(40,), eval_episodes=30, capacity=10)
    seq = run(RunConfig(method="sequential", seed=5, **one))
    uni = run(RunConfig(method="uniform-replay", replay_batch=0, seed=5, **one))
    for a, b in zip(seq["per_domain"], uni["per_domain"]):
        assert abs(a["accuracy"] - b["accuracy"]) <= 1e-12
    assert seq["memory"]["size"] == 0 and seq["gradient_variance"] == []


def test_reservoir_is_uniform_replay():
    a = run(tiny(method="reservoir", seed=2))
    b = run(tiny(method="uniform-replay", seed=2))
    for key in ("per_domain", "memory", "gradient_variance", "code_paths"):
        assert a[key] == b[key]


def test_code_paths_differ_only_in_contribution_modules():
    ours, uni = code_paths("ours"), code_paths("uniform-replay")
    assert ours == {"memory_rule": "m2d3", "sampler": "pets", "detector": True}
    assert uni == {"memory_rule": "reservoir", "sampler": "uniform", "detector": False}
    assert code_paths("sequential")["memory_rule"] == "none"


def test_uniform_replay_weights_are_one():
    trace = []
    run(tiny(method="uniform-replay"), trace)
    ws = {r["mean_weight"] for r in trace if r["mean_weight"] is not None}
    assert ws == {1.0}


def test_uniform_variance_rows_coincide():
    rep = run(tiny(method="uniform-replay"))
    for v in rep["gradient_variance"]:
        assert v["trace_plan"] == pytest.approx(v["trace_uniform"], rel=1e-12)


def test_runtime_abort_carries_step():
    with pytest.raises(RunAbort, match=r"^step \d+:"):
        run(tiny(lr=1e200))


# ---------------------------------------------------------- artifacts / compare

def _write_runs(root, method, seeds, **kw):
    for s in seeds:
        run_to_dir(tiny(method=method, seed=s, **kw), os.path.join(root, f"seed_{s}"))


@pytest.fixture(scope="module")
def five_seed_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    _write_runs(str(root), "ours", range(5))
    return str(root)


def test_run_dir_files(five_seed_dir):
    d = os.path.join(five_seed_dir, "seed_0")
    assert sorted(os.listdir(d)) == ["memory.json", "model.json", "report.json", "trace.csv", "variance.csv"]
    with open(os.path.join(d, "trace.csv")) as fh:
        header = next(csv.reader(fh))
    assert tuple(header) == harness.TRACE_COLUMNS
    for name in ("memory.json", "model.json", "report.json"):
        with open(os.path.join(d, name)) as fh:
            assert json.load(fh)["schema_version"] == 1


def test_compare_with_itself_is_zero(five_seed_dir):
    reps, bad = load_reports(five_seed_dir)
    assert sorted(reps) == [0, 1, 2, 3, 4] and bad == []
    summary, per_seed = compare_reports(reps, reps)
    assert all(r["mean_delta"] == 0 and r["sign_test_p"] == 1.0 for r in summary)
    assert all(r["delta"] == 0 for r in per_seed)


def test_compare_rejects_mismatch(five_seed_dir, tmp_path):
    reps, _ = load_reports(five_seed_dir)
    other = str(tmp_path / "other")
    _write_runs(other, "ours", range(5), separation=3.0)
    b, _ = load_reports(other)
    with pytest.raises(ConfigError, match="schedule"):
        compare_reports(reps, b)
    with pytest.raises(ConfigError, match="seed"):
        compare_reports(reps, {k: v for k, v in reps.items() if k != 0})


def test_compare_signs_and_sign_test():
    def fake(seed, acc):
        return {"schedule_fingerprint": "x", "average_accuracy": acc,
                "per_domain": [{"domain": 0, "accuracy": acc}]}
    a = {s: fake(s, 0.5) for s in range(6)}
    b = {s: fake(s, 0.6) for s in range(6)}
    summary, _ = compare_reports(a, b)
    row = summary[0]
    assert row["wins_b"] == 6 and row["mean_delta"] == pytest.approx(0.1)
    assert row["sign_test_p"] == pytest.approx(2 * 0.5 ** 6)


def test_report_single_seed_equals_run(tmp_path):
    root = str(tmp_path / "one")
    rep = run_to_dir(tiny(seed=9), os.path.join(root, "seed_9"))
    text, problems = build_report(root)
    assert problems == []
    with open(os.path.join(root, "summary.csv")) as fh:
        rows = {r["metric"]: r for r in csv.DictReader(fh)}
    assert float(rows["average_accuracy"]["mean"]) == rep["average_accuracy"]
    assert float(rows["average_accuracy"]["stderr"]) == 0.0
    for d in rep["per_domain"]:
        assert float(rows[f"accuracy_domain_{d['domain']}"]["mean"]) == d["accuracy"]
    assert "ours (1 seed: 9)" in text


def test_report_five_seeds_against_hand_computation(five_seed_dir, tmp_path):
    out = str(tmp_path / "rep")
    build_report(five_seed_dir, out)
    accs = []
    for s in range(5):
        with open(os.path.join(five_seed_dir, f"seed_{s}", "report.json")) as fh:
            accs.append(json.load(fh)["average_accuracy"])
    with open(os.path.join(out, "summary.csv")) as fh:
        row = next(r for r in csv.DictReader(fh) if r["metric"] == "average_accuracy")
    assert float(row["mean"]) == pytest.approx(statistics.fmean(accs), abs=1e-15)
    assert float(row["stderr"]) == pytest.approx(statistics.stdev(accs) / math.sqrt(5), rel=1e-12)
    for name in ("series_detector.csv", "series_memory.csv", "series_variance.csv"):
        with open(os.path.join(out, name)) as fh:
            rows = list(csv.DictReader(fh))
        assert rows and all(r["schema_version"] == "1" for r in rows)
    with open(os.path.join(out, "series_detector.csv")) as fh:
        assert sum(1 for _ in csv.DictReader(fh)) == 5 * 90


def test_report_flags_corrupted_trace(five_seed_dir, tmp_path):
    import shutil
    root = str(tmp_path / "copy")
    shutil.copytree(five_seed_dir, root)
    with open(os.path.join(root, "seed_2", "trace.csv"), "w") as fh:
        fh.write("garbage,without\nsteps,here\n")
    os.remove(os.path.join(root, "seed_3", "report.json"))
    text, problems = build_report(root)
    paths = sorted(os.path.relpath(p, root) for p, _ in problems)
    assert paths == [os.path.join("seed_2", "trace.csv"), os.path.join("seed_3", "report.json")]
    assert "## Problems" in text and "ours (4 seeds: 0, 1, 2, 4)" in text


# ------------------------------------------------------------------ detect

def _items(steps, seed=0, separation=6.0):
    sched = default_schedule(steps=steps, scale=1.0, separation=separation, seed=seed)
    return list(stream(sched, 5, 5, 2, np.random.default_rng(seed)))


def test_detect_summary_shape():
    cfg = RunConfig(B=10, m=3).detector_config()
    rows, summary = detect(_items((60, 60)), cfg)
    assert len(rows) == 120 and summary["steps"] == 120
    assert summary["boundaries"] == [61]
    assert summary["testable_steps"] == sum(r["threshold"] is not None for r in rows)
    assert set(rows[0]) == set(harness.DETECT_COLUMNS)
    assert all(r["flag"] == 0 for r in rows if r["threshold"] is None)


def test_detect_empty_stream():
    rows, summary = detect([], RunConfig().detector_config())
    assert rows == [] and summary["steps"] == 0 and summary["flag_rate"] is None
