"""Experiment orchestration: configured runs, metrics, traces and summaries."""
import configparser
import csv
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binomtest

from . import detector as det
from .errors import RunAbort
from .learner import Model, episode_gradient, evaluate
from .memory import ClusterImportance, MemoryBuffer, m2d3_step, refresh_importance, reservoir_step
from .pets import (
    build_sampling_plan, estimator_covariance_trace, meta_train_step, uniform_plan,
)
from .streams import FULL_STEPS, make_domain, sample_episode, stream_batches, default_schedule

SCHEMA_VERSION = 1
METHODS = ("ours", "reservoir", "sequential", "uniform-replay")
TRACE_COLUMNS = (
    "schema_version", "step", "truth", "W", "threshold", "detected", "label",
    "buffer_size", "label_counts", "truth_counts", "mean_weight",
)


class ConfigError(ValueError):
    pass


def _int_tuple(text):
    if isinstance(text, (tuple, list)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).replace(",", " ").split())


def _opt(conv):
    def parse(text):
        if text is None or (isinstance(text, str) and text.strip().lower() in ("", "none", "auto")):
            return None
        return conv(text)
    return parse


def _bool(text):
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class RunConfig:
    method: str = "ours"
    seed: int = 0
    # learner
    model_kind: str = "linear"
    hidden: int = 32
    d: int = 16
    e: int = 8
    lr: float = 0.05
    n_way: int = 5
    k_shot: int = 5
    q_per_class: int = 10
    tasks_per_step: int = 2
    replay_batch: int | None = None  # None: same as tasks_per_step
    # memory and replay
    capacity: int = 600  # 300 stored mini-batches of 2 tasks
    R: int = 2
    s: int = 10
    # detector
    alpha: float = 0.1
    m: int = 5
    B: int = 100
    rho: float = 0.05
    delta: float = 1.64
    moment_source: str = "raw"
    bandwidth: float | None = None
    detector_embedding: str = "model"  # model | identity
    # schedule
    steps: tuple | None = None  # None: FULL_STEPS scaled by `scale`
    scale: float = 0.1
    separation: float = 6.0
    within_class_std: float = 1.0
    class_count: int = 30
    class_mean_scale: float = 3.0
    informative_dims: int | None = 4
    nuisance_std: float | None = 2.0
    schedule_seed: int = 0
    # evaluation and tracing
    eval_episodes: int = 750
    variance_every: int = 100

    _CONVERTERS = {
        "replay_batch": _opt(int), "bandwidth": _opt(float), "steps": _opt(_int_tuple),
        "informative_dims": _opt(int), "nuisance_std": _opt(float),
    }

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.model_kind not in ("linear", "mlp"):
            raise ConfigError("model_kind must be linear or mlp")
        if self.detector_embedding not in ("model", "identity"):
            raise ConfigError("detector_embedding must be model or identity")
        for name in ("d", "e", "n_way", "k_shot", "q_per_class", "tasks_per_step", "capacity", "R", "s",
                     "class_count", "eval_episodes", "variance_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_way < 2:
            raise ConfigError("n_way must be >= 2")
        if self.model_kind == "mlp" and self.hidden < 1:
            raise ConfigError("hidden must be >= 1 for the mlp model")
        if self.replay_batch is not None and self.replay_batch < 0:
            raise ConfigError("replay_batch must be >= 0")
        if not self.lr >= 0:
            raise ConfigError("lr must be >= 0")
        if self.scale <= 0:
            raise ConfigError("scale must be positive")
        if self.steps is not None and (not self.steps or min(self.steps) < 1):
            raise ConfigError("steps must be a non-empty list of positive counts")
        if self.informative_dims is not None and not 0 < self.informative_dims <= self.d:
            raise ConfigError("informative_dims must be in [1, d]")
        if int(round(0.3 * self.class_count)) < self.n_way:
            raise ConfigError(f"class_count {self.class_count} leaves fewer than n_way test classes")
        try:
            self.detector_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        try:
            self.schedule()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def replay_size(self):
        return self.tasks_per_step if self.replay_batch is None else self.replay_batch

    def detector_config(self):
        return det.DetectorConfig(
            alpha=self.alpha, m=self.m, B=self.B, rho=self.rho, delta=self.delta,
            bandwidth=self.bandwidth, moment_source=self.moment_source,
        )

    def schedule(self):
        if self.steps is None:
            steps, scale = FULL_STEPS, self.scale
        else:
            steps, scale = self.steps, 1.0
        return default_schedule(
            scale=scale, steps=steps, dim=self.d, separation=self.separation,
            within_class_std=self.within_class_std, class_count=self.class_count,
            class_mean_scale=self.class_mean_scale, informative_dims=self.informative_dims,
            nuisance_std=self.nuisance_std, seed=self.schedule_seed,
        )

    def to_dict(self):
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def keys(cls):
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_mapping(cls, mapping, base=None):
        """Build a config from string (or typed) values, layered over ``base``."""
        base = base or cls()
        known = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for key, raw in mapping.items():
            key = key.replace("-", "_")
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            conv = cls._CONVERTERS.get(key)
            if conv is None:
                default = getattr(base, key)
                conv = _bool if isinstance(default, bool) else type(default)
            try:
                values[key] = conv(raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc
        return dataclasses.replace(base, **values)

    @classmethod
    def from_file(cls, path, base=None):
        """Read an INI file; keys live in a ``[run]`` section (or at top level)."""
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError:
            raise
        if not text.lstrip().startswith("["):
            text = "[run]\n" + text
        try:
            parser.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        mapping = {}
        for section in parser.sections():
            mapping.update(parser[section])
        return cls.from_mapping(mapping, base)


# ----------------------------------------------------------------- metrics

def match_detections(detections, boundaries, window):
    """Greedy one-to-one matching of detections to true change points within ``window`` steps.

    Returns precision, recall (``None`` when undefined), per-boundary delays
    and the raw match counts.
    """
    dets = sorted(int(d) for d in detections)
    used = set()
    delays = []
    for b in sorted(int(b) for b in boundaries):
        cands = [d for d in dets if d not in used and abs(d - b) <= window]
        if cands:
            d = min(cands, key=lambda x: (abs(x - b), x))
            used.add(d)
            delays.append(d - b)
    matched = len(delays)
    return {
        "detections": dets,
        "boundaries": sorted(int(b) for b in boundaries),
        "matched": matched,
        "precision": matched / len(dets) if dets else None,
        "recall": matched / len(boundaries) if len(boundaries) else None,
        "delays": delays,
        "mean_delay": float(np.mean(delays)) if delays else None,
        "window": int(window),
    }


def balance_ratio(counts):
    """max/min over the given cluster sizes (inf if some cluster is empty)."""
    counts = [c for c in counts]
    if not counts:
        return float("nan")
    lo = min(counts)
    return float("inf") if lo == 0 else max(counts) / lo


# --------------------------------------------------------------------- run

@dataclass
class RunState:
    model: Model
    buf: MemoryBuffer
    imp: ClusterImportance = field(default_factory=ClusterImportance)
    plan: object = None
    detector: det.DetectorState | None = None


def _streams(seed):
    names = ("stream", "init", "memory", "replay", "importance", "eval")
    return dict(zip(names, (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(len(names)))))


def _fmt_counts(counts):
    return ";".join(f"{k}:{v}" for k, v in sorted(counts.items()))


def _gradient_variance(model, buf, plan):
    """Exact covariance traces of the replay estimator under ``plan`` and under uniform sampling."""
    recs = buf.records()
    n = len(recs)
    G = np.array([episode_gradient(model, r.episode)[0] for r in recs])
    p = np.full(n, 1.0 / n)
    q = np.array([plan.per_task_prob(buf, r.label) for r in recs]) if plan is not None else p
    return estimator_covariance_trace(p, q, G), estimator_covariance_trace(p, p, G)


def code_paths(method):
    return {
        "ours": {"memory_rule": "m2d3", "sampler": "pets", "detector": True},
        "reservoir": {"memory_rule": "reservoir", "sampler": "uniform", "detector": False},
        "uniform-replay": {"memory_rule": "reservoir", "sampler": "uniform", "detector": False},
        "sequential": {"memory_rule": "none", "sampler": "none", "detector": False},
    }[method]


def _truth_counts(buf):
    counts = {}
    for r in buf.records():
        counts[r.episode.domain_truth] = counts.get(r.episode.domain_truth, 0) + 1
    return dict(sorted(counts.items()))


def run(cfg, trace=None, artifacts=None):
    """Train over the configured stream and meta-test on unseen classes of every domain.

    ``trace`` (a list) receives one dict per step; ``artifacts`` (a dict)
    receives the final memory snapshot and model. Returns the report dict.
    """
    schedule = cfg.schedule()
    domains = [make_domain(spec, cfg.n_way) for spec in schedule.domains]
    rngs = _streams(cfg.seed)
    paths = code_paths(cfg.method)
    replay = 0 if paths["sampler"] == "none" else cfg.replay_size
    state = RunState(
        model=Model.init(cfg.model_kind, cfg.d, cfg.e, cfg.hidden if cfg.model_kind == "mlp" else 0, rngs["init"]),
        buf=MemoryBuffer(cfg.capacity),
        detector=det.DetectorState(cfg.detector_config()) if paths["detector"] else None,
    )
    variance = []
    detections = []
    seen_train_classes = [set() for _ in domains]
    label = 0
    for t, eps, truth, _ in stream_batches(
        schedule, cfg.n_way, cfg.k_shot, cfg.q_per_class, rngs["stream"], cfg.tasks_per_step, domains
    ):
        for ep in eps:
            seen_train_classes[truth].update(ep.classes)
        try:
            # plan refresh
            buf = state.buf
            if len(buf) and replay:
                if paths["sampler"] == "pets":
                    p = state.plan
                    if p is None or p.is_stale(t) or not p.covers(buf):
                        state.imp = refresh_importance(buf, state.model, cfg.R, rngs["importance"], t)
                        state.plan = build_sampling_plan(buf, state.imp, t, cfg.s)
                else:
                    state.plan = uniform_plan(buf, t, cfg.s)
            # replay sample + meta-train
            state.model, batch = meta_train_step(
                state.model, eps, buf, state.plan if replay else None, cfg.lr, rngs["replay"], replay, t
            )
            # detector
            W = thr = None
            flag = False
            if state.detector is not None:
                emb_model = state.model if cfg.detector_embedding == "model" else None
                flag, label = det.step(state.detector, eps, emb_model)
                W, thr = state.detector.last.W, state.detector.last.threshold
                if flag:
                    detections.append(t)
            # memory update
            for i, ep in enumerate(eps):
                if paths["memory_rule"] == "m2d3":
                    m2d3_step(buf, ep, state.model, flag and i == 0, label, state.imp, rngs["memory"], t)
                elif paths["memory_rule"] == "reservoir":
                    reservoir_step(buf, ep, rngs["memory"], label=label, step=t)
            if (t % cfg.variance_every == 0) and len(buf) > 1 and replay:
                plan_now = state.plan if (state.plan is not None and state.plan.covers(buf)) else uniform_plan(buf, t)
                tr_plan, tr_uni = _gradient_variance(state.model, buf, plan_now)
                variance.append({"schema_version": SCHEMA_VERSION, "step": t, "trace_plan": tr_plan, "trace_uniform": tr_uni})
        except RunAbort as exc:
            raise RunAbort(f"step {t}: {exc}") from exc
        if trace is not None:
            trace.append({
                "schema_version": SCHEMA_VERSION, "step": t, "truth": truth,
                "W": W, "threshold": thr, "detected": int(flag), "label": label,
                "buffer_size": len(buf), "label_counts": _fmt_counts(buf.sizes()),
                "truth_counts": _fmt_counts(_truth_counts(buf)),
                "mean_weight": batch.mean_weight if len(batch) else None,
            })

    # meta-test
    per_domain = []
    leaked = 0
    for i, dom in enumerate(domains):
        eval_eps = [
            sample_episode(dom, cfg.n_way, cfg.k_shot, cfg.q_per_class, "test", rngs["eval"])
            for _ in range(cfg.eval_episodes)
        ]
        test_classes = {c for ep in eval_eps for c in ep.classes}
        leaked += len(test_classes & seen_train_classes[i])
        acc, se = evaluate(state.model, eval_eps)
        per_domain.append({"domain": i, "steps": schedule.segments[i][1], "accuracy": acc, "stderr": se})

    detection = None
    if state.detector is not None:
        detection = match_detections(detections, schedule.boundaries, cfg.B + cfg.m)
    truth_counts = _truth_counts(state.buf)
    if artifacts is not None:
        artifacts["memory_snapshot"] = state.buf.snapshot()
        artifacts["model"] = state.model
    n_mem = len(state.buf)
    return {
        "schema_version": SCHEMA_VERSION,
        "method": cfg.method,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "schedule_fingerprint": hashlib.sha256(schedule.fingerprint().encode()).hexdigest(),
        "code_paths": paths,
        "per_domain": per_domain,
        "average_accuracy": float(np.mean([d["accuracy"] for d in per_domain])),
        "detection": detection,
        "memory": {
            "size": n_mem,
            "label_counts": {str(k): v for k, v in state.buf.sizes().items()},
            "truth_counts": {str(k): v for k, v in sorted(truth_counts.items())},
            "truth_proportions": {str(k): v / n_mem for k, v in sorted(truth_counts.items())} if n_mem else {},
        },
        "gradient_variance": variance,
        "leakage": {"shared_train_test_classes": leaked},
    }


# --------------------------------------------------------------- artifacts

def dumps_report(report):
    return json.dumps(report, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _csv_value(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_csv_value(row.get(c)) for c in columns])


def write_run(out_dir, report, trace, artifacts):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        fh.write(dumps_report(report))
    write_csv(os.path.join(out_dir, "trace.csv"), TRACE_COLUMNS, trace)
    write_csv(
        os.path.join(out_dir, "variance.csv"), ("schema_version", "step", "trace_plan", "trace_uniform"),
        [dict(r, schema_version=SCHEMA_VERSION) for r in report["gradient_variance"]],
    )
    with open(os.path.join(out_dir, "memory.json"), "w") as fh:
        json.dump({"schema_version": SCHEMA_VERSION, "records": artifacts["memory_snapshot"]}, fh)
    with open(os.path.join(out_dir, "model.json"), "w") as fh:
        fh.write(artifacts["model"].to_json())


def run_to_dir(cfg, out_dir):
    trace, artifacts = [], {}
    report = run(cfg, trace, artifacts)
    write_run(out_dir, report, trace, artifacts)
    return report


def load_reports(root):
    """``{seed: report}`` for every ``report.json`` under ``root``, plus unreadable paths."""
    reports, bad = {}, []
    for dirpath, _, files in sorted(os.walk(root)):
        if "report.json" not in files:
            continue
        path = os.path.join(dirpath, "report.json")
        try:
            with open(path) as fh:
                rep = json.load(fh)
            if rep.get("schema_version") != SCHEMA_VERSION:
                raise ValueError(f"schema_version {rep.get('schema_version')!r}")
            reports[int(rep["seed"])] = rep
        except (OSError, ValueError, KeyError, TypeError) as exc:
            bad.append((path, str(exc)))
    return reports, bad


# ----------------------------------------------------------------- compare

def _metrics(rep):
    out = {"average_accuracy": rep["average_accuracy"]}
    for d in rep["per_domain"]:
        out[f"accuracy_domain_{d['domain']}"] = d["accuracy"]
    return out


def sign_test(deltas):
    """Two-sided sign test on the non-zero deltas (p = 1 when all are zero)."""
    nz = [d for d in deltas if d != 0]
    if not nz:
        return 1.0
    return float(binomtest(sum(d > 0 for d in nz), len(nz), 0.5).pvalue)


def compare_reports(a, b):
    """Paired per-seed deltas ``b - a``; ``a`` and ``b`` map seed -> report.

    Returns ``(summary_rows, per_seed_rows)``.
    """
    if set(a) != set(b):
        raise ConfigError(f"seed sets differ: {sorted(a)} vs {sorted(b)}")
    if not a:
        raise ConfigError("nothing to compare")
    fps = {r["schedule_fingerprint"] for r in list(a.values()) + list(b.values())}
    if len(fps) != 1:
        raise ConfigError("runs use different schedules")
    seeds = sorted(a)
    per_seed, summary = [], []
    metrics = list(_metrics(a[seeds[0]]))
    for name in metrics:
        deltas = []
        for sd in seeds:
            va, vb = _metrics(a[sd])[name], _metrics(b[sd])[name]
            deltas.append(vb - va)
            per_seed.append({"seed": sd, "metric": name, "a": va, "b": vb, "delta": vb - va})
        summary.append({
            "metric": name, "n": len(seeds),
            "mean_a": float(np.mean([_metrics(a[sd])[name] for sd in seeds])),
            "mean_b": float(np.mean([_metrics(b[sd])[name] for sd in seeds])),
            "mean_delta": float(np.mean(deltas)),
            "wins_b": int(sum(d > 0 for d in deltas)),
            "sign_test_p": sign_test(deltas),
        })
    return summary, per_seed


COMPARE_COLUMNS = ("schema_version", "metric", "n", "mean_a", "mean_b", "mean_delta", "wins_b", "sign_test_p")


def write_compare(path, summary):
    write_csv(path, COMPARE_COLUMNS, [dict(r, schema_version=SCHEMA_VERSION) for r in summary])


# ------------------------------------------------------------------ detect

DETECT_COLUMNS = ("schema_version", "step", "truth", "W", "threshold", "flag", "label")


def detect(items, det_cfg, model=None):
    """Run the detector alone over ``(step, episode, truth, boundary)`` items.

    Returns ``(rows, summary)``; truth boundaries come from the items.
    """
    state = det.DetectorState(det_cfg)
    rows, flags, boundaries = [], [], []
    for step_no, ep, truth, boundary in items:
        det.step(state, ep, model)
        tr = state.last
        if boundary:
            boundaries.append(step_no)
        if tr.flag:
            flags.append(step_no)
        rows.append({"schema_version": SCHEMA_VERSION, "step": step_no, "truth": truth,
                     "W": tr.W, "threshold": tr.threshold, "flag": int(tr.flag), "label": tr.label})
    summary = match_detections(flags, boundaries, det_cfg.B + det_cfg.m)
    testable = sum(1 for r in rows if r["threshold"] is not None)
    summary.update({
        "schema_version": SCHEMA_VERSION,
        "steps": len(rows),
        "testable_steps": testable,
        "flag_rate": len(flags) / testable if testable else None,
    })
    return rows, summary


# ------------------------------------------------------------------ report

def _mean_se(values):
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return None, None
    se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


def _read_trace(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "step" not in rows[0]:
        raise ValueError("empty or headerless trace")
    for r in rows:
        int(r["step"])
        if r.get("schema_version") != str(SCHEMA_VERSION):
            raise ValueError(f"schema_version {r.get('schema_version')!r}")
    return rows


def build_report(root, out_dir=None):
    """Aggregate every run under ``root``; writes markdown and tidy CSVs to ``out_dir``.

    Returns ``(markdown_text, problems)``. Unreadable files are listed in the
    problems and skipped.
    """
    out_dir = out_dir or root
    problems = []
    runs = []  # (run_dir, report)
    for dirpath, _, files in sorted(os.walk(root)):
        if "report.json" not in files and "trace.csv" not in files:
            continue
        if "report.json" not in files:
            problems.append((os.path.join(dirpath, "report.json"), "missing"))
            continue
        path = os.path.join(dirpath, "report.json")
        try:
            with open(path) as fh:
                rep = json.load(fh)
            if rep.get("schema_version") != SCHEMA_VERSION:
                raise ValueError(f"schema_version {rep.get('schema_version')!r}")
            _metrics(rep)
            runs.append((dirpath, rep))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            problems.append((path, f"unreadable: {exc}"))

    series, memory, variance = [], [], []
    for dirpath, rep in runs:
        tpath = os.path.join(dirpath, "trace.csv")
        if not os.path.exists(tpath):
            problems.append((tpath, "missing"))
        else:
            try:
                rows = _read_trace(tpath)
                for r in rows:
                    series.append({"schema_version": SCHEMA_VERSION, "method": rep["method"], "seed": rep["seed"], "step": r["step"],
                                   "W": r["W"], "threshold": r["threshold"], "detected": r["detected"]})
                    for item in filter(None, r["truth_counts"].split(";")):
                        k, v = item.split(":")
                        memory.append({"schema_version": SCHEMA_VERSION, "method": rep["method"], "seed": rep["seed"], "step": r["step"],
                                       "truth": k, "count": int(v)})
            except (OSError, ValueError, KeyError) as exc:
                problems.append((tpath, f"unreadable: {exc}"))
        for v in rep.get("gradient_variance", []):
            variance.append({"method": rep["method"], "seed": rep["seed"], **v})

    by_method = {}
    for _, rep in runs:
        by_method.setdefault(rep["method"], []).append(rep)
    lines = ["# Run summary", ""]
    agg_rows = []
    for method in sorted(by_method):
        reps = sorted(by_method[method], key=lambda r: r["seed"])
        lines.append(f"## {method} ({len(reps)} seed{'s' if len(reps) != 1 else ''}: "
                     f"{', '.join(str(r['seed']) for r in reps)})")
        lines.append("")
        lines.append("| metric | mean | stderr |")
        lines.append("|---|---|---|")
        for name in _metrics(reps[0]):
            mean, se = _mean_se([_metrics(r)[name] for r in reps])
            agg_rows.append({"schema_version": SCHEMA_VERSION, "method": method, "metric": name,
                             "n": len(reps), "mean": mean, "stderr": se})
            lines.append(f"| {name} | {mean:.4f} | {se:.4f} |")
        dets = [r["detection"] for r in reps if r.get("detection")]
        if dets:
            for key in ("precision", "recall", "mean_delay"):
                vals = [d[key] for d in dets if d[key] is not None]
                if vals:
                    mean, se = _mean_se(vals)
                    agg_rows.append({"schema_version": SCHEMA_VERSION, "method": method, "metric": f"detection_{key}",
                                     "n": len(vals), "mean": mean, "stderr": se})
                    lines.append(f"| detection_{key} | {mean:.4f} | {se:.4f} |")
        lines.append("")
    if problems:
        lines.append("## Problems")
        lines.append("")
        for path, why in problems:
            lines.append(f"- `{path}`: {why}")
        lines.append("")
    text = "\n".join(lines)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "summary.md"), "w") as fh:
        fh.write(text)
    write_csv(os.path.join(out_dir, "summary.csv"), ("schema_version", "method", "metric", "n", "mean", "stderr"), agg_rows)
    write_csv(os.path.join(out_dir, "series_detector.csv"), ("schema_version", "method", "seed", "step", "W", "threshold", "detected"), series)
    write_csv(os.path.join(out_dir, "series_memory.csv"), ("schema_version", "method", "seed", "step", "truth", "count"), memory)
    write_csv(os.path.join(out_dir, "series_variance.csv"), ("schema_version", "method", "seed", "step", "trace_plan", "trace_uniform"), variance)
    return text, problems
