"""Capacity-bounded task memory partitioned by latent domain label.

Two update rules share one buffer type: the domain- and difficulty-aware
rule (M2D3), which balances clusters by size and gradient-norm importance,
and classic single-pass reservoir sampling used as the baseline.
"""
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import RunAbort
from .learner import task_importance

__all__ = [
    "TaskRecord", "MemoryBuffer", "ClusterImportance", "MutationReport",
    "task_importance", "cluster_importance", "refresh_importance",
    "move_in_scores", "insertion_probability", "move_in_probability",
    "move_out_cluster_distribution", "m2d3_step", "reservoir_step",
]


@dataclass
class TaskRecord:
    episode: object
    label: int
    importance: float
    arrival_step: int

    def __post_init__(self):
        if self.label < 0:
            raise ValueError("label must be non-negative")
        if not self.importance >= 0:
            raise ValueError(f"importance must be >= 0, got {self.importance}")


@dataclass
class MemoryBuffer:
    capacity: int
    clusters: dict = field(default_factory=dict)  # label -> list[TaskRecord]
    seen_count: int = 0

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be positive")

    def __len__(self):
        return sum(len(v) for v in self.clusters.values())

    @property
    def is_full(self):
        return len(self) >= self.capacity

    def sizes(self):
        return {lab: len(recs) for lab, recs in sorted(self.clusters.items())}

    def labels(self):
        return sorted(self.clusters)

    def records(self):
        """All stored records, cluster by cluster in label order."""
        return [r for lab in self.labels() for r in self.clusters[lab]]

    def insert(self, record):
        self.clusters.setdefault(record.label, []).append(record)
        self.check()

    def evict(self, label, index):
        recs = self.clusters[label]
        rec = recs.pop(index)
        if not recs:
            del self.clusters[label]
        return rec

    def check(self):
        n = len(self)
        assert n <= self.capacity, f"memory holds {n} > capacity {self.capacity}"
        assert all(self.clusters.values()), "empty cluster left in mapping"

    def snapshot(self):
        return [
            {"label": int(r.label), "arrival_step": int(r.arrival_step), "importance": float(r.importance)}
            for r in self.records()
        ]

    def snapshot_json(self):
        return json.dumps(self.snapshot())


@dataclass
class ClusterImportance:
    """Per-cluster gradient-norm estimates and the step they were taken at."""

    values: dict = field(default_factory=dict)  # label -> G_i
    computed_at: int | None = None

    def staleness(self, step):
        return None if self.computed_at is None else step - self.computed_at

    def value(self, buf, label):
        """``G_i`` for ``label``; clusters created since the last refresh fall
        back to the mean cached arrival importance of their records."""
        if label in self.values:
            return self.values[label]
        recs = buf.clusters.get(label)
        if not recs:
            return 0.0
        return float(np.mean([r.importance for r in recs]))


@dataclass(frozen=True)
class MutationReport:
    inserted: bool
    evicted: tuple | None = None  # (label, index within cluster)
    p_in: float | None = None


def cluster_importance(buf, label, model, R, rng):
    """Mean task importance over ``min(R, n_i)`` tasks drawn without replacement."""
    if label not in buf.clusters:
        raise ValueError(f"unknown or empty cluster {label!r}")
    if R < 1:
        raise ValueError("R must be >= 1")
    recs = buf.clusters[label]
    idx = rng.choice(len(recs), size=min(R, len(recs)), replace=False)
    return float(np.mean([task_importance(model, recs[i].episode) for i in idx]))


def refresh_importance(buf, model, R, rng, step):
    values = {lab: cluster_importance(buf, lab, model, R, rng) for lab in buf.labels()}
    bad = [lab for lab, v in values.items() if not np.isfinite(v)]
    if bad:
        raise RunAbort(f"non-finite importance for clusters {bad}")
    return ClusterImportance(values, step)


def _softmax(a):
    a = np.asarray(a, dtype=np.float64)
    e = np.exp(a - a.max())
    return e / e.sum()


def move_in_scores(buf, I_new, current_label, imp):
    """Insertion scores ``(S_new, S_mem)`` for a task arriving in a full buffer."""
    n = len(buf)
    if n == 0:
        raise ValueError("insertion scores need a non-empty buffer")
    sizes = buf.sizes()
    n_cur = sizes.get(current_label, 0)
    older = [lab for lab in sizes if lab < current_label]
    if older:
        mean_old = float(np.mean([sizes[lab] / n * imp.value(buf, lab) for lab in older]))
    else:
        mean_old = 0.0
    s_new = (1.0 - n_cur / n) * I_new
    s_mem = n_cur / n * mean_old
    return s_new, s_mem


def insertion_probability(s_new, s_mem):
    return float(_softmax([s_new, s_mem])[0])


def move_in_probability(buf, I_new, current_label, imp):
    return insertion_probability(*move_in_scores(buf, I_new, current_label, imp))


def move_out_cluster_distribution(buf, current_label, imp):
    """Eviction-source distribution ``{label: prob}`` over clusters older than ``current_label``."""
    n = len(buf)
    sizes = buf.sizes()
    eligible = [lab for lab in sizes if lab < current_label]
    if not eligible:
        raise ValueError(f"no cluster with label below {current_label}")
    scores = [-(1.0 - sizes[lab] / n) * imp.value(buf, lab) for lab in eligible]
    return dict(zip(eligible, _softmax(scores).tolist()))


def m2d3_step(buf, ep, model, detector_flag, current_label, imp, rng, step=0, importance=None):
    """Offer one arriving episode to the memory.

    ``importance`` overrides the model-based arrival importance (used by
    simulations with oracle importances). ``detector_flag`` marks the start of
    a new cluster; since empty clusters are never stored, it needs no action
    beyond ``current_label`` itself.
    """
    del detector_flag
    I_new = task_importance(model, ep) if importance is None else float(importance)
    if not np.isfinite(I_new):
        raise RunAbort(f"non-finite task importance {I_new}")
    record = TaskRecord(ep, int(current_label), I_new, int(step))
    buf.seen_count += 1
    if not buf.is_full:
        buf.insert(record)
        return MutationReport(True)
    p_in = move_in_probability(buf, I_new, current_label, imp)
    if not rng.random() < p_in:
        return MutationReport(False, None, p_in)
    if any(lab < current_label for lab in buf.clusters):
        dist = move_out_cluster_distribution(buf, current_label, imp)
        labels = list(dist)
        src = labels[int(rng.choice(len(labels), p=np.array(list(dist.values()))))]
    else:
        src = current_label if current_label in buf.clusters else buf.labels()[-1]
    idx = int(rng.integers(len(buf.clusters[src])))
    buf.evict(src, idx)
    buf.insert(record)
    return MutationReport(True, (src, idx), p_in)


def reservoir_step(buf, ep, rng, label=0, step=0, importance=0.0):
    """Single-pass reservoir update: keep each of the N items seen with probability n/N."""
    buf.seen_count += 1
    record = TaskRecord(ep, int(label), float(importance), int(step))
    if not buf.is_full:
        buf.insert(record)
        return MutationReport(True)
    j = int(rng.integers(buf.seen_count))
    if j >= buf.capacity:
        return MutationReport(False)
    # slot j in the flat label-ordered view
    for lab in buf.labels():
        recs = buf.clusters[lab]
        if j < len(recs):
            buf.evict(lab, j)
            buf.insert(record)
            return MutationReport(True, (lab, j))
        j -= len(recs)
    raise AssertionError("reservoir slot index out of range")
