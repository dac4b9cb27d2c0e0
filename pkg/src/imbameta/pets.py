"""Gradient-norm-proportional replay sampling with importance weights.

Replay draws a cluster with probability ``Z_i = n_i G_i / sum_j n_j G_j``
and then a task uniformly inside it, so a stored task is drawn with
``q = Z_i / n_i`` and reweighted by ``1 / (n q)``. The discrete oracle
functions below evaluate the exact optimum and estimator covariance.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import NotReady, RunAbort, StalePlanError
from .learner import episode_gradient, sgd_step


@dataclass(frozen=True)
class Distribution:
    probs: np.ndarray
    fallback: bool = False  # True when every norm was zero and the prior was returned


def _prior(prior, n):
    if prior is None:
        return np.full(n, 1.0 / n)
    p = np.asarray(prior, dtype=np.float64)
    if p.shape != (n,) or np.any(p < 0) or not np.isclose(p.sum(), 1.0, atol=1e-9):
        raise ValueError("prior must be a probability vector matching norms")
    return p


def optimal_task_distribution(norms, prior=None):
    """``q*_i = p_i g_i / sum_j p_j g_j``; falls back to the prior if all norms are zero."""
    g = np.asarray(norms, dtype=np.float64)
    if g.ndim != 1 or g.size == 0 or np.any(g < 0) or not np.all(np.isfinite(g)):
        raise ValueError("norms must be a non-empty vector of finite non-negative values")
    p = _prior(prior, g.size)
    mass = p * g
    total = mass.sum()
    if total <= 0:
        return Distribution(p.copy(), True)
    return Distribution(mass / total)


def estimator_covariance_trace(prior, q, grads):
    """Exact trace of the covariance of the one-sample estimator ``(p_i/q_i) g_i``, ``i ~ q``."""
    p = np.asarray(prior, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    G = np.atleast_2d(np.asarray(grads, dtype=np.float64))
    if not (p.shape == q.shape == (G.shape[0],)):
        raise ValueError("prior, q and grads must cover the same tasks")
    if np.any(q[p > 0] <= 0):
        raise ValueError("q must be positive wherever the prior is positive")
    on = p > 0
    sq = (G[on] ** 2).sum(1)
    second = float(np.sum(p[on] ** 2 / q[on] * sq))
    mean = p @ G
    return max(second - float(mean @ mean), 0.0)


@dataclass(frozen=True)
class SamplingPlan:
    """Cluster distribution ``Z``; per-task probabilities use the memory's current sizes."""

    cluster_probs: dict  # label -> Z_i
    computed_at: int
    refresh_every: int
    fallback: bool = False

    def per_task_prob(self, buf, label):
        return self.cluster_probs[label] / len(buf.clusters[label])

    def weight(self, buf, label):
        return 1.0 / (len(buf) * self.per_task_prob(buf, label))

    def is_stale(self, step):
        return step - self.computed_at >= self.refresh_every

    def covers(self, buf):
        """True when the plan and the memory have the same cluster labels."""
        return set(self.cluster_probs) == set(buf.clusters)


@dataclass
class WeightedBatch:
    tasks: list = field(default_factory=list)
    weights: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.tasks) != len(self.weights):
            raise ValueError("tasks and weights differ in length")

    def __len__(self):
        return len(self.tasks)

    @property
    def mean_weight(self):
        return float(np.mean(self.weights)) if self.weights else float("nan")


def build_sampling_plan(buf, imp, step, refresh_every=10):
    """Cluster distribution ``Z_i proportional to n_i G_i`` (size-proportional if all ``G_i`` are 0)."""
    if len(buf) == 0:
        raise NotReady("cannot build a sampling plan over an empty memory")
    sizes = buf.sizes()
    labels = list(sizes)
    n = np.array([sizes[lab] for lab in labels], dtype=np.float64)
    G = np.array([imp.value(buf, lab) for lab in labels], dtype=np.float64)
    dist = optimal_task_distribution(G, n / n.sum())
    return SamplingPlan(dict(zip(labels, dist.probs.tolist())), int(step), int(refresh_every), dist.fallback)


def uniform_plan(buf, step, refresh_every=10):
    """Plan with ``Z_i = n_i / n``: every stored task equally likely, all weights 1."""
    if len(buf) == 0:
        raise NotReady("cannot build a sampling plan over an empty memory")
    sizes = buf.sizes()
    n = sum(sizes.values())
    return SamplingPlan({lab: c / n for lab, c in sizes.items()}, int(step), int(refresh_every))


def pets_sample(buf, plan, batch_size, rng, step=None):
    """Draw ``batch_size`` tasks with replacement: cluster by ``Z``, then uniform within it."""
    if batch_size < 0:
        raise ValueError("batch_size must be >= 0")
    if batch_size == 0:
        return WeightedBatch()
    if len(buf) == 0:
        raise ValueError("cannot sample from an empty memory")
    if step is not None and plan.is_stale(step):
        raise StalePlanError(f"plan from step {plan.computed_at} is stale at step {step}")
    if not plan.covers(buf):
        raise StalePlanError("memory cluster labels changed since the plan was built")
    labels = list(plan.cluster_probs)
    probs = np.array([plan.cluster_probs[lab] for lab in labels])
    picks = rng.choice(len(labels), size=batch_size, p=probs / probs.sum())
    tasks, weights = [], []
    for c in picks:
        lab = labels[c]
        recs = buf.clusters[lab]
        tasks.append(recs[int(rng.integers(len(recs)))])
        weights.append(plan.weight(buf, lab))
    return WeightedBatch(tasks, weights)


def mean_gradient(model, episodes, weights=None):
    """(Weighted) average of episode gradients; returns zeros for an empty list."""
    if not episodes:
        return np.zeros_like(model.theta)
    w = np.ones(len(episodes)) if weights is None else np.asarray(weights, dtype=np.float64)
    acc = np.zeros_like(model.theta)
    for wi, ep in zip(w, episodes):
        acc += wi * episode_gradient(model, ep)[0]
    return acc / len(episodes)


def weighted_update(model, current_tasks, batch, lr):
    """SGD step on the stream-task mean gradient plus the weighted replay mean gradient."""
    if not model.is_finite():
        raise RunAbort("model parameters are not finite")
    g = mean_gradient(model, list(current_tasks))
    if len(batch):
        g = g + mean_gradient(model, [r.episode for r in batch.tasks], batch.weights)
    if not np.all(np.isfinite(g)):
        raise RunAbort(f"non-finite meta-gradient ({int(np.sum(~np.isfinite(g)))} of {g.size} entries)")
    new = sgd_step(model, g, lr)
    if not new.is_finite():
        raise RunAbort("update produced non-finite model parameters")
    return new


def meta_train_step(model, current_tasks, buf, plan, lr, rng, batch_size=None, step=None):
    """Sample a replay batch from ``buf`` under ``plan`` and take one SGD step.

    ``batch_size`` defaults to the number of stream tasks. Returns
    ``(new_model, batch)``. With an empty memory or no plan the step uses the
    stream tasks alone.
    """
    current_tasks = list(current_tasks)
    if batch_size is None:
        batch_size = len(current_tasks)
    if plan is None or len(buf) == 0:
        batch = WeightedBatch()
    else:
        batch = pets_sample(buf, plan, batch_size, rng, step)
    return weighted_update(model, current_tasks, batch, lr), batch
