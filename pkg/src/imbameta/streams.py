"""Synthetic imbalanced-domain episode streams with ground-truth change points.

Each domain is a Gaussian mixture: class means scattered around a domain
center, examples drawn isotropically around their class mean. Optionally
the class means vary only along a domain-specific subset of coordinates and
the remaining coordinates carry extra (nuisance) noise, which makes the
useful embedding domain-specific and so produces forgetting.
"""
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import StreamFormatError
from .learner import Episode

SCHEMA_VERSION = 1
TRAIN_FRACTION = 0.7
FULL_STEPS = (5000, 2000, 6000, 2000, 2000, 24000)


@dataclass(frozen=True)
class DomainSpec:
    id: int
    class_count: int
    class_mean_scale: float
    center: tuple
    within_class_std: float
    seed: int
    informative_dims: int | None = None
    nuisance_std: float | None = None

    def __post_init__(self):
        if self.within_class_std <= 0:
            raise ValueError("within_class_std must be positive")
        if self.class_mean_scale < 0:
            raise ValueError("class_mean_scale must be non-negative")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @property
    def dim(self):
        return len(self.center)


@dataclass
class Schedule:
    segments: list  # [(DomainSpec, steps), ...]

    def __post_init__(self):
        if not self.segments:
            raise ValueError("schedule is empty")
        for spec, steps in self.segments:
            if steps < 1:
                raise ValueError(f"segment for domain {spec.id} has {steps} steps")

    @property
    def total_steps(self):
        return sum(s for _, s in self.segments)

    @property
    def boundaries(self):
        """1-based steps at which a new segment starts (excluding the first)."""
        out, t = [], 0
        for _, s in self.segments[:-1]:
            t += s
            out.append(t + 1)
        return out

    @property
    def domains(self):
        return [spec for spec, _ in self.segments]

    def fingerprint(self):
        return json.dumps([[spec.__dict__, s] for spec, s in self.segments], sort_keys=True, default=list)


@dataclass
class Domain:
    spec: DomainSpec
    class_means: np.ndarray
    noise_std: np.ndarray
    train_classes: np.ndarray
    test_classes: np.ndarray
    informative: np.ndarray = field(default=None)

    def classes(self, split):
        if split == "train":
            return self.train_classes
        if split == "test":
            return self.test_classes
        raise ValueError(f"unknown split {split!r}")


def make_domain(spec, n_way=5):
    rng = np.random.default_rng(spec.seed)
    d = spec.dim
    center = np.asarray(spec.center)
    if spec.informative_dims is None:
        mask = np.ones(d, dtype=bool)
    else:
        if not 0 < spec.informative_dims <= d:
            raise ValueError("informative_dims must be in [1, dim]")
        mask = np.zeros(d, dtype=bool)
        mask[rng.choice(d, spec.informative_dims, replace=False)] = True
    offsets = rng.standard_normal((spec.class_count, d)) * mask
    means = center + spec.class_mean_scale * offsets
    noise = np.full(d, spec.within_class_std)
    if spec.nuisance_std is not None:
        noise[~mask] = spec.nuisance_std
    order = rng.permutation(spec.class_count)
    n_train = int(round(TRAIN_FRACTION * spec.class_count))
    train, test = np.sort(order[:n_train]), np.sort(order[n_train:])
    if len(train) < n_way or len(test) < n_way:
        raise ValueError(
            f"domain {spec.id}: {spec.class_count} classes split {len(train)}/{len(test)}, need {n_way} in each"
        )
    return Domain(spec, means, noise, train, test, np.flatnonzero(mask))


def sample_episode(domain, n_way, k_shot, q_per_class, split, rng):
    pool = domain.classes(split)
    if len(pool) < n_way:
        raise ValueError(f"split {split!r} has {len(pool)} classes, need {n_way}")
    chosen = rng.choice(pool, size=n_way, replace=False)
    d = domain.spec.dim
    per = k_shot + q_per_class
    X = domain.class_means[chosen][:, None, :] + rng.standard_normal((n_way, per, d)) * domain.noise_std
    y = np.repeat(np.arange(n_way), k_shot)
    return Episode(
        support_x=X[:, :k_shot].reshape(-1, d),
        support_y=y,
        query_x=X[:, k_shot:].reshape(-1, d),
        query_y=np.repeat(np.arange(n_way), q_per_class),
        n_way=n_way,
        k_shot=k_shot,
        domain_truth=domain.spec.id,
        classes=tuple(int(c) for c in chosen),
    )


def stream_batches(schedule, n_way, k_shot, q_per_class, rng, tasks_per_step=1, domains=None):
    """Yield ``(step, [episodes], truth_label, boundary)`` for each step."""
    if domains is None:
        domains = [make_domain(spec, n_way) for spec in schedule.domains]
    step = 0
    for seg, ((spec, steps), dom) in enumerate(zip(schedule.segments, domains)):
        for i in range(steps):
            step += 1
            eps = [sample_episode(dom, n_way, k_shot, q_per_class, "train", rng) for _ in range(tasks_per_step)]
            yield step, eps, seg, (i == 0 and seg > 0)


def stream(schedule, n_way, k_shot, q_per_class, rng):
    """Yield ``(step, episode, truth_label, boundary)``; one episode per step."""
    for step, eps, truth, boundary in stream_batches(schedule, n_way, k_shot, q_per_class, rng):
        yield step, eps[0], truth, boundary


def default_schedule(
    scale=0.1,
    steps=FULL_STEPS,
    dim=16,
    separation=6.0,
    within_class_std=1.0,
    class_count=30,
    class_mean_scale=3.0,
    informative_dims=None,
    nuisance_std=None,
    difficulty=None,
    seed=0,
):
    """Imbalanced multi-domain schedule.

    ``steps`` are scaled by ``scale`` (the full six-segment pattern at 1/10
    by default). Consecutive domain centers are ``separation *
    within_class_std`` apart in a random direction. ``difficulty`` optionally
    multiplies each domain's noise levels.
    """
    rng = np.random.default_rng(seed)
    n = len(steps)
    difficulty = np.ones(n) if difficulty is None else np.asarray(difficulty, dtype=float)
    center = np.zeros(dim)
    segments = []
    for i, s in enumerate(steps):
        if i > 0:
            u = rng.standard_normal(dim)
            center = center + separation * within_class_std * u / np.linalg.norm(u)
        spec = DomainSpec(
            id=i,
            class_count=class_count,
            class_mean_scale=class_mean_scale,
            center=tuple(center),
            within_class_std=within_class_std * difficulty[i],
            seed=int(rng.integers(2**31)),
            informative_dims=informative_dims,
            nuisance_std=None if nuisance_std is None else nuisance_std * difficulty[i],
        )
        segments.append((spec, max(1, int(round(s * scale)))))
    return Schedule(segments)


def episode_to_record(step, ep, boundary):
    return {
        "schema_version": SCHEMA_VERSION,
        "step": int(step),
        "n_way": int(ep.n_way),
        "k_shot": int(ep.k_shot),
        "support": [[x.tolist(), int(y)] for x, y in zip(ep.support_x, ep.support_y)],
        "query": [[x.tolist(), int(y)] for x, y in zip(ep.query_x, ep.query_y)],
        "domain_truth": None if ep.domain_truth is None else int(ep.domain_truth),
        "boundary": bool(boundary),
    }


def write_stream(path, items):
    """Write ``(step, episode, truth, boundary)`` items as NDJSON; returns count."""
    n = 0
    with open(path, "w") as fh:
        for step, ep, _, boundary in items:
            fh.write(json.dumps(episode_to_record(step, ep, boundary)) + "\n")
            n += 1
    return n


def _parse_pairs(pairs, what):
    if not isinstance(pairs, list) or not pairs:
        raise ValueError(f"{what} must be a non-empty list of [x, y] pairs")
    xs, ys = [], []
    for pair in pairs:
        x, y = pair
        xs.append([float(v) for v in x])
        ys.append(int(y))
    return np.asarray(xs), np.asarray(ys)


def read_stream(path):
    """Yield ``(step, episode, truth, boundary)`` from an NDJSON stream file."""
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if rec.get("schema_version") != SCHEMA_VERSION:
                    raise ValueError(f"unsupported schema_version {rec.get('schema_version')!r}")
                sx, sy = _parse_pairs(rec["support"], "support")
                qx, qy = _parse_pairs(rec["query"], "query")
                n_way = int(rec.get("n_way", len(set(sy.tolist()))))
                k_shot = int(rec.get("k_shot", len(sy) // n_way))
                ep = Episode(sx, sy, qx, qy, n_way, k_shot, rec.get("domain_truth"))
                yield int(rec["step"]), ep, rec.get("domain_truth"), bool(rec.get("boundary", False))
            except (ValueError, KeyError, TypeError) as exc:
                raise StreamFormatError(line_no, str(exc)) from exc
