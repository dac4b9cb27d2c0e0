"""Online domain-change detection over a stream of episodes.

Each episode is embedded (mean support embedding), smoothed by an EMA and
projected to ``z_t``: distances from the current embedding to the last ``m``
EMA values. Two adjacent windows of ``B`` projections are compared with the
MMD^2 U-statistic and the statistic is tested against an adaptive threshold
``mu_t + delta * sigma_t`` built from exponentially weighted moments.
"""
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import NotReady, RunAbort
from .kernel_stats import KernelConfig, WindowPair, median_heuristic_bandwidth, mmd2_ustat
from .learner import forward_embed

MOMENT_SOURCES = ("squared", "raw")


@dataclass(frozen=True)
class DetectorConfig:
    alpha: float = 0.1
    m: int = 5
    B: int = 100
    rho: float = 0.05
    delta: float = 1.64
    bandwidth: float | None = None  # None: median heuristic at end of burn-in
    moment_source: str = "raw"
    warmup_updates: int = 100
    refractory: int | None = None  # None: 2B

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.B < 2:
            raise ValueError("B must be >= 2")
        if not 0 < self.rho < 1:
            raise ValueError("rho must be in (0, 1)")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if self.moment_source not in MOMENT_SOURCES:
            raise ValueError(f"moment_source must be one of {MOMENT_SOURCES}")
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")

    @property
    def refractory_steps(self):
        return 2 * self.B if self.refractory is None else self.refractory

    @property
    def burn_in_steps(self):
        return 2 * self.B + self.m + 1


@dataclass
class EmaState:
    alpha: float
    m: int
    current: np.ndarray | None = None
    history: deque = None  # history[0] is O_{t-1}

    def __post_init__(self):
        if self.history is None:
            self.history = deque(maxlen=self.m)


@dataclass
class StepTrace:
    step: int
    W: float | None
    threshold: float | None
    flag: bool
    label: int


@dataclass
class DetectorState:
    cfg: DetectorConfig = field(default_factory=DetectorConfig)
    ema: EmaState = None
    projections: deque = None
    mu: float = 0.0
    mu2: float = 0.0
    sigma: float = 0.0
    kernel: KernelConfig | None = None
    burn_in_remaining: int = 0
    refractory_remaining: int = 0
    moment_updates: int = 0
    current_label: int = 0
    t: int = 0
    last: StepTrace | None = None

    def __post_init__(self):
        if self.ema is None:
            self.ema = EmaState(self.cfg.alpha, self.cfg.m)
        if self.projections is None:
            self.projections = deque(maxlen=2 * self.cfg.B)
        if self.kernel is None and self.cfg.bandwidth is not None:
            self.kernel = KernelConfig(self.cfg.bandwidth)
        self.burn_in_remaining = self.cfg.burn_in_steps

    @property
    def threshold(self):
        return self.mu + self.cfg.delta * self.sigma

    @property
    def ready_to_flag(self):
        return (
            self.burn_in_remaining == 0
            and self.refractory_remaining == 0
            and self.moment_updates > self.cfg.warmup_updates
        )


def embed_task(ep, model=None):
    """Mean embedding of the support inputs of one episode (or a batch of them)."""
    eps = ep if isinstance(ep, (list, tuple)) else [ep]
    X = np.vstack([e.support_x for e in eps]) if eps else np.empty((0, 0))
    if X.shape[0] == 0:
        raise ValueError("cannot embed an episode with an empty support set")
    E = X if model is None else forward_embed(model, X)
    return np.atleast_2d(E).mean(0)


def update_and_project(state, o_t):
    """Advance the EMA with ``o_t`` and return ``z_t`` (None until history fills)."""
    o_t = np.asarray(o_t, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(o_t)):
        raise RunAbort(f"non-finite task embedding at step {state.t}")
    ema = state.ema
    if ema.current is None:
        ema.current = o_t.copy()
        return None
    if o_t.shape != ema.current.shape:
        raise ValueError(f"embedding dimension changed: {ema.current.shape} -> {o_t.shape}")
    ema.history.appendleft(ema.current)
    ema.current = ema.alpha * o_t + (1.0 - ema.alpha) * ema.current
    if len(ema.history) < ema.m:
        return None
    return np.array([np.linalg.norm(o_t - past) for past in ema.history])


def detection_statistic(state):
    """MMD^2 between the older and newer halves of the projection buffer."""
    B = state.cfg.B
    if len(state.projections) < 2 * B:
        raise NotReady(f"{len(state.projections)}/{2 * B} projections")
    P = np.asarray(state.projections)
    if state.kernel is None:
        state.kernel = KernelConfig(median_heuristic_bandwidth(P))
    return mmd2_ustat(WindowPair(P[:B], P[B:]), state.kernel)


def odcd_step(state, W):
    """Update the adaptive moments with ``W`` and test it against the threshold."""
    if not np.isfinite(W):
        raise RunAbort(f"non-finite detection statistic at step {state.t}: {W}")
    rho = state.cfg.rho
    x = W * W if state.cfg.moment_source == "squared" else W
    state.mu = (1.0 - rho) * state.mu + rho * x
    state.mu2 = (1.0 - rho) * state.mu2 + rho * x * x
    state.sigma = float(np.sqrt(max(state.mu2 - state.mu**2, 0.0)))
    state.moment_updates += 1
    return state.ready_to_flag and W > state.threshold


def observe(state, o_t):
    """Run one detector step on a precomputed task embedding."""
    state.t += 1
    if state.burn_in_remaining > 0:
        state.burn_in_remaining -= 1
    if state.refractory_remaining > 0:
        state.refractory_remaining -= 1
    z = update_and_project(state, o_t)
    W = threshold = None
    flag = False
    if z is not None:
        state.projections.append(z)
        try:
            W = detection_statistic(state)
        except NotReady:
            W = None
        if W is not None:
            flag = odcd_step(state, W)
            threshold = state.threshold
    if flag:
        state.current_label += 1
        state.refractory_remaining = state.cfg.refractory_steps
        state.projections.clear()
    state.last = StepTrace(state.t, W, threshold, flag, state.current_label)
    return flag, state.current_label


def step(state, ep, model=None):
    """Embed ``ep`` (an episode or a batch) and advance the detector: ``(changed, label)``."""
    return observe(state, embed_task(ep, model))


def detect_stream(embeddings, cfg=None):
    """Run the detector over a sequence of task embeddings; returns the traces."""
    state = DetectorState(cfg or DetectorConfig())
    out = []
    for o in embeddings:
        observe(state, o)
        out.append(state.last)
    return out
