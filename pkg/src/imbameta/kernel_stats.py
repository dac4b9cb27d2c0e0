"""RBF kernel and MMD^2 U-statistic primitives."""
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

from ._backend import kernels as _k

DEFAULT_BANDWIDTH_FLOOR = 1e-6
MAX_MEDIAN_SAMPLES = 1000


@dataclass(frozen=True)
class KernelConfig:
    bandwidth: float

    def __post_init__(self):
        if not np.isfinite(self.bandwidth) or self.bandwidth <= 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")


@dataclass(frozen=True)
class WindowPair:
    """Reference window ``U^B`` and test window ``V^B`` of equal length."""

    reference: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        ref = np.atleast_2d(np.asarray(self.reference, dtype=np.float64))
        tst = np.atleast_2d(np.asarray(self.test, dtype=np.float64))
        if ref.shape != tst.shape:
            raise ValueError(f"window shapes differ: {ref.shape} vs {tst.shape}")
        if ref.shape[0] < 2:
            raise ValueError("windows need at least 2 vectors each")
        object.__setattr__(self, "reference", ref)
        object.__setattr__(self, "test", tst)

    @property
    def size(self):
        return self.reference.shape[0]


def _vec(x):
    return np.atleast_1d(np.asarray(x, dtype=np.float64))


def _check_dims(*vs):
    dims = {v.shape for v in vs}
    if len(dims) != 1:
        raise ValueError(f"dimension mismatch: {sorted(dims)}")


def rbf_kernel(x, y, cfg):
    x, y = _vec(x), _vec(y)
    _check_dims(x, y)
    d = x - y
    return float(np.exp(-(d @ d) / (2.0 * cfg.bandwidth**2)))


def h_term(u_i, u_j, v_i, v_j, cfg):
    u_i, u_j, v_i, v_j = map(_vec, (u_i, u_j, v_i, v_j))
    _check_dims(u_i, u_j, v_i, v_j)
    return (
        rbf_kernel(u_i, u_j, cfg)
        + rbf_kernel(v_i, v_j, cfg)
        - rbf_kernel(u_i, v_j, cfg)
        - rbf_kernel(u_j, v_i, cfg)
    )


def mmd2_ustat(w, cfg):
    """Unbiased MMD^2 over paired windows (may be slightly negative)."""
    return _k.mmd2_ustat(w.reference, w.test, cfg.bandwidth)


def median_heuristic_bandwidth(samples, floor=DEFAULT_BANDWIDTH_FLOOR, max_samples=MAX_MEDIAN_SAMPLES, seed=0):
    """Median pairwise Euclidean distance of ``samples``.

    Sets larger than ``max_samples`` are subsampled (seeded) before taking
    pairwise distances. Returns ``floor`` if every sample is identical.
    """
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] < 2:
        raise ValueError("median heuristic needs at least 2 samples")
    if X.shape[0] > max_samples:
        idx = np.random.default_rng(seed).choice(X.shape[0], max_samples, replace=False)
        X = X[idx]
    med = float(np.median(pdist(X)))
    return med if med > 0 else floor
