"""Episodic prototype learner with analytic gradients.

A small embedding network (linear, or one tanh hidden layer) feeds a
prototypical-network head: class prototypes are support-embedding means and
queries are scored by negative squared Euclidean distance.
"""
import json
from dataclasses import dataclass, field

import numpy as np

from ._backend import kernels as _k
from .errors import RunAbort

CHECKPOINT_VERSION = 1


@dataclass
class Episode:
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    n_way: int
    k_shot: int
    domain_truth: int | None = None
    classes: tuple = ()  # generator class ids, harness-only (leakage checks)

    def __post_init__(self):
        self.support_x = np.atleast_2d(np.asarray(self.support_x, dtype=np.float64))
        self.query_x = np.atleast_2d(np.asarray(self.query_x, dtype=np.float64))
        self.support_y = np.asarray(self.support_y, dtype=np.int64).reshape(-1)
        self.query_y = np.asarray(self.query_y, dtype=np.int64).reshape(-1)

    def validate(self):
        if len(self.support_y) == 0:
            raise ValueError("episode has an empty support set")
        if len(self.query_y) == 0:
            raise ValueError("episode has an empty query set")
        if self.support_x.shape[0] != len(self.support_y) or self.query_x.shape[0] != len(self.query_y):
            raise ValueError("feature/label count mismatch")
        counts = np.bincount(self.support_y, minlength=self.n_way)
        if len(counts) != self.n_way or np.any(counts != self.k_shot):
            raise ValueError(f"support must hold exactly {self.k_shot} examples of each of {self.n_way} classes")
        if not set(self.query_y.tolist()) <= set(self.support_y.tolist()):
            raise ValueError("query labels must appear in the support set")
        return self


def _layout(kind, d, e, hidden):
    if kind == "linear":
        return [("W", (e, d)), ("b", (e,))]
    if kind == "mlp":
        return [("W1", (hidden, d)), ("b1", (hidden,)), ("W2", (e, hidden)), ("b2", (e,))]
    raise ValueError(f"unknown model kind {kind!r}")


@dataclass
class Model:
    """Embedding network ``R^d -> R^e`` with parameters in one flat vector."""

    kind: str
    d: int
    e: int
    hidden: int = 0
    theta: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self._layout = _layout(self.kind, self.d, self.e, self.hidden)
        size = sum(int(np.prod(s)) for _, s in self._layout)
        if self.theta is None:
            self.theta = np.zeros(size)
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(-1)
        if self.theta.size != size:
            raise ValueError(f"expected {size} parameters, got {self.theta.size}")

    @classmethod
    def init(cls, kind, d, e, hidden=0, rng=None, scale=0.1):
        m = cls(kind, d, e, hidden)
        rng = np.random.default_rng(rng)
        m.theta = rng.uniform(-scale, scale, size=m.theta.size)
        return m

    @classmethod
    def identity(cls, d):
        m = cls("linear", d, d)
        m.params()["W"][...] = np.eye(d)
        return m

    @property
    def n_params(self):
        return self.theta.size

    def params(self, theta=None):
        """Named views into ``theta`` (writes go through)."""
        theta = self.theta if theta is None else theta
        out, i = {}, 0
        for name, shape in self._layout:
            n = int(np.prod(shape))
            out[name] = theta[i:i + n].reshape(shape)
            i += n
        return out

    def with_theta(self, theta):
        return Model(self.kind, self.d, self.e, self.hidden, np.array(theta, dtype=np.float64))

    def copy(self):
        return self.with_theta(self.theta)

    def is_finite(self):
        return bool(np.all(np.isfinite(self.theta)))

    def to_json(self):
        return json.dumps({
            "schema_version": CHECKPOINT_VERSION,
            "kind": self.kind, "d": self.d, "e": self.e, "hidden": self.hidden,
            "theta": self.theta.tolist(),
        })

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        if obj.get("schema_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {obj.get('schema_version')!r}")
        return cls(obj["kind"], obj["d"], obj["e"], obj["hidden"], np.asarray(obj["theta"]))


def _forward(model, X):
    p = model.params()
    if model.kind == "linear":
        return X @ p["W"].T + p["b"], None
    H = np.tanh(X @ p["W1"].T + p["b1"])
    return H @ p["W2"].T + p["b2"], H


def _backward(model, X, H, dE):
    grad = np.zeros_like(model.theta)
    g = model.params(grad)
    if model.kind == "linear":
        g["W"][...] = dE.T @ X
        g["b"][...] = dE.sum(0)
        return grad
    g["W2"][...] = dE.T @ H
    g["b2"][...] = dE.sum(0)
    dA = (dE @ model.params()["W2"]) * (1.0 - H * H)
    g["W1"][...] = dA.T @ X
    g["b1"][...] = dA.sum(0)
    return grad


def forward_embed(model, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != model.d:
        raise ValueError(f"expected inputs of dimension {model.d}, got {X.shape[1]}")
    E, _ = _forward(model, X)
    return E[0] if single else E


def _head(model, ep):
    if ep.query_x.shape[0] == 0:
        raise ValueError("episode has an empty query set")
    if ep.support_x.shape[0] == 0:
        raise ValueError("episode has an empty support set")
    X = np.vstack([ep.support_x, ep.query_x])
    if X.shape[1] != model.d:
        raise ValueError(f"expected inputs of dimension {model.d}, got {X.shape[1]}")
    E, H = _forward(model, X)
    ns = ep.support_x.shape[0]
    loss, dS, dQ, proxy = _k.pnet_head(E[:ns], ep.support_y, E[ns:], ep.query_y, ep.n_way)
    return X, H, loss, dS, dQ, proxy


def episode_loss(model, ep):
    """Mean query cross-entropy of the prototype classifier."""
    return _head(model, ep)[2]


def episode_gradient(model, ep):
    """Return ``(flat gradient over theta, last-layer proxy norm)``.

    The proxy is the norm of the loss gradient w.r.t. the network outputs
    (the last layer's pre-activations), taken per query and averaged.
    """
    X, H, _, dS, dQ, proxy = _head(model, ep)
    grad = _backward(model, X, H, np.vstack([dS, dQ]))
    return grad, float(proxy.mean())


def loss_and_gradient(model, ep):
    X, H, loss, dS, dQ, proxy = _head(model, ep)
    return loss, _backward(model, X, H, np.vstack([dS, dQ])), float(proxy.mean())


def task_importance(model, ep):
    """Last-layer gradient-norm importance of an episode."""
    return float(_head(model, ep)[5].mean())


def predict(model, ep):
    S = forward_embed(model, ep.support_x)
    Q = forward_embed(model, ep.query_x)
    return _k.pnet_predict(S, ep.support_y, Q, ep.n_way)


def episode_accuracy(model, ep):
    return float(np.mean(predict(model, ep) == ep.query_y))


def evaluate(model, episodes):
    """Per-episode query accuracy averaged over episodes: ``(mean, stderr)``."""
    if len(episodes) == 0:
        raise ValueError("evaluate needs at least one episode")
    acc = np.array([episode_accuracy(model, ep) for ep in episodes])
    stderr = float(acc.std(ddof=1) / np.sqrt(len(acc))) if len(acc) > 1 else 0.0
    return float(acc.mean()), stderr


def sgd_step(model, grad, lr):
    if not np.all(np.isfinite(grad)):
        raise RunAbort("non-finite gradient")
    return model.with_theta(model.theta - lr * grad)
