"""Pure NumPy implementations of the hot kernels.

Used when the compiled ``_kernels`` extension is unavailable, or when
``IMBAMETA_BACKEND=python`` is set. Signatures match the extension exactly.
"""
import numpy as np


def mmd2_ustat(U, V, sigma):
    U = np.ascontiguousarray(U, dtype=np.float64)
    V = np.ascontiguousarray(V, dtype=np.float64)
    B = U.shape[0]
    gamma = 1.0 / (2.0 * sigma * sigma)

    def gram(A, C):
        sq = (A * A).sum(1)[:, None] + (C * C).sum(1)[None, :] - 2.0 * A @ C.T
        np.maximum(sq, 0.0, out=sq)
        return np.exp(-gamma * sq)

    Kuu = gram(U, U)
    Kvv = gram(V, V)
    Kuv = gram(U, V)
    # diagonal of a self-gram is exactly 1 but the expansion above can drift
    off_uu = Kuu.sum() - np.trace(Kuu)
    off_vv = Kvv.sum() - np.trace(Kvv)
    off_uv = Kuv.sum() - np.trace(Kuv)
    return float((off_uu + off_vv - 2.0 * off_uv) / (B * (B - 1)))


def pnet_head(S, ys, Q, yq, n_way):
    """Prototype head: loss, embedding gradients and per-query proxy norms.

    Returns ``(loss, dS, dQ, proxy)`` where ``loss`` is the mean query
    cross-entropy, ``dS``/``dQ`` its gradients w.r.t. the support/query
    embeddings, and ``proxy[j]`` the norm of the gradient of query ``j``'s
    own loss w.r.t. all embeddings.
    """
    S = np.asarray(S, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.int64)
    yq = np.asarray(yq, dtype=np.int64)
    nq = Q.shape[0]

    onehot_s = np.zeros((S.shape[0], n_way))
    onehot_s[np.arange(S.shape[0]), ys] = 1.0
    counts = onehot_s.sum(0)
    protos = (onehot_s.T @ S) / counts[:, None]

    diff = Q[:, None, :] - protos[None, :, :]  # (nq, n_way, e)
    dist = (diff * diff).sum(-1)
    logits = -dist
    logits = logits - logits.max(1, keepdims=True)
    expl = np.exp(logits)
    z = expl.sum(1, keepdims=True)
    p = expl / z
    loss_q = -(logits[np.arange(nq), yq] - np.log(z[:, 0]))

    a = p.copy()
    a[np.arange(nq), yq] -= 1.0  # d loss_j / d logit_jk

    gq = 2.0 * (a @ protos)  # per-query, w.r.t. its own embedding
    gc = 2.0 * a[:, :, None] * diff  # per-query, w.r.t. each prototype
    proxy = np.sqrt((gq * gq).sum(1) + ((gc * gc).sum(-1) / counts[None, :]).sum(1))

    dQ = gq / nq
    dC = gc.sum(0) / nq
    dS = (dC / counts[:, None])[ys]
    return float(loss_q.mean()), dS, dQ, proxy


def pnet_predict(S, ys, Q, n_way):
    S = np.asarray(S, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.int64)
    protos = np.zeros((n_way, S.shape[1]))
    np.add.at(protos, ys, S)
    protos /= np.bincount(ys, minlength=n_way)[:, None]
    dist = ((Q[:, None, :] - protos[None, :, :]) ** 2).sum(-1)
    return dist.argmin(1)
