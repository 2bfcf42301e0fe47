"""Pure-numpy flow kernels (fallback backend).

Both backends share one flat parameter layout.  For each of ``K`` residual
blocks and each sub-layer ``m = 0 .. l-1`` the vector holds the weight
matrix ``V_m`` (row-major) followed by its bias ``c_m``.  ``V_0`` is
``h x n``, hidden ``V_m`` are ``h x h`` and ``V_{l-1}`` is ``n x h``; the
block computes ``g(z) = c_{l-1} + V_{l-1} tanh(... tanh(c_0 + V_0 z))`` and
the layer output is ``z + g(z)``.  A fixed affine layer
``z_0 = (x - shift) / scale`` precedes the blocks.
"""
from __future__ import annotations

import numpy as np

BASE_NORMAL = 0
BASE_LOGISTIC = 1
_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def layer_shapes(n: int, h: int, l: int) -> list[tuple[int, int]]:
    shapes = []
    for m in range(l):
        rows = n if m == l - 1 else h
        cols = n if m == 0 else h
        shapes.append((rows, cols))
    return shapes


def block_size(n: int, h: int, l: int) -> int:
    return sum(r * c + r for r, c in layer_shapes(n, h, l))


def unpack(theta, n, h, l, K):
    """Views ``[(V_m, c_m) for m] for each block`` into ``theta``."""
    shapes = layer_shapes(n, h, l)
    blocks = []
    off = 0
    for _ in range(K):
        layers = []
        for rows, cols in shapes:
            V = theta[off:off + rows * cols].reshape(rows, cols)
            off += rows * cols
            c = theta[off:off + rows]
            off += rows
            layers.append((V, c))
        blocks.append(layers)
    return blocks


def _base_logpdf_score(y, base_kind):
    if base_kind == BASE_NORMAL:
        return (-0.5 * y * y - _LOG_SQRT_2PI).sum(axis=1), -y
    ay = np.abs(y)
    return (-ay - 2.0 * np.log1p(np.exp(-ay))).sum(axis=1), -np.tanh(0.5 * y)


def _block_forward(layers, z, want_cache):
    """Returns ``g(z)``, ``J_g`` and (optionally) the cache for backprop."""
    l = len(layers)
    inp = z
    acts = []
    for m, (V, c) in enumerate(layers):
        a = inp @ V.T + c
        if m < l - 1:
            u = np.tanh(a)
            d = 1.0 - u * u
            acts.append((inp, u, d))
            inp = u
        else:
            acts.append((inp, None, None))
            out = a
    # forward-mode Jacobian: T_0 = V_0, T_m = V_m diag(d_{m-1}) T_{m-1}
    Ts = [None]
    T = layers[0][0][None]
    for m in range(1, l):
        E = acts[m - 1][2][:, :, None] * T
        T = np.einsum("rc,bcj->brj", layers[m][0], E)
        Ts.append(T)
    Jg = T if l > 1 else np.broadcast_to(layers[0][0], (len(z),) + layers[0][0].shape)
    cache = (acts, Ts) if want_cache else None
    return out, Jg, cache


def forward(theta, shift, scale, X, n, h, l, K, want_jac=True):
    """Push ``X`` through the flow.

    Returns ``(Y, logdet, P)`` where ``P`` is the full ``(B, n, n)``
    Jacobian (``None`` unless ``want_jac``).  ``logdet`` sums the per-block
    log-determinants plus the affine term.
    """
    X = np.asarray(X, dtype=np.float64)
    B = X.shape[0]
    z = (X - shift) / scale
    logdet = np.full(B, -np.log(scale).sum())
    P = np.broadcast_to(np.diag(1.0 / scale), (B, n, n)).copy() if want_jac else None
    eye = np.eye(n)
    for layers in unpack(theta, n, h, l, K):
        out, Jg, _ = _block_forward(layers, z, False)
        Jk = eye + Jg
        logdet += np.linalg.slogdet(Jk)[1]
        if want_jac:
            P = Jk @ P
        z = z + out
    return z, logdet, P


def objective_terms(Y, logdet, P, lam, base_kind):
    """Per-point log-likelihood, IMA penalty and regularised objective."""
    logp, _ = _base_logpdf_score(Y, base_kind)
    ll = logp + logdet
    M = np.linalg.inv(P)
    pen = np.log(np.linalg.norm(M, axis=1)).sum(axis=1) + logdet
    return ll - lam * pen, ll, pen


def objective_grad(theta, shift, scale, X, n, h, l, K, lam, base_kind):
    """Batch-mean objective ``ll - lam * pen`` and its gradient in ``theta``.

    ``pen`` is the local IMA contrast of the inverse flow at ``y = g(x)``,
    i.e. ``sum_i log||col_i(J^{-1})|| + log|det J|``.
    """
    X = np.asarray(X, dtype=np.float64)
    B = X.shape[0]
    blocks = unpack(theta, n, h, l, K)
    eye = np.eye(n)

    z = (X - shift) / scale
    logdet = np.full(B, -np.log(scale).sum())
    P = np.broadcast_to(np.diag(1.0 / scale), (B, n, n)).copy()
    zs, Ps, Js, caches = [], [], [], []
    for layers in blocks:
        out, Jg, cache = _block_forward(layers, z, True)
        Jk = eye + Jg
        logdet += np.linalg.slogdet(Jk)[1]
        zs.append(z)
        Ps.append(P)
        Js.append(Jk)
        caches.append(cache)
        P = Jk @ P
        z = z + out

    logp, score = _base_logpdf_score(z, base_kind)
    ll = logp + logdet
    M = np.linalg.inv(P)
    cn2 = np.einsum("bij,bij->bj", M, M)
    pen = 0.5 * np.log(cn2).sum(axis=1) + logdet
    obj = ll - lam * pen

    Mt = np.swapaxes(M, 1, 2)
    GM = M / cn2[:, None, :]
    GP = (1.0 - lam) * Mt + lam * Mt @ GM @ Mt
    Gz = score
    grads = np.zeros_like(theta)
    gblocks = unpack(grads, n, h, l, K)
    for k in range(K - 1, -1, -1):
        GJ = GP @ np.swapaxes(Ps[k], 1, 2)
        GP = np.swapaxes(Js[k], 1, 2) @ GP
        gz = _block_backward(blocks[k], gblocks[k], caches[k], zs[k], Gz, GJ)
        Gz = Gz + gz
    grads /= B
    return float(obj.mean()), float(ll.mean()), float(pen.mean()), grads


def _block_backward(layers, glayers, cache, z, Gout, GJ):
    """Accumulate parameter gradients of one block, return d/dz."""
    acts, Ts = cache
    l = len(layers)
    ga = Gout
    Badj = GJ
    for m in range(l - 1, -1, -1):
        V, _ = layers[m]
        gV, gc = glayers[m]
        inp = acts[m][0]
        gV += ga.T @ inp
        gc += ga.sum(axis=0)
        if m >= 1:
            d_prev = acts[m - 1][2]
            u_prev = acts[m - 1][1]
            T_prev = layers[0][0][None] if m - 1 == 0 else Ts[m - 1]
            E = d_prev[:, :, None] * T_prev
            gV += np.einsum("brj,bcj->rc", Badj, E)
            Bp = np.einsum("rc,brj->bcj", V, Badj)
            gd = (Bp * T_prev).sum(axis=2)
            Badj = d_prev[:, :, None] * Bp
            gu = ga @ V
            ga = gu * d_prev + gd * (-2.0 * u_prev * d_prev)
        else:
            gV += Badj.sum(axis=0)
            return ga @ V


def spectral_normalize(theta, sn_vectors, n, h, l, K, coeff, power_iters):
    """Warm-started power iteration per weight matrix; divide when above coeff.

    ``sn_vectors`` stores one right-singular-vector estimate per matrix
    (``cols`` entries, same block/sub-layer order as ``theta``) and is
    updated in place.  Returns the estimated norms, shape ``(K, l)``.
    """
    shapes = layer_shapes(n, h, l)
    blocks = unpack(theta, n, h, l, K)
    stride = sum(c for _, c in shapes)
    vecs = sn_vectors.reshape(K, stride)
    sigmas = np.zeros((K, l))
    col_off = 0
    for m, (rows, cols) in enumerate(shapes):
        W = np.stack([blocks[k][m][0] for k in range(K)])
        v = vecs[:, col_off:col_off + cols]
        v = v / np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-300)
        for _ in range(power_iters):
            u = np.einsum("krc,kc->kr", W, v)
            u /= np.maximum(np.linalg.norm(u, axis=1, keepdims=True), 1e-300)
            v = np.einsum("krc,kr->kc", W, u)
            v /= np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-300)
        sigma = np.linalg.norm(np.einsum("krc,kc->kr", W, v), axis=1)
        vecs[:, col_off:col_off + cols] = v
        sigmas[:, m] = sigma
        for k in range(K):
            if sigma[k] > coeff:
                blocks[k][m][0][...] *= coeff / sigma[k]
        col_off += cols
    return sigmas
