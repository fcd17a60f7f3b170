"""Numba-compiled twins of the kernels in `numpy_impl`.

All kernels are single-threaded loop nests compiled with fastmath off, so
results are deterministic and agree with the numpy path to roundoff.
Compilation is cached on disk; the first call in a fresh environment pays
the JIT cost once.
"""

import numpy as np
from numba import njit

from .numpy_impl import GELU_A, GELU_C, LN_EPS


@njit(cache=True)
def layernorm_fwd(x, gain, bias):
    n, d = x.shape
    y = np.empty_like(x)
    mean = np.empty(n, dtype=x.dtype)
    rstd = np.empty(n, dtype=x.dtype)
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += x[i, j]
        mu = s / d
        q = 0.0
        for j in range(d):
            c = x[i, j] - mu
            q += c * c
        r = 1.0 / np.sqrt(q / d + LN_EPS)
        mean[i] = mu
        rstd[i] = r
        for j in range(d):
            y[i, j] = (x[i, j] - mu) * r * gain[j] + bias[j]
    return y, mean, rstd


@njit(cache=True)
def layernorm_bwd(dy, x, gain, mean, rstd):
    n, d = x.shape
    dx = np.empty_like(x)
    dgain = np.zeros(d, dtype=x.dtype)
    dbias = np.zeros(d, dtype=x.dtype)
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            xhat = (x[i, j] - mean[i]) * rstd[i]
            dxh = dy[i, j] * gain[j]
            dgain[j] += dy[i, j] * xhat
            dbias[j] += dy[i, j]
            m1 += dxh
            m2 += dxh * xhat
        m1 /= d
        m2 /= d
        for j in range(d):
            xhat = (x[i, j] - mean[i]) * rstd[i]
            dxh = dy[i, j] * gain[j]
            dx[i, j] = (dxh - m1 - xhat * m2) * rstd[i]
    return dx, dgain, dbias


@njit(cache=True)
def gelu_fwd(x):
    n, d = x.shape
    y = np.empty_like(x)
    for i in range(n):
        for j in range(d):
            v = x[i, j]
            inner = GELU_C * (v + GELU_A * v * v * v)
            y[i, j] = 0.5 * v * (1.0 + np.tanh(inner))
    return y


@njit(cache=True)
def gelu_bwd(x, dy):
    n, d = x.shape
    dx = np.empty_like(x)
    for i in range(n):
        for j in range(d):
            v = x[i, j]
            inner = GELU_C * (v + GELU_A * v * v * v)
            t = np.tanh(inner)
            dinner = GELU_C * (1.0 + 3.0 * GELU_A * v * v)
            dx[i, j] = dy[i, j] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner)
    return dx


@njit(cache=True)
def causal_softmax(scores):
    H, L, _ = scores.shape
    p = np.zeros_like(scores)
    for h in range(H):
        for i in range(L):
            m = scores[h, i, 0]
            for j in range(1, i + 1):
                if scores[h, i, j] > m:
                    m = scores[h, i, j]
            z = 0.0
            for j in range(i + 1):
                e = np.exp(scores[h, i, j] - m)
                p[h, i, j] = e
                z += e
            for j in range(i + 1):
                p[h, i, j] /= z
    return p


@njit(cache=True)
def causal_softmax_bwd(probs, dprobs):
    H, L, _ = probs.shape
    ds = np.zeros_like(probs)
    for h in range(H):
        for i in range(L):
            inner = 0.0
            for j in range(i + 1):
                inner += probs[h, i, j] * dprobs[h, i, j]
            for j in range(i + 1):
                ds[h, i, j] = probs[h, i, j] * (dprobs[h, i, j] - inner)
    return ds


@njit(cache=True)
def softmax_rows(z):
    n, v = z.shape
    p = np.empty_like(z)
    for i in range(n):
        m = z[i, 0]
        for j in range(1, v):
            if z[i, j] > m:
                m = z[i, j]
        s = 0.0
        for j in range(v):
            e = np.exp(z[i, j] - m)
            p[i, j] = e
            s += e
        for j in range(v):
            p[i, j] /= s
    return p


@njit(cache=True)
def ntp_terms(logits, targets):
    n, v = logits.shape
    nll = np.empty(n, dtype=logits.dtype)
    dlogits = np.empty_like(logits)
    for i in range(n):
        m = logits[i, 0]
        for j in range(1, v):
            if logits[i, j] > m:
                m = logits[i, j]
        z = 0.0
        for j in range(v):
            e = np.exp(logits[i, j] - m)
            dlogits[i, j] = e
            z += e
        nll[i] = np.log(z) + m - logits[i, targets[i]]
        for j in range(v):
            dlogits[i, j] /= z
        dlogits[i, targets[i]] -= 1.0
    return nll, dlogits


@njit(cache=True)
def concept_losses(logits, rows, originals, syn_flat, syn_offsets,
                   threshold, include_original):
    n = len(rows)
    losses = np.zeros(n, dtype=logits.dtype)
    gated = np.zeros(n, dtype=np.bool_)
    masses = np.zeros(n, dtype=logits.dtype)
    v = logits.shape[1]
    for a in range(n):
        r = rows[a]
        m = logits[r, 0]
        for j in range(1, v):
            if logits[r, j] > m:
                m = logits[r, j]
        z = 0.0
        for j in range(v):
            z += np.exp(logits[r, j] - m)
        s = 0.0
        for t in range(syn_offsets[a], syn_offsets[a + 1]):
            s += np.exp(logits[r, syn_flat[t]] - m)
        if include_original:
            s += np.exp(logits[r, originals[a]] - m)
        mass = s / z
        masses[a] = mass
        if mass > threshold:
            gated[a] = True
        else:
            losses[a] = np.log(z) - np.log(s)
    return losses, gated, masses


@njit(cache=True)
def concept_dlogits(logits, rows, originals, syn_flat, syn_offsets,
                    active, include_original, scale, dlogits):
    n = len(rows)
    v = logits.shape[1]
    for a in range(n):
        if not active[a]:
            continue
        r = rows[a]
        m = logits[r, 0]
        for j in range(1, v):
            if logits[r, j] > m:
                m = logits[r, j]
        z = 0.0
        for j in range(v):
            z += np.exp(logits[r, j] - m)
        s = 0.0
        for t in range(syn_offsets[a], syn_offsets[a + 1]):
            s += np.exp(logits[r, syn_flat[t]] - m)
        if include_original:
            s += np.exp(logits[r, originals[a]] - m)
        for j in range(v):
            dlogits[r, j] += scale * np.exp(logits[r, j] - m) / z
        for t in range(syn_offsets[a], syn_offsets[a + 1]):
            j = syn_flat[t]
            dlogits[r, j] -= scale * np.exp(logits[r, j] - m) / s
        if include_original:
            j = originals[a]
            dlogits[r, j] -= scale * np.exp(logits[r, j] - m) / s
    return dlogits


@njit(cache=True)
def embedding_grad(d_emb, ids, dx):
    n, d = dx.shape
    for i in range(n):
        row = ids[i]
        for j in range(d):
            d_emb[row, j] += dx[i, j]
    return d_emb


@njit(cache=True)
def adam_step(param, grad, m, v, lr, beta1, beta2, eps, bc1, bc2):
    n = param.shape[0]
    for i in range(n):
        g = grad[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * g
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
        param[i] -= lr * (m[i] / bc1) / (np.sqrt(v[i] / bc2) + eps)


@njit(cache=True)
def bootstrap_means(values, idx):
    R, n = idx.shape
    means = np.empty(R, dtype=values.dtype)
    for r in range(R):
        s = 0.0
        for i in range(n):
            s += values[idx[r, i]]
        means[r] = s / n
    return means
