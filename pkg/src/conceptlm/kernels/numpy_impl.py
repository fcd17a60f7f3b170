"""Vectorized numpy implementations of the hot kernels.

This is the fallback path used when numba is unavailable or when
CONCEPTLM_BACKEND=numpy. Every function here has a loop-level twin in
`numba_impl`; the two must agree to floating-point roundoff (same math,
different summation order).
"""

import numpy as np

LN_EPS = 1e-5
GELU_C = 0.7978845608028654  # sqrt(2/pi)
GELU_A = 0.044715


def layernorm_fwd(x, gain, bias):
    """Row-wise layer norm. Returns (y, mean, rstd) with mean/rstd per row."""
    mean = x.mean(axis=-1)
    xc = x - mean[:, None]
    var = (xc * xc).mean(axis=-1)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    y = xc * rstd[:, None] * gain + bias
    return y, mean, rstd


def layernorm_bwd(dy, x, gain, mean, rstd):
    xhat = (x - mean[:, None]) * rstd[:, None]
    dxhat = dy * gain
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    m1 = dxhat.mean(axis=-1)
    m2 = (dxhat * xhat).mean(axis=-1)
    dx = (dxhat - m1[:, None] - xhat * m2[:, None]) * rstd[:, None]
    return dx, dgain, dbias


def gelu_fwd(x):
    inner = GELU_C * (x + GELU_A * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_bwd(x, dy):
    inner = GELU_C * (x + GELU_A * x * x * x)
    t = np.tanh(inner)
    dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def causal_softmax(scores):
    """Softmax over keys j <= i for [H, L, L] scores; zeros above the diagonal."""
    L = scores.shape[-1]
    mask = np.tril(np.ones((L, L), dtype=bool))
    masked = np.where(mask, scores, -np.inf)
    m = masked.max(axis=-1, keepdims=True)
    e = np.exp(masked - m)
    return e / e.sum(axis=-1, keepdims=True)


def causal_softmax_bwd(probs, dprobs):
    inner = (probs * dprobs).sum(axis=-1, keepdims=True)
    return probs * (dprobs - inner)


def softmax_rows(z):
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=-1, keepdims=True)


def ntp_terms(logits, targets):
    """Per-row NLL of targets plus the unscaled gradient (softmax - onehot)."""
    n = logits.shape[0]
    m = logits.max(axis=-1)
    e = np.exp(logits - m[:, None])
    z = e.sum(axis=-1)
    nll = np.log(z) + m - logits[np.arange(n), targets]
    dlogits = e / z[:, None]
    dlogits[np.arange(n), targets] -= 1.0
    return nll, dlogits


def concept_losses(logits, rows, originals, syn_flat, syn_offsets,
                   threshold, include_original):
    """Set-mass losses for one sequence's annotations.

    rows[a] is the logit row scored by annotation a; its synonym ids live in
    syn_flat[syn_offsets[a]:syn_offsets[a + 1]]. Returns per-annotation
    (loss, gated, mass) with loss = 0 where mass > threshold.
    """
    n = len(rows)
    losses = np.zeros(n, dtype=logits.dtype)
    gated = np.zeros(n, dtype=np.bool_)
    masses = np.zeros(n, dtype=logits.dtype)
    for a in range(n):
        row = logits[rows[a]]
        m = row.max()
        e = np.exp(row - m)
        z = e.sum()
        s = e[syn_flat[syn_offsets[a]:syn_offsets[a + 1]]].sum()
        if include_original:
            s += e[originals[a]]
        mass = s / z
        masses[a] = mass
        if mass > threshold:
            gated[a] = True
        else:
            losses[a] = np.log(z) - np.log(s)
    return losses, gated, masses


def concept_dlogits(logits, rows, originals, syn_flat, syn_offsets,
                    active, include_original, scale, dlogits):
    """Accumulate scale * d(-log mass)/dlogits for each active annotation."""
    for a in range(len(rows)):
        if not active[a]:
            continue
        row = logits[rows[a]]
        m = row.max()
        e = np.exp(row - m)
        z = e.sum()
        ids = syn_flat[syn_offsets[a]:syn_offsets[a + 1]]
        s = e[ids].sum()
        if include_original:
            s += e[originals[a]]
        dlogits[rows[a]] += scale * (e / z)
        dlogits[rows[a], ids] -= scale * (e[ids] / s)
        if include_original:
            dlogits[rows[a], originals[a]] -= scale * (e[originals[a]] / s)
    return dlogits


def embedding_grad(d_emb, ids, dx):
    np.add.at(d_emb, ids, dx)
    return d_emb


def adam_step(param, grad, m, v, lr, beta1, beta2, eps, bc1, bc2):
    """In-place Adam update; bc1/bc2 are the bias corrections 1 - beta^t."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    param -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def bootstrap_means(values, idx):
    """means[r] = mean(values[idx[r]]) for an [R, n] index matrix."""
    return values[idx].mean(axis=1)
