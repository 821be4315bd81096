"""Dense numeric kernels shared by the model, codec and training code.

Everything here operates on numpy arrays with arbitrary leading batch
dimensions; the last axis is the feature axis.  Functions come in
forward/backward pairs where the training code needs them.  The backward
helpers take the cache returned by the forward call.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special

MASK_FILL = -1e9
LN_EPS = 1e-5

_SQRT2 = math.sqrt(2.0)
_TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)


class ContractViolation(ValueError):
    """Raised when a kernel precondition that callers guarantee is broken."""


def erf(x):
    """Error function, elementwise."""
    return special.erf(x)


def erf_grad(x):
    return _TWO_OVER_SQRT_PI * np.exp(-np.square(x))


def sigmoid(x):
    """Logistic function, stable for large |x|."""
    return special.expit(x)


def as_float(x):
    """Array view keeping float32/float64; anything else becomes float64."""
    x = np.asarray(x)
    if x.dtype in (np.float32, np.float64):
        return x
    return x.astype(np.float64)


def gelu(x):
    x = as_float(x)
    out = special.erf(x / _SQRT2)
    out += 1.0
    out *= x
    out *= 0.5
    return out


def gelu_grad(x):
    cdf = 0.5 * (1.0 + special.erf(x / _SQRT2))
    pdf = np.exp(-0.5 * np.square(x)) / math.sqrt(2.0 * math.pi)
    return cdf + x * pdf


def linear(x, weight, bias=None):
    y = x @ weight
    if bias is not None:
        y = y + bias
    return y


def linear_backward(dy, x, weight):
    """Gradients of ``x @ weight + bias`` with respect to x, weight, bias."""
    d_in, d_out = weight.shape
    dx = dy @ weight.T
    dw = x.reshape(-1, d_in).T @ dy.reshape(-1, d_out)
    db = dy.reshape(-1, d_out).sum(axis=0)
    return dx, dw, db


# ----------------------------------------------------------------------------
# layer normalization


def layer_norm(x, gain, bias, eps=LN_EPS, return_cache=False):
    """Normalize over the last axis, then apply ``gain * xhat + bias``."""
    d = x.shape[-1]
    xc = x - np.add.reduce(x, axis=-1, keepdims=True) / d
    var = np.add.reduce(xc * xc, axis=-1, keepdims=True) / d
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain + bias
    if return_cache:
        return y, (xhat, inv, gain)
    return y


def layer_norm_backward(dy, cache):
    xhat, inv, gain = cache
    d = xhat.shape[-1]
    dgain = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    dbias = np.sum(dy, axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gain
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * np.sum(dxhat * xhat, axis=-1, keepdims=True) / d
    )
    return dx, dgain, dbias


# ----------------------------------------------------------------------------
# masked multi-head attention


def softmax(scores, axis=-1):
    return _softmax_inplace(np.array(as_float(scores)), axis)


def _softmax_inplace(e, axis=-1):
    e -= e.max(axis=axis, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=axis, keepdims=True)
    return e


def _split_heads(x, heads):
    *lead, k, d = x.shape
    x = x.reshape(*lead, k, heads, d // heads)
    return np.swapaxes(x, -2, -3)  # (..., heads, K, dh)


def _merge_heads(x):
    x = np.swapaxes(x, -2, -3)  # (..., K, heads, dh)
    *lead, k, h, dh = x.shape
    return x.reshape(*lead, k, h * dh)


def _check_mask(mask, k):
    mask = np.asarray(mask)
    if mask.shape[-2:] != (k, k):
        raise ContractViolation(
            f"mask shape {mask.shape} does not match {k} tokens"
        )
    if not np.all(mask.any(axis=-1)):
        raise ContractViolation("attention mask has a fully masked row")
    return mask.astype(bool, copy=False)


def masked_attention(tokens, mask, weights, heads, return_cache=False):
    """Multi-head attention restricted by a binary mask.

    Args:
        tokens: array (..., K, d).
        mask: boolean array (K, K) or (..., K, K); True where row i may
            attend to column j.
        weights: mapping with ``wq, bq, wk, bk, wv, bv, wo, bo``; the
            projection matrices are (d, d).
        heads: number of heads; must divide d.

    Masked scores get an additive ``MASK_FILL`` so their softmax weight
    underflows to exactly zero.
    """
    *_, k, d = tokens.shape
    if d % heads:
        raise ContractViolation(f"model dim {d} not divisible by {heads} heads")
    if weights["wq"].shape != (d, d):
        raise ContractViolation(
            f"projection shape {weights['wq'].shape} does not match dim {d}"
        )
    mask = _check_mask(mask, k)
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)

    q = _split_heads(linear(tokens, weights["wq"], weights["bq"]), heads)
    kk = _split_heads(linear(tokens, weights["wk"], weights["bk"]), heads)
    v = _split_heads(linear(tokens, weights["wv"], weights["bv"]), heads)

    bias = np.where(mask, 0.0, MASK_FILL)
    # broadcast over the heads axis
    bias = bias[..., None, :, :]
    scores = (q * scale) @ np.swapaxes(kk, -1, -2)
    scores += bias
    attn = _softmax_inplace(scores)
    ctx = _merge_heads(attn @ v)
    out = linear(ctx, weights["wo"], weights["bo"])
    if return_cache:
        return out, (tokens, q, kk, v, attn, ctx, scale, heads)
    return out


def masked_attention_backward(dout, cache, weights):
    """Returns (d_tokens, dict of weight gradients)."""
    tokens, q, kk, v, attn, ctx, scale, heads = cache
    grads = {}
    dctx, grads["wo"], grads["bo"] = linear_backward(dout, ctx, weights["wo"])
    dctx = _split_heads(dctx, heads)
    dattn = dctx @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(attn, -1, -2) @ dctx
    dscores = attn * (dattn - np.sum(dattn * attn, axis=-1, keepdims=True))
    dscores *= scale
    dq = dscores @ kk
    dk = np.swapaxes(dscores, -1, -2) @ q

    dx = np.zeros_like(tokens)
    for name, dpart in (("q", dq), ("k", dk), ("v", dv)):
        dpart = _merge_heads(dpart)
        dxi, grads["w" + name], grads["b" + name] = linear_backward(
            dpart, tokens, weights["w" + name]
        )
        dx += dxi
    return dx, grads


def attention_weights(tokens, mask, weights, heads):
    """Post-softmax attention matrices, shape (..., heads, K, K)."""
    return masked_attention(tokens, mask, weights, heads, return_cache=True)[1][4]
