"""Reverse-mode gradients for the fixed AMES architecture.

The forward pass in :mod:`ames.model` returns per-block caches; the
functions here walk them backwards.  Masks are constants.  The binary
codec is always differentiated through its erf surrogate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import codec, numerics
from ..model import AmesParams, forward_tokens, project_descriptors
from . import losses


class DivergenceError(FloatingPointError):
    pass


@dataclass
class PairBatch:
    """A batch of pairs sharing one (L_x, L_q).

    ``x_raw``/``q_raw`` are raw descriptors (B, L, D) for the model being
    trained; ``x_teacher``/``q_teacher`` are the (longer) prefixes given to
    the distillation teacher.
    """

    x_raw: np.ndarray
    q_raw: np.ndarray
    labels: np.ndarray
    x_teacher: np.ndarray | None = None
    q_teacher: np.ndarray | None = None

    def __len__(self):
        return len(self.labels)


@dataclass
class GradResult:
    loss: float
    loss_bce: float
    loss_dis: float
    grads: dict[str, np.ndarray]
    logits: np.ndarray


def block_backward(dz_out, params: AmesParams, i: int, cache, grads: dict):
    c_ln1, c_att1, c_ln2, c_att2, c_ln3, a3, hid, act = cache
    t = params.tensors
    p = f"blocks.{i}."

    dact, grads[p + "ffn.w2"], grads[p + "ffn.b2"] = numerics.linear_backward(dz_out, act, t[p + "ffn.w2"])
    dhid = dact * numerics.gelu_grad(hid)
    da3, grads[p + "ffn.w1"], grads[p + "ffn.b1"] = numerics.linear_backward(dhid, a3, t[p + "ffn.w1"])
    dz2_ln, grads[p + "ln3.gain"], grads[p + "ln3.bias"] = numerics.layer_norm_backward(da3, c_ln3)
    dz2 = dz_out + dz2_ln

    da2, g_cross = numerics.masked_attention_backward(dz2, c_att2, params.block(i, "cross"))
    dz1_ln, grads[p + "ln2.gain"], grads[p + "ln2.bias"] = numerics.layer_norm_backward(da2, c_ln2)
    dz1 = dz2 + dz1_ln

    da1, g_self = numerics.masked_attention_backward(dz1, c_att1, params.block(i, "self"))
    dz_ln, grads[p + "ln1.gain"], grads[p + "ln1.bias"] = numerics.layer_norm_backward(da1, c_ln1)
    for key, val in g_cross.items():
        grads[p + "cross." + key] = val
    for key, val in g_self.items():
        grads[p + "self." + key] = val
    return dz1 + dz_ln


def projection_backward(dproj, params: AmesParams, cache, grads: dict):
    """Accumulate gradients of f into ``grads``."""
    t = params.tensors
    if cache[0] == "fp":
        raw = cache[1]
        _, dw, db = numerics.linear_backward(dproj, raw, t["proj.weight"])
        grads["proj.weight"] = grads.get("proj.weight", 0.0) + dw
        grads["proj.bias"] = grads.get("proj.bias", 0.0) + db
        return
    _, raw, arg, bits, ln_cache = cache
    dh, dgain, dbias = numerics.layer_norm_backward(dproj, ln_cache)
    dbits, dr, dc = numerics.linear_backward(dh, bits, t["remap.weight"])
    dpre = dbits * numerics.erf_grad(arg) * codec.smooth_scale(params.delta)
    _, dw, _ = numerics.linear_backward(dpre, raw, t["bin.weight"])
    for name, val in (
        ("remap.ln_gain", dgain), ("remap.ln_bias", dbias), ("remap.weight", dr),
        ("remap.bias", dc), ("bin.weight", dw),
    ):
        grads[name] = grads.get(name, 0.0) + val


def teacher_forward(teacher: AmesParams, x_raw, q_raw):
    # inference path of the teacher; for the binary variant that is hard sign
    x = project_descriptors(teacher, x_raw, smooth=False)
    q = project_descriptors(teacher, q_raw, smooth=False)
    return forward_tokens(teacher, x, q)


def teacher_inputs(batch: PairBatch):
    xt = batch.x_raw if batch.x_teacher is None else batch.x_teacher
    qt = batch.q_raw if batch.q_teacher is None else batch.q_teacher
    return xt, qt


def loss_gradients(
    batch: PairBatch,
    params: AmesParams,
    beta: float = 0.0,
    teacher: AmesParams | None = None,
    distill_mode: str = "tokens",
    teacher_out=None,
) -> GradResult:
    """Total loss of a batch and its exact gradient for every tensor.

    Loss = balanced BCE (+ beta * distillation when a teacher is given).
    The frozen teacher's forward output may be passed in precomputed.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    labels = np.asarray(batch.labels, dtype=np.float64)
    x_p, cache_x = project_descriptors(params, batch.x_raw, smooth=True, return_cache=True)
    q_p, cache_q = project_descriptors(params, batch.q_raw, smooth=True, return_cache=True)
    out, caches = forward_tokens(params, x_p, q_p, return_cache=True)
    logits = out.logit
    z_n = out.tokens
    bsz, k_s, dim = z_n.shape

    scores = numerics.sigmoid(logits)
    weights = losses.balance_weights(labels)
    loss_bce = float(np.sum(weights * losses.bce_loss(scores, labels)))
    inside = (scores > losses.SCORE_CLAMP) & (scores < 1.0 - losses.SCORE_CLAMP)
    dlogit = weights * (scores - labels) * inside

    dz = np.zeros_like(z_n)
    loss_dis = 0.0
    if teacher is not None and beta != 0.0:
        xt, qt = teacher_inputs(batch)
        t_out = teacher_forward(teacher, xt, qt) if teacher_out is None else teacher_out
        if distill_mode == "tokens":
            rows = losses.teacher_rows(xt.shape[1], qt.shape[1], x_p.shape[1], q_p.shape[1])
            resid = z_n - t_out.tokens[:, rows, :]
            norms = np.sqrt(np.sum(resid * resid, axis=(1, 2)))
            loss_dis = float(np.mean(norms / (dim * k_s)))
            safe = np.where(norms > 0, norms, 1.0)
            coef = np.where(norms > 0, beta / (bsz * dim * k_s * safe), 0.0)
            dz += coef[:, None, None] * resid
        elif distill_mode == "scores":
            s_t = numerics.sigmoid(t_out.logit)
            loss_dis = float(np.mean(losses.score_distill_loss(s_t, scores)))
            dlogit = dlogit + beta * 2.0 * (scores - s_t) * scores * (1.0 - scores) / bsz
        else:
            raise ValueError(f"unknown distillation mode {distill_mode!r}")

    loss = losses.total_loss(loss_bce, loss_dis, beta)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss}")

    grads: dict[str, np.ndarray] = {}
    t_final = z_n[:, -1, :]
    grads["classifier"] = dlogit @ t_final
    dz[:, -1, :] += dlogit[:, None] * params.classifier[None, :]
    for i in reversed(range(params.depth)):
        dz = block_backward(dz, params, i, caches[i], grads)

    l_x = x_p.shape[1]
    grads["match_token"] = dz[:, -1, :].sum(axis=0)
    projection_backward(dz[:, :l_x, :], params, cache_x, grads)
    projection_backward(dz[:, l_x:-1, :], params, cache_q, grads)

    ordered = {name: np.asarray(grads[name], dtype=np.float64) for name in params.tensors}
    return GradResult(loss, loss_bce, loss_dis, ordered, logits)


def batch_loss(batch, params, beta=0.0, teacher=None, distill_mode="tokens", teacher_out=None) -> float:
    """Loss only; the same computation as :func:`loss_gradients`."""
    x_p = project_descriptors(params, batch.x_raw, smooth=True)
    q_p = project_descriptors(params, batch.q_raw, smooth=True)
    out = forward_tokens(params, x_p, q_p)
    scores = numerics.sigmoid(out.logit)
    loss = losses.balanced_bce(scores, batch.labels)
    if teacher is not None and beta != 0.0:
        xt, qt = teacher_inputs(batch)
        t_out = teacher_forward(teacher, xt, qt) if teacher_out is None else teacher_out
        if distill_mode == "tokens":
            rows = losses.teacher_rows(xt.shape[1], qt.shape[1], x_p.shape[1], q_p.shape[1])
            dis = float(np.mean(losses.distill_loss(t_out.tokens, out.tokens, rows)))
        else:
            s_t = numerics.sigmoid(t_out.logit)
            dis = float(np.mean(losses.score_distill_loss(s_t, scores)))
        loss = losses.total_loss(loss, dis, beta)
    return loss
