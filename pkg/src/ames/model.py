"""Pair-similarity transformer over two sets of local descriptors.

Token layout for a pair is ``[X tokens | Q tokens | t]`` where ``t`` is the
learnable matching token.  Each block applies masked self attention
(within-image), masked cross attention (across images) and a per-token
MLP, all pre-norm with residuals.  The final state of ``t`` dotted with the
classifier vector gives the pair logit.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import codec, numerics

VARIANTS = ("fp", "bin")
_PARAM_MAGIC = b"AMESPARM"
_PARAM_VERSION = 1
_ATTN_KEYS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


class ShapeError(ValueError):
    pass


@dataclass
class AmesParams:
    """All learnable tensors plus the hyper-parameters that shape them.

    ``tensors`` is an insertion-ordered mapping; the order is the on-disk
    order of the checkpoint format.
    """

    input_dim: int
    dim: int
    depth: int
    heads: int
    hidden: int
    variant: str = "fp"
    delta: float = codec.DEFAULT_DELTA
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by {self.heads} heads")

    def block(self, i: int, part: str) -> dict[str, np.ndarray]:
        prefix = f"blocks.{i}.{part}."
        return {k: self.tensors[prefix + k] for k in _ATTN_KEYS}

    @property
    def match_token(self) -> np.ndarray:
        return self.tensors["match_token"]

    @property
    def classifier(self) -> np.ndarray:
        return self.tensors["classifier"]

    def fp_projection(self) -> codec.FpProjection:
        return codec.FpProjection(self.tensors["proj.weight"], self.tensors["proj.bias"])

    def binary_codec(self) -> codec.BinaryCodec:
        t = self.tensors
        return codec.BinaryCodec(
            t["bin.weight"], t["remap.weight"], t["remap.bias"],
            t["remap.ln_gain"], t["remap.ln_bias"], delta=self.delta,
        )

    def copy(self) -> "AmesParams":
        return AmesParams(
            self.input_dim, self.dim, self.depth, self.heads, self.hidden,
            self.variant, self.delta, {k: v.copy() for k, v in self.tensors.items()},
        )

    def with_tensors(self, tensors) -> "AmesParams":
        return AmesParams(
            self.input_dim, self.dim, self.depth, self.heads, self.hidden,
            self.variant, self.delta, dict(tensors),
        )

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))


def tensor_shapes(input_dim, dim, depth, hidden, variant) -> dict[str, tuple]:
    shapes: dict[str, tuple] = {}
    if variant == "fp":
        shapes["proj.weight"] = (input_dim, dim)
        shapes["proj.bias"] = (dim,)
    else:
        shapes["bin.weight"] = (input_dim, dim)
        shapes["remap.weight"] = (dim, dim)
        shapes["remap.bias"] = (dim,)
        shapes["remap.ln_gain"] = (dim,)
        shapes["remap.ln_bias"] = (dim,)
    for i in range(depth):
        p = f"blocks.{i}."
        for ln, attn in (("ln1", "self"), ("ln2", "cross")):
            shapes[p + ln + ".gain"] = (dim,)
            shapes[p + ln + ".bias"] = (dim,)
            for key in _ATTN_KEYS:
                shapes[f"{p}{attn}.{key}"] = (dim, dim) if key[0] == "w" else (dim,)
        shapes[p + "ln3.gain"] = (dim,)
        shapes[p + "ln3.bias"] = (dim,)
        shapes[p + "ffn.w1"] = (dim, hidden)
        shapes[p + "ffn.b1"] = (hidden,)
        shapes[p + "ffn.w2"] = (hidden, dim)
        shapes[p + "ffn.b2"] = (dim,)
    shapes["match_token"] = (dim,)
    shapes["classifier"] = (dim,)
    return shapes


def init_params(
    input_dim: int,
    dim: int = 128,
    depth: int = 5,
    heads: int = 4,
    hidden: int | None = None,
    variant: str = "fp",
    delta: float = codec.DEFAULT_DELTA,
    seed=0,
    binarization_weight=None,
) -> AmesParams:
    """Random initialization.

    Matrices get Xavier-normal entries, biases zero, layer-norm gains one.
    The matching token and classifier are drawn from N(0, 0.02^2).  For the
    binary variant, ``binarization_weight`` (e.g. an ITQ fit) replaces the
    random W.
    """
    hidden = 4 * dim if hidden is None else hidden
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in tensor_shapes(input_dim, dim, depth, hidden, variant).items():
        leaf = name.rsplit(".", 1)[-1]
        if name in ("match_token", "classifier"):
            arr = rng.normal(0.0, 0.02, size=shape)
        elif len(shape) == 2:
            std = math.sqrt(2.0 / (shape[0] + shape[1]))
            arr = rng.normal(0.0, std, size=shape)
        elif leaf in ("gain", "ln_gain"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        tensors[name] = arr
    if binarization_weight is not None:
        if variant != "bin":
            raise ValueError("binarization_weight only applies to the binary variant")
        w = np.asarray(binarization_weight, dtype=np.float64)
        if w.shape != (input_dim, dim):
            raise ShapeError(f"binarization weight shape {w.shape} != {(input_dim, dim)}")
        tensors["bin.weight"] = w.copy()
    return AmesParams(input_dim, dim, depth, heads, hidden, variant, delta, tensors)


# ----------------------------------------------------------------------------
# masks


@dataclass(frozen=True)
class MaskPair:
    self_mask: np.ndarray
    cross_mask: np.ndarray
    l_x: int
    l_q: int

    @property
    def size(self) -> int:
        return self.l_x + self.l_q + 1


def _token_groups(l_x, l_q, pad_x=None, pad_q=None):
    """Group id per token: 0 = X, 1 = Q, 2 = matching token, -1 = padding."""
    pad_x = l_x if pad_x is None else pad_x
    pad_q = l_q if pad_q is None else pad_q
    g = np.full(pad_x + pad_q + 1, -1, dtype=np.int8)
    g[:l_x] = 0
    g[pad_x : pad_x + l_q] = 1
    g[-1] = 2
    return g


def _masks_from_groups(g):
    gi, gj = g[..., :, None], g[..., None, :]
    real_i, real_j = gi >= 0, gj >= 0
    img_i, img_j = (gi == 0) | (gi == 1), (gj == 0) | (gj == 1)
    k = g.shape[-1]
    eye = np.eye(k, dtype=bool)
    to_match = ((gi == 2) & real_j) | ((gj == 2) & real_i)
    both_img = img_i & img_j
    self_m = (both_img & (gi == gj)) | to_match | eye
    cross_m = (both_img & (gi != gj)) | to_match | eye
    return self_m, cross_m


def build_masks(l_x: int, l_q: int) -> MaskPair:
    """Self/cross attention masks for one pair of set sizes."""
    if l_x < 1 or l_q < 1:
        raise ShapeError(f"descriptor sets must be non-empty, got ({l_x}, {l_q})")
    s, c = _masks_from_groups(_token_groups(l_x, l_q))
    return MaskPair(s, c, l_x, l_q)


def build_padded_masks(len_x, len_q, pad_x: int, pad_q: int):
    """Masks of shape (B, K, K) for a padded batch; padding only sees itself."""
    len_x = np.asarray(len_x)
    len_q = np.asarray(len_q)
    if np.any(len_x < 1) or np.any(len_q < 1):
        raise ShapeError("descriptor sets must be non-empty")
    if np.any(len_x > pad_x) or np.any(len_q > pad_q):
        raise ShapeError("set length exceeds padded size")
    groups = np.stack(
        [_token_groups(int(a), int(b), pad_x, pad_q) for a, b in zip(len_x, len_q)]
    )
    return _masks_from_groups(groups)


# ----------------------------------------------------------------------------
# projection


def project_descriptors(params: AmesParams, raw, smooth: bool = True, return_cache=False):
    """Apply f to raw D-dim descriptors.

    For the binary variant ``smooth`` selects the erf surrogate (training)
    versus hard sign (inference).
    """
    raw = numerics.as_float(raw)
    if raw.shape[-1] != params.input_dim:
        raise ShapeError(f"descriptor dim {raw.shape[-1]} != {params.input_dim}")
    if params.variant == "fp":
        out = codec.project_fp(raw, params.fp_projection())
        return (out, ("fp", raw)) if return_cache else out
    cdc = params.binary_codec()
    pre = raw @ cdc.weight
    if smooth:
        arg = pre * codec.smooth_scale(cdc.delta)
        bits = numerics.erf(arg)
    else:
        arg = None
        bits = codec.hard_sign(pre)
    out, ln_cache = codec.remap(bits, cdc, return_cache=True)
    if return_cache:
        return out, ("bin", raw, arg, bits, ln_cache)
    return out


def encode_bits(params: AmesParams, raw) -> np.ndarray:
    """Hard ±1 codes for storage (binary variant only)."""
    if params.variant != "bin":
        raise ValueError("encode_bits requires the binary variant")
    return codec.binarize_hard(np.asarray(raw, dtype=np.float64), params.binary_codec())


def remap_codes(params: AmesParams, codes) -> np.ndarray:
    return codec.remap(codes, params.binary_codec())


# ----------------------------------------------------------------------------
# forward


@dataclass
class ForwardOutput:
    logit: np.ndarray | float
    tokens: np.ndarray
    importances: np.ndarray


def forward_block(z, params: AmesParams, i: int, self_mask, cross_mask, return_cache=False):
    """One block: masked self attention, masked cross attention, MLP."""
    z = numerics.as_float(z)
    if z.shape[-1] != params.dim:
        raise ShapeError(f"token dim {z.shape[-1]} != model dim {params.dim}")
    if np.shape(self_mask)[-1] != z.shape[-2]:
        raise ShapeError(f"{z.shape[-2]} tokens but mask size {np.shape(self_mask)[-1]}")
    t = params.tensors
    p = f"blocks.{i}."
    a1, c_ln1 = numerics.layer_norm(z, t[p + "ln1.gain"], t[p + "ln1.bias"], return_cache=True)
    y1, c_att1 = numerics.masked_attention(a1, self_mask, params.block(i, "self"), params.heads, True)
    z1 = z + y1
    a2, c_ln2 = numerics.layer_norm(z1, t[p + "ln2.gain"], t[p + "ln2.bias"], return_cache=True)
    y2, c_att2 = numerics.masked_attention(a2, cross_mask, params.block(i, "cross"), params.heads, True)
    z2 = z1 + y2
    a3, c_ln3 = numerics.layer_norm(z2, t[p + "ln3.gain"], t[p + "ln3.bias"], return_cache=True)
    hid = numerics.linear(a3, t[p + "ffn.w1"], t[p + "ffn.b1"])
    act = numerics.gelu(hid)
    y3 = numerics.linear(act, t[p + "ffn.w2"], t[p + "ffn.b2"])
    out = z2 + y3
    if return_cache:
        return out, (c_ln1, c_att1, c_ln2, c_att2, c_ln3, a3, hid, act)
    return out


def assemble_tokens(params: AmesParams, x_proj, q_proj):
    """Z_0 = [f(X); f(Q); t] for a single pair or a batch of pairs."""
    x_proj = numerics.as_float(x_proj)
    q_proj = numerics.as_float(q_proj)
    if x_proj.ndim != q_proj.ndim or x_proj.shape[:-2] != q_proj.shape[:-2]:
        raise ShapeError(f"incompatible X {x_proj.shape} and Q {q_proj.shape}")
    for name, m in (("X", x_proj), ("Q", q_proj)):
        if m.shape[-1] != params.dim:
            raise ShapeError(f"{name} token dim {m.shape[-1]} != model dim {params.dim}")
    lead = x_proj.shape[:-2]
    t = np.broadcast_to(params.match_token, (*lead, 1, params.dim))
    return np.concatenate([x_proj, q_proj, t], axis=-2)


def forward_tokens(params: AmesParams, x_proj, q_proj, len_x=None, len_q=None, return_cache=False):
    """Run the transformer on projected tokens.

    Inputs are (L_x, d)/(L_q, d) for one pair or (B, L_x, d)/(B, L_q, d) for a
    batch.  With ``len_x``/``len_q`` the batch is treated as padded and the
    padding rows are masked out of both attention operations.
    """
    z = assemble_tokens(params, x_proj, q_proj)
    l_x, l_q = np.shape(x_proj)[-2], np.shape(q_proj)[-2]
    if l_x < 1 or l_q < 1:
        raise ShapeError("descriptor sets must be non-empty")
    if len_x is None and len_q is None:
        masks = build_masks(l_x, l_q)
        self_m, cross_m = masks.self_mask, masks.cross_mask
    else:
        batch = z.shape[0]
        len_x = np.full(batch, l_x) if len_x is None else np.asarray(len_x)
        len_q = np.full(batch, l_q) if len_q is None else np.asarray(len_q)
        self_m, cross_m = build_padded_masks(len_x, len_q, l_x, l_q)
    caches = []
    for i in range(params.depth):
        if return_cache:
            z, c = forward_block(z, params, i, self_m, cross_m, return_cache=True)
            caches.append(c)
        else:
            z = forward_block(z, params, i, self_m, cross_m)
    t_final = z[..., -1, :]
    logit = t_final @ params.classifier
    importances = z[..., :-1, :] @ t_final[..., :, None]
    out = ForwardOutput(logit, z, importances[..., 0])
    if return_cache:
        return out, caches
    return out


def ames_forward(x_proj, q_proj, params: AmesParams) -> ForwardOutput:
    """Single-pair forward pass on already projected descriptor sets."""
    x_proj = np.asarray(x_proj, dtype=np.float64)
    q_proj = np.asarray(q_proj, dtype=np.float64)
    if x_proj.ndim != 2 or q_proj.ndim != 2:
        raise ShapeError("ames_forward takes one pair of (L, d) matrices")
    out = forward_tokens(params, x_proj, q_proj)
    out.logit = float(out.logit)
    return out


def forward_raw(params: AmesParams, x_raw, q_raw, smooth=False):
    """Project raw descriptors with f and run the transformer."""
    x = project_descriptors(params, x_raw, smooth=smooth)
    q = project_descriptors(params, q_raw, smooth=smooth)
    return forward_tokens(params, x, q)


def ames_score(logit, gamma: float = 1.0):
    """Local similarity sigma(gamma * logit) in [0, 1]."""
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    return numerics.sigmoid(gamma * np.asarray(logit, dtype=np.float64))


# ----------------------------------------------------------------------------
# checkpoints

_HEADER = struct.Struct("<8sIIIIIIBdI")


def save_params(params: AmesParams, path):
    """Write a deterministic little-endian f32 checkpoint."""
    header = _HEADER.pack(
        _PARAM_MAGIC, _PARAM_VERSION, params.input_dim, params.dim, params.depth,
        params.heads, params.hidden, VARIANTS.index(params.variant), params.delta,
        len(params.tensors),
    )
    expected = tensor_shapes(params.input_dim, params.dim, params.depth, params.hidden, params.variant)
    with open(path, "wb") as fh:
        fh.write(header)
        for name, shape in expected.items():
            arr = params.tensors[name]
            if arr.shape != shape:
                raise ShapeError(f"{name}: shape {arr.shape} != {shape}")
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_params(path) -> AmesParams:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size or data[:8] != _PARAM_MAGIC:
        raise ValueError(f"{path}: not an AMES checkpoint")
    (_, version, input_dim, dim, depth, heads, hidden, tag, delta, count) = _HEADER.unpack_from(data)
    if version != _PARAM_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    variant = VARIANTS[tag]
    shapes = tensor_shapes(input_dim, dim, depth, hidden, variant)
    if count != len(shapes):
        raise ValueError(f"{path}: tensor count {count} != {len(shapes)}")
    flat = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
    need = sum(math.prod(s) for s in shapes.values())
    if flat.size != need:
        raise ValueError(f"{path}: truncated checkpoint ({flat.size} of {need} floats)")
    tensors, pos = {}, 0
    for name, shape in shapes.items():
        size = math.prod(shape)
        tensors[name] = flat[pos : pos + size].astype(np.float64).reshape(shape)
        pos += size
    return AmesParams(input_dim, dim, depth, heads, hidden, variant, delta, tensors)
