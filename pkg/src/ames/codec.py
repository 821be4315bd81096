"""Descriptor projection and compression.

Two projection variants map D-dimensional local descriptors to the model
dimension d:

* ``FpProjection``: a single affine layer, stored in half precision.
* ``BinaryCodec``: sign binarization ``sgn(u W)`` (smooth erf surrogate
  while training) followed by a re-mapping layer (linear + layer norm)
  that runs online at query time.  Only the bits are stored.

Global descriptors are compressed with product quantization, one byte per
sub-space.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics

logger = logging.getLogger(__name__)

DEFAULT_DELTA = 1e-3
PQ_CENTROIDS = 256

_CODEC_MAGIC = b"AMESBCDC"
_PQ_MAGIC = b"AMESPQCB"
_FILE_VERSION = 1


class CodecError(ValueError):
    pass


@dataclass
class FpProjection:
    weight: np.ndarray  # (D, d)
    bias: np.ndarray | None = None

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class BinaryCodec:
    weight: np.ndarray  # (D, d) binarization matrix W
    remap_weight: np.ndarray  # (d, d)
    remap_bias: np.ndarray
    ln_gain: np.ndarray
    ln_bias: np.ndarray
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        if not self.delta > 0:
            raise CodecError(f"delta must be positive, got {self.delta}")

    @property
    def bits(self) -> int:
        return self.weight.shape[1]


def _check_in_dim(x, weight):
    if x.shape[-1] != weight.shape[0]:
        raise CodecError(
            f"descriptor dim {x.shape[-1]} does not match projection input {weight.shape[0]}"
        )


def project_fp(x, proj: FpProjection):
    """Row-wise affine projection ``x P + bias``."""
    x = np.asarray(x)
    _check_in_dim(x, proj.weight)
    return numerics.linear(x, proj.weight, proj.bias)


def smooth_scale(delta: float) -> float:
    """Multiplier applied to ``u W`` inside the erf surrogate."""
    return 1.0 / math.sqrt(2.0 * delta * delta)


def binarize_smooth(u, codec: BinaryCodec):
    """Differentiable surrogate ``erf(u W / sqrt(2 delta^2))`` in (-1, 1)."""
    u = np.asarray(u)
    _check_in_dim(u, codec.weight)
    return numerics.erf((u @ codec.weight) * smooth_scale(codec.delta))


def hard_sign(x):
    """Elementwise sign with sgn(0) = +1."""
    return np.where(np.asarray(x) >= 0, 1.0, -1.0)


def binarize_hard(u, codec: BinaryCodec):
    u = np.asarray(u)
    _check_in_dim(u, codec.weight)
    return hard_sign(u @ codec.weight)


def remap(b, codec: BinaryCodec, return_cache=False):
    """Lift (relaxed) binary codes back to real vectors: layer_norm(b R + c)."""
    h = numerics.linear(np.asarray(b, dtype=np.float64), codec.remap_weight, codec.remap_bias)
    return numerics.layer_norm(h, codec.ln_gain, codec.ln_bias, return_cache=return_cache)


# ----------------------------------------------------------------------------
# bit packing (most-significant bit first)


def pack_codes(codes) -> np.ndarray:
    """Pack ±1 (or 0/1) codes along the last axis into bytes."""
    codes = np.asarray(codes)
    if codes.shape[-1] % 8:
        raise CodecError(f"code length {codes.shape[-1]} is not a multiple of 8")
    return np.packbits(codes > 0, axis=-1, bitorder="big")


def unpack_codes(packed, bits: int | None = None) -> np.ndarray:
    """Inverse of :func:`pack_codes`; returns float ±1 codes."""
    packed = np.asarray(packed, dtype=np.uint8)
    raw = np.unpackbits(packed, axis=-1, bitorder="big")
    if bits is not None:
        raw = raw[..., :bits]
    return raw.astype(np.float64) * 2.0 - 1.0


# ----------------------------------------------------------------------------
# ITQ


@dataclass
class ItqResult:
    weight: np.ndarray  # (D, d) = PCA basis @ rotation
    rotation: np.ndarray  # (d, d)
    mean: np.ndarray  # (D,)
    losses: list[float] = field(default_factory=list)


def itq_quantization_loss(v, rotation) -> float:
    vr = v @ rotation
    return float(np.linalg.norm(hard_sign(vr) - vr))


def itq_rotation(v, iters: int, rotation=None, rng=None):
    """Alternate B = sgn(V R) and the Procrustes update of R.

    Returns the final rotation and the quantization loss ``||B - V R||_F``
    measured before each update and after the last one.
    """
    bits = v.shape[1]
    if rotation is None:
        rng = np.random.default_rng(rng)
        rotation, _ = np.linalg.qr(rng.standard_normal((bits, bits)))
    losses = []
    for _ in range(iters):
        vr = v @ rotation
        b = hard_sign(vr)
        losses.append(float(np.linalg.norm(b - vr)))
        # maximize tr(B^T V R) over orthogonal R
        u, _, wt = np.linalg.svd(b.T @ v)
        rotation = (u @ wt).T
    losses.append(itq_quantization_loss(v, rotation))
    return rotation, losses


def itq_fit(descriptors, bits: int, iters: int = 50, seed=0, max_samples: int = 100_000) -> ItqResult:
    """Fit an ITQ binarization matrix on a sample of local descriptors."""
    x = np.asarray(descriptors, dtype=np.float64)
    n, dim = x.shape
    rng = np.random.default_rng(seed)
    if n > max_samples:
        x = x[np.sort(rng.choice(n, size=max_samples, replace=False))]
        n = max_samples
    if n <= bits:
        raise CodecError(f"ITQ needs more samples than bits ({n} <= {bits})")
    if bits > dim:
        raise CodecError(f"cannot extract {bits} bits from {dim}-dim descriptors")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / n
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    tol = max(evals[0], 0.0) * 1e-10
    informative = int(np.sum(evals > tol))
    if informative < bits:
        raise CodecError(
            f"rank deficient input: {informative} informative directions for {bits} bits"
        )
    pca = evecs[:, :bits]
    rotation, losses = itq_rotation(xc @ pca, iters, rng=rng)
    return ItqResult(weight=pca @ rotation, rotation=rotation, mean=mean, losses=losses)


# ----------------------------------------------------------------------------
# product quantization


@dataclass
class PqCodebook:
    centroids: np.ndarray  # (n_sub, 256, s)

    @property
    def sub_dim(self) -> int:
        return self.centroids.shape[2]

    @property
    def n_sub(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.n_sub * self.sub_dim


def _sq_dists(x, c):
    return (
        np.sum(x * x, axis=1)[:, None] - 2.0 * (x @ c.T) + np.sum(c * c, axis=1)[None, :]
    )


def _kmeanspp(x, k, rng):
    n = len(x)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = np.sum((x - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=closest / total)
        centers[i] = x[idx]
        closest = np.minimum(closest, np.sum((x - centers[i]) ** 2, axis=1))
    return centers


def kmeans(x, k: int, iters: int, rng):
    """Lloyd iterations from k-means++ seeds.

    Empty clusters are re-seeded with the points farthest from their
    current centroid.  Returns (centroids, per-iteration objective).
    """
    x = np.asarray(x, dtype=np.float64)
    uniq = np.unique(x, axis=0)
    if len(uniq) <= k:
        pad = np.repeat(uniq[-1:], k - len(uniq), axis=0)
        centers = np.concatenate([uniq, pad])
        return centers, [0.0]
    centers = _kmeanspp(x, k, rng)
    history = []
    for _ in range(iters):
        d2 = _sq_dists(x, centers)
        assign = np.argmin(d2, axis=1)
        best = np.maximum(d2[np.arange(len(x)), assign], 0.0)
        history.append(float(best.mean()))
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, x)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        empty = np.flatnonzero(~nonempty)
        if len(empty):
            far = np.argsort(-best, kind="stable")[: len(empty)]
            centers[empty] = x[far]
    d2 = _sq_dists(x, centers)
    history.append(float(np.maximum(d2.min(axis=1), 0.0).mean()))
    return centers, history


def pq_train(globals_, sub_dim: int, seed=0, iters: int = 25) -> PqCodebook:
    x = np.asarray(globals_, dtype=np.float64)
    if x.ndim != 2 or len(x) < 1:
        raise CodecError("pq_train needs at least one vector")
    n, dim = x.shape
    if dim % sub_dim:
        raise CodecError(f"dim {dim} not divisible by sub-space dim {sub_dim}")
    if n < PQ_CENTROIDS:
        logger.warning("training PQ on %d < %d vectors", n, PQ_CENTROIDS)
    rng = np.random.default_rng(seed)
    n_sub = dim // sub_dim
    cents = np.empty((n_sub, PQ_CENTROIDS, sub_dim))
    for j in range(n_sub):
        part = x[:, j * sub_dim : (j + 1) * sub_dim]
        cents[j], _ = kmeans(part, PQ_CENTROIDS, iters, rng)
    return PqCodebook(cents)


def pq_encode(v, cb: PqCodebook) -> np.ndarray:
    """Nearest-centroid byte per sub-space; works on (d_g,) or (n, d_g)."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != cb.dim:
        raise CodecError(f"vector dim {v.shape[-1]} != codebook dim {cb.dim}")
    single = v.ndim == 1
    v = v.reshape(-1, cb.n_sub, cb.sub_dim)
    # (n, n_sub, 256); argmin returns the first minimum on ties
    d2 = np.sum((v[:, :, None, :] - cb.centroids[None]) ** 2, axis=-1)
    codes = np.argmin(d2, axis=-1).astype(np.uint8)
    return codes[0] if single else codes


def pq_decode(code, cb: PqCodebook) -> np.ndarray:
    code = np.asarray(code, dtype=np.uint8)
    if code.shape[-1] != cb.n_sub:
        raise CodecError(f"code length {code.shape[-1]} != {cb.n_sub} sub-spaces")
    parts = cb.centroids[np.arange(cb.n_sub), code.astype(np.intp)]
    return parts.reshape(*code.shape[:-1], cb.dim)


# ----------------------------------------------------------------------------
# files


def save_codebook(cb: PqCodebook, path):
    with open(path, "wb") as fh:
        fh.write(_PQ_MAGIC)
        fh.write(struct.pack("<III", _FILE_VERSION, cb.dim, cb.sub_dim))
        fh.write(cb.centroids.astype("<f4").tobytes())


def load_codebook(path) -> PqCodebook:
    data = Path(path).read_bytes()
    if data[:8] != _PQ_MAGIC:
        raise CodecError(f"{path}: not a PQ codebook file")
    version, dim, sub = struct.unpack_from("<III", data, 8)
    if version != _FILE_VERSION:
        raise CodecError(f"{path}: unsupported version {version}")
    n_sub = dim // sub
    expected = 20 + n_sub * PQ_CENTROIDS * sub * 4
    if len(data) != expected:
        raise CodecError(f"{path}: expected {expected} bytes, found {len(data)}")
    cents = np.frombuffer(data, dtype="<f4", offset=20).astype(np.float64)
    return PqCodebook(cents.reshape(n_sub, PQ_CENTROIDS, sub))


def save_codec(codec: BinaryCodec, path):
    in_dim, bits = codec.weight.shape
    with open(path, "wb") as fh:
        fh.write(_CODEC_MAGIC)
        fh.write(struct.pack("<IIId", _FILE_VERSION, in_dim, bits, codec.delta))
        for arr in (codec.weight, codec.remap_weight, codec.remap_bias, codec.ln_gain, codec.ln_bias):
            fh.write(np.asarray(arr, dtype="<f4").tobytes())


def load_codec(path) -> BinaryCodec:
    data = Path(path).read_bytes()
    if data[:8] != _CODEC_MAGIC:
        raise CodecError(f"{path}: not a binary codec file")
    version, in_dim, bits, delta = struct.unpack_from("<IIId", data, 8)
    if version != _FILE_VERSION:
        raise CodecError(f"{path}: unsupported version {version}")
    flat = np.frombuffer(data, dtype="<f4", offset=28).astype(np.float64)
    shapes = [(in_dim, bits), (bits, bits), (bits,), (bits,), (bits,)]
    need = sum(math.prod(s) for s in shapes)
    if flat.size != need:
        raise CodecError(f"{path}: truncated codec payload")
    arrays, pos = [], 0
    for s in shapes:
        size = math.prod(s)
        arrays.append(flat[pos : pos + size].reshape(s))
        pos += size
    return BinaryCodec(*arrays, delta=delta)
