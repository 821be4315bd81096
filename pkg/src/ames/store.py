"""On-disk descriptor store.

Layout (little-endian)::

    [header: 64 bytes]
    [id table: count x (u64 image id, u64 byte offset)]
    [records: global payload | strengths (L_max x f16) | locals payload]

Locals are kept sorted by strength so any ``L <= L_max`` is a prefix slice.
Binary locals are packed most-significant bit first.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import codec
from .dataset import DescriptorSet
from .evaluation import GLOBAL_MODES, LOCAL_MODES, global_bytes, local_bytes

MAGIC = b"AMESSTOR"
VERSION = 1
HEADER_SIZE = 64
ID_ENTRY = struct.Struct("<QQ")
_HEADER = struct.Struct("<8sIQIIIBBB")


class StoreError(ValueError):
    pass


@dataclass(frozen=True)
class StoreHeader:
    count: int
    d_g: int
    d: int
    l_max: int
    global_encoding: str = "fp16"
    local_encoding: str = "fp16"
    projected: bool = True  # False: fp16 locals are raw backbone descriptors
    version: int = VERSION

    def __post_init__(self):
        if self.global_encoding not in GLOBAL_MODES:
            raise StoreError(f"unknown global encoding {self.global_encoding!r}")
        if self.local_encoding not in LOCAL_MODES:
            raise StoreError(f"unknown local encoding {self.local_encoding!r}")
        if self.local_encoding == "bin" and self.d % 8:
            raise StoreError(f"{self.d}-bit codes do not pack into bytes")

    @property
    def global_nbytes(self) -> int:
        return global_bytes(self.global_encoding, self.d_g)

    @property
    def local_nbytes(self) -> int:
        return local_bytes(self.local_encoding, self.d)

    @property
    def record_nbytes(self) -> int:
        return self.global_nbytes + 2 * self.l_max + self.l_max * self.local_nbytes

    def file_nbytes(self) -> int:
        return HEADER_SIZE + self.count * (ID_ENTRY.size + self.record_nbytes)

    def pack(self) -> bytes:
        raw = _HEADER.pack(
            MAGIC, self.version, self.count, self.d_g, self.d, self.l_max,
            GLOBAL_MODES.index(self.global_encoding), LOCAL_MODES.index(self.local_encoding),
            int(self.projected),
        )
        return raw.ljust(HEADER_SIZE, b"\0")

    @classmethod
    def unpack(cls, data: bytes) -> "StoreHeader":
        if len(data) < HEADER_SIZE:
            raise StoreError("truncated store header")
        magic, version, count, d_g, d, l_max, g, l, proj = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise StoreError("bad magic: not a descriptor store")
        if version != VERSION:
            raise StoreError(f"unsupported store version {version}")
        return cls(count, d_g, d, l_max, GLOBAL_MODES[g], LOCAL_MODES[l], bool(proj), version)


@dataclass
class DescriptorRecord:
    image_id: int
    global_: np.ndarray  # f16 (d_g,) or u8 PQ codes
    strengths: np.ndarray  # f16 (L,)
    locals: np.ndarray  # f16 (L, d) or u8 (L, d/8)

    @property
    def length(self) -> int:
        return len(self.strengths)

    def __eq__(self, other):
        if not isinstance(other, DescriptorRecord):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and _same_bits(self.global_, other.global_)
            and _same_bits(self.strengths, other.strengths)
            and _same_bits(self.locals, other.locals)
        )


def _same_bits(a, b):
    return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()


def slice_top(record: DescriptorRecord, length: int) -> DescriptorRecord:
    """Keep the ``length`` strongest local descriptors."""
    if not 1 <= length <= record.length:
        raise StoreError(f"L={length} outside [1, {record.length}]")
    return replace(record, strengths=record.strengths[:length], locals=record.locals[:length])


def _payload_dtypes(header: StoreHeader):
    g = np.float16 if header.global_encoding == "fp16" else np.uint8
    loc = np.float16 if header.local_encoding == "fp16" else np.uint8
    return g, loc


def _global_shape(header):
    if header.global_encoding == "fp16":
        return (header.d_g,)
    return (header.global_nbytes,)


def _local_shape(header, length):
    if header.local_encoding == "fp16":
        return (length, header.d)
    return (length, header.d // 8)


def _check_record(rec: DescriptorRecord, header: StoreHeader):
    g_dt, l_dt = _payload_dtypes(header)
    if rec.global_.dtype != g_dt or rec.global_.shape != _global_shape(header):
        raise StoreError(f"record {rec.image_id}: global payload does not match header")
    if rec.locals.dtype != l_dt or rec.locals.shape != _local_shape(header, header.l_max):
        raise StoreError(f"record {rec.image_id}: locals payload does not match header")
    if rec.strengths.dtype != np.float16 or rec.strengths.shape != (header.l_max,):
        raise StoreError(f"record {rec.image_id}: strengths do not match header")
    s = rec.strengths.astype(np.float32)
    if np.any(np.diff(s) > 0):
        raise StoreError(f"record {rec.image_id}: strengths not sorted descending")


def write_store(records, header: StoreHeader, path):
    records = list(records)
    if len(records) != header.count:
        raise StoreError(f"header count {header.count} != {len(records)} records")
    ids = [int(r.image_id) for r in records]
    if len(set(ids)) != len(ids):
        raise StoreError("duplicate image ids")
    for rec in records:
        _check_record(rec, header)
    table_end = HEADER_SIZE + header.count * ID_ENTRY.size
    with open(path, "wb") as fh:
        fh.write(header.pack())
        for i, rec in enumerate(records):
            fh.write(ID_ENTRY.pack(rec.image_id, table_end + i * header.record_nbytes))
        for rec in records:
            fh.write(rec.global_.astype(rec.global_.dtype.newbyteorder("<")).tobytes())
            fh.write(rec.strengths.astype("<f2").tobytes())
            fh.write(rec.locals.astype(rec.locals.dtype.newbyteorder("<")).tobytes())


class Store:
    """Read-only view over a store file; records are decoded on access."""

    def __init__(self, path):
        self.path = Path(path)
        size = self.path.stat().st_size
        with open(self.path, "rb") as fh:
            self.header = StoreHeader.unpack(fh.read(HEADER_SIZE))
        if size != self.header.file_nbytes():
            raise StoreError(
                f"{path}: expected {self.header.file_nbytes()} bytes, found {size} (truncated?)"
            )
        self._buf = np.memmap(self.path, dtype=np.uint8, mode="r") if size else np.empty(0, np.uint8)
        n = self.header.count
        table = np.frombuffer(self._buf, dtype="<u8", count=2 * n, offset=HEADER_SIZE).reshape(n, 2)
        self.ids = table[:, 0].astype(np.int64)
        self._offsets = table[:, 1].astype(np.int64)
        self._pos = {int(i): k for k, i in enumerate(self.ids)}

    def __len__(self):
        return self.header.count

    def __contains__(self, image_id):
        return int(image_id) in self._pos

    def _record_at(self, k: int) -> DescriptorRecord:
        h = self.header
        g_dt, l_dt = _payload_dtypes(h)
        off = int(self._offsets[k])
        g_n = int(np.prod(_global_shape(h)))
        glob = np.frombuffer(self._buf, dtype=np.dtype(g_dt).newbyteorder("<"), count=g_n, offset=off)
        off += h.global_nbytes
        strengths = np.frombuffer(self._buf, dtype="<f2", count=h.l_max, offset=off)
        off += 2 * h.l_max
        shape = _local_shape(h, h.l_max)
        locs = np.frombuffer(self._buf, dtype=np.dtype(l_dt).newbyteorder("<"), count=shape[0] * shape[1], offset=off)
        return DescriptorRecord(
            int(self.ids[k]), glob.astype(g_dt), strengths.astype(np.float16),
            locs.reshape(shape).astype(l_dt),
        )

    def get(self, image_id) -> DescriptorRecord:
        try:
            k = self._pos[int(image_id)]
        except KeyError:
            raise KeyError(f"image {image_id} not in store") from None
        return self._record_at(k)

    def __iter__(self):
        for k in range(len(self)):
            yield self._record_at(k)

    def global_payloads(self) -> np.ndarray:
        """All global payloads stacked in file order."""
        if len(self) == 0:
            return np.empty((0,) + _global_shape(self.header))
        return np.stack([self._record_at(k).global_ for k in range(len(self))])

    def local_payloads(self, image_ids, length: int) -> np.ndarray:
        """Stacked top-``length`` local payloads for the given ids."""
        return np.stack([slice_top(self.get(i), length).locals for i in image_ids])


def read_store(path) -> Store:
    return Store(path)


# ----------------------------------------------------------------------------
# encoding from in-memory descriptors


def encode_records(
    data: DescriptorSet,
    global_encoding: str = "fp16",
    local_encoding: str = "fp16",
    params=None,
    codebook: codec.PqCodebook | None = None,
):
    """Turn raw descriptors into store records.

    Without ``params`` the fp16 locals are the raw descriptors.  With a fp
    model the projected tokens f(X) are stored; with a binary model only the
    packed sign codes b(X).
    """
    from .model import encode_bits, project_descriptors

    if global_encoding == "fp16":
        globs = data.globals.astype(np.float16)
        d_g = data.globals.shape[1]
    else:
        if codebook is None:
            raise StoreError("PQ global encoding needs a codebook")
        if codebook.sub_dim != int(global_encoding[2:]):
            raise StoreError(f"codebook sub-dim {codebook.sub_dim} does not match {global_encoding}")
        globs = codec.pq_encode(data.globals, codebook)
        d_g = codebook.dim

    projected = params is not None
    if local_encoding == "bin":
        if params is None or params.variant != "bin":
            raise StoreError("binary locals need a binary-variant model")
        locs = codec.pack_codes(encode_bits(params, data.locals))
        d = params.dim
    elif params is None:
        locs = data.locals.astype(np.float16)
        d = data.local_dim
    else:
        if params.variant != "fp":
            raise StoreError("fp16 projected locals need a fp-variant model")
        locs = project_descriptors(params, data.locals).astype(np.float16)
        d = params.dim

    header = StoreHeader(len(data), d_g, d, data.l_max, global_encoding, local_encoding, projected)
    strengths = data.strengths.astype(np.float16)
    # fp16 rounding can break ties into inversions; clamp to keep the order
    strengths = np.minimum.accumulate(strengths, axis=1)
    records = [
        DescriptorRecord(int(i), globs[k], strengths[k], locs[k])
        for k, i in enumerate(data.ids)
    ]
    return header, records


def load_dataset(store: Store, labels: dict | None = None) -> DescriptorSet:
    """Raw fp16 store back to an in-memory set (for training)."""
    h = store.header
    if h.local_encoding != "fp16" or h.projected or h.global_encoding != "fp16":
        raise StoreError("training needs a raw fp16 store")
    recs = list(store)
    ids = np.array([r.image_id for r in recs], dtype=np.int64)
    lab = np.array([(labels or {}).get(int(i), -1) for i in ids], dtype=np.int64)
    if not recs:
        empty = np.empty((0, h.l_max, h.d))
        return DescriptorSet(ids, lab, empty, np.empty((0, h.l_max)), np.empty((0, h.d_g)))
    return DescriptorSet(
        ids, lab,
        np.stack([r.locals for r in recs]).astype(np.float64),
        np.stack([r.strengths for r in recs]).astype(np.float64),
        np.stack([r.global_ for r in recs]).astype(np.float64),
    )
