import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ames import codec, synthgen
from ames.evaluation import MemorySpec, memory_bytes
from ames.model import init_params
from ames.store import (
    HEADER_SIZE,
    ID_ENTRY,
    DescriptorRecord,
    StoreError,
    StoreHeader,
    encode_records,
    load_dataset,
    read_store,
    slice_top,
    write_store,
)


def random_records(n, header, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        if header.global_encoding == "fp16":
            g = rng.standard_normal(header.d_g).astype(np.float16)
        else:
            g = rng.integers(0, 256, header.global_nbytes, dtype=np.uint8)
        if header.local_encoding == "fp16":
            loc = rng.standard_normal((header.l_max, header.d)).astype(np.float16)
        else:
            loc = rng.integers(0, 256, (header.l_max, header.d // 8), dtype=np.uint8)
        s = np.sort(rng.random(header.l_max))[::-1].astype(np.float16)
        out.append(DescriptorRecord(1000 + 7 * i, g, s, loc))
    return out


@pytest.mark.parametrize("genc,lenc", [("fp16", "fp16"), ("pq8", "bin"), ("pq1", "fp16"), ("pq4", "bin")])
def test_roundtrip_bit_exact(tmp_path, genc, lenc):
    h = StoreHeader(25, 64, 16, 6, genc, lenc)
    recs = random_records(25, h)
    write_store(recs, h, tmp_path / "s.store")
    st_ = read_store(tmp_path / "s.store")
    assert st_.header == h
    assert list(st_) == recs
    for r in reversed(recs):
        assert st_.get(r.image_id) == r
    assert list(read_store(tmp_path / "s.store")) == recs


def test_empty_store(tmp_path):
    h = StoreHeader(0, 8, 8, 4)
    write_store([], h, tmp_path / "e.store")
    s = read_store(tmp_path / "e.store")
    assert len(s) == 0 and list(s) == []
    assert (tmp_path / "e.store").stat().st_size == HEADER_SIZE


def test_file_size_formula(tmp_path):
    h = StoreHeader(1000, 2048, 128, 10, "pq8", "bin")
    write_store(random_records(1000, h), h, tmp_path / "big.store")
    payload = memory_bytes(MemorySpec("pq8", "bin", 10))
    strengths = 2 * 10
    expected = HEADER_SIZE + 1000 * (ID_ENTRY.size + payload + strengths)
    assert (tmp_path / "big.store").stat().st_size == expected == h.file_nbytes()


def test_truncated_and_bad_magic(tmp_path):
    h = StoreHeader(3, 8, 8, 4)
    path = tmp_path / "t.store"
    write_store(random_records(3, h), h, path)
    data = path.read_bytes()
    path.write_bytes(data[:-5])
    with pytest.raises(StoreError, match="truncated"):
        read_store(path)
    path.write_bytes(b"BADMAGIC" + data[8:])
    with pytest.raises(StoreError, match="magic"):
        read_store(path)
    path.write_bytes(data[:20])
    with pytest.raises(StoreError):
        read_store(path)


def test_write_validation(tmp_path):
    h = StoreHeader(2, 8, 8, 4)
    recs = random_records(2, h)
    with pytest.raises(StoreError):
        write_store(recs[:1], h, tmp_path / "x")
    dup = [recs[0], DescriptorRecord(recs[0].image_id, recs[1].global_, recs[1].strengths, recs[1].locals)]
    with pytest.raises(StoreError, match="duplicate"):
        write_store(dup, h, tmp_path / "x")
    bad = DescriptorRecord(5, recs[1].global_, recs[1].strengths[::-1].copy(), recs[1].locals)
    with pytest.raises(StoreError, match="sorted"):
        write_store([recs[0], bad], h, tmp_path / "x")
    with pytest.raises(StoreError):
        StoreHeader(1, 8, 12, 4, "fp16", "bin")
    with pytest.raises(StoreError):
        StoreHeader(1, 8, 8, 4, "pq3")


def test_slice_top_basic():
    h = StoreHeader(1, 8, 8, 6)
    r = random_records(1, h)[0]
    assert slice_top(r, 6) == r
    one = slice_top(r, 1)
    np.testing.assert_array_equal(one.locals, r.locals[:1])
    with pytest.raises(StoreError):
        slice_top(r, 0)
    with pytest.raises(StoreError):
        slice_top(r, 7)


@settings(max_examples=40)
@given(st.integers(1, 12), st.integers(1, 12))
def test_slice_top_composition(a, b):
    h = StoreHeader(1, 4, 4, 12)
    r = random_records(1, h, seed=a * 13 + b)[0]
    if b > a:
        a, b = b, a
    assert slice_top(slice_top(r, a), b) == slice_top(r, min(a, b))
    np.testing.assert_array_equal(slice_top(r, b).locals, slice_top(r, a).locals[:b])


def test_local_payloads(tmp_path):
    h = StoreHeader(4, 8, 16, 5, "fp16", "bin")
    recs = random_records(4, h)
    write_store(recs, h, tmp_path / "s")
    s = read_store(tmp_path / "s")
    got = s.local_payloads([recs[2].image_id, recs[0].image_id], 3)
    np.testing.assert_array_equal(got, np.stack([recs[2].locals[:3], recs[0].locals[:3]]))
    assert recs[1].image_id in s and 12345 not in s
    with pytest.raises(KeyError):
        s.get(12345)


def test_encode_and_load_dataset(tmp_path):
    tr, _, labels = synthgen.generate_dataset(synthgen.SynthConfig(classes=3, images_per_class=4, distractors=6, l_max=10))
    h, recs = encode_records(tr)
    assert not h.projected and h.d == tr.local_dim
    write_store(recs, h, tmp_path / "raw")
    back = load_dataset(read_store(tmp_path / "raw"), labels)
    np.testing.assert_array_equal(back.ids, tr.ids)
    np.testing.assert_array_equal(back.labels, tr.labels)
    np.testing.assert_allclose(back.locals, tr.locals, atol=1e-3)


def test_encode_projected_variants():
    tr, _, _ = synthgen.generate_dataset(synthgen.SynthConfig(classes=3, images_per_class=4, distractors=6, l_max=10))
    fp = init_params(tr.local_dim, dim=16, depth=1, heads=2)
    h, recs = encode_records(tr, params=fp)
    assert h.projected and h.d == 16 and recs[0].locals.dtype == np.float16
    b = init_params(tr.local_dim, dim=16, depth=1, heads=2, variant="bin")
    cb = codec.pq_train(tr.globals, 8)
    h, recs = encode_records(tr, "pq8", "bin", b, cb)
    assert recs[0].locals.shape == (10, 2) and recs[0].global_.shape == (8,)
    with pytest.raises(StoreError):
        encode_records(tr, "pq8")
    with pytest.raises(StoreError):
        encode_records(tr, local_encoding="bin", params=fp)
