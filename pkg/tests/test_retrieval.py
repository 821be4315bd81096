import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _helpers import perturb
from ames import retrieval, synthgen
from ames.evaluation import map_at_k
from ames.model import ames_forward, init_params, project_descriptors
from ames.pipeline import build_database, labeled_queries
from ames.retrieval import (
    GAMMA_GRID,
    LAMBDA_GRID,
    CachedQuery,
    EnsembleConfig,
    RankedList,
    RetrievalError,
    build_cache,
    ensemble_score,
    global_rank,
    order_by_score,
    read_rankings,
    rerank,
    rerank_from_logits,
    search,
    tune_ensemble,
    tune_from_cache,
    write_rankings,
)
from ames.store import StoreHeader, read_store, write_store, DescriptorRecord


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    cfg = synthgen.SynthConfig(classes=4, images_per_class=5, distractors=0, l_max=8, dim=16, val_fraction=0.0)
    data, _, _ = synthgen.generate_dataset(cfg)
    params = perturb(init_params(16, dim=8, depth=2, heads=2, seed=1), 1, 0.2)
    db = build_database(data, params, tmp_path_factory.mktemp("toy"))
    return data, params, db


# ---------------------------------------------------------------- scores


def test_ensemble_score_examples():
    assert ensemble_score(0.37, 5.0, 1.0, 1.0) == 0.37
    assert ensemble_score(0.37, 5.0, 0.0, 0.0) == 0.5
    assert abs(ensemble_score(0.8, 2.0, 0.6, 1.0) - 0.8323188) < 1e-6
    with pytest.raises(ValueError):
        ensemble_score(0.5, 1.0, 1.5, 1.0)
    with pytest.raises(ValueError):
        ensemble_score(0.5, 1.0, 0.5, -1.0)


def test_order_ties_by_id():
    np.testing.assert_array_equal(order_by_score([0.5, 0.9, 0.5, 0.9], [7, 3, 2, 1]), [3, 1, 2, 0])


@settings(max_examples=50)
@given(st.lists(st.integers(-100, 100), min_size=1, max_size=30), st.integers(0, 1000))
def test_order_invariant_to_monotone_maps(scores, seed):
    ids = np.random.default_rng(seed).permutation(len(scores))
    s = np.array(scores) / 10.0
    base = order_by_score(s, ids)
    np.testing.assert_array_equal(order_by_score(np.tanh(s / 20) * 3 + 1, ids), base)
    np.testing.assert_array_equal(order_by_score(s ** 3 + s, ids), base)


def test_config_and_list_validation():
    with pytest.raises(ValueError):
        EnsembleConfig(lam=-0.1)
    with pytest.raises(ValueError):
        EnsembleConfig(m=-1)
    with pytest.raises(ValueError):
        RankedList(0, [1, 1], [0.5, 0.4])


# ---------------------------------------------------------------- global stage


def test_global_rank_self_first_and_orthogonal(tmp_path):
    g = np.eye(4, dtype=np.float16)
    recs = [DescriptorRecord(i, g[i], np.ones(1, np.float16), np.zeros((1, 4), np.float16)) for i in range(4)]
    h = StoreHeader(4, 4, 4, 1, projected=False)
    write_store(recs, h, tmp_path / "s")
    db = retrieval.Database(read_store(tmp_path / "s"))
    rl = global_rank(np.eye(4)[2], db)
    assert rl.ids[0] == 2 and abs(rl.scores[0] - 1.0) < 1e-3
    np.testing.assert_array_equal(rl.ids[1:], [0, 1, 3])
    np.testing.assert_array_equal(rl.scores[1:], 0.0)


def test_global_rank_brute_force(tmp_path):
    rng = np.random.default_rng(0)
    g = rng.standard_normal((100, 16))
    g = (g / np.linalg.norm(g, axis=1, keepdims=True)).astype(np.float16)
    ids = rng.permutation(1000)[:100]
    recs = [DescriptorRecord(int(ids[k]), g[k], np.ones(1, np.float16), np.zeros((1, 4), np.float16))
            for k in range(100)]
    write_store(recs, StoreHeader(100, 16, 4, 1, projected=False), tmp_path / "s")
    db = retrieval.Database(read_store(tmp_path / "s"))
    q = rng.standard_normal(16)
    rl = global_rank(q, db, top_k=30)
    gf = g.astype(np.float64)
    scored = sorted(((float(gf[k] @ q), int(ids[k])) for k in range(100)), key=lambda t: (-t[0], t[1]))
    assert rl.ids.tolist() == [i for _, i in scored[:30]]


def test_empty_store_rejected(tmp_path):
    write_store([], StoreHeader(0, 4, 4, 1), tmp_path / "e")
    with pytest.raises(RetrievalError):
        retrieval.Database(read_store(tmp_path / "e"))


# ---------------------------------------------------------------- re-ranking


def test_m_zero_and_lambda_one_reproduce_global(toy):
    data, params, db = toy
    for qid in data.ids[:5]:
        q = db.query(qid, 8)
        base = global_rank(q.global_, db, exclude=(int(qid),), query_id=int(qid))
        r0 = rerank(q, db, EnsembleConfig(m=0, l_x=8, l_q=8), exclude=(int(qid),))
        r1 = rerank(q, db, EnsembleConfig(lam=1.0, m=19, l_x=8, l_q=8), exclude=(int(qid),))
        np.testing.assert_array_equal(r0.ids, base.ids)
        np.testing.assert_array_equal(r1.ids, base.ids)


def test_rerank_matches_exhaustive_pairwise_oracle(toy):
    data, params, db = toy
    lam, gamma = 0.3, 0.7
    for k in (0, 7, 13):
        qid = int(data.ids[k])
        got = rerank(db.query(qid, 6), db, EnsembleConfig(lam, gamma, m=20, l_x=5, l_q=6), exclude=(qid,))
        # the store keeps fp16 projected tokens
        q16 = project_descriptors(params, data.locals[k, :6], smooth=False).astype(np.float16).astype(float)
        g16 = data.globals.astype(np.float16).astype(np.float64)
        scored = []
        for j in range(len(data)):
            if j == k:
                continue
            x_tok = project_descriptors(params, data.locals[j, :5], smooth=False).astype(np.float16).astype(float)
            logit = ames_forward(x_tok, q16, params).logit
            scored.append((ensemble_score(g16[j] @ g16[k], logit, lam, gamma), int(data.ids[j])))
        scored.sort(key=lambda t: (-t[0], t[1]))
        assert got.ids.tolist() == [i for _, i in scored]
        np.testing.assert_allclose(got.scores, [s for s, _ in scored], rtol=1e-9)


def test_rerank_permutes_only_the_prefix(toy):
    data, params, db = toy
    qid = int(data.ids[3])
    q = db.query(qid, 8)
    base = global_rank(q.global_, db, exclude=(qid,))
    r = rerank(q, db, EnsembleConfig(0.1, 1.0, m=7, l_x=8, l_q=8), exclude=(qid,))
    assert set(r.ids[:7]) == set(base.ids[:7])
    np.testing.assert_array_equal(r.ids[7:], base.ids[7:])
    np.testing.assert_array_equal(r.scores[7:], base.scores[7:])
    assert np.all(np.diff(r.scores[:7]) <= 0)


def test_m_larger_than_store_is_clamped(toy, caplog):
    data, params, db = toy
    qid = int(data.ids[0])
    r = rerank(db.query(qid, 8), db, EnsembleConfig(m=500, l_x=8, l_q=8), exclude=(qid,))
    assert len(r) == len(data) - 1
    assert "clamped" in caplog.text


def test_every_length_pair_scores(toy):
    data, params, db = toy
    qid = int(data.ids[1])
    for lx in range(1, 9):
        for lq in range(1, 9):
            r = rerank(db.query(qid, lq), db, EnsembleConfig(m=5, l_x=lx, l_q=lq), exclude=(qid,))
            assert len(r) == len(data) - 1


def test_ties_keep_global_order():
    initial = RankedList(0, [5, 2, 9], [0.9, 0.8, 0.7])
    out = rerank_from_logits(initial, np.zeros(3), 0.0, 1.0)
    np.testing.assert_array_equal(out.ids, [5, 2, 9])


# ---------------------------------------------------------------- tuning


def test_default_grid_has_126_cells():
    assert len(LAMBDA_GRID) == 21 and len(GAMMA_GRID) == 6
    assert LAMBDA_GRID[0] == 0.0 and LAMBDA_GRID[-1] == 1.0
    assert GAMMA_GRID == (1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0)


def test_constant_logits_tie_break(toy):
    data, params, db = toy
    queries, gt = labeled_queries(data)
    cache = build_cache(db, queries, 19, 8, 8)
    flat = [CachedQuery(c.initial, np.full_like(c.logits, 1.3)) for c in cache]
    res = tune_from_cache(flat, gt)
    assert res.grid.shape == (21, 6)
    assert np.all(res.grid == res.grid[0, 0])
    assert (res.lam, res.gamma) == (0.0, 1e-4)


def test_constructed_case_picks_half():
    def logit(p):
        return np.log(p / (1 - p))

    # positive 101 wins only when global and local evidence are weighted equally
    initial = RankedList(1, [201, 101, 202], [0.9, 0.53, 0.14])
    logits = np.array([logit(0.14), logit(0.53), logit(0.9)])
    res = tune_from_cache([CachedQuery(initial, logits)], {1: {101}}, gamma_grid=(1.0,))
    assert res.lam == 0.5
    assert res.best == 1.0
    assert res.grid[10, 0] == 1.0 and res.grid[9, 0] < 1.0 and res.grid[11, 0] < 1.0
    assert res.grid[0, 0] < 1.0 and res.grid[20, 0] < 1.0


def test_cached_tuning_equals_naive_per_cell(toy):
    data, params, db = toy
    queries, gt = labeled_queries(data)
    queries = queries[:6]
    res = tune_ensemble(db, queries, gt, m=10, l_x=6, l_q=8)
    for a, lam in enumerate(LAMBDA_GRID):
        for b, gamma in enumerate(GAMMA_GRID):
            cfg = EnsembleConfig(lam, gamma, m=10, l_x=6, l_q=8)
            ranked = search(db, queries, cfg)
            naive = map_at_k({q: r.ids for q, r in ranked.items()}, gt, 100)
            assert res.grid[a, b] == pytest.approx(naive, abs=1e-12)


def test_tuning_errors(toy):
    data, params, db = toy
    with pytest.raises(RetrievalError):
        tune_ensemble(db, [], {})
    with pytest.raises(RetrievalError):
        tune_from_cache([CachedQuery(RankedList(1, [2], [0.5]), np.zeros(1))], {})
    with pytest.raises(ValueError):
        tune_from_cache([], {}, lam_grid=())


# ---------------------------------------------------------------- files


def test_ranking_files_roundtrip(tmp_path):
    r = {3: RankedList(3, [5, 1, 9], [0.9, 0.5, 0.1]), 4: RankedList(4, [1, 5], [0.3, 0.2])}
    write_rankings(r, tmp_path / "full.tsv")
    write_rankings(r, tmp_path / "ids.txt", compact=True)
    expected = {3: [5, 1, 9], 4: [1, 5]}
    assert read_rankings(tmp_path / "full.tsv") == expected
    assert read_rankings(tmp_path / "ids.txt") == expected
    assert (tmp_path / "full.tsv").read_text().splitlines()[1] == "3\t1\t5\t0.9"


def test_incompatible_model_rejected(toy, tmp_path):
    data, params, db = toy
    other = init_params(16, dim=16, depth=1, heads=2)
    with pytest.raises(RetrievalError):
        retrieval.Database(db.store, other)


def test_clamp_warning_reported_once_per_search(toy, caplog):
    data, params, db = toy
    search(db, data.ids[:5], EnsembleConfig(m=500, l_x=4, l_q=4))
    assert caplog.text.count("clamped") == 1
