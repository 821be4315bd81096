"""Global ranking, ensemble re-ranking and (lambda, gamma) tuning."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import codec, numerics
from .evaluation import ap_at_k
from .model import AmesParams, forward_tokens, project_descriptors, remap_codes
from .store import DescriptorRecord, Store

logger = logging.getLogger(__name__)

LAMBDA_GRID = tuple(round(0.05 * i, 2) for i in range(21))
GAMMA_GRID = (1e-4, 1e-3, 1e-2, 1e-1, 1e0, 1e1)
PAIR_CHUNK = 256


class RetrievalError(ValueError):
    pass


@dataclass(frozen=True)
class EnsembleConfig:
    lam: float = 0.5
    gamma: float = 1.0
    m: int = 1600
    l_x: int = 600
    l_q: int = 600

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda {self.lam} outside [0, 1]")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.m < 0:
            raise ValueError("m must be non-negative")
        if self.l_x < 1 or self.l_q < 1:
            raise ValueError("L_x and L_q must be positive")


@dataclass
class RankedList:
    query_id: int
    ids: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.ids.shape != self.scores.shape:
            raise ValueError("ids and scores differ in length")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("duplicate ids in ranking")

    def __len__(self):
        return len(self.ids)

    @property
    def entries(self):
        return list(zip(self.ids.tolist(), self.scores.tolist()))


def ensemble_score(s_g, logit, lam: float, gamma: float):
    """lam * s_g + (1 - lam) * sigmoid(gamma * logit)."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda {lam} outside [0, 1]")
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    s_g = np.asarray(s_g, dtype=np.float64)
    s_l = numerics.sigmoid(gamma * np.asarray(logit, dtype=np.float64))
    out = lam * s_g + (1.0 - lam) * s_l
    return float(out) if out.ndim == 0 else out


def order_by_score(scores, ids):
    """Indices sorting by descending score, ties by ascending id."""
    return np.lexsort((np.asarray(ids), -np.asarray(scores, dtype=np.float64)))


@dataclass
class Query:
    query_id: int
    global_: np.ndarray  # decoded float vector
    tokens: np.ndarray  # projected (L_q, d)


class Database:
    """Store plus what is needed to score against it.

    Decoded globals are cached on construction; projected local tokens are
    decoded per image on first use and cached.
    """

    def __init__(self, store: Store, params: AmesParams | None = None, codebook=None,
                 precision: str = "float64"):
        self.store = store
        self.params = params
        self.dtype = np.dtype(precision)
        if self.dtype not in (np.float32, np.float64):
            raise ValueError(f"unsupported precision {precision!r}")
        # scoring copy of the weights in the working precision
        self.scorer = params
        if params is not None and self.dtype != np.float64:
            self.scorer = params.with_tensors({k: v.astype(self.dtype) for k, v in params.tensors.items()})
        self.codebook = codebook
        h = store.header
        if len(store) == 0:
            raise RetrievalError("empty store")
        if h.global_encoding != "fp16" and codebook is None:
            raise RetrievalError(f"{h.global_encoding} globals need a PQ codebook")
        if params is not None:
            _check_compatible(h, params)
        self.ids = store.ids
        self.globals = self.decode_global(store.global_payloads())
        self._pos = {int(i): k for k, i in enumerate(self.ids)}
        self._tokens: dict[int, np.ndarray] = {}

    @property
    def l_max(self):
        return self.store.header.l_max

    def decode_global(self, payload):
        payload = np.asarray(payload)
        if self.store.header.global_encoding == "fp16":
            return payload.astype(np.float64)
        return codec.pq_decode(payload, self.codebook)

    def decode_locals(self, payload):
        """Stored local payload -> projected tokens."""
        h = self.store.header
        if self.params is None:
            raise RetrievalError("decoding local descriptors needs a model")
        if h.local_encoding == "bin":
            bits = codec.unpack_codes(payload, h.d)
            return remap_codes(self.params, bits).astype(self.dtype)
        locs = np.asarray(payload, dtype=np.float64)
        if h.projected:
            return locs.astype(self.dtype)
        return project_descriptors(self.params, locs, smooth=False).astype(self.dtype)

    def tokens(self, image_id, length: int) -> np.ndarray:
        key = int(image_id)
        full = self._tokens.get(key)
        if full is None:
            full = self.decode_locals(self.store.get(key).locals)
            self._tokens[key] = full
        return full[:length]

    def query(self, image_id, l_q: int) -> Query:
        """A stored image used as a query."""
        rec = self.store.get(image_id)
        return self.query_from_record(rec, l_q)

    def query_from_record(self, rec: DescriptorRecord, l_q: int) -> Query:
        l_q = self.clamp_length(l_q, rec.length)
        return Query(rec.image_id, self.decode_global(rec.global_),
                     self.decode_locals(rec.locals[:l_q]))

    def clamp_length(self, length: int, available: int | None = None) -> int:
        available = self.l_max if available is None else available
        if length > available:
            logger.info("L=%d exceeds the %d stored descriptors; using %d", length, available, available)
        return min(length, available)


def _check_compatible(header, params: AmesParams):
    if header.local_encoding == "bin":
        if params.variant != "bin":
            raise RetrievalError("binary store needs a binary-variant model")
        if params.dim != header.d:
            raise RetrievalError(f"store has {header.d}-bit codes, model expects {params.dim}")
    elif header.projected:
        if params.variant != "fp":
            raise RetrievalError("projected fp16 store needs a fp-variant model")
        if params.dim != header.d:
            raise RetrievalError(f"store tokens are {header.d}-dim, model expects {params.dim}")
    elif params.input_dim != header.d:
        raise RetrievalError(f"raw descriptors are {header.d}-dim, model expects {params.input_dim}")


def global_rank(query_global, db: Database, top_k: int | None = None, exclude=(), query_id=-1) -> RankedList:
    """Rank the database by dot product with the query global descriptor."""
    scores = db.globals @ np.asarray(query_global, dtype=np.float64)
    ids = db.ids
    if exclude:
        keep = ~np.isin(ids, list(exclude))
        scores, ids = scores[keep], ids[keep]
    order = order_by_score(scores, ids)
    if top_k is not None:
        order = order[:top_k]
    return RankedList(query_id, ids[order], scores[order])


def pair_logits(params: AmesParams, x_tokens, q_tokens) -> np.ndarray:
    """Logits of one query against a stack of database token sets (B, L_x, d)."""
    x_tokens = numerics.as_float(x_tokens)
    q_tokens = np.asarray(q_tokens, dtype=x_tokens.dtype)
    out = np.empty(len(x_tokens))
    for s in range(0, len(x_tokens), PAIR_CHUNK):
        xs = x_tokens[s:s + PAIR_CHUNK]
        qs = np.broadcast_to(q_tokens, (len(xs), *np.shape(q_tokens)))
        out[s:s + PAIR_CHUNK] = forward_tokens(params, xs, qs).logit
    return out


def candidate_logits(query: Query, db: Database, cand_ids, l_x: int) -> np.ndarray:
    if len(cand_ids) == 0:
        return np.empty(0)
    l_x = db.clamp_length(l_x)
    x = np.stack([db.tokens(i, l_x) for i in cand_ids])
    return pair_logits(db.scorer, x, query.tokens)


def _clamp_m(m, n, warned=None):
    """Clamp m to the candidate count; ``warned`` collects (m, n) pairs already reported."""
    if m > n:
        if warned is None or (m, n) not in warned:
            logger.warning("m=%d exceeds %d candidates; clamped", m, n)
            if warned is not None:
                warned.add((m, n))
        return n
    return m


def rerank_from_logits(initial: RankedList, logits, lam: float, gamma: float) -> RankedList:
    """Re-sort the first len(logits) entries by ensemble score.

    Ties keep their global order (which already breaks ties by id), so a
    degenerate ensemble reproduces the initial ranking.
    """
    m = len(logits)
    head_sg = initial.scores[:m]
    s = ensemble_score(head_sg, logits, lam, gamma) if m else np.empty(0)
    order = np.lexsort((np.arange(m), -np.asarray(s)))
    ids = np.concatenate([initial.ids[:m][order], initial.ids[m:]])
    scores = np.concatenate([np.asarray(s)[order], initial.scores[m:]])
    return RankedList(initial.query_id, ids, scores)


def rerank(query: Query, db: Database, config: EnsembleConfig, exclude=(), warned=None) -> RankedList:
    """Two-stage search: global ranking, then ensemble scores on the top m.

    Entries below m keep their global order and global scores, so scores are
    non-increasing within each block but not necessarily across the boundary.
    """
    initial = global_rank(query.global_, db, exclude=exclude, query_id=query.query_id)
    m = _clamp_m(config.m, len(initial), warned)
    if m == 0:
        return initial
    logits = candidate_logits(query, db, initial.ids[:m], config.l_x)
    return rerank_from_logits(initial, logits, config.lam, config.gamma)


def search(db: Database, query_ids, config: EnsembleConfig, exclude_self=True) -> dict[int, RankedList]:
    out, warned = {}, set()
    for qid in query_ids:
        q = db.query(qid, config.l_q)
        out[int(qid)] = rerank(q, db, config, exclude=(int(qid),) if exclude_self else (), warned=warned)
    return out


# ----------------------------------------------------------------------------
# tuning


@dataclass
class TuneResult:
    lam: float
    gamma: float
    grid: np.ndarray  # mAP@k per (lambda, gamma) cell
    lam_grid: tuple
    gamma_grid: tuple

    @property
    def best(self) -> float:
        return float(self.grid.max())


@dataclass
class CachedQuery:
    """Global ranking of one validation query plus logits of its top m."""

    initial: RankedList
    logits: np.ndarray


def tune_from_cache(cache, ground_truth, lam_grid=LAMBDA_GRID, gamma_grid=GAMMA_GRID, k: int = 100) -> TuneResult:
    """Grid search over (lambda, gamma) using precomputed logits.

    The first cell with the best mAP@k wins, which is the smallest lambda and
    then the smallest gamma since both grids are scanned in ascending order.
    """
    lam_grid = tuple(sorted(lam_grid))
    gamma_grid = tuple(sorted(gamma_grid))
    if not lam_grid or not gamma_grid:
        raise ValueError("empty tuning grid")
    usable = [c for c in cache if ground_truth.get(c.initial.query_id)]
    if not usable:
        raise RetrievalError("empty validation set")
    grid = np.zeros((len(lam_grid), len(gamma_grid)))
    for a, lam in enumerate(lam_grid):
        for b, gamma in enumerate(gamma_grid):
            aps = [
                ap_at_k(rerank_from_logits(c.initial, c.logits, lam, gamma).ids,
                        ground_truth[c.initial.query_id], k)
                for c in usable
            ]
            grid[a, b] = np.mean(aps)
    best = np.flatnonzero(grid == grid.max())[0]
    a, b = divmod(int(best), len(gamma_grid))
    return TuneResult(lam_grid[a], gamma_grid[b], grid, lam_grid, gamma_grid)


def rankings_from_cache(cache, lam: float, gamma: float) -> dict[int, RankedList]:
    return {c.initial.query_id: rerank_from_logits(c.initial, c.logits, lam, gamma) for c in cache}


def build_cache(db: Database, query_ids, m: int, l_x: int, l_q: int, exclude_self=True):
    cache, warned = [], set()
    for qid in query_ids:
        q = db.query(qid, l_q)
        initial = global_rank(q.global_, db, exclude=(int(qid),) if exclude_self else (), query_id=int(qid))
        mm = _clamp_m(m, len(initial), warned)
        cache.append(CachedQuery(initial, candidate_logits(q, db, initial.ids[:mm], l_x)))
    return cache


def tune_ensemble(
    db: Database,
    query_ids,
    ground_truth,
    m: int = 400,
    l_x: int = 600,
    l_q: int = 600,
    lam_grid=LAMBDA_GRID,
    gamma_grid=GAMMA_GRID,
    k: int = 100,
) -> TuneResult:
    """Pick (lambda, gamma) maximizing validation mAP@k; logits computed once."""
    query_ids = list(query_ids)
    if not query_ids:
        raise RetrievalError("empty validation set")
    cache = build_cache(db, query_ids, m, l_x, l_q)
    return tune_from_cache(cache, ground_truth, lam_grid, gamma_grid, k)


# ----------------------------------------------------------------------------
# ranking files


def write_rankings(rankings: dict, path, compact: bool = False):
    """TSV ``query_id rank db_id score`` (rank from 1), or one line per query of ordered ids."""
    lines = []
    if compact:
        for qid, rl in rankings.items():
            lines.append(f"{qid}\t" + " ".join(str(int(i)) for i in rl.ids))
    else:
        lines.append("query_id\trank\tdb_id\tscore")
        for qid, rl in rankings.items():
            for r, (i, s) in enumerate(zip(rl.ids, rl.scores), start=1):
                lines.append(f"{qid}\t{r}\t{int(i)}\t{s:.9g}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_rankings(path) -> dict[int, list[int]]:
    """Ordered id lists from either ranking format."""
    text = Path(path).read_text().splitlines()
    out: dict[int, list[int]] = {}
    if text and text[0].startswith("query_id\t"):
        for row in text[1:]:
            q, _, i, _ = row.split("\t")
            out.setdefault(int(q), []).append(int(i))
        return out
    for row in text:
        if not row:
            continue
        q, _, rest = row.partition("\t")
        out[int(q)] = [int(x) for x in rest.split()]
    return out
