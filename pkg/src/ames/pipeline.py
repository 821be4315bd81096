"""End-to-end helpers: in-memory data to store, model evaluation on a split."""

from __future__ import annotations

import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evaluation, retrieval
from .dataset import DescriptorSet
from .model import AmesParams, forward_raw
from .store import encode_records, read_store, write_store


def build_database(data: DescriptorSet, params: AmesParams, directory, name="db",
                   global_encoding="fp16", codebook=None, precision="float64") -> retrieval.Database:
    """Encode ``data`` with the model's codec, write a store, open it."""
    local = "bin" if params.variant == "bin" else "fp16"
    header, records = encode_records(data, global_encoding, local, params, codebook)
    path = Path(directory) / f"{name}.store"
    write_store(records, header, path)
    return retrieval.Database(read_store(path), params, codebook, precision)


def labeled_queries(data: DescriptorSet):
    """Ids of images with at least one same-class mate, and their positives."""
    gt = {}
    for k in np.flatnonzero(data.labels >= 0):
        pos = data.ground_truth(k)
        if pos:
            gt[int(data.ids[k])] = pos
    return list(gt), gt


def validation_pairs(data: DescriptorSet, negatives_per_positive: int = 1, seed: int = 0):
    """All same-class ordered pairs plus random different-label negatives.

    Returns (anchor positions, other positions, labels).
    """
    rng = np.random.default_rng(seed)
    anchors, others, labels = [], [], []
    idx = np.flatnonzero(data.labels >= 0)
    for a in idx:
        mates = idx[(data.labels[idx] == data.labels[a]) & (idx != a)]
        pool = np.flatnonzero(data.labels != data.labels[a])
        for b in mates:
            anchors.append(a)
            others.append(b)
            labels.append(1)
        for b in rng.choice(pool, size=len(mates) * negatives_per_positive, replace=len(pool) < len(mates)):
            anchors.append(a)
            others.append(int(b))
            labels.append(0)
    return np.array(anchors), np.array(others), np.array(labels)


def pair_logits_raw(params: AmesParams, data: DescriptorSet, anchors, others, l_x, l_q, chunk=256):
    out = np.empty(len(anchors))
    for s in range(0, len(anchors), chunk):
        a, o = anchors[s:s + chunk], others[s:s + chunk]
        out[s:s + chunk] = forward_raw(params, data.locals[o, :l_x], data.locals[a, :l_q]).logit
    return out


def validation_auc(params: AmesParams, data: DescriptorSet, l_x=None, l_q=None, seed=0) -> float:
    """Pair AUC over :func:`validation_pairs` (X = other image, Q = anchor)."""
    l_x = l_x or data.l_max
    l_q = l_q or data.l_max
    a, o, y = validation_pairs(data, seed=seed)
    return evaluation.pair_auc(pair_logits_raw(params, data, a, o, l_x, l_q), y)


@dataclass
class RetrievalReport:
    global_map: float
    ensemble_map: float
    lam: float
    gamma: float

    @property
    def gain(self) -> float:
        return self.ensemble_map - self.global_map


def evaluate_map(db: retrieval.Database, queries, gt, cfg: retrieval.EnsembleConfig) -> float:
    rankings = retrieval.search(db, queries, cfg)
    return evaluation.mean_average_precision({q: r.ids for q, r in rankings.items()}, gt)


def _map(rankings, gt):
    return evaluation.mean_average_precision({q: r.ids for q, r in rankings.items()}, gt)


def retrieval_report(params: AmesParams, data: DescriptorSet, l_x=None, l_q=None,
                     precision="float32", directory=None) -> RetrievalReport:
    """Global-only versus tuned-ensemble mAP with every labeled image as a query.

    The whole candidate list is re-ranked.  Logits are computed once and
    shared by the (lambda, gamma) search and the final scoring, so lambda and
    gamma are tuned on the same split they are reported on.
    """
    l_x = l_x or data.l_max
    l_q = l_q or data.l_max
    with tempfile.TemporaryDirectory(dir=directory) as tmp:
        db = build_database(data, params, tmp, "eval", precision=precision)
        queries, gt = labeled_queries(data)
        cache = retrieval.build_cache(db, queries, len(data) - 1, l_x, l_q)
    tuned = retrieval.tune_from_cache(cache, gt)
    glob = _map({c.initial.query_id: c.initial for c in cache}, gt)
    ens = _map(retrieval.rankings_from_cache(cache, tuned.lam, tuned.gamma), gt)
    return RetrievalReport(glob, ens, tuned.lam, tuned.gamma)
