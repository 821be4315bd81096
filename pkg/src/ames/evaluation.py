"""Ranking metrics, memory accounting and trade-off export."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass

import numpy as np
from scipy import stats

logger = logging.getLogger(__name__)

GLOBAL_MODES = ("fp16", "pq1", "pq4", "pq8")
LOCAL_MODES = ("fp16", "bin")
TRADEOFF_COLUMNS = ("l_x", "kb", "metric", "variant")


def average_precision(ranked_ids, positives, mode: str = "standard", junk=None) -> float:
    """AP of one ranking.

    ``standard`` averages precision at the rank of every positive (missing
    positives count as zero).  ``trapezoid`` integrates the precision-recall
    steps with trapezoids, the convention of the revisited Oxford/Paris
    protocol.  ``junk`` ids are dropped from the ranking first.
    """
    positives = set(positives)
    if not positives:
        raise ValueError("positive set is empty")
    ranked = list(ranked_ids)
    if junk:
        junk = set(junk)
        ranked = [r for r in ranked if r not in junk]
    hits = np.flatnonzero(np.fromiter((r in positives for r in ranked), dtype=bool, count=len(ranked)))
    n_pos = len(positives)
    if mode == "standard":
        return float(np.sum(np.arange(1, len(hits) + 1) / (hits + 1)) / n_pos)
    if mode == "trapezoid":
        ap = 0.0
        step = 1.0 / n_pos
        for j, rank in enumerate(hits):
            prec0 = 1.0 if rank == 0 else j / rank
            prec1 = (j + 1) / (rank + 1)
            ap += (prec0 + prec1) * step / 2.0
        return float(ap)
    raise ValueError(f"unknown AP mode {mode!r}")


def ap_at_k(ranked_ids, positives, k: int) -> float:
    """AP over the top-k list normalized by min(|positives|, k)."""
    positives = set(positives)
    top = list(ranked_ids)[:k]
    hits = 0
    total = 0.0
    for i, r in enumerate(top, start=1):
        if r in positives:
            hits += 1
            total += hits / i
    return total / min(len(positives), k)


def map_at_k(ranked_lists, ground_truth, k: int = 100) -> float:
    """Mean AP@k over queries; queries without positives are skipped."""
    if k < 1:
        raise ValueError("k must be at least 1")
    aps = []
    for qid, ranked in ranked_lists.items():
        pos = ground_truth.get(qid, set())
        if not pos:
            logger.warning("query %s has no positives; excluded", qid)
            continue
        aps.append(ap_at_k(ranked, pos, k))
    return float(np.mean(aps)) if aps else float("nan")


def mean_average_precision(ranked_lists, ground_truth, mode="standard", junk=None) -> float:
    aps = []
    for qid, ranked in ranked_lists.items():
        pos = ground_truth.get(qid, set())
        if not pos:
            logger.warning("query %s has no positives; excluded", qid)
            continue
        aps.append(average_precision(ranked, pos, mode, (junk or {}).get(qid)))
    return float(np.mean(aps)) if aps else float("nan")


def pair_auc(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties count half)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative pairs")
    ranks = stats.rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


# ----------------------------------------------------------------------------
# memory


@dataclass(frozen=True)
class MemorySpec:
    global_mode: str
    local_mode: str
    l_x: int
    d: int = 128
    d_g: int = 2048

    def __post_init__(self):
        if self.global_mode not in GLOBAL_MODES:
            raise ValueError(f"unknown global mode {self.global_mode!r}")
        if self.local_mode not in LOCAL_MODES:
            raise ValueError(f"unknown local mode {self.local_mode!r}")
        if self.global_mode != "fp16" and self.d_g % pq_sub_dim(self.global_mode):
            raise ValueError(f"d_g={self.d_g} not divisible by {pq_sub_dim(self.global_mode)}")
        if self.local_mode == "bin" and self.d % 8:
            raise ValueError(f"d={self.d} bits do not pack into whole bytes")
        if self.l_x < 0:
            raise ValueError("l_x must be non-negative")


def pq_sub_dim(mode: str) -> int:
    return int(mode[2:])


def global_bytes(global_mode: str, d_g: int) -> int:
    if global_mode == "fp16":
        return 2 * d_g
    return d_g // pq_sub_dim(global_mode)


def local_bytes(local_mode: str, d: int) -> int:
    return 2 * d if local_mode == "fp16" else d // 8


def memory_bytes(spec: MemorySpec) -> int:
    """Descriptor payload per database image (no ids, strengths or model)."""
    return global_bytes(spec.global_mode, spec.d_g) + spec.l_x * local_bytes(spec.local_mode, spec.d)


def memory_per_image(spec: MemorySpec) -> float:
    """Payload in KB (1 KB = 1024 bytes)."""
    return memory_bytes(spec) / 1024.0


# ----------------------------------------------------------------------------
# trade-off curves


def export_tradeoff(rows, variant: str = "") -> str:
    """CSV text for (l_x, kb, metric[, variant]) rows, sorted by l_x."""
    rows = [tuple(r) for r in rows]
    if not rows:
        raise ValueError("no rows to export")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRADEOFF_COLUMNS)
    for r in sorted(rows, key=lambda r: r[0]):
        l_x, kb, metric = r[:3]
        var = r[3] if len(r) > 3 else variant
        metric_s = "" if metric is None else repr(float(metric))
        writer.writerow((int(l_x), repr(float(kb)), metric_s, var))
    return buf.getvalue()


def parse_tradeoff(text: str):
    reader = csv.DictReader(io.StringIO(text))
    out = []
    for row in reader:
        metric = float(row["metric"]) if row["metric"] else None
        out.append((int(row["l_x"]), float(row["kb"]), metric, row["variant"]))
    return out


def tradeoff_rows(l_values, global_mode="pq8", local_mode="bin", d=128, d_g=2048, metrics=None):
    """Rows for a sweep over L_x with KB taken from :func:`memory_per_image`."""
    metrics = metrics or {}
    return [
        (l, memory_per_image(MemorySpec(global_mode, local_mode, l, d, d_g)), metrics.get(l))
        for l in l_values
    ]


def write_report(rows, path=None) -> str:
    """Plain-text table of (dataset, metric, value, config hash)."""
    lines = ["dataset\tmetric\tvalue\tconfig"]
    for ds, metric, value, cfg in rows:
        lines.append(f"{ds}\t{metric}\t{value:.6f}\t{cfg}")
    text = "\n".join(lines) + "\n"
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
