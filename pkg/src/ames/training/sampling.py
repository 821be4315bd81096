"""Triplet mining and descriptor-set length sampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

NEIGHBORS = 300


@dataclass(frozen=True)
class PairExample:
    anchor: int  # positions into the training set, not image ids
    other: int
    label: int
    l_x: int
    l_q: int


def nearest_neighbors(globals_, k: int = NEIGHBORS):
    """Top-k neighbors by dot product, excluding self.

    Returns (index, similarity) arrays of shape (n, k'); ties go to the
    lower index.
    """
    g = np.asarray(globals_, dtype=np.float64)
    n = len(g)
    k = min(k, n - 1)
    sims = g @ g.T
    np.fill_diagonal(sims, -np.inf)
    order = np.lexsort((np.broadcast_to(np.arange(n), (n, n)), -sims), axis=-1)[:, :k]
    return order, np.take_along_axis(sims, order, axis=1)


def cubed_choice(candidates, sims, rng):
    """Draw one candidate with probability proportional to max(sim, 0)^3."""
    candidates = np.asarray(candidates)
    w = np.clip(np.asarray(sims, dtype=np.float64), 0.0, None) ** 3
    total = w.sum()
    if total <= 0:
        return int(candidates[rng.integers(len(candidates))])
    return int(candidates[rng.choice(len(candidates), p=w / total)])


def sample_lengths(l_min: int, l_max: int, rng):
    """Independent uniform integer draws for (L_x, L_q)."""
    if not 1 <= l_min <= l_max:
        raise ValueError(f"invalid length range [{l_min}, {l_max}]")
    lx, lq = rng.integers(l_min, l_max + 1, size=2)
    return int(lx), int(lq)


def epoch_triplets(labels, nn_index, nn_sims, rng):
    """One epoch of (anchor, positive, negative) position triplets.

    Every labeled image with at least one class mate is the anchor exactly
    once, in random order.  Positives and negatives are drawn from the
    anchor's neighbor list with cubed-similarity weights; positives fall back
    to a uniform class mate and negatives to a uniform non-class image when
    the list holds none.
    """
    labels = np.asarray(labels)
    members: dict[int, np.ndarray] = {}
    for lab in np.unique(labels[labels >= 0]):
        idx = np.flatnonzero(labels == lab)
        if len(idx) < 2:
            logger.warning("class %d has a single member; skipped as anchor", lab)
            continue
        members[int(lab)] = idx
    anchors = np.concatenate(list(members.values())) if members else np.empty(0, dtype=int)
    anchors = rng.permutation(np.sort(anchors))
    triplets = []
    for a in anchors:
        lab = int(labels[a])
        nbr, sim = nn_index[a], nn_sims[a]
        same = labels[nbr] == lab
        if same.any():
            pos = cubed_choice(nbr[same], sim[same], rng)
        else:
            mates = members[lab][members[lab] != a]
            pos = int(mates[rng.integers(len(mates))])
        diff = ~same
        if diff.any():
            neg = cubed_choice(nbr[diff], sim[diff], rng)
        else:
            others = np.flatnonzero(labels != lab)
            neg = int(others[rng.integers(len(others))])
        triplets.append((int(a), pos, neg))
    return triplets


def triplets_to_pairs(triplets, l_x: int, l_q: int):
    pairs = []
    for a, p, n in triplets:
        pairs.append(PairExample(a, p, 1, l_x, l_q))
        pairs.append(PairExample(a, n, 0, l_x, l_q))
    return pairs


def sample_triplet_batch(triplets, batch_triplets: int, length_range, rng):
    """Chunk an epoch into batches, drawing one (L_x, L_q) per batch."""
    for start in range(0, len(triplets), batch_triplets):
        chunk = triplets[start : start + batch_triplets]
        l_x, l_q = sample_lengths(length_range[0], length_range[1], rng)
        yield triplets_to_pairs(chunk, l_x, l_q)
