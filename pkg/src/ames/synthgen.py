"""Deterministic synthetic instance-retrieval data.

Each class owns a set of prototype descriptors (the "object").  Every image
of the class carries noisy copies of them mixed with random clutter;
distractor images hold clutter only.  Strengths favour planted descriptors
so the strongest-L prefix mostly keeps the object.  The global descriptor is
the normalized mean of all locals, which makes it informative but diluted
by clutter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import DescriptorSet


@dataclass
class SynthConfig:
    classes: int = 20
    images_per_class: int = 10
    distractors: int = 200
    dim: int = 64
    l_max: int = 50
    planted_fraction: float = 0.3
    noise: float = 0.1
    seed: int = 0
    val_fraction: float = 0.5
    split: str = "images"  # "images": every class in both splits; "classes": disjoint

    def __post_init__(self):
        if not 0.0 < self.planted_fraction <= 1.0:
            raise ValueError("planted_fraction must lie in (0, 1]")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.planted_fraction * self.l_max < 1:
            raise ValueError("planted_fraction * l_max must be at least 1")
        if self.n_planted > self.l_max:
            raise ValueError("more planted descriptors than l_max")
        if self.split not in ("images", "classes"):
            raise ValueError(f"unknown split {self.split!r}")

    @property
    def n_planted(self) -> int:
        # guard against float fuzz such as 0.3 * 50 = 15.000000000000002
        return math.ceil(round(self.planted_fraction * self.l_max, 9))


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _image(rng, protos, cfg: SynthConfig):
    n_p = 0 if protos is None else len(protos)
    rows = np.empty((cfg.l_max, cfg.dim))
    planted = np.zeros(cfg.l_max, dtype=bool)
    if n_p:
        noise = rng.standard_normal((n_p, cfg.dim)) * (cfg.noise / math.sqrt(cfg.dim))
        rows[:n_p] = _unit(protos + noise)
        planted[:n_p] = True
    rows[n_p:] = _unit(rng.standard_normal((cfg.l_max - n_p, cfg.dim)))
    strength = planted + 2.5 * cfg.noise * rng.standard_normal(cfg.l_max)
    order = np.argsort(-strength, kind="stable")
    return rows[order], strength[order]


def generate_dataset(cfg: SynthConfig):
    """Returns (train, val, labels) where labels maps image id to class id.

    With ``split="images"`` each class contributes images to both parts; with
    ``"classes"`` the class sets are disjoint.  Distractors (label -1) are
    split by ``val_fraction`` either way.  Image ids are consecutive integers.
    """
    rng = np.random.default_rng(cfg.seed)
    n_val_cls = int(round(cfg.classes * cfg.val_fraction))
    val_classes = set(rng.permutation(cfg.classes)[:n_val_cls].tolist())
    n_val_dis = int(round(cfg.distractors * cfg.val_fraction))
    n_val_img = int(round(cfg.images_per_class * cfg.val_fraction))

    locs, strs, labels, split = [], [], [], []
    for c in range(cfg.classes):
        protos = _unit(rng.standard_normal((cfg.n_planted, cfg.dim)))
        for k in range(cfg.images_per_class):
            r, s = _image(rng, protos, cfg)
            locs.append(r)
            strs.append(s)
            labels.append(c)
            split.append(c in val_classes if cfg.split == "classes" else k < n_val_img)
    for i in range(cfg.distractors):
        r, s = _image(rng, None, cfg)
        locs.append(r)
        strs.append(s)
        labels.append(-1)
        split.append(i < n_val_dis)

    locals_ = np.stack(locs)
    strengths = np.stack(strs)
    globals_ = _unit(locals_.mean(axis=1))
    labels = np.array(labels, dtype=np.int64)
    ids = np.arange(len(labels), dtype=np.int64)
    full = DescriptorSet(ids, labels, locals_, strengths, globals_)
    is_val = np.array(split)
    train = full.subset(np.flatnonzero(~is_val))
    val = full.subset(np.flatnonzero(is_val))
    label_map = {int(i): int(lab) for i, lab in zip(ids, labels)}
    return train, val, label_map


def write_labels(path, train: DescriptorSet, val: DescriptorSet):
    """Tab-separated ``image_id class_id split`` lines."""
    lines = ["image_id\tclass_id\tsplit"]
    for part, name in ((train, "train"), (val, "val")):
        for i, lab in zip(part.ids, part.labels):
            lines.append(f"{int(i)}\t{int(lab)}\t{name}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_labels(path) -> dict[int, tuple[int, str]]:
    out = {}
    for row in Path(path).read_text().splitlines()[1:]:
        i, lab, name = row.split("\t")
        out[int(i)] = (int(lab), name)
    return out
