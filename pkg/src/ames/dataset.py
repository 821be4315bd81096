"""In-memory descriptor collections used for training and evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class DescriptorSet:
    """Images with strength-sorted local descriptors and a global vector.

    ``labels`` holds a class id per image, or -1 for unlabeled distractors.
    """

    ids: np.ndarray  # (n,) int64
    labels: np.ndarray  # (n,) int64
    locals: np.ndarray  # (n, L_max, D)
    strengths: np.ndarray  # (n, L_max), non-increasing per row
    globals: np.ndarray  # (n, d_g), unit norm

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def l_max(self) -> int:
        return self.locals.shape[1]

    @property
    def local_dim(self) -> int:
        return self.locals.shape[2]

    def subset(self, index) -> "DescriptorSet":
        index = np.asarray(index)
        return DescriptorSet(
            self.ids[index], self.labels[index], self.locals[index],
            self.strengths[index], self.globals[index],
        )

    def ground_truth(self, query_pos: int) -> set[int]:
        """Ids sharing the query's class, excluding the query itself."""
        lab = self.labels[query_pos]
        if lab < 0:
            return set()
        same = (self.labels == lab) & (self.ids != self.ids[query_pos])
        return set(self.ids[same].tolist())
