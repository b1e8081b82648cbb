"""Shortest-path graph kernel on the undirected projection of scene graphs.

Node and edge labels are ignored: a graph is summarised by the histogram of
BFS distances over its connected unordered node pairs, and two graphs are
compared with a delta kernel on path lengths.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .graph import SceneGraph, bfs_distances, undirected_adjacency


@dataclass(frozen=True)
class SpProfile:
    histogram: Mapping[int, int] = field(default_factory=dict)

    def __post_init__(self):
        hist = {int(d): int(c) for d, c in sorted(self.histogram.items()) if c}
        if any(d < 1 or c < 0 for d, c in hist.items()):
            raise ValueError(f"invalid shortest-path histogram {hist}")
        object.__setattr__(self, "histogram", hist)

    @property
    def total_pairs(self) -> int:
        return sum(self.histogram.values())

    def to_json(self) -> dict[str, int]:
        return {str(d): c for d, c in self.histogram.items()}

    @classmethod
    def from_json(cls, doc: Mapping[str, int]) -> "SpProfile":
        return cls({int(d): int(c) for d, c in doc.items()})


def sp_profile(g: SceneGraph) -> SpProfile:
    adj = undirected_adjacency(g)
    ids = list(adj)
    pos = {u: i for i, u in enumerate(ids)}
    hist: Counter[int] = Counter()
    for u in ids:
        for v, d in bfs_distances(adj, u).items():
            if pos[v] > pos[u]:
                hist[d] += 1
    return SpProfile(hist)


def sp_kernel_raw(p: SpProfile, q: SpProfile) -> float:
    if len(q.histogram) < len(p.histogram):
        p, q = q, p
    return float(sum(c * q.histogram.get(d, 0) for d, c in p.histogram.items()))


def sp_similarity_profiles(p: SpProfile, q: SpProfile) -> float:
    """Cosine-normalised kernel; 0 when either self-kernel vanishes."""
    kpp, kqq = sp_kernel_raw(p, p), sp_kernel_raw(q, q)
    if kpp == 0.0 or kqq == 0.0:
        return 0.0
    if p.histogram == q.histogram:
        return 1.0
    return min(1.0, sp_kernel_raw(p, q) / math.sqrt(kpp * kqq))


def sp_similarity(g1: SceneGraph, g2: SceneGraph) -> float:
    return sp_similarity_profiles(sp_profile(g1), sp_profile(g2))


def sp_gram(profiles: Sequence[SpProfile], normalize: bool = False) -> np.ndarray:
    """Kernel matrix over a set of profiles (raw or normalised)."""
    f = sp_similarity_profiles if normalize else sp_kernel_raw
    n = len(profiles)
    K = np.zeros((n, n))
    for i in range(n):
        for j in range(i, n):
            K[i, j] = K[j, i] = f(profiles[i], profiles[j])
    return K
