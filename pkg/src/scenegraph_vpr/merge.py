"""Fuse per-frame scene graphs of one place into a single place-level graph.

Nodes with the same label are linked when the TF-IDF cosine of their
attribute documents reaches a threshold; linked nodes are merged through
union-find so the result does not depend on frame order.  Edges are then
remapped onto merged nodes and deduplicated.
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Sequence

from .errors import EmptyInput
from .graph import SceneEdge, SceneGraph, SceneNode, canonical_node_order


@dataclass(frozen=True)
class MergeConfig:
    threshold: float = 0.7
    allow_intra_frame_merge: bool = True

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must lie in [0, 1], got {self.threshold}")


@dataclass
class MergeResult:
    merged: SceneGraph
    node_map: dict[tuple[int, str], str] = field(default_factory=dict)
    component_sizes: list[int] = field(default_factory=list)


class UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.rank = [0] * n

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> int:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1
        return ra

    def groups(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = defaultdict(list)
        for x in range(len(self.parent)):
            out[self.find(x)].append(x)
        return dict(out)


def attribute_tokens(attributes: Sequence[str]) -> list[str]:
    return [tok for a in attributes for tok in a.split()]


def _idf(corpus: Sequence[Sequence[str]]) -> dict[str, float]:
    n = len(corpus)
    df = Counter(tok for doc in corpus for tok in set(doc))
    return {tok: math.log((1 + n) / (1 + c)) + 1.0 for tok, c in df.items()}


def _unit_vector(doc: Sequence[str], idf: dict[str, float]) -> dict[str, float]:
    vec = {tok: c * idf[tok] for tok, c in Counter(doc).items()}
    norm = math.sqrt(sum(v * v for v in vec.values()))
    return {tok: v / norm for tok, v in vec.items()}


def _cosine(a: dict[str, float], b: dict[str, float]) -> float:
    if not a and not b:
        return 1.0
    if not a or not b:
        return 0.0
    if a == b:
        return 1.0
    if len(b) < len(a):
        a, b = b, a
    return min(1.0, max(0.0, sum(v * b.get(t, 0.0) for t, v in a.items())))


def tfidf_cosine(doc_a: Sequence[str], doc_b: Sequence[str], corpus: Sequence[Sequence[str]]) -> float:
    """Cosine of smoothed TF-IDF vectors (raw tf, idf = ln((1+N)/(1+df)) + 1)."""
    idf = _idf(corpus)
    for tok in (*doc_a, *doc_b):
        idf.setdefault(tok, math.log(1 + len(corpus)) + 1.0)
    return _cosine(_unit_vector(doc_a, idf), _unit_vector(doc_b, idf))


def merge_graphs(frames: Sequence[SceneGraph], cfg: MergeConfig | None = None) -> MergeResult:
    cfg = cfg or MergeConfig()
    if not frames:
        raise EmptyInput("merge_graphs needs at least one frame")

    items = [(fi, node) for fi, g in enumerate(frames) for node in g.nodes]
    docs = [attribute_tokens(node.attributes) for _, node in items]
    idf = _idf(docs)
    vectors = [_unit_vector(d, idf) for d in docs]

    by_label: dict[str, list[int]] = defaultdict(list)
    for k, (_, node) in enumerate(items):
        by_label[node.label].append(k)

    uf = UnionFind(len(items))
    for members in by_label.values():
        for i, a in enumerate(members):
            for b in members[i + 1:]:
                if items[a][0] == items[b][0] and not cfg.allow_intra_frame_merge:
                    continue
                if _cosine(vectors[a], vectors[b]) >= cfg.threshold:
                    uf.union(a, b)

    # Temporary ids come from member content, so they do not depend on frame order.
    root_id: dict[int, str] = {}
    nodes = []
    used: Counter[str] = Counter()
    groups = sorted(
        uf.groups().values(),
        key=lambda ms: sorted((items[m][1].content_key, items[m][1].attributes) for m in ms),
    )
    for members in groups:
        label = items[members[0]][1].label
        attrs = sorted({a for m in members for a in items[m][1].attributes})
        key = json.dumps(sorted((items[m][1].content_key, items[m][1].attributes) for m in members))
        used[key] += 1
        tmp = f"{key}#{used[key]}"
        for m in members:
            root_id[m] = tmp
        nodes.append(SceneNode(tmp, label, tuple(attrs)))

    index_of = {(fi, node.id): k for k, (fi, node) in enumerate(items)}
    edge_keys = set()
    for fi, g in enumerate(frames):
        for e in g.edges:
            s = root_id[index_of[(fi, e.source)]]
            t = root_id[index_of[(fi, e.target)]]
            if s != t:
                edge_keys.add((s, t, e.relation))
    edges = [SceneEdge(s, t, r) for s, t, r in sorted(edge_keys)]

    meta = {}
    place_ids = {g.meta.get("place_id") for g in frames}
    if len(place_ids) == 1 and None not in place_ids:
        meta["place_id"] = place_ids.pop()

    raw = SceneGraph(nodes, edges, meta)
    merged = raw.canonical()
    renamed = {old: f"n{i}" for i, old in enumerate(canonical_node_order(raw))}
    node_map = {(fi, node.id): renamed[root_id[k]] for k, (fi, node) in enumerate(items)}
    sizes = Counter(node_map.values())
    return MergeResult(merged, node_map, [sizes[n.id] for n in merged.nodes])
