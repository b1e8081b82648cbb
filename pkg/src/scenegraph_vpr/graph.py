"""Scene-graph data model, parsing, validation and canonical serialization.

A scene graph holds object nodes (a label plus non-spatial attributes) and
directed relation edges ("building" -left of-> "house").  Values are
immutable once built; every constructor normalizes text and validates
integrity, so any ``SceneGraph`` in hand is a valid one.
"""

from __future__ import annotations

import json
import string
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .errors import IntegrityError, SchemaError

_EDGE_PUNCT = string.punctuation


def normalize_text(text: str) -> str:
    """Lowercase, trim, collapse whitespace and strip punctuation at token edges."""
    tokens = (tok.strip(_EDGE_PUNCT) for tok in text.lower().split())
    return " ".join(tok for tok in tokens if tok)


def _normalize_attributes(attrs: Iterable[str]) -> tuple[str, ...]:
    seen: dict[str, None] = {}
    for a in attrs:
        a = normalize_text(a)
        if a and a not in seen:
            seen[a] = None
    return tuple(seen)


@dataclass(frozen=True)
class SceneNode:
    id: str
    label: str
    attributes: tuple[str, ...] = ()

    def __post_init__(self):
        if not isinstance(self.id, str) or not self.id:
            raise SchemaError(f"node id must be a non-empty string, got {self.id!r}")
        label = normalize_text(self.label)
        if not label:
            raise SchemaError(f"node {self.id!r} has an empty label")
        object.__setattr__(self, "label", label)
        object.__setattr__(self, "attributes", _normalize_attributes(self.attributes))

    @property
    def content_key(self) -> tuple[str, tuple[str, ...]]:
        """(label, sorted attributes): the identity used for sorting and merging."""
        return self.label, tuple(sorted(self.attributes))


@dataclass(frozen=True)
class SceneEdge:
    source: str
    target: str
    relation: str

    def __post_init__(self):
        relation = normalize_text(self.relation)
        if not relation:
            raise SchemaError(f"edge {self.source}->{self.target} has an empty relation")
        object.__setattr__(self, "relation", relation)

    @property
    def key(self) -> tuple[str, str, str]:
        return self.source, self.target, self.relation


@dataclass(frozen=True)
class SceneGraph:
    nodes: tuple[SceneNode, ...] = ()
    edges: tuple[SceneEdge, ...] = ()
    meta: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(self.edges))
        object.__setattr__(self, "meta", dict(self.meta or {}))
        ids = set()
        for n in self.nodes:
            if n.id in ids:
                raise IntegrityError(f"duplicate node id {n.id!r}")
            ids.add(n.id)
        seen = set()
        for e in self.edges:
            for end in (e.source, e.target):
                if end not in ids:
                    raise IntegrityError(f"edge endpoint {end!r} does not resolve to a node")
            if e.source == e.target:
                raise IntegrityError(f"self-loop on node {e.source!r}")
            if e.key in seen:
                raise IntegrityError(f"duplicate edge {e.key}")
            seen.add(e.key)

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    def node(self, node_id: str) -> SceneNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def to_dict(self) -> dict:
        doc = {
            "nodes": [
                {"id": n.id, "label": n.label, "attributes": list(n.attributes)}
                for n in self.nodes
            ],
            "edges": [
                {"source": e.source, "target": e.target, "relation": e.relation}
                for e in self.edges
            ],
        }
        if self.meta:
            doc["meta"] = dict(sorted(self.meta.items()))
        return doc

    def canonical(self) -> "SceneGraph":
        """Return the relabeled graph in canonical node/edge order."""
        order = canonical_node_order(self)
        new_id = {old: f"n{i}" for i, old in enumerate(order)}
        by_id = {n.id: n for n in self.nodes}
        nodes = [SceneNode(new_id[o], by_id[o].label, by_id[o].attributes) for o in order]
        edges = sorted(
            (int(new_id[e.source][1:]), int(new_id[e.target][1:]), e.relation)
            for e in self.edges
        )
        return SceneGraph(
            nodes,
            [SceneEdge(f"n{s}", f"n{t}", r) for s, t, r in edges],
            self.meta,
        )


def canonical_node_order(g: SceneGraph) -> list[str]:
    """Node ids sorted by content, with ties split by colour refinement on edges.

    Ties that survive refinement are between structurally equivalent nodes,
    so the original id only decides among interchangeable candidates.
    """
    nodes = list(g.nodes)
    if not nodes:
        return []
    base = sorted({(n.content_key, n.attributes) for n in nodes})
    rank_of = {k: i for i, k in enumerate(base)}
    color = {n.id: rank_of[(n.content_key, n.attributes)] for n in nodes}
    out_nb: dict[str, list[tuple[str, str]]] = {n.id: [] for n in nodes}
    in_nb: dict[str, list[tuple[str, str]]] = {n.id: [] for n in nodes}
    for e in g.edges:
        out_nb[e.source].append((e.relation, e.target))
        in_nb[e.target].append((e.relation, e.source))

    n_classes = len(set(color.values()))
    for _ in range(len(nodes)):
        sig = {
            nid: (
                color[nid],
                tuple(sorted((r, color[t]) for r, t in out_nb[nid])),
                tuple(sorted((r, color[s]) for r, s in in_nb[nid])),
            )
            for nid in color
        }
        ranks = {s: i for i, s in enumerate(sorted(set(sig.values())))}
        color = {nid: ranks[s] for nid, s in sig.items()}
        if len(ranks) == n_classes:
            break
        n_classes = len(ranks)
    return sorted(color, key=lambda nid: (color[nid], nid))


def canonical_serialize(g: SceneGraph) -> str:
    """Deterministic single-line JSON text of ``g`` with canonical ids ``n0..nK``."""
    return json.dumps(g.canonical().to_dict(), ensure_ascii=False, separators=(",", ":"))


def _require(doc: Mapping, key: str, kind, where: str):
    if key not in doc:
        raise SchemaError(f"{where}: missing field {key!r}")
    value = doc[key]
    if not isinstance(value, kind):
        raise SchemaError(f"{where}: field {key!r} has type {type(value).__name__}")
    return value


def graph_from_dict(doc) -> SceneGraph:
    if not isinstance(doc, dict):
        raise SchemaError("scene graph document must be a JSON object")
    raw_nodes = _require(doc, "nodes", list, "graph")
    raw_edges = _require(doc, "edges", list, "graph")
    meta = doc.get("meta", {})
    if not isinstance(meta, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in meta.items()
    ):
        raise SchemaError("graph: 'meta' must map strings to strings")

    nodes = []
    for i, rn in enumerate(raw_nodes):
        where = f"nodes[{i}]"
        if not isinstance(rn, dict):
            raise SchemaError(f"{where}: expected an object")
        attrs = _require(rn, "attributes", list, where)
        if not all(isinstance(a, str) for a in attrs):
            raise SchemaError(f"{where}: attributes must be strings")
        nodes.append(
            SceneNode(_require(rn, "id", str, where), _require(rn, "label", str, where), tuple(attrs))
        )
    edges = []
    for i, re_ in enumerate(raw_edges):
        where = f"edges[{i}]"
        if not isinstance(re_, dict):
            raise SchemaError(f"{where}: expected an object")
        edges.append(
            SceneEdge(
                _require(re_, "source", str, where),
                _require(re_, "target", str, where),
                _require(re_, "relation", str, where),
            )
        )
    return SceneGraph(nodes, edges, meta)


def parse_scene_graph(text: str) -> SceneGraph:
    """Parse and validate one scene-graph document.

    Raises SchemaError for malformed JSON, missing fields or wrong types and
    IntegrityError for dangling endpoints, duplicate ids or duplicate edges.
    """
    try:
        doc = json.loads(text)
    except (json.JSONDecodeError, TypeError) as exc:
        raise SchemaError(f"not a JSON document: {exc}") from None
    return graph_from_dict(doc)


def read_graphs(path) -> list[SceneGraph]:
    """Read a graph file: one document, or a line-delimited container of them."""
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) > 1:
        try:
            return [parse_scene_graph(ln) for ln in lines]
        except SchemaError:
            pass  # a pretty-printed single document spans lines
    return [parse_scene_graph(text)]


def write_graphs(path, graphs: Iterable[SceneGraph]) -> None:
    Path(path).write_text(
        "".join(canonical_serialize(g) + "\n" for g in graphs), encoding="utf-8"
    )


@dataclass(frozen=True)
class GraphStats:
    node_count: int
    avg_degree: float
    density: float
    avg_shortest_path: float


def undirected_adjacency(g: SceneGraph) -> dict[str, set[str]]:
    """Adjacency sets of the undirected simple projection (relations ignored)."""
    adj: dict[str, set[str]] = {n.id: set() for n in g.nodes}
    for e in g.edges:
        adj[e.source].add(e.target)
        adj[e.target].add(e.source)
    return adj


def bfs_distances(adj: Mapping[str, set[str]], start: str) -> dict[str, int]:
    dist = {start: 0}
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def graph_stats(g: SceneGraph) -> GraphStats:
    adj = undirected_adjacency(g)
    n = len(adj)
    m = sum(len(nb) for nb in adj.values()) // 2
    avg_degree = 2.0 * m / n if n else 0.0
    density = 2.0 * m / (n * (n - 1)) if n > 1 else 0.0

    total = pairs = 0
    ids = list(adj)
    for i, u in enumerate(ids):
        dist = bfs_distances(adj, u)
        for v in ids[i + 1:]:
            if v in dist:
                total += dist[v]
                pairs += 1
    return GraphStats(n, avg_degree, density, total / pairs if pairs else 0.0)
