"""Phrase construction and numeric features for scene graphs.

Node phrases put attributes before the label ("red metal mailbox"); edge
phrases are the relation text.  Phrases become vectors through a provider:
either a precomputed store (any external text encoder can fill it) or a
deterministic signed-hash bag of words that needs nothing outside numpy.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .errors import DataError, MissingEmbedding
from .graph import SceneEdge, SceneGraph, SceneNode, canonical_node_order, normalize_text

HASH_SEED = b"scenegraph-vpr/v1"
DEFAULT_HASH_DIM = 256


@dataclass(frozen=True)
class Phrase:
    text: str
    kind: Literal["node", "edge"] = "node"

    def __post_init__(self):
        text = normalize_text(self.text)
        if not text:
            raise ValueError("phrase text is empty after normalization")
        object.__setattr__(self, "text", text)


def node_phrase(node: SceneNode) -> Phrase:
    return Phrase(" ".join((*node.attributes, node.label)), "node")


def edge_phrase(edge: SceneEdge) -> Phrase:
    return Phrase(edge.relation, "edge")


def token_hash(token: str) -> int:
    """Unsigned 64-bit keyed BLAKE2b hash; identical on every platform."""
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=HASH_SEED).digest()
    return int.from_bytes(digest, "little")


class HashedEmbedder:
    """Signed feature hashing of whitespace tokens, L2-normalised."""

    source = "hashed"

    def __init__(self, dim: int = DEFAULT_HASH_DIM):
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.dim = int(dim)
        self._cached = lru_cache(maxsize=65536)(self._embed_text)

    def token_vector(self, token: str) -> np.ndarray:
        h = token_hash(token)
        v = np.zeros(self.dim)
        v[h % self.dim] = -1.0 if h >> 63 else 1.0
        return v

    def _embed_text(self, text: str) -> np.ndarray:
        v = np.zeros(self.dim)
        for tok in text.split():
            h = token_hash(tok)
            v[h % self.dim] += -1.0 if h >> 63 else 1.0
        norm = np.linalg.norm(v)
        if norm > 0:
            v /= norm
        v.flags.writeable = False
        return v

    def embed(self, phrase: Phrase | str) -> np.ndarray:
        text = phrase.text if isinstance(phrase, Phrase) else normalize_text(phrase)
        return self._cached(text)

    def config(self) -> dict:
        return {"source": self.source, "dim": self.dim}


class EmbeddingStore:
    """Precomputed phrase vectors, optionally backed by hashing on a miss."""

    source = "store"

    def __init__(self, dim: int, vectors: dict[str, np.ndarray] | None = None, fallback_on_miss: bool = False):
        self.dim = int(dim)
        self.vectors: dict[str, np.ndarray] = {}
        self.fallback_on_miss = fallback_on_miss
        self._fallback = HashedEmbedder(self.dim) if fallback_on_miss else None
        for phrase, vec in (vectors or {}).items():
            self.add(phrase, vec)

    def add(self, phrase: str, vector) -> None:
        vec = np.asarray(vector, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise DataError(f"vector for {phrase!r} has shape {vec.shape}, store dim is {self.dim}")
        if not np.all(np.isfinite(vec)):
            raise DataError(f"vector for {phrase!r} has non-finite entries")
        vec = vec.copy()
        vec.flags.writeable = False
        self.vectors[normalize_text(phrase)] = vec

    def embed(self, phrase: Phrase | str) -> np.ndarray:
        text = phrase.text if isinstance(phrase, Phrase) else normalize_text(phrase)
        try:
            return self.vectors[text]
        except KeyError:
            if self._fallback is None:
                raise MissingEmbedding(f"no stored vector for phrase {text!r}") from None
            return self._fallback.embed(text)

    def config(self) -> dict:
        return {"source": self.source, "dim": self.dim, "fallback_on_miss": self.fallback_on_miss}

    def save(self, path) -> None:
        lines = [json.dumps({"dim": self.dim})]
        for phrase in sorted(self.vectors):
            lines.append(json.dumps({"phrase": phrase, "vector": self.vectors[phrase].tolist()}))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, fallback_on_miss: bool = False) -> "EmbeddingStore":
        with open(path, encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            if not isinstance(header, dict) or "dim" not in header:
                raise DataError(f"{path}: first line must be a {{\"dim\": int}} header")
            store = cls(int(header["dim"]), fallback_on_miss=fallback_on_miss)
            for lineno, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                rec = json.loads(line)
                try:
                    store.add(rec["phrase"], rec["vector"])
                except (KeyError, TypeError) as exc:
                    raise DataError(f"{path}:{lineno}: bad record ({exc})") from None
        return store


def embed(p: Phrase, provider) -> np.ndarray:
    return provider.embed(p)


def provider_from_config(cfg: dict, store_path=None):
    if cfg.get("source", "hashed") == "hashed":
        return HashedEmbedder(int(cfg.get("dim", DEFAULT_HASH_DIM)))
    if store_path is None:
        raise DataError("a store-backed provider needs the store file path")
    return EmbeddingStore.load(store_path, fallback_on_miss=bool(cfg.get("fallback_on_miss", False)))


@dataclass(frozen=True)
class FeatureBundle:
    node_features: np.ndarray
    edge_features: np.ndarray
    edge_index: tuple[tuple[int, int], ...]
    node_order: tuple[str, ...]

    @property
    def num_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def num_edges(self) -> int:
        return self.edge_features.shape[0]

    def to_json(self) -> dict:
        return {
            "node_order": list(self.node_order),
            "edge_index": [list(e) for e in self.edge_index],
            "node_features": self.node_features.tolist(),
            "edge_features": self.edge_features.tolist(),
        }


def build_features(g: SceneGraph, provider) -> FeatureBundle:
    """Embed node and edge phrases of ``g`` in canonical node order.

    ``node_order`` keeps the graph's own ids so rows can be traced back.
    """
    order = canonical_node_order(g)
    index = {nid: i for i, nid in enumerate(order)}
    by_id = {n.id: n for n in g.nodes}
    d = provider.dim
    x = np.zeros((len(order), d))
    for i, nid in enumerate(order):
        x[i] = provider.embed(node_phrase(by_id[nid]))
    edges = sorted(g.edges, key=lambda e: (index[e.source], index[e.target], e.relation))
    ef = np.zeros((len(edges), d))
    for k, e in enumerate(edges):
        ef[k] = provider.embed(edge_phrase(e))
    return FeatureBundle(
        x,
        ef,
        tuple((index[e.source], index[e.target]) for e in edges),
        tuple(order),
    )


def build_features_many(graphs: Sequence[SceneGraph], provider) -> list[FeatureBundle]:
    return [build_features(g, provider) for g in graphs]
