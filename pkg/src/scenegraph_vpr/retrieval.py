"""Place index, fused semantic/structural scoring and fusion-weight policies.

Each database place is scored against a query as

    score = alpha * semantic + (1 - alpha) * structural

where ``semantic`` is the cosine between encoder embeddings and
``structural`` the normalised shortest-path kernel.  ``alpha`` comes from a
policy applied to the query graph alone.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, DegenerateTargets, EmptyIndex, RangeError, UntrainedRegressor
from .features import build_features
from .gat import GatConfig, GatParameters, GraphEmbedding, encode
from .graph import GraphStats, SceneGraph, graph_from_dict, graph_stats
from .kernel import SpProfile, sp_profile, sp_similarity_profiles

INDEX_FORMAT = "scenegraph-vpr-index"


class Encoder:
    """Trained encoder parameters plus the phrase provider that feeds them."""

    def __init__(self, params: GatParameters, cfg: GatConfig, provider):
        self.params, self.cfg, self.provider = params, cfg, provider

    def embed(self, g: SceneGraph) -> GraphEmbedding:
        return self.embed_many([g])[0]

    def embed_many(self, graphs: Sequence[SceneGraph]) -> list[GraphEmbedding]:
        return encode([build_features(g, self.provider) for g in graphs], self.params, self.cfg)


@dataclass(frozen=True)
class PlaceRecord:
    place_id: str
    coords: tuple[float, float]
    graph: SceneGraph
    embedding: GraphEmbedding
    sp_profile: SpProfile

    def to_json(self) -> dict:
        return {
            "place_id": self.place_id,
            "coords": list(self.coords),
            "graph": self.graph.to_dict(),
            "embedding": self.embedding.vector.tolist(),
            "embedding_norm": self.embedding.norm,
            "sp_profile": self.sp_profile.to_json(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "PlaceRecord":
        return cls(
            str(doc["place_id"]),
            (float(doc["coords"][0]), float(doc["coords"][1])),
            graph_from_dict(doc["graph"]),
            GraphEmbedding(np.asarray(doc["embedding"], dtype=np.float64), float(doc.get("embedding_norm", 1.0))),
            SpProfile.from_json(doc["sp_profile"]),
        )


def build_index(
    places: Iterable[tuple[str, tuple[float, float], SceneGraph]], encoder: Encoder
) -> list[PlaceRecord]:
    places = list(places)
    embs = encoder.embed_many([g for _, _, g in places])
    return [
        PlaceRecord(pid, (float(c[0]), float(c[1])), g, e, sp_profile(g))
        for (pid, c, g), e in zip(places, embs)
    ]


def index_header(encoder: Encoder) -> dict:
    return {
        "format": INDEX_FORMAT,
        "version": 1,
        "provider": encoder.provider.config(),
        "checkpoint_sha256": encoder.params.digest(),
        "gat": asdict(encoder.cfg),
        "dims": {"embedding": encoder.cfg.output_dim, "features": encoder.provider.dim},
    }


def save_index(path, records: Sequence[PlaceRecord], header: dict) -> None:
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(r.to_json(), sort_keys=True) for r in records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_index(path) -> tuple[dict, list[PlaceRecord]]:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != INDEX_FORMAT:
            raise DataError(f"{path} is not a place index")
        records = [PlaceRecord.from_json(json.loads(ln)) for ln in fh if ln.strip()]
    return header, records


# --------------------------------------------------------------------------
# fusion and alpha policies
# --------------------------------------------------------------------------


def fuse(sem: float, struct: float, alpha: float) -> float:
    if not -1.0 - 1e-12 <= sem <= 1.0 + 1e-12:
        raise RangeError(f"semantic similarity {sem} outside [-1, 1]")
    if not -1e-12 <= struct <= 1.0 + 1e-12:
        raise RangeError(f"structural similarity {struct} outside [0, 1]")
    if not 0.0 <= alpha <= 1.0:
        raise RangeError(f"alpha {alpha} outside [0, 1]")
    return alpha * sem + (1.0 - alpha) * struct


@dataclass(frozen=True)
class AlphaFeatures:
    node_count: float
    avg_degree: float
    density: float
    avg_shortest_path: float
    mean_embedding_norm: float

    NAMES = ("node_count", "avg_degree", "density", "avg_shortest_path", "mean_embedding_norm")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in self.NAMES], dtype=np.float64)

    @classmethod
    def from_graph(cls, stats: GraphStats, emb: GraphEmbedding) -> "AlphaFeatures":
        # the pooled norm before normalisation; after it every embedding has norm 1
        return cls(stats.node_count, stats.avg_degree, stats.density, stats.avg_shortest_path, emb.norm)


def _clamp01(x: float) -> float:
    return float(min(1.0, max(0.0, x)))


@dataclass(frozen=True)
class ConstantAlpha:
    c: float = 0.8
    kind = "constant"

    def __call__(self, stats: GraphStats, feats: AlphaFeatures | None = None) -> float:
        return _clamp01(self.c)

    def to_json(self) -> dict:
        return {"kind": self.kind, "c": self.c}


@dataclass(frozen=True)
class AlphaRule:
    """Matches when lo < value <= hi for every bounded statistic."""

    alpha: float
    node_count: tuple[float | None, float | None] = (None, None)
    avg_degree: tuple[float | None, float | None] = (None, None)
    density: tuple[float | None, float | None] = (None, None)

    def matches(self, stats: GraphStats) -> bool:
        for name in ("node_count", "avg_degree", "density"):
            lo, hi = getattr(self, name)
            v = getattr(stats, name)
            if lo is not None and not v > lo:
                return False
            if hi is not None and not v <= hi:
                return False
        return True


DEFAULT_RULES = (
    AlphaRule(0.8, node_count=(None, 8)),
    AlphaRule(0.5, node_count=(8, 14)),
    AlphaRule(0.3, node_count=(14, None)),
)


@dataclass(frozen=True)
class ThresholdRules:
    rules: tuple[AlphaRule, ...] = DEFAULT_RULES
    default: float = 0.5
    kind = "threshold_rules"

    def __call__(self, stats: GraphStats, feats: AlphaFeatures | None = None) -> float:
        for rule in self.rules:
            if rule.matches(stats):
                return _clamp01(rule.alpha)
        return _clamp01(self.default)

    def to_json(self) -> dict:
        return {"kind": self.kind, "default": self.default, "rules": [asdict(r) for r in self.rules]}


@dataclass(frozen=True)
class LogisticAlpha:
    w_nodes: float = -0.3
    w_degree: float = -0.5
    bias: float = 4.0
    kind = "logistic"

    def __call__(self, stats: GraphStats, feats: AlphaFeatures | None = None) -> float:
        t = self.w_nodes * stats.node_count + self.w_degree * stats.avg_degree + self.bias
        return _clamp01(0.5 * (1.0 + math.tanh(0.5 * t)))

    def to_json(self) -> dict:
        return {"kind": self.kind, "w_nodes": self.w_nodes, "w_degree": self.w_degree, "bias": self.bias}


@dataclass
class RidgeModel:
    weights: np.ndarray
    intercept: float

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.atleast_2d(X) @ self.weights + self.intercept


def fit_ridge(X: np.ndarray, y: np.ndarray, lam: float = 0.0) -> RidgeModel:
    """Least squares with an unpenalised intercept and penalty ``lam * |w|^2``."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    A = np.hstack([X, np.ones((n, 1))])
    b = y
    if lam > 0:
        A = np.vstack([A, np.hstack([math.sqrt(lam) * np.eye(d), np.zeros((d, 1))])])
        b = np.concatenate([y, np.zeros(d)])
    coef, *_ = np.linalg.lstsq(A, b, rcond=None)
    return RidgeModel(coef[:d], float(coef[d]))


@dataclass
class MLPModel:
    """One hidden tanh layer on standardised inputs."""

    W1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float
    x_mean: np.ndarray
    x_scale: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        Xs = (np.atleast_2d(X) - self.x_mean) / self.x_scale
        return np.tanh(Xs @ self.W1 + self.b1) @ self.w2 + self.b2


def fit_mlp(
    X: np.ndarray, y: np.ndarray, hidden: int = 16, steps: int = 2000, lr: float = 1e-2,
    l2: float = 1e-4, seed: int = 0,
) -> MLPModel:
    """Full-batch Adam on mean squared error."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    Xs = (X - mean) / scale
    rng = np.random.default_rng(seed)
    d = X.shape[1]
    params = [
        rng.normal(0, 1 / math.sqrt(d), (d, hidden)),
        np.zeros(hidden),
        rng.normal(0, 1 / math.sqrt(hidden), hidden),
        np.array([y.mean()]),
    ]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    n = len(y)
    for t in range(1, steps + 1):
        W1, b1, w2, b2 = params
        h = np.tanh(Xs @ W1 + b1)
        r = h @ w2 + b2[0] - y
        dpred = 2.0 * r / n
        dh = np.outer(dpred, w2) * (1 - h * h)
        grads = [Xs.T @ dh + l2 * W1, dh.sum(0), h.T @ dpred + l2 * w2, np.array([dpred.sum()])]
        for p, g, mi, vi in zip(params, grads, m, v):
            mi[:] = 0.9 * mi + 0.1 * g
            vi[:] = 0.999 * vi + 0.001 * g * g
            p -= lr * (mi / (1 - 0.9 ** t)) / (np.sqrt(vi / (1 - 0.999 ** t)) + 1e-8)
    W1, b1, w2, b2 = params
    return MLPModel(W1, b1, w2, float(b2[0]), mean, scale)


@dataclass
class RegressorAlpha:
    """Learned alpha from the five query-graph features, clamped to [0, 1]."""

    ridge: RidgeModel | None = None
    mlp: MLPModel | None = None
    use: str = "ridge"
    targets: list[float] = field(default_factory=list)
    residuals: dict[str, float] = field(default_factory=dict)
    kind = "regressor"

    def __call__(self, stats: GraphStats, feats: AlphaFeatures | None = None) -> float:
        model = self.ridge if self.use == "ridge" else self.mlp
        if model is None:
            raise UntrainedRegressor(f"the {self.use} alpha regressor has not been fitted")
        if feats is None:
            raise DataError("the regressor policy needs AlphaFeatures")
        return _clamp01(float(model.predict(feats.as_array())[0]))

    def to_json(self) -> dict:
        doc = {"kind": self.kind, "use": self.use, "targets": self.targets, "residuals": self.residuals}
        if self.ridge is not None:
            doc["ridge"] = {"weights": self.ridge.weights.tolist(), "intercept": self.ridge.intercept}
        if self.mlp is not None:
            doc["mlp"] = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self.mlp).items()}
        return doc


def policy_from_json(doc: dict):
    kind = doc.get("kind")
    if kind == "constant":
        return ConstantAlpha(float(doc["c"]))
    if kind == "threshold_rules":
        rules = tuple(
            AlphaRule(
                float(r["alpha"]),
                *(tuple(r.get(k, (None, None))) for k in ("node_count", "avg_degree", "density")),
            )
            for r in doc["rules"]
        )
        return ThresholdRules(rules, float(doc.get("default", 0.5)))
    if kind == "logistic":
        return LogisticAlpha(float(doc["w_nodes"]), float(doc["w_degree"]), float(doc["bias"]))
    if kind == "regressor":
        ridge = mlp = None
        if "ridge" in doc:
            ridge = RidgeModel(np.asarray(doc["ridge"]["weights"]), float(doc["ridge"]["intercept"]))
        if "mlp" in doc:
            m = doc["mlp"]
            mlp = MLPModel(*(np.asarray(m[k]) for k in ("W1", "b1", "w2")), float(m["b2"]),
                           np.asarray(m["x_mean"]), np.asarray(m["x_scale"]))
        return RegressorAlpha(ridge, mlp, doc.get("use", "ridge"), list(doc.get("targets", [])),
                              dict(doc.get("residuals", {})))
    raise DataError(f"unknown alpha policy kind {kind!r}")


def alpha_select(stats: GraphStats, feats: AlphaFeatures | None, policy) -> float:
    return policy(stats, feats)


# --------------------------------------------------------------------------
# querying
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class QueryHit:
    place_id: str
    score: float
    sem: float
    struct: float
    alpha: float


def component_scores(
    q_graph: SceneGraph, q_emb: GraphEmbedding, index: Sequence[PlaceRecord]
) -> tuple[np.ndarray, np.ndarray]:
    """Semantic and structural similarity of the query to every record."""
    if not index:
        raise EmptyIndex("the place index is empty")
    E = np.stack([r.embedding.vector for r in index])
    sem = np.clip(E @ q_emb.vector, -1.0, 1.0)
    qp = sp_profile(q_graph)
    struct = np.array([sp_similarity_profiles(qp, r.sp_profile) for r in index])
    return sem, struct


def rank_order(scores: np.ndarray, place_ids: Sequence[str]) -> np.ndarray:
    """Indices by descending score, ties broken by ascending place id."""
    ids = np.asarray(place_ids, dtype=object)
    return np.array(sorted(range(len(scores)), key=lambda i: (-scores[i], ids[i])), dtype=np.int64)


def query(
    q: SceneGraph,
    index: Sequence[PlaceRecord],
    k: int,
    policy,
    encoder: Encoder,
    q_emb: GraphEmbedding | None = None,
) -> list[QueryHit]:
    """Top-k places for ``q`` with the per-candidate score breakdown."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if not index:
        raise EmptyIndex("the place index is empty")
    q_emb = q_emb if q_emb is not None else encoder.embed(q)
    stats = graph_stats(q)
    alpha = alpha_select(stats, AlphaFeatures.from_graph(stats, q_emb), policy)
    sem, struct = component_scores(q, q_emb, index)
    fused = alpha * sem + (1.0 - alpha) * struct
    order = rank_order(fused, [r.place_id for r in index])[:k]
    return [QueryHit(index[i].place_id, float(fused[i]), float(sem[i]), float(struct[i]), alpha) for i in order]


# --------------------------------------------------------------------------
# learned alpha
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AlphaTrainingQuery:
    graph: SceneGraph
    embedding: GraphEmbedding
    positives: frozenset[str]


def first_hit_rank(fused: np.ndarray, place_ids: Sequence[str], positives) -> int | None:
    """1-based rank of the best-ranked ground-truth record, or None."""
    for r, i in enumerate(rank_order(fused, place_ids), start=1):
        if place_ids[i] in positives:
            return r
    return None


def grid_search_alpha(
    q: AlphaTrainingQuery, index: Sequence[PlaceRecord], grid: Sequence[float]
) -> float:
    """Alpha maximising reciprocal rank of the first true match; ties go to the smallest alpha."""
    sem, struct = component_scores(q.graph, q.embedding, index)
    ids = [r.place_id for r in index]
    best_alpha, best_rr = None, -1.0
    for a in sorted(grid):
        rank = first_hit_rank(a * sem + (1 - a) * struct, ids, q.positives)
        rr = 1.0 / rank if rank else 0.0
        if rr > best_rr:
            best_alpha, best_rr = a, rr
    return float(best_alpha)


def fit_alpha_regressor(
    queries: Sequence[AlphaTrainingQuery],
    index: Sequence[PlaceRecord],
    grid: Sequence[float] = (0.3, 0.5, 0.8),
    lam: float = 1e-3,
    use: str = "ridge",
    seed: int = 0,
    min_queries: int = 10,
):
    """Grid-search per-query targets, then fit ridge and MLP regressors on them.

    Returns a :class:`RegressorAlpha`, or a :class:`ConstantAlpha` (with a
    DegenerateTargets warning) when every target is the same.
    """
    if len(queries) < min_queries:
        raise DataError(f"need at least {min_queries} training queries, got {len(queries)}")
    targets = np.array([grid_search_alpha(q, index, grid) for q in queries])
    if np.all(targets == targets[0]):
        warnings.warn(f"all grid-search targets equal {targets[0]}; using a constant policy", DegenerateTargets)
        return ConstantAlpha(float(targets[0]))
    X = np.stack([AlphaFeatures.from_graph(graph_stats(q.graph), q.embedding).as_array() for q in queries])
    ridge = fit_ridge(X, targets, lam)
    mlp = fit_mlp(X, targets, seed=seed)
    residuals = {
        "ridge_rmse": float(np.sqrt(np.mean((ridge.predict(X) - targets) ** 2))),
        "mlp_rmse": float(np.sqrt(np.mean((mlp.predict(X) - targets) ** 2))),
    }
    return RegressorAlpha(ridge, mlp, use, targets.tolist(), residuals)
