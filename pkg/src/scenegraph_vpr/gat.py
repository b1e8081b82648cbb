"""Graph attention encoder with edge features and exact reverse-mode gradients.

Per layer and head, node ``i`` attends over its in-neighbours ``j`` plus a
self-loop (whose edge feature is the zero vector)::

    e_ij  = LeakyReLU(a_dst . W h_i + a_src . W h_j + a_edge . W_e f_ij)
    alpha = softmax of e_ij over the neighbourhood of i
    h_i'  = ELU(sum_j alpha_ij (W h_j + W_e f_ij))

Heads are concatenated between layers.  The last layer output is projected
linearly to ``output_dim``, mean-pooled over the nodes of each graph and
L2-normalised.  Graphs are processed as a disjoint-union batch so a whole
training batch costs a handful of dense and sparse matrix products.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DataError, DimensionMismatch, StaleCache
from .features import FeatureBundle

CHECKPOINT_FORMAT = "scenegraph-vpr-gat"


@dataclass(frozen=True)
class GatConfig:
    num_layers: int = 2
    heads: int = 4
    hidden_dim: int = 256
    output_dim: int = 1024
    leaky_relu_slope: float = 0.2
    seed: int = 0
    in_dim: int = 256
    edge_dim: int | None = None
    dtype: str = "float64"

    def __post_init__(self):
        if self.num_layers not in (1, 2, 3):
            raise ValueError(f"num_layers must be 1, 2 or 3, got {self.num_layers}")
        if self.heads <= 0 or self.hidden_dim <= 0 or self.output_dim <= 0 or self.in_dim <= 0:
            raise ValueError("heads, hidden_dim, output_dim and in_dim must be positive")
        if self.hidden_dim % self.heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} is not divisible by heads {self.heads}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be 'float64' or 'float32'")
        if self.edge_dim is None:
            object.__setattr__(self, "edge_dim", self.in_dim)

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.heads


_LAYER_KEYS = ("W", "We", "att_dst", "att_src", "att_edge")


@dataclass
class GatParameters:
    """All trainable tensors.  ``version`` is bumped on every in-place update."""

    layers: list[dict[str, np.ndarray]]
    projection: np.ndarray
    version: int = field(default=0, compare=False)

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for l, layer in enumerate(self.layers):
            out.extend((f"layers.{l}.{k}", layer[k]) for k in _LAYER_KEYS)
        out.append(("projection", self.projection))
        return out

    def arrays(self) -> list[np.ndarray]:
        return [a for _, a in self.named_arrays()]

    def zeros_like(self) -> "GatParameters":
        return GatParameters(
            [{k: np.zeros_like(v) for k, v in layer.items()} for layer in self.layers],
            np.zeros_like(self.projection),
        )

    def copy(self) -> "GatParameters":
        return GatParameters(
            [{k: v.copy() for k, v in layer.items()} for layer in self.layers],
            self.projection.copy(),
        )

    def bump(self) -> None:
        self.version += 1

    def num_parameters(self) -> int:
        return sum(a.size for a in self.arrays())

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, a in self.named_arrays():
            h.update(name.encode())
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()


def _xavier(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: GatConfig) -> GatParameters:
    """Xavier-uniform initialisation from ``cfg.seed``; bit-identical per seed."""
    rng = np.random.default_rng(cfg.seed)
    K, F = cfg.heads, cfg.head_dim
    dtype = np.dtype(cfg.dtype)
    layers = []
    d_in = cfg.in_dim
    for _ in range(cfg.num_layers):
        layers.append(
            {
                "W": _xavier(rng, (K, d_in, F), d_in, F).astype(dtype),
                "We": _xavier(rng, (K, cfg.edge_dim, F), cfg.edge_dim, F).astype(dtype),
                # the three attention blocks together form one 3F vector per head
                "att_dst": _xavier(rng, (K, F), 3 * F, 1).astype(dtype),
                "att_src": _xavier(rng, (K, F), 3 * F, 1).astype(dtype),
                "att_edge": _xavier(rng, (K, F), 3 * F, 1).astype(dtype),
            }
        )
        d_in = cfg.hidden_dim
    proj = _xavier(rng, (cfg.hidden_dim, cfg.output_dim), cfg.hidden_dim, cfg.output_dim)
    return GatParameters(layers, proj.astype(dtype))


@dataclass
class GraphBatch:
    """Disjoint union of several graphs, self-loops included."""

    x: np.ndarray
    edge_attr: np.ndarray  # (E + N, De); the last N rows are zero self-loop features
    src: np.ndarray
    dst: np.ndarray
    graph_index: np.ndarray
    counts: np.ndarray
    scatter_dst: sp.csr_matrix  # (N, E+N) one-hot of dst
    scatter_src: sp.csr_matrix
    pool: sp.csr_matrix  # (G, N) mean-pooling weights

    @property
    def num_graphs(self) -> int:
        return len(self.counts)

    @property
    def num_nodes(self) -> int:
        return self.x.shape[0]


def batch_bundles(bundles: Sequence[FeatureBundle], dtype=np.float64) -> GraphBatch:
    if not bundles:
        raise DataError("cannot batch zero graphs")
    d_node = bundles[0].node_features.shape[1] if bundles[0].node_features.ndim == 2 else 0
    xs, efs, srcs, dsts, gidx, counts = [], [], [], [], [], []
    offset = 0
    for g, fb in enumerate(bundles):
        n = fb.num_nodes
        if n and fb.node_features.shape[1] != d_node:
            raise DimensionMismatch("node feature widths differ inside one batch")
        xs.append(fb.node_features.reshape(n, -1) if n else np.zeros((0, d_node)))
        efs.append(fb.edge_features)
        ei = np.asarray(fb.edge_index, dtype=np.int64).reshape(-1, 2)
        if ei.size and (ei.min() < 0 or ei.max() >= n):
            raise DimensionMismatch("edge index out of range")
        if ei.shape[0] != fb.num_edges:
            raise DimensionMismatch("edge_index and edge_features disagree on the edge count")
        srcs.append(ei[:, 0] + offset)
        dsts.append(ei[:, 1] + offset)
        gidx.append(np.full(n, g, dtype=np.int64))
        counts.append(n)
        offset += n

    x = np.concatenate(xs).astype(dtype, copy=False)
    N = x.shape[0]
    de = max((e.shape[1] for e in efs if e.ndim == 2 and e.shape[0]), default=0)
    efs = [e.reshape(e.shape[0], -1) if e.shape[0] else np.zeros((0, de)) for e in efs]
    if de and any(e.shape[1] != de for e in efs):
        raise DimensionMismatch("edge feature widths differ inside one batch")
    edge_attr = np.concatenate(efs + [np.zeros((N, de))]).astype(dtype, copy=False)
    loops = np.arange(N, dtype=np.int64)
    src = np.concatenate(srcs + [loops])
    dst = np.concatenate(dsts + [loops])
    E = len(src)
    ones = np.ones(E)
    counts = np.asarray(counts, dtype=np.int64)
    graph_index = np.concatenate(gidx) if gidx else np.zeros(0, dtype=np.int64)
    weights = 1.0 / np.maximum(counts, 1)[graph_index]
    return GraphBatch(
        x=x,
        edge_attr=edge_attr,
        src=src,
        dst=dst,
        graph_index=graph_index,
        counts=counts,
        scatter_dst=sp.csr_matrix((ones, (dst, np.arange(E))), shape=(N, E)),
        scatter_src=sp.csr_matrix((ones, (src, np.arange(E))), shape=(N, E)),
        pool=sp.csr_matrix((weights, (graph_index, np.arange(N))), shape=(len(counts), N)),
    )


@dataclass(frozen=True)
class GraphEmbedding:
    """Unit vector plus the norm of the pooled vector before normalisation."""

    vector: np.ndarray
    norm: float

    def normalize(self) -> "GraphEmbedding":
        n = np.linalg.norm(self.vector)
        return GraphEmbedding(self.vector / n if n > 0 else self.vector, self.norm)


@dataclass
class ForwardCache:
    params: GatParameters
    version: int
    cfg: GatConfig
    batch: GraphBatch
    layers: list[dict]
    h_last: np.ndarray
    pooled: np.ndarray
    norms: np.ndarray
    z: np.ndarray


def _segment_max(values: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    out = np.full((n,) + values.shape[1:], -np.inf, dtype=values.dtype)
    np.maximum.at(out, index, values)
    return out


def _layer_forward(h, layer, batch: GraphBatch, slope: float):
    N = h.shape[0]
    E = len(batch.src)
    X = np.einsum("nd,kdf->nkf", h, layer["W"], optimize=True)
    Fe = np.einsum("ed,kdf->ekf", batch.edge_attr, layer["We"], optimize=True)
    K, F = X.shape[1], X.shape[2]
    s = (
        np.einsum("nkf,kf->nk", X, layer["att_dst"])[batch.dst]
        + np.einsum("nkf,kf->nk", X, layer["att_src"])[batch.src]
        + np.einsum("ekf,kf->ek", Fe, layer["att_edge"])
    )
    e = np.where(s > 0, s, slope * s)
    ex = np.exp(e - _segment_max(e, batch.dst, N)[batch.dst])
    den = batch.scatter_dst @ ex
    alpha = ex / den[batch.dst]
    M = X[batch.src] + Fe
    agg = (batch.scatter_dst @ (alpha[:, :, None] * M).reshape(E, K * F)).reshape(N, K, F)
    out = np.where(agg > 0, agg, np.expm1(np.minimum(agg, 0.0)))
    cache = {"h": h, "X": X, "Fe": Fe, "s": s, "alpha": alpha, "M": M, "agg": agg, "out": out}
    return out.reshape(N, K * F), cache


def _check_dims(batch: GraphBatch, cfg: GatConfig):
    if batch.num_nodes and batch.x.shape[1] != cfg.in_dim:
        raise DimensionMismatch(f"node features have width {batch.x.shape[1]}, encoder expects {cfg.in_dim}")
    if batch.edge_attr.shape[1] not in (0, cfg.edge_dim):
        raise DimensionMismatch(
            f"edge features have width {batch.edge_attr.shape[1]}, encoder expects {cfg.edge_dim}"
        )


def forward_batch(batch: GraphBatch, params: GatParameters, cfg: GatConfig) -> ForwardCache:
    _check_dims(batch, cfg)
    if batch.edge_attr.shape[1] == 0:
        batch.edge_attr = np.zeros((batch.edge_attr.shape[0], cfg.edge_dim), dtype=batch.x.dtype)
    if len(params.layers) != cfg.num_layers:
        raise DimensionMismatch("parameter depth does not match the config")
    h = batch.x
    layer_caches = []
    for layer in params.layers:
        h, c = _layer_forward(h, layer, batch, cfg.leaky_relu_slope)
        layer_caches.append(c)
    y = h @ params.projection
    pooled = np.asarray(batch.pool @ y)
    norms = np.linalg.norm(pooled, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    z = pooled / safe[:, None]
    return ForwardCache(params, params.version, cfg, batch, layer_caches, h, pooled, norms, z)


def forward(fb: FeatureBundle | Sequence[FeatureBundle], params: GatParameters, cfg: GatConfig):
    """Encode one bundle (returns a GraphEmbedding) or a list (returns a list).

    The forward cache is returned alongside for use with :func:`backward`.
    """
    single = isinstance(fb, FeatureBundle)
    bundles = [fb] if single else list(fb)
    cache = forward_batch(batch_bundles(bundles, np.dtype(cfg.dtype)), params, cfg)
    embs = [GraphEmbedding(cache.z[g].copy(), float(cache.norms[g])) for g in range(len(bundles))]
    return (embs[0] if single else embs), cache


def _layer_backward(d_out, layer, c, batch: GraphBatch, slope: float):
    N, K, F = c["agg"].shape
    E = len(batch.src)
    d_out = d_out.reshape(N, K, F)
    agg = c["agg"]
    d_agg = d_out * np.where(agg > 0, 1.0, np.exp(np.minimum(agg, 0.0)))
    d_agg_e = d_agg[batch.dst]
    alpha, M, X, Fe = c["alpha"], c["M"], c["X"], c["Fe"]
    d_alpha = np.einsum("ekf,ekf->ek", d_agg_e, M)
    d_M = alpha[:, :, None] * d_agg_e
    group = batch.scatter_dst @ (alpha * d_alpha)
    d_e = alpha * (d_alpha - group[batch.dst])
    d_s = d_e * np.where(c["s"] > 0, 1.0, slope)

    grads = {
        "att_dst": np.einsum("ek,ekf->kf", d_s, X[batch.dst]),
        "att_src": np.einsum("ek,ekf->kf", d_s, X[batch.src]),
        "att_edge": np.einsum("ek,ekf->kf", d_s, Fe),
    }
    from_dst = (d_s[:, :, None] * layer["att_dst"][None]).reshape(E, K * F)
    from_src = (d_s[:, :, None] * layer["att_src"][None] + d_M).reshape(E, K * F)
    d_X = (batch.scatter_dst @ from_dst + batch.scatter_src @ from_src).reshape(N, K, F)
    d_Fe = d_s[:, :, None] * layer["att_edge"][None] + d_M

    grads["W"] = np.einsum("nd,nkf->kdf", c["h"], d_X, optimize=True)
    grads["We"] = np.einsum("ed,ekf->kdf", batch.edge_attr, d_Fe, optimize=True)
    d_h = np.einsum("nkf,kdf->nd", d_X, layer["W"], optimize=True)
    return d_h, grads


def backward(dz: np.ndarray, cache: ForwardCache) -> GatParameters:
    """Gradients of sum_g <dz_g, z_g> with respect to every parameter.

    ``dz`` is (num_graphs, output_dim), or a single vector for one graph.
    """
    params = cache.params
    if params.version != cache.version:
        raise StaleCache("parameters changed since this forward pass")
    dz = np.asarray(dz, dtype=cache.z.dtype).reshape(cache.z.shape)
    batch, cfg = cache.batch, cache.cfg

    safe = np.where(cache.norms > 0, cache.norms, 1.0)
    radial = np.sum(cache.z * dz, axis=1, keepdims=True)
    d_pooled = np.where(cache.norms[:, None] > 0, (dz - cache.z * radial) / safe[:, None], 0.0)
    d_y = np.asarray(batch.pool.T @ d_pooled)

    grads = params.zeros_like()
    grads.projection = cache.h_last.T @ d_y
    d_h = d_y @ params.projection.T
    for l in reversed(range(len(params.layers))):
        d_h, g = _layer_backward(d_h, params.layers[l], cache.layers[l], batch, cfg.leaky_relu_slope)
        grads.layers[l] = g
    return grads


def attention_weights(cache: ForwardCache, layer: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(src, dst, alpha) of one layer, self-loops included; alpha is (E, heads)."""
    return cache.batch.src, cache.batch.dst, cache.layers[layer]["alpha"]


def encode(bundles: Sequence[FeatureBundle], params: GatParameters, cfg: GatConfig, chunk: int = 256) -> list[GraphEmbedding]:
    out: list[GraphEmbedding] = []
    for start in range(0, len(bundles), chunk):
        embs, _ = forward(list(bundles[start:start + chunk]), params, cfg)
        out.extend(embs)
    return out


def save_checkpoint(path, params: GatParameters, cfg: GatConfig) -> None:
    """Header line (JSON) followed by raw little-endian float64 tensors."""
    named = params.named_arrays()
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "config": asdict(cfg),
        "seed": cfg.seed,
        "dtype": "<f8",
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in named],
    }
    buf = io.BytesIO()
    buf.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
    for _, a in named:
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[GatParameters, GatConfig]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl])
    if header.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path} is not an encoder checkpoint")
    cfg = GatConfig(**header["config"])
    dtype = np.dtype(cfg.dtype)
    offset = nl + 1
    tensors = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        a = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        tensors[spec["name"]] = a.astype(dtype)
        offset += 8 * count
    if offset != len(raw):
        raise DataError(f"{path}: trailing or missing tensor bytes")
    layers = [
        {k: tensors[f"layers.{l}.{k}"] for k in _LAYER_KEYS} for l in range(cfg.num_layers)
    ]
    return GatParameters(layers, tensors["projection"]), cfg
