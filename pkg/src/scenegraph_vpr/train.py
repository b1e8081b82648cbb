"""In-batch InfoNCE training of the graph encoder.

A batch of B anchor/positive pairs yields 2B unit embeddings.  Row ``i``
is scored against every other row with temperature-scaled cosine
similarity, and its positive competes against all other in-batch rows::

    L_i = -log( exp(S[i, p(i)]) / sum_{j != i} exp(S[i, j]) )

Optimisation uses Adam with decoupled weight decay and a cosine-annealed
learning rate.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyDataset, NonFiniteLoss, NormViolation, SchemaError
from .features import FeatureBundle, build_features
from .gat import GatConfig, GatParameters, backward, batch_bundles, forward_batch, init_params
from .graph import SceneGraph, graph_from_dict

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    temperature: float = 0.07
    batch_size: int = 128
    epochs: int = 500
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    schedule: str = "cosine"
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be at least 1")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("learning_rate must be positive and weight_decay nonnegative")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass(frozen=True)
class TrainingPair:
    anchor: SceneGraph
    positive: SceneGraph
    place_id: str


PairDataset = list  # list[TrainingPair]


def write_pairs(path, pairs: Sequence[TrainingPair]) -> None:
    """One JSON object per line: place_id, anchor graph, positive graph."""
    lines = [
        json.dumps(
            {"place_id": p.place_id, "anchor": p.anchor.to_dict(), "positive": p.positive.to_dict()},
            sort_keys=True, ensure_ascii=False,
        )
        for p in pairs
    ]
    Path(path).write_text("".join(ln + "\n" for ln in lines), encoding="utf-8")


def read_pairs(path) -> list[TrainingPair]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
            out.append(TrainingPair(graph_from_dict(doc["anchor"]), graph_from_dict(doc["positive"]),
                                    str(doc["place_id"])))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise SchemaError(f"{path}:{lineno}: bad training pair ({exc})") from None
    return out


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    learning_rates: list[float] = field(default_factory=list)
    checkpoint: str | None = None


def similarity_matrix(Z: np.ndarray, temperature: float) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    norms = np.linalg.norm(Z, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise NormViolation(f"embedding rows must be unit norm (worst {norms[np.argmax(np.abs(norms - 1))]:.6g})")
    return (Z @ Z.T) / temperature


def pair_index(n: int) -> np.ndarray:
    """Positive partner of each row for the [anchors; positives] layout."""
    if n % 2:
        raise ValueError("need an even number of rows")
    b = n // 2
    return np.concatenate([np.arange(b, n), np.arange(0, b)])


def _masked_log_softmax(S: np.ndarray) -> np.ndarray:
    masked = S.copy()
    np.fill_diagonal(masked, -np.inf)
    shift = masked.max(axis=1, keepdims=True)
    lse = shift + np.log(np.exp(masked - shift).sum(axis=1, keepdims=True))
    return masked - lse


def info_nce_loss(S: np.ndarray, pairing: Sequence[int] | None = None) -> float:
    """Mean InfoNCE over all 2B rows; ``pairing[i]`` is the positive of row i."""
    n = S.shape[0]
    p = pair_index(n) if pairing is None else np.asarray(pairing)
    logp = _masked_log_softmax(S)
    return float(-logp[np.arange(n), p].mean())


def info_nce_grad(S: np.ndarray, pairing: Sequence[int] | None = None) -> tuple[float, np.ndarray]:
    """Loss and its gradient with respect to S."""
    n = S.shape[0]
    p = pair_index(n) if pairing is None else np.asarray(pairing)
    logp = _masked_log_softmax(S)
    G = np.exp(logp)  # diagonal is exp(-inf) = 0
    G[np.arange(n), p] -= 1.0
    return float(-logp[np.arange(n), p].mean()), G / n


def contrastive_loss_and_grad(Z: np.ndarray, temperature: float, pairing=None) -> tuple[float, np.ndarray]:
    """Loss for unit rows Z and its gradient with respect to Z."""
    S = similarity_matrix(Z, temperature)
    loss, dS = info_nce_grad(S, pairing)
    return loss, (dS + dS.T) @ Z / temperature


def cosine_lr(lr0: float, t: int, total: int) -> float:
    if total <= 0:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * min(t, total) / total))


class AdamW:
    """Adam with decoupled weight decay over a list of arrays, updated in place."""

    def __init__(self, arrays: list[np.ndarray], betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.arrays = arrays
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0

    def step(self, grads: list[np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for a, g, m, v in zip(self.arrays, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            a -= lr * ((m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * a)


def batch_loss_and_grads(
    anchors: Sequence[FeatureBundle],
    positives: Sequence[FeatureBundle],
    params: GatParameters,
    gat: GatConfig,
    temperature: float,
) -> tuple[float, GatParameters]:
    """InfoNCE loss of one batch and its gradient for every encoder parameter."""
    batch = batch_bundles(list(anchors) + list(positives), np.dtype(gat.dtype))
    cache = forward_batch(batch, params, gat)
    loss, dZ = contrastive_loss_and_grad(cache.z, temperature)
    return loss, backward(dZ, cache)


def train(
    ds: Sequence[TrainingPair],
    cfg: TrainConfig,
    gat: GatConfig,
    provider,
    params: GatParameters | None = None,
) -> tuple[GatParameters, TrainReport]:
    """Train the encoder; deterministic for fixed seeds."""
    if not ds:
        raise EmptyDataset("training needs at least one anchor/positive pair")
    if gat.in_dim != provider.dim or gat.edge_dim != provider.dim:
        raise DimensionMismatch(
            f"encoder expects {gat.in_dim}/{gat.edge_dim}-d inputs, provider gives {provider.dim}"
        )
    params = init_params(gat) if params is None else params
    anchors = [build_features(p.anchor, provider) for p in ds]
    positives = [build_features(p.positive, provider) for p in ds]

    n = len(ds)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(params.arrays(), cfg.betas, cfg.eps, cfg.weight_decay)
    report = TrainReport()
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses, sizes = [], []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = batch_loss_and_grads(
                [anchors[i] for i in idx], [positives[i] for i in idx], params, gat, cfg.temperature
            )
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"loss became {loss} at epoch {epoch}, step {step}")
            lr = cosine_lr(cfg.learning_rate, step, total) if cfg.schedule == "cosine" else cfg.learning_rate
            opt.step(grads.arrays(), lr)
            params.bump()
            report.learning_rates.append(lr)
            losses.append(loss)
            sizes.append(len(idx))
            step += 1
        report.epoch_losses.append(float(np.average(losses, weights=sizes)))
        log.debug("epoch %d loss %.6f", epoch, report.epoch_losses[-1])
    return params, report
