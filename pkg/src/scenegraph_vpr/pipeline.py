"""Glue between manifests, graphs, the encoder, the index and evaluation."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

from .describe import Lexicon, parse_description
from .evaluation import (
    EvalConfig,
    FrameManifestEntry,
    RecallReport,
    group_sequences,
    recall_at_k,
    sequence_coords,
)
from .errors import DataError
from .gat import GatConfig, GatParameters
from .graph import SceneGraph, read_graphs
from .merge import MergeConfig, merge_graphs
from .retrieval import Encoder, PlaceRecord, build_index, query
from .train import TrainConfig, TrainReport, TrainingPair, train


def frame_graph(entry: FrameManifestEntry, lexicon: Lexicon | None = None) -> SceneGraph:
    if entry.graph_path:
        return read_graphs(entry.graph_path)[0]
    if entry.caption:
        return parse_description(entry.caption, lexicon)
    raise DataError(f"frame {entry.seq_id}:{entry.frame_idx} has neither a caption nor a graph")


def place_graphs(
    entries: Sequence[FrameManifestEntry],
    lexicon: Lexicon | None = None,
    merge_cfg: MergeConfig | None = None,
    jobs: int = 1,
) -> dict[str, tuple[tuple[float, float], SceneGraph]]:
    """Merged graph and ground-truth position for every sequence in a manifest."""
    seqs = group_sequences(entries)

    def one(frames):
        graphs = [frame_graph(f, lexicon) for f in frames]
        return sequence_coords(frames), merge_graphs(graphs, merge_cfg).merged

    items = list(seqs.items())
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda kv: one(kv[1]), items))
    else:
        results = [one(frames) for _, frames in items]
    return {sid: res for (sid, _), res in zip(items, results)}


def index_from_manifest(entries, encoder: Encoder, lexicon=None, merge_cfg=None, jobs: int = 1) -> list[PlaceRecord]:
    graphs = place_graphs(entries, lexicon, merge_cfg, jobs)
    return build_index(((sid, c, g) for sid, (c, g) in graphs.items()), encoder)


def rank_queries(
    queries: Mapping[str, SceneGraph], index: Sequence[PlaceRecord], encoder: Encoder, policy, k: int
) -> dict[str, list]:
    ids = list(queries)
    embs = encoder.embed_many([queries[q] for q in ids])
    return {q: query(queries[q], index, k, policy, encoder, q_emb=e) for q, e in zip(ids, embs)}


@dataclass
class FixtureRun:
    report: RecallReport
    params: GatParameters
    train_report: TrainReport
    index: list[PlaceRecord]
    encoder: Encoder


def run_fixture(
    pairs: Sequence[TrainingPair],
    index_manifest: Sequence[FrameManifestEntry],
    query_manifest: Sequence[FrameManifestEntry],
    provider,
    train_cfg: TrainConfig,
    gat_cfg: GatConfig,
    policy,
    eval_cfg: EvalConfig = EvalConfig(radius_m=25.0),
    merge_cfg: MergeConfig | None = None,
) -> FixtureRun:
    """Train on the pairs, index the database manifest and score the held-out queries."""
    params, treport = train(pairs, train_cfg, gat_cfg, provider)
    encoder = Encoder(params, gat_cfg, provider)
    index = index_from_manifest(index_manifest, encoder, merge_cfg=merge_cfg)
    qgraphs = place_graphs(query_manifest, merge_cfg=merge_cfg)
    hits = rank_queries({q: g for q, (_, g) in qgraphs.items()}, index, encoder, policy, max(eval_cfg.ks))
    report = recall_at_k(
        {q: [h.place_id for h in hs] for q, hs in hits.items()},
        {r.place_id: r.coords for r in index},
        {q: c for q, (c, _) in qgraphs.items()},
        eval_cfg,
    )
    return FixtureRun(report, params, treport, index, encoder)


@dataclass
class AblationRow:
    num_layers: int
    recalls: dict[int, float]
    seconds: float


def depth_ablation(
    fixture,
    depths: Sequence[int],
    provider,
    train_cfg: TrainConfig,
    gat_cfg: GatConfig,
    policy,
    eval_cfg: EvalConfig = EvalConfig(radius_m=25.0),
) -> list[AblationRow]:
    """Retrain and evaluate once per GAT depth, everything else held fixed."""
    rows = []
    for depth in depths:
        t0 = time.perf_counter()
        cfg = replace(gat_cfg, num_layers=int(depth))
        run = run_fixture(
            fixture.pairs, fixture.index_manifest, fixture.query_manifest, provider, train_cfg, cfg, policy, eval_cfg
        )
        rows.append(AblationRow(int(depth), run.report.recalls, time.perf_counter() - t0))
    return rows


def ablation_table(rows: Sequence[AblationRow]) -> str:
    ks = list(rows[0].recalls) if rows else []
    lines = ["layers" + "".join(f"{'R@' + str(k):>9}" for k in ks)]
    for r in rows:
        lines.append(f"{r.num_layers:>6}" + "".join(f"{r.recalls[k]:>9.1f}" for k in ks))
    return "\n".join(lines) + "\n"
