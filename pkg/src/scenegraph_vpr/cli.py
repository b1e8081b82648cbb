"""Command-line entry point: one subcommand per pipeline stage.

Every stage reads and writes plain files so any of them can be replaced by
an external tool.  ``--config FILE`` supplies defaults for any flag (keys
are the flag names with underscores); flags given on the command line win.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .describe import Lexicon, ServiceClient, extract_scene_graph, parse_description
from .errors import DataError, NumericError, SceneGraphVPRError, ServiceError
from .evaluation import EvalConfig, haversine_m, read_manifest, recall_at_k, write_manifest
from .features import EmbeddingStore, HashedEmbedder, edge_phrase, node_phrase, provider_from_config
from .fixtures import NoiseModel, generate_synthetic_fixture, human_description
from .gat import GatConfig, load_checkpoint, save_checkpoint
from .graph import SceneGraph, canonical_serialize, parse_scene_graph, read_graphs
from .merge import MergeConfig, merge_graphs
from .pipeline import index_from_manifest, place_graphs, rank_queries
from .retrieval import (
    AlphaTrainingQuery,
    ConstantAlpha,
    Encoder,
    LogisticAlpha,
    ThresholdRules,
    fit_alpha_regressor,
    index_header,
    load_index,
    policy_from_json,
    query,
    save_index,
)
from .train import TrainConfig, read_pairs, train, write_pairs

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("scenegraph_vpr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _dump(doc, out: str | None) -> None:
    _emit(json.dumps(doc, indent=2, sort_keys=True) + "\n", out)


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _lexicon(args) -> Lexicon | None:
    return Lexicon.load(args.lexicon) if getattr(args, "lexicon", None) else None


def _provider(args, dim: int):
    if getattr(args, "store", None):
        store = EmbeddingStore.load(args.store, fallback_on_miss=args.fallback_on_miss)
        if store.dim != dim:
            raise DataError(f"store has {store.dim}-d vectors, encoder expects {dim}")
        return store
    return HashedEmbedder(dim)


def _encoder_for_index(args) -> tuple[Encoder, list]:
    header, records = load_index(args.index)
    params, cfg = load_checkpoint(args.checkpoint)
    if header.get("checkpoint_sha256") != params.digest():
        raise DataError(f"{args.index} was built with a different checkpoint than {args.checkpoint}")
    provider = provider_from_config(header["provider"], args.store)
    return Encoder(params, cfg, provider), records


def _policy(spec: str):
    """A number, 'rules', 'logistic', or the path of a saved policy document."""
    try:
        return ConstantAlpha(float(spec))
    except ValueError:
        pass
    if spec == "rules":
        return ThresholdRules()
    if spec == "logistic":
        return LogisticAlpha()
    try:
        doc = json.loads(Path(spec).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"--alpha must be a number, 'rules', 'logistic' or a policy file; got {spec!r}") from None
    return policy_from_json(doc)


def _hits_doc(hits) -> list[dict]:
    return [
        {"rank": r, "place_id": h.place_id, "score": h.score, "sem": h.sem, "struct": h.struct, "alpha": h.alpha}
        for r, h in enumerate(hits, start=1)
    ]


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_parse(args) -> int:
    graphs: list[SceneGraph] = []
    if args.service:
        client = ServiceClient(cache_dir=args.cache_dir, max_parallel=args.jobs)
        for path in args.inputs:
            _, g = extract_scene_graph(
                client, Path(path).read_bytes(), Path(path).stem, args.model, args.parse_model, args.service
            )
            graphs.append(g.canonical())
    else:
        texts = ([args.text] if args.text else []) + [Path(p).read_text(encoding="utf-8") for p in args.inputs]
        if not texts:
            raise UsageError("parse needs --text or at least one input file")
        for t in texts:
            if args.input_format == "json":
                graphs.append(parse_scene_graph(t).canonical())
            else:
                graphs.append(parse_description(t, _lexicon(args), strict=args.strict))
    _emit("".join(canonical_serialize(g) + "\n" for g in graphs), args.out)
    return EXIT_OK


def cmd_merge(args) -> int:
    frames = [g for path in args.inputs for g in read_graphs(path)]
    cfg = MergeConfig(args.threshold, not args.no_intra_frame_merge)
    merged = merge_graphs(frames, cfg).merged
    _emit(canonical_serialize(merged) + "\n", args.out)
    return EXIT_OK


def cmd_features(args) -> int:
    hashed = HashedEmbedder(args.dim)
    store = EmbeddingStore(args.dim)
    for path in args.inputs:
        for g in read_graphs(path):
            for n in g.nodes:
                p = node_phrase(n)
                store.add(p.text, hashed.embed(p.text))
            for e in g.edges:
                p = edge_phrase(e)
                store.add(p.text, hashed.embed(p.text))
    store.save(args.out)
    log.info("wrote %d phrase vectors to %s", len(store.vectors), args.out)
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        temperature=args.temperature, batch_size=args.batch_size, epochs=args.epochs,
        learning_rate=args.learning_rate, weight_decay=args.weight_decay, schedule=args.schedule, seed=args.seed,
    )


def _gat_config(args) -> GatConfig:
    return GatConfig(
        num_layers=args.num_layers, heads=args.heads, hidden_dim=args.hidden_dim, output_dim=args.output_dim,
        leaky_relu_slope=args.leaky_relu_slope, seed=args.seed, in_dim=args.dim,
    )


def cmd_train(args) -> int:
    pairs = read_pairs(args.pairs)
    gat = _gat_config(args)
    params, report = train(pairs, _train_config(args), gat, _provider(args, gat.in_dim))
    save_checkpoint(args.out, params, gat)
    if args.report:
        _dump({"epoch_losses": report.epoch_losses, "train": asdict(_train_config(args)),
               "gat": asdict(gat)}, args.report)
    log.info("final epoch loss %.6f", report.epoch_losses[-1])
    return EXIT_OK


def cmd_index(args) -> int:
    params, cfg = load_checkpoint(args.checkpoint)
    encoder = Encoder(params, cfg, _provider(args, cfg.in_dim))
    merge_cfg = MergeConfig(args.threshold)
    records = index_from_manifest(read_manifest(args.manifest), encoder, _lexicon(args), merge_cfg, args.jobs)
    save_index(args.out, records, index_header(encoder))
    return EXIT_OK


def cmd_query(args) -> int:
    encoder, records = _encoder_for_index(args)
    if args.text:
        g = parse_description(args.text, _lexicon(args))
    elif args.graph:
        g = read_graphs(args.graph)[0]
    else:
        raise UsageError("query needs --text or --graph")
    hits = query(g, records, args.k, _policy(args.alpha), encoder)
    _dump({"query": g.to_dict(), "hits": _hits_doc(hits)}, args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    encoder, records = _encoder_for_index(args)
    cfg = EvalConfig(args.radius, args.k)
    qgraphs = place_graphs(read_manifest(args.queries), _lexicon(args), MergeConfig(args.threshold), args.jobs)
    hits = rank_queries({q: g for q, (_, g) in qgraphs.items()}, records, encoder, _policy(args.alpha), max(cfg.ks))
    report = recall_at_k(
        {q: [h.place_id for h in hs] for q, hs in hits.items()},
        {r.place_id: r.coords for r in records},
        {q: c for q, (c, _) in qgraphs.items()},
        cfg,
    )
    doc = report.to_json()
    if not args.traces:
        doc.pop("traces")
    doc["radius_m"] = cfg.radius_m
    _dump(doc, args.out)
    sys.stderr.write(report.table())
    return EXIT_OK


def cmd_alpha(args) -> int:
    encoder, records = _encoder_for_index(args)
    qgraphs = place_graphs(read_manifest(args.queries), _lexicon(args), MergeConfig(args.threshold), args.jobs)
    ids = list(qgraphs)
    embs = encoder.embed_many([qgraphs[q][1] for q in ids])
    queries = []
    for q, emb in zip(ids, embs):
        coords, g = qgraphs[q]
        pos = frozenset(r.place_id for r in records if haversine_m(coords, r.coords) <= args.radius)
        queries.append(AlphaTrainingQuery(g, emb, pos))
    policy = fit_alpha_regressor(queries, records, args.grid, args.lam, args.model, args.seed, args.min_queries)
    _dump(policy.to_json(), args.out)
    return EXIT_OK


def cmd_fixture(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    noise = NoiseModel(args.dropout, args.synonym_prob)
    fx = generate_synthetic_fixture(
        seed=args.seed, n_places=args.places, variants_per_place=args.variants, noise=noise,
        frames_per_place=args.frames, label_pool=args.label_pool,
    )
    write_manifest(out / "index_manifest.jsonl", fx.index_manifest)
    write_manifest(out / "query_manifest.jsonl", fx.query_manifest)
    write_pairs(out / "pairs.jsonl", fx.pairs)
    rng = np.random.default_rng(args.seed)
    lines = [
        json.dumps({"place_id": f"{s.place_id}/v0", "text": human_description(s, rng)}, ensure_ascii=False)
        for s in fx.scenes
    ]
    (out / "descriptions.jsonl").write_text("".join(ln + "\n" for ln in lines), encoding="utf-8")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON document of flag defaults")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--jobs", type=int, default=1, help="worker threads for batch stages")
    common.add_argument("--log-level", default="WARNING")

    lex = _Parser(add_help=False)
    lex.add_argument("--lexicon", help="lexicon file (token<TAB>class[<TAB>canonical])")

    store = _Parser(add_help=False)
    store.add_argument("--store", help="precomputed phrase-vector store instead of hashing")
    store.add_argument("--fallback-on-miss", action="store_true", help="hash phrases missing from --store")

    idx = _Parser(add_help=False)
    idx.add_argument("--index", required=True)
    idx.add_argument("--checkpoint", required=True)
    idx.add_argument("--alpha", default="0.8", help="number, 'rules', 'logistic' or policy file")

    parser = _Parser(prog="scenegraph-vpr", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("parse", parents=[common, lex], help="descriptions or documents to scene graphs")
    p.add_argument("inputs", nargs="*")
    p.add_argument("--text")
    p.add_argument("--input-format", choices=("text", "json"), default="text")
    p.add_argument("--strict", action="store_true", help="reject words outside the lexicon")
    p.add_argument("--service", choices=("live", "record", "replay"), help="describe images through the service")
    p.add_argument("--cache-dir")
    p.add_argument("--model", default="gpt-4-vision")
    p.add_argument("--parse-model", default="gpt-4")
    p.add_argument("--out")
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("merge", parents=[common], help="merge frame graphs into one place graph")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--threshold", type=float, default=0.7)
    p.add_argument("--no-intra-frame-merge", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("features", parents=[common], help="write a phrase-vector store for graphs")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--dim", type=int, default=256)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", parents=[common, store], help="contrastive training of the encoder")
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--dim", type=int, default=256)
    defaults_t, defaults_g = TrainConfig(), GatConfig()
    p.add_argument("--epochs", type=int, default=defaults_t.epochs)
    p.add_argument("--batch-size", type=int, default=defaults_t.batch_size)
    p.add_argument("--learning-rate", type=float, default=defaults_t.learning_rate)
    p.add_argument("--weight-decay", type=float, default=defaults_t.weight_decay)
    p.add_argument("--temperature", type=float, default=defaults_t.temperature)
    p.add_argument("--schedule", choices=("cosine", "constant"), default=defaults_t.schedule)
    p.add_argument("--num-layers", type=int, default=defaults_g.num_layers)
    p.add_argument("--heads", type=int, default=defaults_g.heads)
    p.add_argument("--hidden-dim", type=int, default=defaults_g.hidden_dim)
    p.add_argument("--output-dim", type=int, default=defaults_g.output_dim)
    p.add_argument("--leaky-relu-slope", type=float, default=defaults_g.leaky_relu_slope)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("index", parents=[common, store, lex], help="embed database places")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--threshold", type=float, default=0.7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", parents=[common, idx, lex], help="rank places for one query")
    p.add_argument("--text", help="free-text description, parsed with the grammar")
    p.add_argument("--graph", help="scene-graph file")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--store")
    p.add_argument("--out")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", parents=[common, idx, lex], help="Recall@K over a query manifest")
    p.add_argument("--queries", required=True)
    p.add_argument("--radius", type=float, default=25.0)
    p.add_argument("--k", type=_int_list, default=(1, 5, 10, 20))
    p.add_argument("--threshold", type=float, default=0.7)
    p.add_argument("--traces", action="store_true")
    p.add_argument("--store")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("alpha", parents=[common, idx, lex], help="fit a learned fusion-weight policy")
    p.add_argument("--queries", required=True)
    p.add_argument("--radius", type=float, default=25.0)
    p.add_argument("--grid", type=_float_list, default=(0.3, 0.5, 0.8))
    p.add_argument("--lam", type=float, default=1e-3)
    p.add_argument("--model", choices=("ridge", "mlp"), default="ridge")
    p.add_argument("--min-queries", type=int, default=10)
    p.add_argument("--threshold", type=float, default=0.7)
    p.add_argument("--store")
    p.add_argument("--out")
    p.set_defaults(func=cmd_alpha)

    p = sub.add_parser("fixture", parents=[common], help="write a synthetic evaluation fixture")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--places", type=int, default=50)
    p.add_argument("--variants", type=int, default=3)
    p.add_argument("--frames", type=int, default=5)
    p.add_argument("--dropout", type=float, default=0.2)
    p.add_argument("--synonym-prob", type=float, default=0.2)
    p.add_argument("--label-pool", type=int)
    p.set_defaults(func=cmd_fixture)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    subparsers = parser._subparsers._group_actions[0].choices  # noqa: SLF001
    command = next((a for a in argv if a in subparsers), None)
    if not known.config or command is None:
        return parser.parse_args(argv)
    try:
        doc = json.loads(Path(known.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {known.config}: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError("config must be a single JSON object")
    sub = subparsers[command]
    known_keys = {a.dest for a in sub._actions}  # noqa: SLF001
    unknown = sorted(set(doc) - known_keys - {"config"})
    if unknown:
        raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
    for a in sub._actions:  # noqa: SLF001
        if a.dest in doc:
            a.required = False
    sub.set_defaults(**{k: v for k, v in doc.items() if k != "config"})
    args = parser.parse_args(argv)
    for key in ("k", "grid"):
        if key in doc and isinstance(getattr(args, key), list):
            setattr(args, key, tuple(getattr(args, key)))
    return args


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=str(args.log_level).upper(), format="%(levelname)s %(message)s")
        return args.func(args)
    except UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return EXIT_USAGE
    except NumericError as exc:
        sys.stderr.write(f"numeric error: {exc}\n")
        return EXIT_NUMERIC
    except (DataError, ServiceError, SceneGraphVPRError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_DATA
    except ValueError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return EXIT_USAGE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
