import json
import subprocess
import sys
import warnings

import numpy as np
import pytest

from scenegraph_vpr.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, run
from scenegraph_vpr.evaluation import FrameManifestEntry, destination, haversine_m, read_manifest, write_manifest
from scenegraph_vpr.gat import load_checkpoint
from scenegraph_vpr.graph import canonical_serialize, parse_scene_graph
from scenegraph_vpr.pipeline import place_graphs
from scenegraph_vpr.retrieval import ConstantAlpha, Encoder, load_index, query
from scenegraph_vpr.features import provider_from_config

QUOTED = "a tall brick building to the left of a narrow white house"

QUOTED_FRAMES = [
    "A tall brick building is to the left of a narrow white house.",
    "The narrow white house is next to a green hedge.",
    "A tall brick building is behind a red post box. The red post box is next to the narrow white house.",
    "The green hedge is in front of a wooden bench.",
    "A tall brick building is to the left of a narrow white house.",
]

TRAIN_FLAGS = ["--dim", "64", "--epochs", "3", "--batch-size", "16", "--hidden-dim", "32",
               "--output-dim", "32", "--heads", "2", "--learning-rate", "1e-3"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A small fixture, trained encoder and index, shared by the CLI tests."""
    d = tmp_path_factory.mktemp("cli")
    assert run(["fixture", "--out-dir", str(d), "--places", "12", "--seed", "1"]) == EXIT_OK
    db = read_manifest(d / "index_manifest.jsonl")
    origin = destination((51.752, -1.258), 200.0, 3000.0)
    extra = [FrameManifestEntry("quoted/v0", i, *destination(origin, 30.0, 2.0 * i), caption=c)
             for i, c in enumerate(QUOTED_FRAMES)]
    write_manifest(d / "index_manifest.jsonl", db + extra)
    assert run(["train", "--pairs", str(d / "pairs.jsonl"), "--out", str(d / "ckpt.bin"), *TRAIN_FLAGS]) == EXIT_OK
    assert run(["index", "--manifest", str(d / "index_manifest.jsonl"), "--checkpoint", str(d / "ckpt.bin"),
                "--out", str(d / "index.jsonl")]) == EXIT_OK
    return d


def _json_out(capsys):
    return json.loads(capsys.readouterr().out)


class TestParseAndMerge:
    def test_parse_text(self, capsys):
        assert run(["parse", "--text", QUOTED]) == EXIT_OK
        g = parse_scene_graph(capsys.readouterr().out)
        assert sorted(n.label for n in g.nodes) == ["building", "house"]

    def test_merge_file_order_byte_identical(self, tmp_path):
        texts = ["a red door next to a tall tree", "the tall tree is behind a stone wall",
                 "a red door is to the left of a stone wall"]
        paths = []
        for i, t in enumerate(texts):
            p = tmp_path / f"f{i}.json"
            assert run(["parse", "--text", t, "--out", str(p)]) == EXIT_OK
            paths.append(str(p))
        out1, out2 = tmp_path / "p1.json", tmp_path / "p2.json"
        assert run(["merge", "--threshold", "0.7", *paths, "--out", str(out1)]) == EXIT_OK
        assert run(["merge", "--threshold", "0.7", *paths[::-1], "--out", str(out2)]) == EXIT_OK
        assert out1.read_bytes() == out2.read_bytes()
        assert parse_scene_graph(out1.read_text()).node_count == 3

    def test_features_store(self, tmp_path):
        g = tmp_path / "g.json"
        run(["parse", "--text", QUOTED, "--out", str(g)])
        assert run(["features", str(g), "--dim", "16", "--out", str(tmp_path / "s.jsonl")]) == EXIT_OK
        lines = (tmp_path / "s.jsonl").read_text().splitlines()
        assert len(lines) == 4  # header + two node phrases + one relation


class TestQuery:
    def test_quoted_sentence_in_top_five(self, workspace, capsys):
        argv = ["query", "--index", str(workspace / "index.jsonl"), "--checkpoint", str(workspace / "ckpt.bin"),
                "--text", QUOTED, "--k", "5"]
        assert run(argv) == EXIT_OK
        doc = _json_out(capsys)
        assert len(doc["hits"]) == 5
        assert "quoted/v0" in [h["place_id"] for h in doc["hits"]]
        for h in doc["hits"]:
            assert h["score"] == pytest.approx(h["alpha"] * h["sem"] + (1 - h["alpha"]) * h["struct"], abs=1e-12)

    def test_alpha_policies(self, workspace, capsys):
        base = ["query", "--index", str(workspace / "index.jsonl"), "--checkpoint", str(workspace / "ckpt.bin"),
                "--text", QUOTED, "--k", "1"]
        assert run(base + ["--alpha", "rules"]) == EXIT_OK
        assert _json_out(capsys)["hits"][0]["alpha"] == 0.8
        policy = workspace / "pol.json"
        policy.write_text(json.dumps({"kind": "constant", "c": 0.25}))
        assert run(base + ["--alpha", str(policy)]) == EXIT_OK
        assert _json_out(capsys)["hits"][0]["alpha"] == 0.25
        assert run(base + ["--alpha", "nonsense"]) == EXIT_USAGE

    def test_config_file_and_flag_precedence(self, workspace, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"index": str(workspace / "index.jsonl"),
                                   "checkpoint": str(workspace / "ckpt.bin"), "k": 3}))
        assert run(["query", "--config", str(cfg), "--text", QUOTED]) == EXIT_OK
        assert len(_json_out(capsys)["hits"]) == 3
        assert run(["query", "--config", str(cfg), "--text", QUOTED, "--k", "2"]) == EXIT_OK
        assert len(_json_out(capsys)["hits"]) == 2

    def test_unknown_config_key(self, workspace, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"bogus": 1}))
        assert run(["query", "--config", str(cfg), "--text", QUOTED, "--index", "x", "--checkpoint", "y"]) == EXIT_USAGE

    def test_checkpoint_mismatch(self, workspace, tmp_path):
        other = tmp_path / "other.bin"
        assert run(["train", "--pairs", str(workspace / "pairs.jsonl"), "--out", str(other), "--seed", "9",
                    *TRAIN_FLAGS]) == EXIT_OK
        argv = ["query", "--index", str(workspace / "index.jsonl"), "--checkpoint", str(other), "--text", QUOTED]
        assert run(argv) == EXIT_DATA


class TestEval:
    def test_report_matches_oracle(self, workspace, capsys):
        argv = ["eval", "--index", str(workspace / "index.jsonl"), "--checkpoint", str(workspace / "ckpt.bin"),
                "--queries", str(workspace / "query_manifest.jsonl"), "--radius", "25", "--k", "1,5,10,20"]
        assert run(argv) == EXIT_OK
        doc = _json_out(capsys)
        assert doc["radius_m"] == 25.0 and doc["query_count"] == 12

        header, records = load_index(workspace / "index.jsonl")
        params, cfg = load_checkpoint(workspace / "ckpt.bin")
        enc = Encoder(params, cfg, provider_from_config(header["provider"]))
        positions = {r.place_id: r.coords for r in records}
        queries = place_graphs(read_manifest(workspace / "query_manifest.jsonl"))
        want = {}
        for k in (1, 5, 10, 20):
            hits = 0
            for coords, g in queries.values():
                ranked = [h.place_id for h in query(g, records, k, ConstantAlpha(0.8), enc)]
                hits += any(haversine_m(coords, positions[p]) <= 25.0 for p in ranked)
            want[str(k)] = 100.0 * hits / len(queries)
        assert doc["recall"] == want

    def test_alpha_subcommand(self, workspace, capsys):
        argv = ["alpha", "--index", str(workspace / "index.jsonl"), "--checkpoint", str(workspace / "ckpt.bin"),
                "--queries", str(workspace / "query_manifest.jsonl"), "--grid", "0,0.5,1"]
        # all-equal grid targets fall back to a constant policy with a warning
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            assert run(argv) == EXIT_OK
        doc = _json_out(capsys)
        assert doc["kind"] in ("regressor", "constant")


class TestDeterminism:
    def test_jobs_do_not_change_index(self, workspace, tmp_path):
        outs = []
        for jobs in ("1", "4"):
            out = tmp_path / f"idx{jobs}.jsonl"
            assert run(["index", "--manifest", str(workspace / "index_manifest.jsonl"), "--checkpoint",
                        str(workspace / "ckpt.bin"), "--out", str(out), "--jobs", jobs]) == EXIT_OK
            outs.append(out.read_bytes())
        assert outs[0] == outs[1] == (workspace / "index.jsonl").read_bytes()

    def test_train_rerun_byte_identical(self, workspace, tmp_path):
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        for out in (a, b):
            assert run(["train", "--pairs", str(workspace / "pairs.jsonl"), "--out", str(out), *TRAIN_FLAGS]) == 0
        assert a.read_bytes() == b.read_bytes() == (workspace / "ckpt.bin").read_bytes()

    def test_fixture_rerun_byte_identical(self, workspace, tmp_path):
        assert run(["fixture", "--out-dir", str(tmp_path), "--places", "12", "--seed", "1"]) == EXIT_OK
        for name in ("query_manifest.jsonl", "pairs.jsonl", "descriptions.jsonl"):
            assert (tmp_path / name).read_bytes() == (workspace / name).read_bytes()


class TestExitCodes:
    def test_unknown_flag(self):
        assert run(["merge", "--bogus", "x"]) == EXIT_USAGE

    def test_unknown_subcommand(self):
        assert run(["frobnicate"]) == EXIT_USAGE

    def test_missing_file(self, tmp_path):
        assert run(["merge", str(tmp_path / "absent.json")]) == EXIT_DATA

    def test_grammar_error_is_data(self):
        assert run(["parse", "--text", "a tree beneath a house"]) == EXIT_DATA

    def test_non_finite_loss_is_numeric(self, workspace, tmp_path):
        argv = ["train", "--pairs", str(workspace / "pairs.jsonl"), "--out", str(tmp_path / "c.bin"),
                *TRAIN_FLAGS, "--temperature", "1e-320"]
        with np.errstate(all="ignore"):
            assert run(argv) == EXIT_NUMERIC

    def test_console_script(self):
        proc = subprocess.run([sys.executable, "-m", "scenegraph_vpr.cli", "parse", "--text", "a tree"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert canonical_serialize(parse_scene_graph(proc.stdout)) == proc.stdout.strip()
