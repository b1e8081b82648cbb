"""The command-line pipeline, stage by stage, in a scratch directory.

Equivalent shell commands are printed before each stage.
"""

import json
import shlex
import tempfile
from pathlib import Path

from scenegraph_vpr.cli import run

work = Path(tempfile.mkdtemp(prefix="scenegraph-vpr-"))


def stage(*argv):
    print("$ scenegraph-vpr", shlex.join(argv))
    code = run(list(argv))
    assert code == 0, code


stage("fixture", "--out-dir", str(work), "--places", "15", "--seed", "2")
stage("train", "--pairs", str(work / "pairs.jsonl"), "--out", str(work / "ckpt.bin"), "--dim", "256",
      "--epochs", "20", "--batch-size", "16", "--hidden-dim", "64", "--output-dim", "64",
      "--learning-rate", "1e-3", "--report", str(work / "train.json"))
stage("index", "--manifest", str(work / "index_manifest.jsonl"), "--checkpoint", str(work / "ckpt.bin"),
      "--out", str(work / "index.jsonl"), "--jobs", "2")
stage("eval", "--index", str(work / "index.jsonl"), "--checkpoint", str(work / "ckpt.bin"),
      "--queries", str(work / "query_manifest.jsonl"), "--radius", "25", "--k", "1,5,10",
      "--out", str(work / "report.json"))
print(json.loads((work / "report.json").read_text())["recall"])

desc = json.loads((work / "descriptions.jsonl").read_text().splitlines()[0])
stage("query", "--index", str(work / "index.jsonl"), "--checkpoint", str(work / "ckpt.bin"),
      "--text", desc["text"], "--k", "3", "--alpha", "rules", "--out", str(work / "hits.json"))
print("expected", desc["place_id"])
for h in json.loads((work / "hits.json").read_text())["hits"]:
    print(f"  {h['rank']}. {h['place_id']}  score {h['score']:.3f}  sem {h['sem']:.3f}  struct {h['struct']:.3f}")
print("artifacts in", work)
