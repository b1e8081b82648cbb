"""Manifests, geographic helpers, Recall@K and synthetic evaluation fixtures."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError, MissingCoordinates

EARTH_RADIUS_M = 6_371_000.0


def haversine_m(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Great-circle distance in metres between (lat, lon) pairs in degrees."""
    lat1, lon1 = map(math.radians, a)
    lat2, lon2 = map(math.radians, b)
    h = math.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    return 2.0 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def destination(origin: tuple[float, float], bearing_deg: float, distance_m: float) -> tuple[float, float]:
    """Point reached from ``origin`` along a great circle."""
    lat1, lon1 = map(math.radians, origin)
    th = math.radians(bearing_deg)
    dr = distance_m / EARTH_RADIUS_M
    lat2 = math.asin(math.sin(lat1) * math.cos(dr) + math.cos(lat1) * math.sin(dr) * math.cos(th))
    lon2 = lon1 + math.atan2(
        math.sin(th) * math.sin(dr) * math.cos(lat1), math.cos(dr) - math.sin(lat1) * math.sin(lat2)
    )
    return math.degrees(lat2), (math.degrees(lon2) + 540.0) % 360.0 - 180.0


@dataclass(frozen=True)
class FrameManifestEntry:
    seq_id: str
    frame_idx: int
    lat: float
    lon: float
    caption: str | None = None
    graph_path: str | None = None

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0 or not -180.0 <= self.lon <= 180.0:
            raise DataError(f"frame {self.seq_id}:{self.frame_idx} has invalid coordinates")

    @property
    def coords(self) -> tuple[float, float]:
        return self.lat, self.lon


def read_manifest(path) -> list[FrameManifestEntry]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append(FrameManifestEntry(**json.loads(line)))
        except (TypeError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}:{lineno}: bad manifest record ({exc})") from None
    return out


def write_manifest(path, entries: Sequence[FrameManifestEntry]) -> None:
    Path(path).write_text(
        "".join(json.dumps(asdict(e), ensure_ascii=False) + "\n" for e in entries), encoding="utf-8"
    )


def group_sequences(entries: Sequence[FrameManifestEntry]) -> dict[str, list[FrameManifestEntry]]:
    """Frames per sequence, ordered by frame index; sequences in first-seen order."""
    seqs: dict[str, list[FrameManifestEntry]] = {}
    for e in entries:
        seqs.setdefault(e.seq_id, []).append(e)
    return {k: sorted(v, key=lambda e: e.frame_idx) for k, v in seqs.items()}


def sequence_coords(frames: Sequence[FrameManifestEntry]) -> tuple[float, float]:
    """Ground-truth position of a sequence: the mean of its frame coordinates."""
    return (float(np.mean([f.lat for f in frames])), float(np.mean([f.lon for f in frames])))


def sample_sequence(frames: Sequence[FrameManifestEntry], spacing_m: float = 2.0) -> list[FrameManifestEntry]:
    """Greedy subsampling: keep a frame once it is ``spacing_m`` from the last kept one."""
    kept: list[FrameManifestEntry] = []
    for f in frames:
        if not kept or haversine_m(kept[-1].coords, f.coords) >= spacing_m:
            kept.append(f)
    return kept


@dataclass(frozen=True)
class EvalConfig:
    radius_m: float = 25.0
    ks: tuple[int, ...] = (1, 5, 10, 20)

    def __post_init__(self):
        if self.radius_m <= 0:
            raise ValueError("radius_m must be positive")
        ks = tuple(int(k) for k in self.ks)
        if not ks or any(k < 1 for k in ks) or list(ks) != sorted(set(ks)):
            raise ValueError(f"ks must be unique, ascending and positive, got {self.ks}")
        object.__setattr__(self, "ks", ks)


@dataclass
class RecallReport:
    recalls: dict[int, float]
    query_count: int
    traces: dict[str, list[dict]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "recall": {str(k): v for k, v in self.recalls.items()},
            "query_count": self.query_count,
            "traces": self.traces,
        }

    def table(self) -> str:
        head = "".join(f"{'R@' + str(k):>9}" for k in self.recalls)
        row = "".join(f"{v:>9.1f}" for v in self.recalls.values())
        return f"{'queries':>8}{head}\n{self.query_count:>8}{row}\n"


def recall_at_k(
    rankings: Mapping[str, Sequence[str]],
    positions: Mapping[str, tuple[float, float]],
    queries: Mapping[str, tuple[float, float]],
    cfg: EvalConfig = EvalConfig(),
) -> RecallReport:
    """Percentage of queries with a candidate inside ``radius_m`` among the top K."""
    kmax = max(cfg.ks)
    first_hit: dict[str, int | None] = {}
    traces: dict[str, list[dict]] = {}
    for qid, ranked in rankings.items():
        if qid not in queries:
            raise MissingCoordinates(f"query {qid!r} has no coordinates")
        hit_at = None
        trace = []
        for r, pid in enumerate(ranked, start=1):
            if pid not in positions:
                raise MissingCoordinates(f"candidate {pid!r} has no coordinates")
            d = haversine_m(queries[qid], positions[pid])
            ok = d <= cfg.radius_m
            if ok and hit_at is None:
                hit_at = r
            if r <= kmax:
                trace.append({"rank": r, "place_id": pid, "distance_m": round(d, 3), "hit": ok})
        first_hit[qid] = hit_at
        traces[qid] = trace
    n = len(rankings)
    recalls = {
        k: (100.0 * sum(1 for h in first_hit.values() if h is not None and h <= k) / n if n else 0.0)
        for k in cfg.ks
    }
    return RecallReport(recalls, n, traces)
