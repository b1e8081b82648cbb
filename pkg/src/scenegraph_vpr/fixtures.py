"""Seeded synthetic places for desk-scale end-to-end evaluation.

Every place is a street scene: a row of static objects with attributes and
spatial relations between neighbours.  A traversal ("variant") of a place
is a short sequence of frames, each seeing a sliding window of the row and
described in the constrained grammar.  Variants differ only through
attribute dropout and synonym substitution, so with zero noise every
variant reproduces the clean scene exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .describe import parse_description
from .evaluation import FrameManifestEntry, destination, group_sequences
from .merge import MergeConfig, merge_graphs
from .train import TrainingPair

LABELS = (
    "building", "house", "tree", "shop", "church", "tower", "sign", "street sign",
    "traffic light", "lamp post", "bench", "fence", "wall", "hedge", "bus stop",
    "mailbox", "statue", "fountain", "kiosk", "billboard", "gate", "cafe", "bridge",
    "bush", "pole", "awning", "balcony", "door", "window", "clock",
)

ATTRIBUTES = {
    "colour": ("red", "white", "grey", "black", "green", "blue", "yellow", "brown", "beige", "orange"),
    "material": ("brick", "stone", "glass", "metal", "wooden", "concrete", "marble", "iron"),
    "size": ("tall", "short", "large", "small", "narrow", "wide"),
    "style": ("modern", "classical", "victorian", "gothic", "ornate", "plain", "arched", "striped", "old", "painted"),
}

DEFAULT_SYNONYMS = {
    "large": "big", "small": "little", "tall": "high", "grey": "gray", "wooden": "timber",
    "old": "aged", "modern": "contemporary", "red": "crimson", "white": "pale", "wide": "broad",
    "short": "low", "ornate": "decorated", "plain": "simple", "painted": "coloured", "metal": "steel",
}

RELATIONS = ("left of", "right of", "in front of", "behind", "next to", "close by", "on top of", "beside")

_DB_SURFACE = {"left of": "to the left of", "right of": "to the right of"}
_HUMAN_SURFACE = {
    "left of": "is to the left of", "right of": "is on the right of", "in front of": "stands in front of",
    "behind": "is behind", "next to": "is next to", "close by": "is close to", "on top of": "is on top of",
    "beside": "is beside",
}


@dataclass(frozen=True)
class SceneObject:
    label: str
    attributes: tuple[str, ...]


@dataclass(frozen=True)
class PlaceScene:
    place_id: str
    objects: tuple[SceneObject, ...]
    relations: tuple[tuple[int, int, str], ...]
    origin: tuple[float, float]
    heading_deg: float


@dataclass
class NoiseModel:
    dropout: float = 0.2
    synonym_prob: float = 0.2
    synonyms: Mapping[str, str] = field(default_factory=lambda: dict(DEFAULT_SYNONYMS))

    @property
    def is_zero(self) -> bool:
        return self.dropout == 0 and (self.synonym_prob == 0 or not self.synonyms)


def apply_attribute_noise(attrs: Sequence[str], rng: np.random.Generator, noise: NoiseModel) -> tuple[str, ...]:
    """Drop each attribute with ``noise.dropout``, then swap survivors for synonyms."""
    out = []
    for a in attrs:
        if noise.dropout and rng.random() < noise.dropout:
            continue
        if noise.synonym_prob and a in noise.synonyms and rng.random() < noise.synonym_prob:
            a = noise.synonyms[a]
        out.append(a)
    return tuple(out)


def _mention(obj: SceneObject, attrs: Sequence[str], article: str = "the") -> str:
    return " ".join((article, *attrs, obj.label))


def make_scene(place_id: str, rng: np.random.Generator, origin, heading_deg: float,
               n_objects: tuple[int, int] = (6, 10), labels: Sequence[str] = LABELS) -> PlaceScene:
    n = int(rng.integers(n_objects[0], n_objects[1] + 1))
    cats = list(ATTRIBUTES)
    objects: list[SceneObject] = []
    seen = set()
    while len(objects) < n:
        label = labels[rng.integers(len(labels))]
        k = int(rng.integers(1, 4))
        chosen = rng.choice(len(cats), size=k, replace=False)
        attrs = tuple(ATTRIBUTES[cats[c]][rng.integers(len(ATTRIBUTES[cats[c]]))] for c in sorted(chosen))
        key = (label, frozenset(attrs))
        if key in seen:
            continue
        seen.add(key)
        objects.append(SceneObject(label, attrs))
    rels = set()
    for i in range(n - 1):
        rels.add((i, i + 1, RELATIONS[rng.integers(len(RELATIONS))]))
    for _ in range(n // 3):
        i = int(rng.integers(n))
        j = int(rng.integers(max(0, i - 2), min(n, i + 3)))
        if i != j:
            rels.add((i, j, RELATIONS[rng.integers(len(RELATIONS))]))
    return PlaceScene(place_id, tuple(objects), tuple(sorted(rels)), origin, heading_deg)


def frame_windows(n_objects: int, n_frames: int) -> list[range]:
    """Objects visible in each frame: a window sliding along the row."""
    w = min(n_objects, max(2, math.ceil(n_objects / 2) + 1))
    if n_frames == 1:
        return [range(n_objects)]
    return [
        range(s, s + w)
        for s in (round(f * (n_objects - w) / (n_frames - 1)) for f in range(n_frames))
    ]


def frame_caption(scene: PlaceScene, visible: range, rng: np.random.Generator, noise: NoiseModel) -> str:
    attrs = {i: apply_attribute_noise(scene.objects[i].attributes, rng, noise) for i in visible}
    sentences, mentioned = [], set()
    for i, j, rel in scene.relations:
        if i in attrs and j in attrs:
            surface = _DB_SURFACE.get(rel, rel)
            sentences.append(
                f"{_mention(scene.objects[i], attrs[i], 'a')} {surface} {_mention(scene.objects[j], attrs[j], 'a')}"
            )
            mentioned.update((i, j))
    for i in visible:
        if i not in mentioned:
            sentences.append(_mention(scene.objects[i], attrs[i], "a"))
    return ". ".join(sentences) + "."


def human_description(scene: PlaceScene, rng: np.random.Generator | None = None,
                      noise: NoiseModel | None = None) -> str:
    """A free-standing description of the whole place in a different register."""
    noise = noise or NoiseModel(0.0, 0.0)
    rng = rng or np.random.default_rng(0)
    attrs = [apply_attribute_noise(o.attributes, rng, noise) for o in scene.objects]
    sentences, mentioned = [], set()
    for i, j, rel in scene.relations:
        sentences.append(
            f"{_mention(scene.objects[i], attrs[i]).capitalize()} {_HUMAN_SURFACE[rel]} "
            f"{_mention(scene.objects[j], attrs[j])}"
        )
        mentioned.update((i, j))
    for i, o in enumerate(scene.objects):
        if i not in mentioned:
            sentences.append(_mention(o, attrs[i], "a").capitalize())
    return ". ".join(sentences) + "."


@dataclass
class SyntheticFixture:
    """Training pairs, database and query manifests, plus the underlying scenes."""

    pairs: list[TrainingPair]
    index_manifest: list[FrameManifestEntry]
    query_manifest: list[FrameManifestEntry]
    scenes: list[PlaceScene]

    def __iter__(self):
        return iter((self.pairs, self.index_manifest, self.query_manifest))


def _variant_frames(scene: PlaceScene, variant: int, n_frames: int, rng, noise: NoiseModel,
                    frame_step_m: float, lateral_m: float) -> list[FrameManifestEntry]:
    windows = frame_windows(len(scene.objects), n_frames)
    start = destination(scene.origin, scene.heading_deg + 90.0, lateral_m * variant)
    out = []
    for f, window in enumerate(windows):
        lat, lon = destination(start, scene.heading_deg, frame_step_m * f)
        out.append(
            FrameManifestEntry(
                f"{scene.place_id}/v{variant}", f, lat, lon, frame_caption(scene, window, rng, noise)
            )
        )
    return out


def generate_synthetic_fixture(
    seed: int = 0,
    n_places: int = 50,
    variants_per_place: int = 3,
    noise: NoiseModel | None = None,
    frames_per_place: int = 5,
    place_spacing_m: float = 150.0,
    frame_step_m: float = 2.0,
    lateral_m: float = 1.5,
    origin: tuple[float, float] = (51.752, -1.258),
    merge_cfg: MergeConfig | None = None,
    label_pool: int | None = None,
) -> SyntheticFixture:
    """Build a fixture of ``n_places`` places with ``variants_per_place`` traversals each.

    Variant 0 of every place goes to the database manifest, the last variant
    to the query manifest and the ones in between form anchor/positive
    training pairs with variant 0 (with two variants, the query traversal is
    also the training positive).  ``label_pool`` restricts object labels to
    the first N entries of ``LABELS``, so that places share more objects.
    """
    if n_places < 2:
        raise ValueError("need at least two places")
    if variants_per_place < 2:
        raise ValueError("need at least two variants per place (database + query)")
    noise = noise if noise is not None else NoiseModel()
    labels = LABELS if label_pool is None else LABELS[: max(1, label_pool)]
    rng = np.random.default_rng(seed)
    cols = math.ceil(math.sqrt(n_places))
    scenes = []
    for p in range(n_places):
        row, col = divmod(p, cols)
        north = destination(origin, 0.0, row * place_spacing_m)
        o = destination(north, 90.0, col * place_spacing_m)
        scenes.append(make_scene(f"p{p:04d}", rng, o, float(rng.uniform(0, 360)), labels=labels))

    index_manifest, query_manifest, training = [], [], {}
    for scene in scenes:
        for v in range(variants_per_place):
            frames = _variant_frames(scene, v, frames_per_place, rng, noise, frame_step_m, lateral_m)
            if v == 0:
                index_manifest.extend(frames)
            elif v == variants_per_place - 1:
                query_manifest.extend(frames)
            if 0 < v < variants_per_place - 1 or variants_per_place == 2 and v == 1:
                training.setdefault(scene.place_id, []).append(frames)

    db = group_sequences(index_manifest)
    pairs = []
    for scene in scenes:
        anchor = merge_captions(db[f"{scene.place_id}/v0"], merge_cfg)
        for frames in training.get(scene.place_id, []):
            pairs.append(TrainingPair(anchor, merge_captions(frames, merge_cfg), scene.place_id))
    return SyntheticFixture(pairs, index_manifest, query_manifest, scenes)


def merge_captions(frames: Sequence[FrameManifestEntry], merge_cfg: MergeConfig | None = None):
    graphs = [parse_description(f.caption) for f in frames]
    return merge_graphs(graphs, merge_cfg).merged
