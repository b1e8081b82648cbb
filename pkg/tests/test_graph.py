import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scenegraph_vpr.errors import IntegrityError, SchemaError
from scenegraph_vpr.graph import (
    SceneEdge,
    SceneGraph,
    SceneNode,
    canonical_serialize,
    graph_stats,
    normalize_text,
    parse_scene_graph,
    read_graphs,
    write_graphs,
)

from graphgen import random_graph


def _doc(nodes, edges, **extra):
    return json.dumps({"nodes": nodes, "edges": edges, **extra})


class TestNormalization:
    def test_lower_trim_collapse(self):
        assert normalize_text("  Tall   BRICK\tbuilding ") == "tall brick building"

    def test_edge_punctuation_stripped(self):
        assert normalize_text("'red', (old) door!") == "red old door"

    def test_inner_punctuation_kept(self):
        assert normalize_text("o'neill's cafe") == "o'neill's cafe"

    def test_node_normalizes_and_dedupes(self):
        n = SceneNode("a", " Building ", ("Red", "red ", "tall"))
        assert n.label == "building"
        assert n.attributes == ("red", "tall")

    def test_empty_label_rejected(self):
        with pytest.raises(SchemaError):
            SceneNode("a", "  ..  ")


class TestValidation:
    def test_round_trip(self):
        text = _doc(
            [{"id": "x", "label": "building", "attributes": ["tall", "brick"]},
             {"id": "y", "label": "house", "attributes": ["white"]}],
            [{"source": "x", "target": "y", "relation": "left of"}],
        )
        g = parse_scene_graph(text)
        assert g.node_count == 2
        assert g.edges[0].relation == "left of"

    def test_dangling_endpoint(self):
        text = _doc([{"id": "x", "label": "tree", "attributes": []}],
                    [{"source": "x", "target": "z", "relation": "behind"}])
        with pytest.raises(IntegrityError):
            parse_scene_graph(text)

    def test_duplicate_node_id(self):
        text = _doc([{"id": "x", "label": "tree", "attributes": []}] * 2, [])
        with pytest.raises(IntegrityError):
            parse_scene_graph(text)

    def test_duplicate_edge(self):
        e = {"source": "x", "target": "y", "relation": "behind"}
        text = _doc([{"id": "x", "label": "tree", "attributes": []},
                     {"id": "y", "label": "wall", "attributes": []}], [e, e])
        with pytest.raises(IntegrityError):
            parse_scene_graph(text)

    def test_self_loop(self):
        text = _doc([{"id": "x", "label": "tree", "attributes": []}],
                    [{"source": "x", "target": "x", "relation": "behind"}])
        with pytest.raises(IntegrityError):
            parse_scene_graph(text)

    @pytest.mark.parametrize("text", [
        "not json",
        "[]",
        '{"nodes": []}',
        '{"nodes": [{"id": "a", "label": "tree"}], "edges": []}',
        '{"nodes": [{"id": 3, "label": "tree", "attributes": []}], "edges": []}',
        '{"nodes": [], "edges": [], "meta": {"k": 1}}',
    ])
    def test_schema_errors(self, text):
        with pytest.raises(SchemaError):
            parse_scene_graph(text)

    def test_building_tree_document(self):
        text = _doc(
            [{"id": "n1", "label": "building", "attributes": ["classical", "light-colored"]},
             {"id": "n2", "label": "tree", "attributes": []}],
            [{"source": "n1", "target": "n2", "relation": "left of"}],
        )
        g = parse_scene_graph(text)
        assert (g.node_count, len(g.edges)) == (2, 1)
        assert g.node("n1").attributes == ("classical", "light-colored")

    def test_empty_graph_is_valid(self):
        assert parse_scene_graph('{"nodes": [], "edges": []}').node_count == 0


class TestCanonical:
    def test_ids_and_order(self):
        g = SceneGraph(
            [SceneNode("z", "tree", ("green",)), SceneNode("a", "building", ("tall",))],
            [SceneEdge("a", "z", "left of")],
        )
        doc = json.loads(canonical_serialize(g))
        assert [n["id"] for n in doc["nodes"]] == ["n0", "n1"]
        assert doc["nodes"][0]["label"] == "building"
        assert doc["edges"] == [{"source": "n0", "target": "n1", "relation": "left of"}]

    def test_one_attribute_changes_bytes(self):
        g1 = SceneGraph([SceneNode("a", "house", ("white",))])
        g2 = SceneGraph([SceneNode("a", "house", ("grey",))])
        assert canonical_serialize(g1) != canonical_serialize(g2)

    def test_idempotent(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            g = random_graph(rng)
            once = canonical_serialize(g)
            assert canonical_serialize(parse_scene_graph(once)) == once

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000), st.randoms(use_true_random=False))
    def test_invariant_under_relabeling(self, seed, rnd):
        g = random_graph(np.random.default_rng(seed))
        ids = [n.id for n in g.nodes]
        new = ids[:]
        rnd.shuffle(new)
        ren = {o: f"q{n}" for o, n in zip(ids, new)}
        nodes = [SceneNode(ren[n.id], n.label, n.attributes) for n in g.nodes]
        rnd.shuffle(nodes)
        edges = [SceneEdge(ren[e.source], ren[e.target], e.relation) for e in g.edges]
        rnd.shuffle(edges)
        assert canonical_serialize(SceneGraph(nodes, edges)) == canonical_serialize(g)

    def test_structure_breaks_content_ties(self):
        # two identical trees, only one of which has an outgoing edge
        g1 = SceneGraph([SceneNode("a", "tree"), SceneNode("b", "tree"), SceneNode("c", "wall")],
                        [SceneEdge("a", "c", "behind")])
        g2 = SceneGraph([SceneNode("a", "tree"), SceneNode("b", "tree"), SceneNode("c", "wall")],
                        [SceneEdge("b", "c", "behind")])
        assert canonical_serialize(g1) == canonical_serialize(g2)

    def test_file_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        graphs = [random_graph(rng) for _ in range(4)]
        write_graphs(tmp_path / "g.jsonl", graphs)
        back = read_graphs(tmp_path / "g.jsonl")
        assert [canonical_serialize(g) for g in back] == [canonical_serialize(g) for g in graphs]

    def test_pretty_printed_single_document(self, tmp_path):
        g = random_graph(np.random.default_rng(1))
        (tmp_path / "g.json").write_text(json.dumps(g.to_dict(), indent=2))
        assert canonical_serialize(read_graphs(tmp_path / "g.json")[0]) == canonical_serialize(g)


def _stats_oracle(g):
    """All-pairs BFS written independently of the library."""
    ids = [n.id for n in g.nodes]
    nbrs = {u: set() for u in ids}
    for e in g.edges:
        nbrs[e.source].add(e.target)
        nbrs[e.target].add(e.source)
    n = len(ids)
    m = sum(len(v) for v in nbrs.values()) / 2
    lengths = []
    for i, u in enumerate(ids):
        dist, frontier = {u: 0}, [u]
        while frontier:
            nxt = []
            for a in frontier:
                for b in sorted(nbrs[a]):
                    if b not in dist:
                        dist[b] = dist[a] + 1
                        nxt.append(b)
            frontier = nxt
        lengths += [d for v, d in dist.items() if ids.index(v) > i]
    return (n, 2 * m / n if n else 0.0, 2 * m / (n * (n - 1)) if n > 1 else 0.0,
            sum(lengths) / len(lengths) if lengths else 0.0)


class TestStats:
    def test_three_node_path(self):
        nodes = [SceneNode(f"n{i}", "tree") for i in (1, 2, 3)]
        g = SceneGraph(nodes, [SceneEdge("n1", "n2", "next to"), SceneEdge("n2", "n3", "next to")])
        s = graph_stats(g)
        assert s.node_count == 3
        np.testing.assert_allclose([s.avg_degree, s.density, s.avg_shortest_path], [4 / 3, 2 / 3, 4 / 3],
                                   rtol=0, atol=1e-15)

    def test_against_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(30):
            g = random_graph(rng, 1, 9, p_edge=float(rng.uniform(0.05, 0.4)))
            s = graph_stats(g)
            np.testing.assert_allclose(
                [s.node_count, s.avg_degree, s.density, s.avg_shortest_path], _stats_oracle(g), rtol=0, atol=1e-12
            )

    def test_path_stats(self):
        nodes = [SceneNode(f"v{i}", "tree") for i in range(4)]
        g = SceneGraph(nodes, [SceneEdge(f"v{i}", f"v{i + 1}", "next to") for i in range(3)])
        s = graph_stats(g)
        assert s.node_count == 4
        assert s.avg_degree == pytest.approx(1.5)
        assert s.density == pytest.approx(0.5)
        # pair distances 1,1,1,2,2,3
        assert s.avg_shortest_path == pytest.approx(10 / 6)

    def test_reciprocal_edges_count_once(self):
        g = SceneGraph([SceneNode("a", "tree"), SceneNode("b", "wall")],
                       [SceneEdge("a", "b", "left of"), SceneEdge("b", "a", "right of")])
        assert graph_stats(g).avg_degree == pytest.approx(1.0)

    def test_empty_and_singleton(self):
        assert graph_stats(SceneGraph()).node_count == 0
        s = graph_stats(SceneGraph([SceneNode("a", "tree")]))
        assert (s.avg_degree, s.density, s.avg_shortest_path) == (0.0, 0.0, 0.0)
