import itertools
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from scenegraph_vpr.errors import EmptyInput
from scenegraph_vpr.graph import SceneEdge, SceneGraph, SceneNode, canonical_serialize
from scenegraph_vpr.merge import MergeConfig, UnionFind, attribute_tokens, merge_graphs, tfidf_cosine

from graphgen import random_graph


def tfidf_oracle(a, b, corpus):
    """Plain dictionary TF-IDF with smoothed idf and dot/norm cosine."""
    n = len(corpus)
    vocab = sorted(set(a) | set(b) | {t for d in corpus for t in d})

    def vec(doc):
        out = []
        for t in vocab:
            df = sum(1 for d in corpus if t in d)
            out.append(doc.count(t) * (math.log((1 + n) / (1 + df)) + 1))
        return np.array(out)

    va, vb = vec(a), vec(b)
    return float(va @ vb / (np.linalg.norm(va) * np.linalg.norm(vb)))


def _frame(*nodes, edges=()):
    return SceneGraph([SceneNode(f"f{i}", lab, attrs) for i, (lab, attrs) in enumerate(nodes)],
                      [SceneEdge(f"f{s}", f"f{t}", r) for s, t, r in edges])


class TestTfidf:
    def test_identical(self):
        assert tfidf_cosine(["red", "brick"], ["red", "brick"], [["red", "brick"], ["x"]]) == 1.0

    def test_disjoint(self):
        assert tfidf_cosine(["red"], ["white"], [["red"], ["white"]]) == 0.0

    def test_oracle_example(self):
        corpus = [["tall", "brick"], ["brick"], ["white"]]
        got = tfidf_cosine(["tall", "brick"], ["brick"], corpus)
        assert abs(got - tfidf_oracle(["tall", "brick"], ["brick"], corpus)) < 1e-12

    def test_random_against_oracle(self):
        rng = np.random.default_rng(5)
        words = ["red", "tall", "brick", "old", "glass", "white"]
        for _ in range(50):
            corpus = [list(rng.choice(words, size=rng.integers(1, 5))) for _ in range(6)]
            a, b = corpus[0], corpus[1]
            assert abs(tfidf_cosine(a, b, corpus) - tfidf_oracle(a, b, corpus)) < 1e-12

    def test_empty_documents(self):
        assert tfidf_cosine([], [], [[]]) == 1.0
        assert tfidf_cosine([], ["red"], [["red"]]) == 0.0

    def test_attribute_tokens(self):
        assert attribute_tokens(["light coloured", "tall"]) == ["light", "coloured", "tall"]


class TestUnionFind:
    def test_groups(self):
        uf = UnionFind(5)
        uf.union(0, 1)
        uf.union(3, 4)
        uf.union(1, 4)
        assert sorted(sorted(g) for g in uf.groups().values()) == [[0, 1, 3, 4], [2]]

    def test_transitive_matrix(self):
        sims = {(0, 1): 0.75, (1, 2): 0.72, (0, 2): 0.40}
        uf = UnionFind(3)
        for (a, b), s in sims.items():
            if s >= 0.7:
                uf.union(a, b)
        assert len(uf.groups()) == 1


class TestMerge:
    def test_identical_mentions(self):
        f = _frame(("building", ("tall", "brick")))
        res = merge_graphs([f, f])
        assert res.merged.node_count == 1
        assert res.merged.nodes[0].attributes == ("brick", "tall")
        assert res.component_sizes == [2]

    def test_transitive_linking(self):
        a, b, c = ("red", "tall", "brick"), ("red", "tall", "brick", "old"), ("tall", "brick", "old")
        corpus = [list(a), list(b), list(c)]
        assert tfidf_oracle(list(a), list(c), corpus) < 0.7
        assert tfidf_oracle(list(a), list(b), corpus) >= 0.7 and tfidf_oracle(list(b), list(c), corpus) >= 0.7
        res = merge_graphs([_frame(("house", a)), _frame(("house", b)), _frame(("house", c))])
        assert res.merged.node_count == 1
        assert res.merged.nodes[0].attributes == ("brick", "old", "red", "tall")

    def test_labels_never_merge_across(self):
        res = merge_graphs([_frame(("house", ("red",))), _frame(("tree", ("red",)))])
        assert res.merged.node_count == 2

    def test_edges_remapped_and_deduplicated(self):
        f1 = _frame(("tree", ()), ("wall", ("stone",)), edges=[(0, 1, "behind")])
        f2 = _frame(("wall", ("stone",)), ("tree", ()), edges=[(1, 0, "behind")])
        res = merge_graphs([f1, f2])
        assert res.merged.node_count == 2
        assert len(res.merged.edges) == 1
        assert res.node_map[(0, "f0")] == res.node_map[(1, "f1")]

    def test_intra_frame_edge_collapse_dropped(self):
        f = _frame(("tree", ("green",)), ("tree", ("green",)), edges=[(0, 1, "next to")])
        merged = merge_graphs([f]).merged
        assert (merged.node_count, len(merged.edges)) == (1, 0)
        kept = merge_graphs([f], MergeConfig(allow_intra_frame_merge=False)).merged
        assert (kept.node_count, len(kept.edges)) == (2, 1)

    def test_threshold_one_merges_only_equal_documents(self):
        res = merge_graphs([_frame(("house", ("red", "old"))), _frame(("house", ("red",)))], MergeConfig(1.0))
        assert res.merged.node_count == 2

    def test_place_id_meta(self):
        f = SceneGraph([SceneNode("a", "tree")], meta={"place_id": "p1"})
        assert merge_graphs([f, f]).merged.meta == {"place_id": "p1"}

    def test_empty_input(self):
        with pytest.raises(EmptyInput):
            merge_graphs([])

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            MergeConfig(1.5)

    def test_components_match_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            frames = [random_graph(rng, 2, 6) for _ in range(3)]
            items = [n for g in frames for n in g.nodes]
            docs = [attribute_tokens(n.attributes) for n in items]
            n = len(items)
            adj = np.zeros((n, n))
            for i, j in itertools.combinations(range(n), 2):
                if items[i].label == items[j].label:
                    if not docs[i] and not docs[j]:
                        s = 1.0
                    elif not docs[i] or not docs[j]:
                        s = 0.0
                    else:
                        s = tfidf_oracle(docs[i], docs[j], docs)
                    if s >= 0.7 - 1e-12:
                        adj[i, j] = adj[j, i] = 1
            k, labels = connected_components(csr_matrix(adj), directed=False)
            res = merge_graphs(frames)
            assert res.merged.node_count == k
            assert sorted(res.component_sizes) == sorted(Counter(labels).values())

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.permutations(range(4)))
    def test_frame_order_invariance(self, seed, perm):
        rng = np.random.default_rng(seed)
        frames = [random_graph(rng, 2, 6) for _ in range(4)]
        base = canonical_serialize(merge_graphs(frames).merged)
        assert canonical_serialize(merge_graphs([frames[i] for i in perm]).merged) == base
        assert canonical_serialize(merge_graphs(frames[::-1]).merged) == base
