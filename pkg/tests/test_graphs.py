"""Subgraph construction: content nodes, retrieval attachment, PMI edges,
adjacency normalization, and the graphs file."""

import math

import numpy as np
import pytest

from graphkd.datagen import ManifestRecord
from graphkd.embeddings import EmbeddingStore, Triplet, TripletStore, toy_embed
from graphkd.errors import ConfigError, DataError, FormatError, NumericError
from graphkd.graphs import (CONTENT_KINDS, CooccurrenceStats, Node, RetrievalHit,
                            Subgraph, attach_commonsense, build_content_nodes,
                            build_edges, normalize_adjacency, pmi_weight,
                            read_graphs, write_graphs)


def _record(**overrides):
    base = dict(sample_id="s0", question="what is shown", language_context="a scene",
                label="c0", group="g0", split="train", visual_text="an image")
    base.update(overrides)
    return ManifestRecord(**base)


class TestContentNodes:
    def test_four_nodes_in_fixed_order(self):
        nodes = build_content_nodes(_record(), 16, 7)
        assert [n.kind for n in nodes] == list(CONTENT_KINDS)
        assert all(n.embedding.size == 16 for n in nodes)

    def test_vl_equals_shared_vector(self):
        # Equal visual and language vectors: their renormalized mean is the
        # shared (unit) vector itself.
        rec = _record(language_context="shared ctx", visual_text="shared ctx")
        nodes = build_content_nodes(rec, 16, 7)
        np.testing.assert_allclose(nodes[3].embedding, nodes[1].embedding, atol=1e-12)

    def test_empty_visual_text_gets_sentinel(self):
        nodes = build_content_nodes(_record(visual_text=""), 8, 7)
        expected = np.zeros(8)
        expected[0] = 1.0
        np.testing.assert_array_equal(nodes[2].embedding, expected)

    def test_visual_ref_resolved_from_store(self):
        store = EmbeddingStore(8)
        vec = np.arange(8.0) / np.linalg.norm(np.arange(8.0))
        store.add("v7", vec)
        rec = _record(visual_text=None, visual_ref="v7")
        nodes = build_content_nodes(rec, 8, 7, embedding_store=store)
        np.testing.assert_array_equal(nodes[2].embedding, store.vector("v7"))

    def test_missing_ref_names_id(self):
        rec = _record(visual_text=None, visual_ref="v404")
        with pytest.raises(DataError, match="v404"):
            build_content_nodes(rec, 8, 7, embedding_store=EmbeddingStore(8))

    def test_ref_without_store(self):
        rec = _record(visual_text=None, visual_ref="v0")
        with pytest.raises(DataError):
            build_content_nodes(rec, 8, 7)

    def test_deterministic(self):
        a = build_content_nodes(_record(), 16, 7)
        b = build_content_nodes(_record(), 16, 7)
        for x, y in zip(a, b):
            assert (x.embedding == y.embedding).all()


def _basis_store(dim=16):
    """Triplets t0-t2 near e1, t3-t5 near e2, t6-t8 near e3, t9-t11 near e4."""
    store = EmbeddingStore(dim)
    triplets = []
    for axis in range(4):
        for j in range(3):
            vec = np.zeros(dim)
            vec[axis] = 1.0
            vec[8 + len(triplets) % 8] = 0.05 * (j + 1)
            idx = len(triplets)
            triplets.append(Triplet(f"h{idx}", "r", f"t{idx}"))
            store.add(f"t{idx}", vec / np.linalg.norm(vec))
    return TripletStore(triplets, store)


def _content(dim=16):
    nodes = []
    for axis, kind in enumerate(CONTENT_KINDS):
        vec = np.zeros(dim)
        vec[axis] = 1.0
        nodes.append(Node(kind, kind, vec))
    return nodes


class TestAttachCommonsense:
    def test_disjoint_retrievals_give_twelve_nodes(self):
        nodes, log = attach_commonsense(_content(), _basis_store(), k=3)
        assert len(nodes) == 12
        assert len(log) == 12
        assert [n.id for n in nodes] == [f"t{i}" for i in range(12)]

    def test_identical_retrievals_merge(self):
        store = _basis_store()
        same = [Node(kind, kind, _content()[0].embedding) for kind in CONTENT_KINDS]
        nodes, log = attach_commonsense(same, store, k=3)
        assert len(nodes) == 3
        assert len(log) == 12

    def test_store_smaller_than_k(self):
        store = EmbeddingStore(4)
        store.add("t0", np.array([1.0, 0, 0, 0]))
        store.add("t1", np.array([0.0, 1, 0, 0]))
        tiny = TripletStore([Triplet("a", "r", "b"), Triplet("c", "r", "d")], store)
        nodes, _ = attach_commonsense(_content(4), tiny, k=3)
        assert len(nodes) == 2

    def test_nodes_ordered_by_numeric_index(self):
        store = EmbeddingStore(4)
        triplets = []
        for i in range(12):
            vec = np.zeros(4)
            vec[i % 4] = 1.0
            triplets.append(Triplet(f"h{i}", "r", f"x{i}"))
            store.add(f"t{i}", vec)
        ts = TripletStore(triplets, store)
        nodes, _ = attach_commonsense(_content(4), ts, k=3)
        indices = [int(n.id[1:]) for n in nodes]
        assert indices == sorted(indices)


class TestPmi:
    def _stats(self, counts, pairs, m):
        stats = CooccurrenceStats(num_samples=m, counts=dict(counts),
                                  pair_counts=dict(pairs))
        return stats

    def test_perfect_cooccurrence(self):
        stats = self._stats({"t0": 10, "t1": 10}, {("t0", "t1"): 10}, 100)
        # PMI = ln 10, normalizer -ln(10/100) = ln 10, so NPMI = 1.
        assert pmi_weight(stats, "t0", "t1") == pytest.approx(1.0, abs=1e-12)

    def test_independence_gives_no_edge(self):
        stats = self._stats({"t0": 10, "t1": 10}, {("t0", "t1"): 1}, 100)
        assert pmi_weight(stats, "t0", "t1") is None

    def test_never_cooccurs_gives_no_edge(self):
        stats = self._stats({"t0": 5, "t1": 5}, {}, 100)
        assert pmi_weight(stats, "t0", "t1") is None

    def test_hand_value(self):
        stats = self._stats({"t0": 2, "t1": 5}, {("t0", "t1"): 2}, 10)
        expected = math.log(2.0) / -math.log(0.2)
        assert pmi_weight(stats, "t0", "t1") == pytest.approx(expected, abs=1e-12)

    def test_symmetric(self):
        stats = self._stats({"t0": 3, "t1": 5}, {("t0", "t1"): 2}, 20)
        assert pmi_weight(stats, "t0", "t1") == pmi_weight(stats, "t1", "t0")

    def test_unknown_id(self):
        stats = self._stats({"t0": 3}, {}, 20)
        with pytest.raises(DataError, match="t9"):
            pmi_weight(stats, "t0", "t9")

    def test_range_on_random_stats(self):
        rng = np.random.default_rng(6)
        for _ in range(300):
            m = int(rng.integers(2, 50))
            c1 = int(rng.integers(1, m + 1))
            c2 = int(rng.integers(1, m + 1))
            c12 = int(rng.integers(0, min(c1, c2) + 1))
            stats = self._stats({"t0": c1, "t1": c2},
                                {("t0", "t1"): c12} if c12 else {}, m)
            w = pmi_weight(stats, "t0", "t1")
            if w is not None:
                assert 0.0 < w <= 1.0

    def test_observe_keeps_count_invariants(self):
        rng = np.random.default_rng(12)
        stats = CooccurrenceStats()
        ids = [f"t{i}" for i in range(8)]
        for _ in range(60):
            chosen = {ids[i] for i in rng.choice(8, size=rng.integers(1, 6),
                                                 replace=False)}
            stats.observe(chosen)
        for (a, b), c12 in stats.pair_counts.items():
            assert c12 <= min(stats.counts[a], stats.counts[b]) <= stats.num_samples


class TestBuildEdges:
    def _fixture(self):
        q = np.array([1.0, 0.0, 0.0, 0.0])
        lc = np.array([0.6, 0.8, 0.0, 0.0])
        vc = np.array([0.0, 0.0, 1.0, 0.0])
        vl = np.array([0.3, 0.4, 0.5, 0.0]) / math.sqrt(0.5)
        t0 = np.array([0.8, 0.6, 0.0, 0.0])
        t1 = np.array([0.0, 0.0, 0.0, 1.0])
        nodes = [Node("question", "question", q),
                 Node("language_context", "language_context", lc),
                 Node("visual_context", "visual_context", vc),
                 Node("vl", "vl", vl),
                 Node("commonsense", "t0", t0),
                 Node("commonsense", "t1", t1)]
        log = [RetrievalHit("question", "t0", 0.8),
               RetrievalHit("language_context", "t0", 0.92),
               RetrievalHit("visual_context", "t1", -0.3),
               RetrievalHit("vl", "t1", 0.55)]
        stats = CooccurrenceStats(num_samples=10, counts={"t0": 2, "t1": 5},
                                  pair_counts={("t0", "t1"): 2})
        return nodes, log, stats

    def test_hand_built_oracle_matrix(self):
        nodes, log, stats = self._fixture()
        got = build_edges(nodes, log, stats, mode="hybrid", tau=0.0)
        s = 0.3 / math.sqrt(0.5)          # cos(question, vl)
        r = 0.5 / math.sqrt(0.5)          # cos(language, vl) = cos(visual, vl)
        npmi = math.log(2.0) / -math.log(0.2)
        want = np.array([
            [0.0, 0.6, 0.0, s,   0.8,  0.0],
            [0.6, 0.0, 0.0, r,   0.92, 0.0],
            [0.0, 0.0, 0.0, r,   0.0,  0.0],
            [s,   r,   r,   0.0, 0.0,  0.55],
            [0.8, 0.92, 0.0, 0.0, 0.0, npmi],
            [0.0, 0.0, 0.0, 0.55, npmi, 0.0],
        ])
        np.testing.assert_allclose(got, want, atol=1e-9)
        assert (got == got.T).all()
        assert not np.diagonal(got).any()

    def test_symmetric_entry_both_directions(self):
        nodes, log, stats = self._fixture()
        adj = build_edges(nodes, log, stats)
        assert adj[0, 1] == adj[1, 0] == pytest.approx(0.6, abs=1e-12)

    def test_negative_cosine_never_edges(self):
        nodes, log, stats = self._fixture()
        for tau in (0.0, -0.5):
            adj = build_edges(nodes, log, stats, tau=tau)
            assert adj[0, 2] == 0.0   # orthogonal pair stays disconnected
            assert (adj >= 0.0).all()

    def test_tau_thresholds_content_edges(self):
        nodes, log, stats = self._fixture()
        adj = build_edges(nodes, log, stats, tau=0.65)
        assert adj[0, 1] == 0.0       # cos 0.6 dropped
        assert adj[1, 3] > 0.0        # cos 0.707 kept

    def test_cosine_mode_drops_pmi_edges(self):
        nodes, log, stats = self._fixture()
        adj = build_edges(nodes, log, stats, mode="cosine")
        assert adj[4, 5] == 0.0
        pmi_adj = build_edges(nodes, log, stats, mode="pmi")
        assert pmi_adj[4, 5] > 0.0

    def test_retrieval_similarity_clamped(self):
        nodes, log, stats = self._fixture()
        adj = build_edges(nodes, log, stats)
        assert adj[2, 5] == 0.0       # similarity -0.3 clamps to no edge

    def test_bad_tau(self):
        nodes, log, stats = self._fixture()
        with pytest.raises(ConfigError):
            build_edges(nodes, log, stats, tau=1.0)

    def test_bad_mode(self):
        nodes, log, stats = self._fixture()
        with pytest.raises(ConfigError):
            build_edges(nodes, log, stats, mode="fancy")

    def test_unseen_triplet_pairs_skip_pmi(self):
        nodes, log, stats = self._fixture()
        stats.counts.pop("t1")
        adj = build_edges(nodes, log, stats, mode="hybrid")
        assert adj[4, 5] == 0.0


class TestNormalizeAdjacency:
    def test_worked_pair(self):
        out = normalize_adjacency(np.array([[0.0, 1.0], [1.0, 0.0]]))
        np.testing.assert_allclose(out, [[0.5, 0.5], [0.5, 0.5]], atol=1e-12)

    def test_single_node(self):
        np.testing.assert_allclose(normalize_adjacency(np.zeros((1, 1))), [[1.0]])

    def test_worked_half_weight(self):
        out = normalize_adjacency(np.array([[0.0, 0.5], [0.5, 0.0]]))
        want = [[2.0 / 3.0, 1.0 / 3.0], [1.0 / 3.0, 2.0 / 3.0]]
        np.testing.assert_allclose(out, want, atol=1e-4)

    def test_exhaustive_small_matrices_match_scalar_oracle(self):
        # Independent oracle: explicit per-entry loops over the definition.
        def oracle(a):
            n = a.shape[0]
            tilde = [[a[i][j] + (1.0 if i == j else 0.0) for j in range(n)]
                     for i in range(n)]
            deg = [sum(row) for row in tilde]
            return np.array([[tilde[i][j] / math.sqrt(deg[i] * deg[j])
                              for j in range(n)] for i in range(n)])

        from itertools import combinations, product
        values = (0.0, 0.5, 1.0)
        for n in range(1, 5):
            pairs = list(combinations(range(n), 2))
            for assignment in product(values, repeat=len(pairs)):
                a = np.zeros((n, n))
                for (i, j), w in zip(pairs, assignment):
                    a[i, j] = a[j, i] = w
                got = normalize_adjacency(a)
                np.testing.assert_allclose(got, oracle(a), atol=1e-12)
                np.testing.assert_allclose(got, got.T, atol=1e-12)

    def test_rejects_asymmetric(self):
        with pytest.raises(NumericError):
            normalize_adjacency(np.array([[0.0, 1.0], [0.0, 0.0]]))

    def test_rejects_negative(self):
        with pytest.raises(NumericError):
            normalize_adjacency(np.array([[0.0, -0.1], [-0.1, 0.0]]))

    def test_rejects_nonzero_diagonal(self):
        with pytest.raises(NumericError):
            normalize_adjacency(np.array([[1.0, 0.0], [0.0, 0.0]]))


class TestGraphsFile:
    def _subgraphs(self):
        rng = np.random.default_rng(3)
        out = []
        for i in range(3):
            nodes = [Node(kind, kind, rng.normal(0, 1, 6)) for kind in CONTENT_KINDS]
            nodes.append(Node("commonsense", f"t{i}", rng.normal(0, 1, 6)))
            n = len(nodes)
            adj = np.abs(rng.normal(0, 0.3, (n, n)))
            adj = np.triu(adj, 1)
            adj = adj + adj.T
            out.append(Subgraph(sample_id=f"s{i}", split="train", group=f"g{i}",
                                label=i % 2, nodes=nodes, adjacency=adj))
        return out

    def test_round_trip_bitwise(self, tmp_path):
        subgraphs = self._subgraphs()
        path = tmp_path / "x.graphs"
        write_graphs(path, subgraphs, ["a", "b"], {"k": 3})
        loaded, header = read_graphs(path)
        assert header["label_vocab"] == ["a", "b"]
        assert header["config"] == {"k": 3}
        for got, want in zip(loaded, subgraphs):
            assert got.sample_id == want.sample_id
            assert got.label == want.label
            assert got.group == want.group
            assert (got.adjacency == want.adjacency).all()
            for gn, wn in zip(got.nodes, want.nodes):
                assert gn.kind == wn.kind and gn.id == wn.id
                assert (gn.embedding == wn.embedding).all()

    def test_write_twice_identical(self, tmp_path):
        subgraphs = self._subgraphs()
        p1, p2 = tmp_path / "a.graphs", tmp_path / "b.graphs"
        write_graphs(p1, subgraphs, ["a", "b"], {"k": 3})
        write_graphs(p2, subgraphs, ["a", "b"], {"k": 3})
        assert p1.read_bytes() == p2.read_bytes()

    def test_malformed_record_names_line(self, tmp_path):
        path = tmp_path / "bad.graphs"
        write_graphs(path, self._subgraphs(), ["a", "b"], {})
        lines = path.read_text().splitlines()
        lines[2] = "{not json"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(FormatError, match="line 3"):
            read_graphs(path)

    def test_not_a_graphs_file(self, tmp_path):
        path = tmp_path / "other.json"
        path.write_text('{"format": "something-else"}\n')
        with pytest.raises(FormatError):
            read_graphs(path)

    def test_features_helpers(self):
        sg = self._subgraphs()[0]
        assert sg.features().shape == (5, 6)
        assert sg.content_features().shape == (4, 6)
        np.testing.assert_array_equal(sg.features()[:4], sg.content_features())
