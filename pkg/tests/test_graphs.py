"""Graph data model, k-NN construction, generator, and serialization."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ksxplain.graphs import (CellGraph, Dataset, SyntheticConfig,
                             dataset_from_dict, dataset_to_dict,
                             fraction_to_count, generate_synthetic, knn_build,
                             load_graphs, normalize_edges, remove_nodes,
                             save_graphs, top_fraction_nodes)


def make_graph(coords, edges, label=0, d=2, gid="g"):
    coords = np.asarray(coords, dtype=float)
    feats = np.arange(coords.shape[0] * d, dtype=float).reshape(-1, d)
    return CellGraph(id=gid, coords=coords, features=feats,
                     edges=np.asarray(edges, dtype=np.int64).reshape(-1, 2),
                     label=label)


# -- knn_build ------------------------------------------------------------------


def test_knn_rejects_k_too_large():
    with pytest.raises(ValueError):
        knn_build(np.array([[0.0, 0.0]]), 1)


def test_knn_two_points_one_edge():
    edges = knn_build(np.array([[0.0, 0.0], [1.0, 1.0]]), 1)
    np.testing.assert_array_equal(edges, [[0, 1]])


def test_knn_unit_square_sides_only():
    # side length 1 < diagonal sqrt(2): 2-NN of each corner are its two sides
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    edges = knn_build(pts, 2)
    # brute-force oracle: per-node 2 nearest by full pairwise distances
    want = set()
    for u in range(4):
        d = [(np.hypot(*(pts[u] - pts[v])), v) for v in range(4) if v != u]
        for _, v in sorted(d)[:2]:
            want.add((min(u, v), max(u, v)))
    got = {tuple(e) for e in edges}
    assert got == want
    assert (0, 2) not in got and (1, 3) not in got
    assert len(got) == 4


def test_knn_rejects_nonfinite():
    with pytest.raises(ValueError):
        knn_build(np.array([[0.0, np.nan], [1.0, 1.0], [2.0, 0.0]]), 1)


def test_knn_tie_break_smaller_index():
    # nodes 1 and 2 equidistant from 0; each has a nearer partner of its own,
    # so edge (0,2) can only appear through node 0 breaking the tie wrongly
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0],
                    [1.4, 0.0], [-1.4, 0.0]])
    edges = {tuple(e) for e in knn_build(pts, 1)}
    assert (0, 1) in edges
    assert (0, 2) not in edges


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 20), st.integers(1, 4), st.integers(0, 10_000))
def test_knn_degree_and_symmetry(n, k, seed):
    if k >= n:
        k = n - 1
    rng = np.random.default_rng(seed)
    pts = rng.uniform(size=(n, 2))
    edges = knn_build(pts, k)
    assert np.all(edges[:, 0] < edges[:, 1])
    degree = np.zeros(n, dtype=int)
    chosen = {u: set() for u in range(n)}
    diff = pts[:, None] - pts[None, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    np.fill_diagonal(d2, np.inf)
    for u in range(n):
        order = np.argsort(d2[u], kind="stable")[:k]
        chosen[u] = set(int(v) for v in order)
    got = {tuple(e) for e in edges}
    want = set()
    for u, vs in chosen.items():
        for v in vs:
            want.add((min(u, v), max(u, v)))
    assert got == want
    for u, v in got:
        degree[u] += 1
        degree[v] += 1
    assert np.all(degree >= k)


# -- remove_nodes --------------------------------------------------------------


def test_remove_nothing_is_identity():
    g = make_graph([[0, 0], [1, 0], [2, 0]], [[0, 1], [1, 2]])
    h = remove_nodes(g, [])
    assert h.equals(g)


def test_remove_all_yields_empty_graph():
    g = make_graph([[0, 0], [1, 0]], [[0, 1]])
    h = remove_nodes(g, [0, 1])
    assert h.num_nodes == 0
    assert h.edges.shape == (0, 2)
    assert h.features.shape == (0, 2)


def test_remove_middle_of_path():
    g = make_graph([[0, 0], [1, 0], [2, 0]], [[0, 1], [1, 2]])
    h = remove_nodes(g, [1])
    assert h.num_nodes == 2
    assert h.edges.shape[0] == 0
    np.testing.assert_array_equal(h.coords, [[0, 0], [2, 0]])


def test_remove_out_of_range_rejected():
    g = make_graph([[0, 0], [1, 0]], [[0, 1]])
    with pytest.raises(ValueError):
        remove_nodes(g, [2])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_remove_composes_over_disjoint_sets(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(6, 14))
    pts = rng.uniform(size=(n, 2))
    g = CellGraph(id="r", coords=pts, features=rng.standard_normal((n, 3)),
                  edges=knn_build(pts, 2), label=0)
    nodes = rng.permutation(n)
    a = set(int(v) for v in nodes[:2])
    b = set(int(v) for v in nodes[2:4])
    combined = remove_nodes(g, a | b)
    step1 = remove_nodes(g, a)
    keep = sorted(set(range(n)) - a)
    relabel = {old: new for new, old in enumerate(keep)}
    step2 = remove_nodes(step1, {relabel[v] for v in b})
    assert combined.equals(step2)


# -- top_fraction_nodes ----------------------------------------------------------


def test_top_fraction_endpoints():
    scores = np.array([0.2, 0.8, 0.5])
    assert top_fraction_nodes(scores, 0.0, "most").size == 0
    np.testing.assert_array_equal(top_fraction_nodes(scores, 1.0, "least"),
                                  [0, 1, 2])


def test_top_fraction_tie_break():
    scores = np.array([0.9, 0.1, 0.5, 0.5])
    np.testing.assert_array_equal(top_fraction_nodes(scores, 0.5, "most"),
                                  [0, 2])
    np.testing.assert_array_equal(top_fraction_nodes(scores, 0.5, "least"),
                                  [1, 2])


def test_fraction_to_count_grid_exact():
    from fractions import Fraction
    for i in range(21):
        f = i / 20.0
        for n in (1, 7, 19, 40, 60, 90, 170, 180, 200, 300):
            assert fraction_to_count(f, n) == (i * n) // 20


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 0.5))
def test_top_fraction_most_least_disjoint(seed, fraction):
    rng = np.random.default_rng(seed)
    scores = rng.permutation(rng.uniform(size=12))   # distinct scores
    most = set(top_fraction_nodes(scores, fraction, "most").tolist())
    least = set(top_fraction_nodes(scores, fraction, "least").tolist())
    if 2 * len(most) <= 12:
        assert not most & least


# -- generator -------------------------------------------------------------------


def test_generate_deterministic_and_valid():
    cfg = SyntheticConfig(num_graphs=12, nodes_per_graph_range=(10, 14),
                          motif_size=4, seed=9)
    a = generate_synthetic(cfg)
    b = generate_synthetic(cfg)
    assert a.equals(b)
    blob_a = json.dumps(dataset_to_dict(a), sort_keys=True)
    blob_b = json.dumps(dataset_to_dict(b), sort_keys=True)
    assert blob_a == blob_b
    for i, g in enumerate(a.graphs):
        gt = a.ground_truth_for(i)
        assert gt.shape == (g.num_nodes,)
        if g.label == 1:
            assert gt.sum() == cfg.motif_size
        else:
            assert gt.sum() == 0
    assert {tag for tag in a.split} == {"train", "val", "test"}


def test_generate_rejects_bad_config():
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticConfig(motif_size=50,
                                           nodes_per_graph_range=(10, 12)))
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticConfig(k=12, nodes_per_graph_range=(10, 12)))
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticConfig(feature_dim=0))


def test_generate_shift_zero_classes_identically_distributed():
    # with no feature shift the two label groups follow one distribution,
    # so any label signal a model finds is noise (checked in model tests)
    cfg = SyntheticConfig(num_graphs=10, nodes_per_graph_range=(10, 12),
                          motif_size=3, motif_feature_shift=0.0, seed=1)
    ds = generate_synthetic(cfg)
    for i, g in enumerate(ds.graphs):
        assert ds.ground_truth_for(i).sum() == (3 if g.label == 1 else 0)


# -- serialization ----------------------------------------------------------------


def test_roundtrip_identity(tmp_path):
    ds = generate_synthetic(SyntheticConfig(num_graphs=6,
                                            nodes_per_graph_range=(8, 10),
                                            motif_size=3, seed=4))
    path = tmp_path / "ds.json"
    save_graphs(ds, path)
    loaded = load_graphs(path)
    assert loaded.equals(ds)
    # writes are byte-stable
    save_graphs(loaded, tmp_path / "ds2.json")
    assert (tmp_path / "ds.json").read_bytes() == (tmp_path / "ds2.json").read_bytes()


def test_load_normalizes_duplicate_directed_edges():
    payload = {
        "num_classes": 1,
        "graphs": [{
            "id": "a", "label": 0,
            "nodes": [{"x": 0.0, "y": 0.0, "features": [1.0]},
                      {"x": 1.0, "y": 0.0, "features": [2.0]}],
            "edges": [[0, 1], [1, 0]],
        }],
    }
    ds = dataset_from_dict(payload)
    np.testing.assert_array_equal(ds.graphs[0].edges, [[0, 1]])


def test_load_rejects_ragged_features():
    payload = {
        "num_classes": 1,
        "graphs": [{
            "id": "a", "label": 0,
            "nodes": [{"x": 0.0, "y": 0.0, "features": [1.0]},
                      {"x": 1.0, "y": 0.0, "features": [2.0, 3.0]}],
            "edges": [],
        }],
    }
    with pytest.raises(ValueError):
        dataset_from_dict(payload)


def test_load_rejects_invariant_violations():
    base = {
        "num_classes": 1,
        "graphs": [{
            "id": "a", "label": 0,
            "nodes": [{"x": 0.0, "y": 0.0, "features": [1.0]},
                      {"x": 1.0, "y": 0.0, "features": [2.0]}],
            "edges": [[0, 0]],
        }],
    }
    with pytest.raises(ValueError):
        dataset_from_dict(base)
    base["graphs"][0]["edges"] = [[0, 5]]
    with pytest.raises(ValueError):
        dataset_from_dict(base)
    base["graphs"][0]["edges"] = []
    base["graphs"][0]["label"] = 3
    with pytest.raises(ValueError):
        dataset_from_dict(base)


def test_load_rejects_malformed_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ValueError):
        load_graphs(p)


def test_normalize_edges_dedupes_and_orients():
    edges = normalize_edges(np.array([[3, 1], [1, 3], [0, 2]]))
    np.testing.assert_array_equal(edges, [[0, 2], [1, 3]])


def test_dataset_invariants():
    g = make_graph([[0, 0], [1, 0]], [[0, 1]], label=0)
    with pytest.raises(ValueError):
        Dataset(graphs=[g], num_classes=1, split=["nope"])
    with pytest.raises(ValueError):
        Dataset(graphs=[g], num_classes=1, split=["train"],
                ground_truth_importance=[np.array([1, 0, 1])])
    bad_label = make_graph([[0, 0], [1, 0]], [[0, 1]], label=2)
    with pytest.raises(ValueError):
        Dataset(graphs=[bad_label], num_classes=1, split=["train"])
