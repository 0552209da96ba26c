"""Classifier forward/backward contracts, trainer, and checkpoints."""

import numpy as np
import pytest

from ksxplain.autodiff import Tensor, cross_entropy_logits
from ksxplain.graphs import (CellGraph, SyntheticConfig, generate_synthetic,
                             knn_build, remove_nodes)
from ksxplain.model import (GnnModel, TrainConfig, backward, forward,
                            forward_many_masks, graph_arrays, init_model,
                            load_model, param_tensors, predict, save_model,
                            softmax, tape_forward, train)


def random_graph(rng, n=8, d=3, label=0):
    pts = rng.uniform(size=(n, 2))
    return CellGraph(id="t", coords=pts,
                     features=rng.standard_normal((n, d)),
                     edges=knn_build(pts, 2), label=label)


@pytest.fixture(scope="module")
def small_setup():
    rng = np.random.default_rng(7)
    g = random_graph(rng, n=9, d=3)
    model = init_model(3, 2, hidden=5, num_layers=2, seed=11)
    return model, g


def test_mask_all_ones_equals_unmasked(small_setup):
    model, g = small_setup
    a = forward(model, g)
    b = forward(model, g, mask=np.ones(g.num_nodes))
    np.testing.assert_array_equal(a.logits, b.logits)


def test_mask_all_zeros_equals_empty_graph(small_setup):
    model, g = small_setup
    empty = remove_nodes(g, range(g.num_nodes))
    a = forward(model, empty)
    b = forward(model, g, mask=np.zeros(g.num_nodes))
    np.testing.assert_array_equal(a.logits, b.logits)
    np.testing.assert_array_equal(a.embedding, np.zeros(model.hidden))


def test_hard_mask_equals_removal_exactly():
    rng = np.random.default_rng(3)
    model = init_model(4, 3, hidden=8, num_layers=3, seed=5)
    for trial in range(10):
        g = random_graph(rng, n=int(rng.integers(6, 40)), d=4)
        victims = rng.choice(g.num_nodes, size=int(rng.integers(1, g.num_nodes)),
                             replace=False)
        mask = np.ones(g.num_nodes)
        mask[victims] = 0.0
        a = forward(model, g, mask=mask)
        b = forward(model, remove_nodes(g, victims))
        np.testing.assert_array_equal(a.logits, b.logits)
        np.testing.assert_array_equal(a.embedding, b.embedding)


def test_permutation_invariance():
    rng = np.random.default_rng(5)
    model = init_model(3, 2, seed=2)
    g = random_graph(rng, n=15, d=3)
    perm = rng.permutation(g.num_nodes)
    inv = np.argsort(perm)
    g2 = CellGraph(id=g.id, coords=g.coords[perm], features=g.features[perm],
                   edges=inv[np.asarray(g.edges)], label=g.label)
    np.testing.assert_allclose(forward(model, g2).logits,
                               forward(model, g).logits, rtol=1e-12, atol=1e-12)


def test_softmax_sums_to_one():
    rng = np.random.default_rng(1)
    z = rng.standard_normal((50, 4)) * 30
    s = softmax(z)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)


def test_empty_graph_prediction_is_constant(small_setup):
    model, g = small_setup
    empty = remove_nodes(g, range(g.num_nodes))
    label1, probs1 = predict(model, empty)
    # head applied to the zero embedding
    e1 = np.maximum(model.head_b1, 0.0)
    logits = e1 @ model.head_w2 + model.head_b2
    assert label1 == int(np.argmax(logits))
    np.testing.assert_allclose(probs1, softmax(logits), rtol=1e-12)


def test_predict_tie_breaks_to_class_zero(small_setup):
    _, g = small_setup
    model = init_model(3, 3, hidden=4, num_layers=1, seed=0)
    model.head_w2 = np.zeros_like(model.head_w2)
    model.head_b2 = np.zeros_like(model.head_b2)
    label, probs = predict(model, g)
    assert label == 0
    np.testing.assert_allclose(probs, 1.0 / 3.0)


def test_predict_matches_forward(small_setup):
    model, g = small_setup
    label, probs = predict(model, g)
    res = forward(model, g)
    assert label == int(np.argmax(res.probs))
    np.testing.assert_array_equal(probs, res.probs)


def test_dimension_mismatch_rejected(small_setup):
    model, g = small_setup
    bad = init_model(7, 2, seed=0)
    with pytest.raises(ValueError):
        forward(bad, g)
    with pytest.raises(ValueError):
        forward(model, g, mask=np.ones(g.num_nodes + 1))


# -- gradients ----------------------------------------------------------------


def _loss_value(model, g, target, mask):
    adj, feats = graph_arrays(g)
    logits, _ = tape_forward(model, adj, feats, Tensor(mask),
                             param_tensors(model, False))
    return float(cross_entropy_logits(logits, target).data)


def test_gradcheck_params_and_mask():
    rng = np.random.default_rng(0)
    model = init_model(3, 2, hidden=4, num_layers=2, seed=1)
    g = random_graph(rng, n=7, d=3)
    mask = rng.uniform(0.1, 0.9, g.num_nodes)
    pg, mg = backward(model, g, target=1, mask=mask)
    flat = model.flat_params()
    h = 1e-6
    for i in rng.choice(flat.size, size=20, replace=False):
        fp, fm = flat.copy(), flat.copy()
        fp[i] += h
        fm[i] -= h
        mp, mm = model.copy(), model.copy()
        mp.set_flat_params(fp)
        mm.set_flat_params(fm)
        fd = (_loss_value(mp, g, 1, mask) - _loss_value(mm, g, 1, mask)) / (2 * h)
        assert pg[i] == pytest.approx(fd, rel=1e-4, abs=1e-8)
    for i in range(g.num_nodes):
        up, dn = mask.copy(), mask.copy()
        up[i] += h
        dn[i] -= h
        fd = (_loss_value(model, g, 1, up) - _loss_value(model, g, 1, dn)) / (2 * h)
        assert mg[i] == pytest.approx(fd, rel=1e-4, abs=1e-8)


def test_mask_gradient_zero_when_head_ignores_embedding():
    rng = np.random.default_rng(2)
    model = init_model(3, 2, hidden=4, num_layers=2, seed=3)
    model.head_w1 = np.zeros_like(model.head_w1)
    g = random_graph(rng, n=6, d=3)
    _, mg = backward(model, g, target=0)
    np.testing.assert_allclose(mg, 0.0, atol=1e-15)


def test_param_gradient_vanishes_at_saturated_correct_prediction():
    rng = np.random.default_rng(4)
    model = init_model(3, 2, hidden=4, num_layers=1, seed=6)
    model.head_b2 = np.array([60.0, -60.0])   # probs ~ one-hot(0)
    g = random_graph(rng, n=6, d=3)
    pg, _ = backward(model, g, target=0)
    assert np.linalg.norm(pg) < 1e-10


def test_loss_seed_scales_gradients():
    rng = np.random.default_rng(6)
    model = init_model(3, 2, hidden=4, num_layers=1, seed=8)
    g = random_graph(rng, n=6, d=3)
    pg1, mg1 = backward(model, g, target=1)
    pg2, mg2 = backward(model, g, target=1, loss_seed=2.5)
    np.testing.assert_allclose(pg2, 2.5 * pg1, rtol=1e-12)
    np.testing.assert_allclose(mg2, 2.5 * mg1, rtol=1e-12)


# -- trainer -------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_dataset():
    return generate_synthetic(SyntheticConfig(
        num_graphs=30, nodes_per_graph_range=(12, 16), motif_size=4, seed=3))


def test_train_deterministic(tiny_dataset):
    cfg = TrainConfig(epochs=12, seed=5)
    m1, h1 = train(init_model(8, 2, hidden=8, num_layers=2), tiny_dataset, cfg)
    m2, h2 = train(init_model(8, 2, hidden=8, num_layers=2), tiny_dataset, cfg)
    np.testing.assert_array_equal(m1.flat_params(), m2.flat_params())
    assert [m.val_accuracy for m in h1] == [m.val_accuracy for m in h2]


def test_train_returns_best_val_model(tiny_dataset):
    cfg = TrainConfig(epochs=15, seed=1)
    model, history = train(init_model(8, 2, hidden=8, num_layers=2),
                           tiny_dataset, cfg)
    best = max(h.val_accuracy for h in history)
    val = tiny_dataset.subset("val")
    acc = np.mean([predict(model, g)[0] == g.label for g in val])
    assert acc == pytest.approx(best)
    assert len(history) == cfg.epochs


def test_train_learns_the_planted_signal(tiny_dataset):
    model, history = train(init_model(8, 2), tiny_dataset,
                           TrainConfig(epochs=60, seed=0))
    test = tiny_dataset.subset("test")
    acc = np.mean([predict(model, g)[0] == g.label for g in test])
    assert acc >= 0.8


def test_no_signal_dataset_trains_to_chance():
    ds = generate_synthetic(SyntheticConfig(
        num_graphs=60, nodes_per_graph_range=(10, 14), motif_size=4,
        motif_feature_shift=0.0, seed=2))
    model, history = train(init_model(8, 2), ds, TrainConfig(epochs=50, seed=0))
    mean_val = float(np.mean([h.val_accuracy for h in history]))
    assert 0.4 <= mean_val <= 0.6
    test = ds.subset("test")
    acc = np.mean([predict(model, g)[0] == g.label for g in test])
    assert 0.35 <= acc <= 0.65


def test_train_rejects_empty_split():
    ds = generate_synthetic(SyntheticConfig(
        num_graphs=10, nodes_per_graph_range=(10, 12), motif_size=3, seed=0))
    ds.split = ["train"] * len(ds.graphs)
    with pytest.raises(ValueError):
        train(init_model(8, 2), ds, TrainConfig(epochs=1))


# -- checkpoints ------------------------------------------------------------------


def test_checkpoint_roundtrip_exact(tmp_path, tiny_dataset):
    model, _ = train(init_model(8, 2, hidden=8, num_layers=2), tiny_dataset,
                     TrainConfig(epochs=3, seed=0))
    path = tmp_path / "model.json"
    save_model(model, path)
    loaded = load_model(path)
    np.testing.assert_array_equal(loaded.flat_params(), model.flat_params())
    assert (loaded.in_dim, loaded.num_classes, loaded.hidden,
            loaded.num_layers) == (8, 2, 8, 2)


def test_checkpoint_rejects_malformed(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{}")
    with pytest.raises(ValueError):
        load_model(p)


def test_forward_many_masks_matches_single(small_setup):
    model, g = small_setup
    rng = np.random.default_rng(0)
    adj, feats = graph_arrays(g)
    masks = rng.uniform(size=(5, g.num_nodes))
    logits, probs, emb = forward_many_masks(model, adj, feats, masks)
    for i in range(5):
        single = forward(model, g, mask=masks[i])
        np.testing.assert_array_equal(single.logits, logits[i])
        np.testing.assert_array_equal(single.embedding, emb[i])
