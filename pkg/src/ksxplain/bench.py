"""Benchmarking explainers by most-vs-least important node removal.

For every graph, nodes are removed in 5% increments ordered by an explainer's
importance map, once from the most-important end and once from the least-
important end.  The first removal fraction at which the predicted label
changes is recorded per direction; the two resulting cumulative change curves
are compared with a two-sample Kolmogorov-Smirnov test.  Graphs whose label
never changes enter the samples at the sentinel 2.0 so both sample sizes
always equal the number of graphs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .graphs import (CellGraph, Dataset, fraction_to_count, ranked_nodes,
                     top_fraction_nodes)
from .model import (GnnModel, TrainConfig, forward_many_masks, graph_arrays,
                    predict, train)
from .util import map_pure

FRACTION_GRID: tuple[float, ...] = tuple(i / 20.0 for i in range(21))
NEVER_CHANGED = 2.0


# -- removal machinery ---------------------------------------------------------


def removal_counts(num_nodes: int, fractions) -> np.ndarray:
    """floor(fraction * V) per fraction."""
    return np.array([fraction_to_count(f, num_nodes) for f in fractions],
                    dtype=np.int64)


def removal_curves(model: GnnModel, adj: np.ndarray, feats: np.ndarray,
                   scores: np.ndarray, fractions=FRACTION_GRID) -> dict:
    """Predicted label and original-label probability per fraction/direction.

    Removal is evaluated through indicator masks, which this model guarantees
    to be exactly equivalent to hard node removal.  Duplicate removal counts
    on the grid are evaluated once.
    """
    n = feats.shape[0]
    counts = removal_counts(n, fractions)
    rank = {d: ranked_nodes(scores, d) for d in ("most", "least")}
    variants = []          # (direction, count) per unique mask
    index_of = {}
    for d in ("most", "least"):
        for c in counts:
            key = ("both", 0) if c == 0 else (d, int(c))
            if key not in index_of:
                index_of[key] = len(variants)
                variants.append(key)
    masks = np.ones((len(variants), n))
    for i, (d, c) in enumerate(variants):
        if c:
            masks[i, rank[d][:c]] = 0.0
    logits, probs, _ = forward_many_masks(model, adj, feats, masks)
    labels = np.argmax(probs, axis=1)
    orig = int(labels[index_of[("both", 0)]])
    out = {"orig_label": orig}
    for d in ("most", "least"):
        idx = [index_of[("both", 0) if c == 0 else (d, int(c))] for c in counts]
        out[f"labels_{d}"] = labels[idx]
        out[f"prob_orig_{d}"] = probs[idx, orig]
    return out


@dataclass(eq=False)
class RemovalSweep:
    graph_ids: list[str]
    fractions: np.ndarray         # (F,)
    orig_labels: np.ndarray       # (N,)
    labels_most: np.ndarray       # (N, F) predicted label per fraction
    labels_least: np.ndarray
    prob_orig_most: np.ndarray    # (N, F) probability of the original label
    prob_orig_least: np.ndarray


def _maps_by_graph(graphs: list[CellGraph], importance_maps) -> list:
    by_id = {m.graph_id: m for m in importance_maps}
    out = []
    for g in graphs:
        if g.id not in by_id:
            raise ValueError(f"missing importance map for graph {g.id}")
        m = by_id[g.id]
        if m.scores.shape != (g.num_nodes,):
            raise ValueError(f"importance map for {g.id} has wrong length")
        out.append(m)
    return out

def sweep_removal(model: GnnModel, graphs: list[CellGraph],
                  importance_maps) -> RemovalSweep:
    """Run the most/least removal grid for every graph."""
    maps = _maps_by_graph(graphs, importance_maps)
    fractions = np.array(FRACTION_GRID)

    def one(pair):
        g, m = pair
        adj, feats = graph_arrays(g)
        return removal_curves(model, adj, feats, m.scores, FRACTION_GRID)

    curves = map_pure(one, list(zip(graphs, maps)))
    return RemovalSweep(
        graph_ids=[g.id for g in graphs],
        fractions=fractions,
        orig_labels=np.array([c["orig_label"] for c in curves]),
        labels_most=np.stack([c["labels_most"] for c in curves]),
        labels_least=np.stack([c["labels_least"] for c in curves]),
        prob_orig_most=np.stack([c["prob_orig_most"] for c in curves]),
        prob_orig_least=np.stack([c["prob_orig_least"] for c in curves]),
    )


# -- cumulative change curves ----------------------------------------------------


@dataclass(eq=False)
class EcdfPair:
    fractions: np.ndarray       # (F,)
    f_most: np.ndarray          # (F,) fraction of graphs changed by <= j
    f_least: np.ndarray
    samples_most: np.ndarray    # (N,) first-change fractions, 2.0 = never
    samples_least: np.ndarray


def first_change_fractions(fractions: np.ndarray, orig: np.ndarray,
                           labels: np.ndarray) -> np.ndarray:
    """Smallest grid fraction where the label differs from the original."""
    changed = labels != orig[:, None]
    out = np.full(orig.shape[0], NEVER_CHANGED)
    any_change = changed.any(axis=1)
    out[any_change] = fractions[np.argmax(changed[any_change], axis=1)]
    return out


def ecdf_pair(sweep: RemovalSweep) -> EcdfPair:
    samples_most = first_change_fractions(sweep.fractions, sweep.orig_labels,
                                          sweep.labels_most)
    samples_least = first_change_fractions(sweep.fractions, sweep.orig_labels,
                                           sweep.labels_least)
    f_most = (samples_most[None, :] <= sweep.fractions[:, None]).mean(axis=1)
    f_least = (samples_least[None, :] <= sweep.fractions[:, None]).mean(axis=1)
    return EcdfPair(fractions=sweep.fractions.copy(), f_most=f_most,
                    f_least=f_least, samples_most=samples_most,
                    samples_least=samples_least)


# -- two-sample Kolmogorov-Smirnov -----------------------------------------------


def kolmogorov_pvalue(d: float, n: int, m: int) -> float:
    """Asymptotic two-sided p-value for a two-sample KS statistic.

    Uses the small-sample-corrected argument lambda = (sqrt(e) + 0.12 +
    0.11 / sqrt(e)) * d with e = n m / (n + m), and the alternating series
    Q(lambda) = 2 sum_k (-1)^(k-1) exp(-2 k^2 lambda^2) truncated once terms
    drop below 1e-12.  Result is clamped to (0, 1].
    """
    if n < 1 or m < 1:
        raise ValueError("sample sizes must be positive")
    e = n * m / (n + m)
    lam = (math.sqrt(e) + 0.12 + 0.11 / math.sqrt(e)) * d
    if lam <= 0.0:
        return 1.0
    total = 0.0
    converged = False
    for k in range(1, 101):
        term = 2.0 * (-1.0) ** (k - 1) * math.exp(-2.0 * k * k * lam * lam)
        total += term
        if abs(term) < 1e-12:
            converged = True
            break
    if not converged:
        return 1.0   # lambda so small the survival probability is 1
    return min(max(total, 1e-300), 1.0)


def ks_two_sample(samples1, samples2) -> tuple[float, float]:
    """Exact sup distance between two ECDFs plus its asymptotic p-value."""
    x = np.sort(np.asarray(samples1, dtype=np.float64))
    y = np.sort(np.asarray(samples2, dtype=np.float64))
    n, m = x.size, y.size
    if n == 0 or m == 0:
        raise ValueError("samples must be nonempty")
    pooled = np.concatenate([x, y])
    cdf_x = np.searchsorted(x, pooled, side="right") / n
    cdf_y = np.searchsorted(y, pooled, side="right") / m
    d = float(np.abs(cdf_x - cdf_y).max())
    return d, kolmogorov_pvalue(d, n, m)


@dataclass
class KsReport:
    method: str
    d: float
    p_value: float
    n: int
    m: int


def ks_report(method: str, pair: EcdfPair) -> KsReport:
    """KS statistic over the fraction grid plus its p-value."""
    d = float(np.abs(pair.f_most - pair.f_least).max())
    n = pair.samples_most.size
    m = pair.samples_least.size
    return KsReport(method=method, d=d, p_value=kolmogorov_pvalue(d, n, m),
                    n=n, m=m)


# -- Fidelity ---------------------------------------------------------------------


def fidelity(model: GnnModel, graphs: list[CellGraph], importance_maps,
             threshold: float) -> float:
    """Mean drop of the correctness indicator when scores >= threshold are removed."""
    maps = _maps_by_graph(graphs, importance_maps)
    total = 0.0
    for g, m in zip(graphs, maps):
        adj, feats = graph_arrays(g)
        mask = np.ones(g.num_nodes)
        mask[m.scores >= threshold] = 0.0
        stacked = np.stack([np.ones(g.num_nodes), mask])
        _, probs, _ = forward_many_masks(model, adj, feats, stacked)
        orig_ok = int(np.argmax(probs[0]) == g.label)
        masked_ok = int(np.argmax(probs[1]) == g.label)
        total += orig_ok - masked_ok
    return total / len(graphs)


def fidelity_curve(model: GnnModel, graphs: list[CellGraph], importance_maps,
                   thresholds=FRACTION_GRID) -> list[tuple[float, float]]:
    """Fidelity across a threshold grid."""
    return [(float(t), fidelity(model, graphs, importance_maps, t))
            for t in thresholds]


# -- node-level F1 ------------------------------------------------------------------


@dataclass
class F1Report:
    tumor_f1: float
    non_tumor_f1: float
    macro_f1: float


def nuclei_f1(importance_maps, ground_truths) -> F1Report:
    """Binary node F1 at the 0.5 score threshold, pooled over graphs.

    `ground_truths` aligns with `importance_maps`; scores >= 0.5 predict the
    positive (tumor) class.
    """
    preds, gts = [], []
    for m, gt in zip(importance_maps, ground_truths):
        gt = np.asarray(gt)
        if gt.shape != m.scores.shape:
            raise ValueError(f"ground truth shape mismatch for {m.graph_id}")
        preds.append(m.scores >= 0.5)
        gts.append(gt.astype(bool))
    pred = np.concatenate(preds)
    true = np.concatenate(gts)

    def f1(positive: bool) -> float:
        p = pred == positive
        t = true == positive
        tp = int(np.sum(p & t))
        fp = int(np.sum(p & ~t))
        fn = int(np.sum(~p & t))
        if 2 * tp + fp + fn == 0:
            return 0.0
        return 2.0 * tp / (2 * tp + fp + fn)

    tumor = f1(True)
    non_tumor = f1(False)
    return F1Report(tumor_f1=tumor, non_tumor_f1=non_tumor,
                    macro_f1=0.5 * (tumor + non_tumor))


# -- importance-flag validation -------------------------------------------------------


@dataclass
class AugmentReport:
    baseline_per_class: list[float]
    augmented_per_class: list[float]
    baseline_overall: float
    augmented_overall: float


def _flag_dataset(dataset: Dataset, importance_maps,
                  flag_fraction: float) -> Dataset:
    by_id = {m.graph_id: m for m in importance_maps}
    graphs = []
    for g in dataset.graphs:
        if g.id not in by_id:
            raise ValueError(f"missing importance map for graph {g.id}")
        flags = np.zeros(g.num_nodes)
        flags[top_fraction_nodes(by_id[g.id], flag_fraction, "most")] = 1.0
        feats = np.concatenate([g.features, flags[:, None]], axis=1)
        graphs.append(CellGraph(id=g.id, coords=g.coords, features=feats,
                                edges=g.edges, label=g.label))
    return Dataset(graphs=graphs, num_classes=dataset.num_classes,
                   split=list(dataset.split),
                   ground_truth_importance=dataset.ground_truth_importance)


def per_class_accuracy(model: GnnModel, graphs: list[CellGraph],
                       num_classes: int) -> list[float]:
    hits = np.zeros(num_classes)
    counts = np.zeros(num_classes)
    for g in graphs:
        label, _ = predict(model, g)
        counts[g.label] += 1
        hits[g.label] += int(label == g.label)
    return [float(hits[c] / counts[c]) if counts[c] else float("nan")
            for c in range(num_classes)]


def augment_and_retrain(template: GnnModel, dataset: Dataset, importance_maps,
                        config: TrainConfig,
                        flag_fraction: float = 0.30) -> AugmentReport:
    """Retrain with a top-importance flag feature; report test accuracies.

    The flag marks membership in the top `flag_fraction` of nodes by
    importance.  Baseline and augmented models use the identical TrainConfig
    (same seed), differing only in the extra feature column.
    """
    base_model, _ = train(template, dataset, config)
    aug_ds = _flag_dataset(dataset, importance_maps, flag_fraction)
    aug_template = GnnModel(in_dim=template.in_dim + 1,
                            num_classes=template.num_classes,
                            hidden=template.hidden,
                            num_layers=template.num_layers)
    aug_model, _ = train(aug_template, aug_ds, config)
    test = dataset.subset("test")
    aug_test = aug_ds.subset("test")
    base_pc = per_class_accuracy(base_model, test, dataset.num_classes)
    aug_pc = per_class_accuracy(aug_model, aug_test, dataset.num_classes)
    base_all = float(np.mean([predict(base_model, g)[0] == g.label for g in test]))
    aug_all = float(np.mean([predict(aug_model, g)[0] == g.label for g in aug_test]))
    return AugmentReport(baseline_per_class=base_pc, augmented_per_class=aug_pc,
                         baseline_overall=base_all, augmented_overall=aug_all)
