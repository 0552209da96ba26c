"""Joint soft-mask optimization over a batch of same-label graphs.

The optimized objective combines, per iteration:

  * a model-fit term: negative cross entropy of each masked prediction
    against the model's own unmasked prediction (summed over the batch),
    with the usual mask size and entropy regularizers;
  * pairwise cosine similarity of the masked graph embeddings, weighted by
    lambda_similarity;
  * the sum of per-graph removal-sweep KS values, weighted by lambda_ks_sum;
  * minus the population variance of those KS values, weighted by
    lambda_ks_var.

Fit, regularizer, and similarity terms are differentiated exactly through
the soft masks.  The KS terms depend on hard removals, so their gradient is
estimated with a score-function (likelihood-ratio) estimator over Bernoulli
mask samples with a running-mean reward baseline.  Sampling streams are
keyed by (seed, graph index, iteration, sample index), so results do not
depend on evaluation order.

The returned masks are those of the iteration with the best traced total.
With lambda_similarity = lambda_ks_sum = lambda_ks_var = 0 and a single
graph, the run is bit-identical to the instance-level mask explainer, which
delegates here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Adam, Tensor, cross_entropy_logits
from .bench import FRACTION_GRID, removal_counts, removal_curves
from .explainers import NodeImportanceMap, normalize_scores
from .graphs import CellGraph, Dataset, ranked_nodes
from .model import (GnnModel, forward_many_masks, graph_arrays, param_tensors,
                    predict, tape_forward)

KS_MODES = ("soft_confidence", "binary_label")
BATCH_METHOD = "ksgnnexplainer"


@dataclass
class BatchExplainConfig:
    """Weights, schedule, and optimizer settings for the batch explainer."""

    lambda_similarity: float = 0.5
    lambda_ks_sum: float = 1.0
    lambda_ks_var: float = 0.5
    iterations: int = 150
    learning_rate: float = 0.01
    reward_samples: int = 2
    schedule: tuple[float, ...] = FRACTION_GRID
    ks_mode: str = "soft_confidence"
    seed: int = 0
    init_logit: float = 0.0
    size_penalty: float = 0.005
    entropy_penalty: float = 0.1
    batch_cap: int = 16

    def validate(self) -> None:
        lams = (self.lambda_similarity, self.lambda_ks_sum, self.lambda_ks_var)
        if any(l < 0 or not np.isfinite(l) for l in lams):
            raise ValueError("lambdas must be finite and nonnegative")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.reward_samples < 1:
            raise ValueError("reward_samples must be >= 1")
        if self.ks_mode not in KS_MODES:
            raise ValueError(f"ks_mode must be one of {KS_MODES}")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not self.schedule or any(not 0.0 <= f <= 1.0 for f in self.schedule):
            raise ValueError("schedule fractions must lie in [0, 1]")
        if self.batch_cap < 1:
            raise ValueError("batch_cap must be >= 1")


@dataclass(eq=False)
class ObjectiveTrace:
    """Per-iteration raw term values plus the optimized total."""

    mi_sum: np.ndarray         # sum_i -CE_i, unweighted
    similarity_sum: np.ndarray # sum of pairwise cosines, unweighted
    ks_sum: np.ndarray         # sum of per-graph KS values, unweighted
    ks_var: np.ndarray         # population variance of KS values, unweighted
    total: np.ndarray          # weighted objective incl. mask regularizers

    def __len__(self) -> int:
        return self.mi_sum.size


@dataclass(eq=False)
class BatchExplanation:
    graph_ids: list[str]
    masks: list[np.ndarray]
    importance_maps: list[NodeImportanceMap]
    trace: ObjectiveTrace
    ks_values: np.ndarray
    best_iteration: int

    def to_dict(self) -> dict:
        return {
            "graph_ids": list(self.graph_ids),
            "masks": [[float(v) for v in m] for m in self.masks],
            "importance_maps": [m.to_dict() for m in self.importance_maps],
            "trace": {
                "mi_sum": [float(v) for v in self.trace.mi_sum],
                "similarity_sum": [float(v) for v in self.trace.similarity_sum],
                "ks_sum": [float(v) for v in self.trace.ks_sum],
                "ks_var": [float(v) for v in self.trace.ks_var],
                "total": [float(v) for v in self.trace.total],
            },
            "ks_values": [float(v) for v in self.ks_values],
            "best_iteration": int(self.best_iteration),
        }


# -- objective pieces ------------------------------------------------------------


def pairwise_similarity(embeddings) -> float:
    """Sum of cosine similarities over all unordered embedding pairs."""
    embs = [np.asarray(e, dtype=np.float64) for e in embeddings]
    if len(embs) < 2:
        raise ValueError("need at least two embeddings")
    total = 0.0
    norms = [float(np.linalg.norm(e)) for e in embs]
    for i in range(len(embs)):
        for j in range(i + 1, len(embs)):
            if norms[i] == 0.0 or norms[j] == 0.0:
                continue   # zero-norm embeddings contribute similarity 0
            total += float(embs[i] @ embs[j]) / (norms[i] * norms[j])
    return total


def _ks_from_direction_curves(labels_most, labels_least, prob_most, prob_least,
                              orig_label: int, ks_mode: str) -> float:
    if ks_mode == "soft_confidence":
        c_most = np.maximum.accumulate(1.0 - prob_most)
        c_least = np.maximum.accumulate(1.0 - prob_least)
        return float(np.clip((c_most - c_least).max(), 0.0, 1.0))
    changed_most = np.maximum.accumulate((labels_most != orig_label).astype(float))
    changed_least = np.maximum.accumulate((labels_least != orig_label).astype(float))
    return float(np.abs(changed_most - changed_least).max())


def ks_per_graph(model: GnnModel, graph: CellGraph, mask: np.ndarray,
                 schedule=FRACTION_GRID, ks_mode: str = "soft_confidence",
                 arrays=None) -> float:
    """Removal-sweep KS value of one graph under one mask ranking.

    Nodes are ranked by mask value; the top (most) and bottom (least)
    floor(j * V) nodes are hard-removed per schedule fraction j.  In
    soft_confidence mode the two curves are running maxima of
    1 - p(original label); in binary_label mode they are cumulative
    label-change indicators.
    """
    if graph.num_nodes == 0:
        raise ValueError("cannot score an empty graph")
    if ks_mode not in KS_MODES:
        raise ValueError(f"ks_mode must be one of {KS_MODES}")
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (graph.num_nodes,):
        raise ValueError("mask length must equal the node count")
    adj, feats = arrays if arrays is not None else graph_arrays(graph)
    curves = removal_curves(model, adj, feats, mask, schedule)
    return _ks_from_direction_curves(
        curves["labels_most"], curves["labels_least"],
        curves["prob_orig_most"], curves["prob_orig_least"],
        curves["orig_label"], ks_mode)


@dataclass
class ObjectiveTerms:
    term_mi: float
    term_similarity: float
    term_ks_sum: float
    term_ks_var: float
    total: float


def objective_eval(model: GnnModel, graphs: list[CellGraph], masks,
                   cfg: BatchExplainConfig) -> ObjectiveTerms:
    """Evaluate the four weighted objective terms at fixed soft masks."""
    cfg.validate()
    if not graphs:
        raise ValueError("empty batch")
    ce_sum = 0.0
    embs = []
    ks_vals = []
    for g, m in zip(graphs, masks):
        m = np.asarray(m, dtype=np.float64)
        arrays = graph_arrays(g)
        orig, _ = predict(model, g, arrays=arrays)
        _, probs, emb = forward_many_masks(model, arrays[0], arrays[1], m[None, :])
        ce_sum += -math.log(max(probs[0, orig], 1e-300))
        embs.append(emb[0])
        ks_vals.append(ks_per_graph(model, g, m, cfg.schedule, cfg.ks_mode,
                                    arrays=arrays))
    term_mi = -ce_sum
    term_p = cfg.lambda_similarity * pairwise_similarity(embs) if len(graphs) > 1 else 0.0
    ks_arr = np.array(ks_vals)
    term_ks_sum = cfg.lambda_ks_sum * float(ks_arr.sum())
    term_ks_var = cfg.lambda_ks_var * float(ks_arr.var())
    return ObjectiveTerms(
        term_mi=term_mi, term_similarity=term_p, term_ks_sum=term_ks_sum,
        term_ks_var=term_ks_var,
        total=term_mi + term_p + term_ks_sum - term_ks_var)


def score_function_gradient(probs: np.ndarray, samples: np.ndarray,
                            rewards: np.ndarray, baseline: float) -> np.ndarray:
    """Likelihood-ratio ascent gradient estimate for Bernoulli mask logits.

    probs: sigma(theta) (V,); samples: (S, V) in {0,1}; rewards: (S,).
    Returns the mean of (reward - baseline) * d log p(sample) / d theta.
    """
    probs = np.asarray(probs, dtype=np.float64)
    samples = np.asarray(samples, dtype=np.float64)
    rewards = np.asarray(rewards, dtype=np.float64)
    return ((rewards - baseline)[:, None] * (samples - probs[None, :])).mean(axis=0)


def _sample_stream(seed: int, graph_index: int, iteration: int,
                   sample_index: int) -> np.random.Generator:
    """Independent RNG stream per (seed, graph, iteration, sample)."""
    return np.random.default_rng(
        np.random.SeedSequence([seed, graph_index, iteration, sample_index]))


def _binary_entropy(theta: Tensor, sig: Tensor) -> Tensor:
    # H_b(sigma(t)) = sigma * softplus(-t) + (1 - sigma) * softplus(t)
    return sig * (-theta).softplus() + (1.0 - sig) * theta.softplus()


# -- optimizer --------------------------------------------------------------------


def explain_batch(model: GnnModel, graphs: list[CellGraph],
                  cfg: BatchExplainConfig | None = None) -> BatchExplanation:
    """Optimize per-graph mask logits jointly for `iterations` steps."""
    cfg = cfg or BatchExplainConfig()
    cfg.validate()
    if not graphs:
        raise ValueError("empty batch")
    labels = {g.label for g in graphs}
    if len(labels) != 1:
        raise ValueError(f"batch must share one label, got {sorted(labels)}")
    for g in graphs:
        if g.num_nodes == 0:
            raise ValueError("cannot explain an empty graph")
    k = len(graphs)
    arrays = [graph_arrays(g) for g in graphs]
    orig_pred = [predict(model, g, arrays=a)[0] for g, a in zip(graphs, arrays)]
    sizes = [g.num_nodes for g in graphs]
    offsets = np.cumsum([0] + sizes)
    use_similarity = cfg.lambda_similarity > 0.0 and k >= 2
    use_ks = cfg.lambda_ks_sum > 0.0 or cfg.lambda_ks_var > 0.0
    params_const = param_tensors(model, requires_grad=False)

    theta = np.full(offsets[-1], float(cfg.init_logit))
    opt = Adam(theta.size, lr=cfg.learning_rate)
    reward_count = 0
    reward_mean = 0.0

    trace_mi = np.zeros(cfg.iterations)
    trace_p = np.zeros(cfg.iterations)
    trace_ks = np.zeros(cfg.iterations)
    trace_var = np.zeros(cfg.iterations)
    trace_total = np.zeros(cfg.iterations)
    best_total = -np.inf
    best_theta = theta.copy()
    best_ks = np.zeros(k)
    best_iter = 0

    for t in range(cfg.iterations):
        # pathwise piece: fit + regularizers (+ similarity), exact gradients
        theta_t = [Tensor(theta[offsets[i]:offsets[i + 1]], requires_grad=True)
                   for i in range(k)]
        sig_t = [th.sigmoid() for th in theta_t]
        loss = None
        embs_t = []
        ce_sum = 0.0
        reg_sum = 0.0
        for i, (g, (adj, feats)) in enumerate(zip(graphs, arrays)):
            logits, emb = tape_forward(model, adj, feats, sig_t[i],
                                       params_const)
            ce = cross_entropy_logits(logits, orig_pred[i])
            size = sig_t[i].sum()
            ent = _binary_entropy(theta_t[i], sig_t[i]).sum()
            term = ce + cfg.size_penalty * size + cfg.entropy_penalty * ent
            ce_sum += float(ce.data)
            reg_sum += cfg.size_penalty * float(size.data) \
                + cfg.entropy_penalty * float(ent.data)
            loss = term if loss is None else loss + term
            embs_t.append(emb)
        p_raw = 0.0
        if use_similarity:
            sim = None
            norms = [(e * e).sum().maximum_scalar(1e-24).sqrt() for e in embs_t]
            for i in range(k):
                for j in range(i + 1, k):
                    cos = (embs_t[i] * embs_t[j]).sum() / (norms[i] * norms[j])
                    sim = cos if sim is None else sim + cos
            loss = loss - cfg.lambda_similarity * sim
            p_raw = float(sim.data)
        elif k >= 2:
            p_raw = pairwise_similarity([e.data[0] for e in embs_t])
        loss.backward()
        grad = np.concatenate([th.grad if th.grad is not None
                               else np.zeros_like(th.data) for th in theta_t])

        # score-function piece: KS terms on sampled hard masks
        ks_det = np.zeros(k)
        if use_ks:
            sigmas = [s.data for s in sig_t]
            ks_samples = np.zeros((k, cfg.reward_samples))
            samples = []
            for i, (g, (adj, feats)) in enumerate(zip(graphs, arrays)):
                counts = removal_counts(sizes[i], cfg.schedule)
                det_masks, det_slices = _sweep_variants(sigmas[i], counts)
                samp = np.zeros((cfg.reward_samples, sizes[i]))
                all_masks = [det_masks]
                all_slices = [det_slices]
                for s in range(cfg.reward_samples):
                    rng = _sample_stream(cfg.seed, i, t, s)
                    samp[s] = (rng.random(sizes[i]) < sigmas[i]).astype(np.float64)
                    vm, vs = _sweep_variants(samp[s], counts)
                    all_masks.append(vm)
                    all_slices.append(vs)
                samples.append(samp)
                stacked = np.concatenate(all_masks, axis=0)
                _, probs, _ = forward_many_masks(model, adj, feats, stacked)
                lab = np.argmax(probs, axis=1)
                pos = 0
                for si, slc in enumerate(all_slices):
                    ks = _ks_from_slices(lab, probs, pos, slc, orig_pred[i],
                                         cfg.ks_mode)
                    if si == 0:
                        ks_det[i] = ks
                    else:
                        ks_samples[i, si - 1] = ks
                    pos += slc["count"]
            rewards = cfg.lambda_ks_sum * ks_samples.sum(axis=0) \
                - cfg.lambda_ks_var * ks_samples.var(axis=0)
            # running-mean baseline over every reward seen so far
            for r in rewards:
                reward_count += 1
                reward_mean += (r - reward_mean) / reward_count
            for i in range(k):
                ascent = score_function_gradient(sigmas[i], samples[i],
                                                 rewards, reward_mean)
                grad[offsets[i]:offsets[i + 1]] -= ascent

        ks_sum_raw = float(ks_det.sum())
        ks_var_raw = float(ks_det.var()) if use_ks else 0.0
        total = (-ce_sum - reg_sum + cfg.lambda_similarity * p_raw
                 + cfg.lambda_ks_sum * ks_sum_raw
                 - cfg.lambda_ks_var * ks_var_raw)
        trace_mi[t] = -ce_sum
        trace_p[t] = p_raw
        trace_ks[t] = ks_sum_raw
        trace_var[t] = ks_var_raw
        trace_total[t] = total
        if total > best_total:
            best_total = total
            best_theta = theta.copy()
            best_ks = ks_det.copy()
            best_iter = t

        theta = opt.step(theta, grad)

    masks = [1.0 / (1.0 + np.exp(-best_theta[offsets[i]:offsets[i + 1]]))
             for i in range(k)]
    # with every extra term disabled this is plain instance-level mask search
    method = BATCH_METHOD if (use_similarity or use_ks
                              or cfg.lambda_similarity > 0.0) else "gnnexplainer"
    maps = [NodeImportanceMap(graph_id=g.id, scores=normalize_scores(m),
                              method=method)
            for g, m in zip(graphs, masks)]
    return BatchExplanation(
        graph_ids=[g.id for g in graphs], masks=masks, importance_maps=maps,
        trace=ObjectiveTrace(mi_sum=trace_mi, similarity_sum=trace_p,
                             ks_sum=trace_ks, ks_var=trace_var,
                             total=trace_total),
        ks_values=best_ks, best_iteration=best_iter)


def _sweep_variants(scores: np.ndarray, counts: np.ndarray):
    """Unique removal masks for both directions of one ranking.

    Returns (masks (U, V), slices) where slices maps each direction to the
    per-fraction row indices within this block.
    """
    n = scores.shape[0]
    rank = {d: ranked_nodes(scores, d) for d in ("most", "least")}
    variants = []
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
    slices = {
        "count": len(variants),
        "most": [index_of[("both", 0) if c == 0 else ("most", int(c))] for c in counts],
        "least": [index_of[("both", 0) if c == 0 else ("least", int(c))] for c in counts],
    }
    return masks, slices


def _ks_from_slices(labels: np.ndarray, probs: np.ndarray, offset: int,
                    slices: dict, orig_label: int, ks_mode: str) -> float:
    idx_most = np.asarray(slices["most"]) + offset
    idx_least = np.asarray(slices["least"]) + offset
    return _ks_from_direction_curves(
        labels[idx_most], labels[idx_least],
        probs[idx_most, orig_label], probs[idx_least, orig_label],
        orig_label, ks_mode)


# -- batch composition and ablation --------------------------------------------------


def compose_class_batches(dataset: Dataset, split: str, cap: int,
                          seed: int) -> dict[int, list[int]]:
    """Per-class graph indices from a split, subsampled to `cap` per class."""
    out: dict[int, list[int]] = {}
    for cls in range(dataset.num_classes):
        idx = [i for i in dataset.indices(split)
               if dataset.graphs[i].label == cls]
        if len(idx) > cap:
            rng = np.random.default_rng(np.random.SeedSequence([seed, cls]))
            chosen = sorted(rng.choice(len(idx), size=cap, replace=False))
            idx = [idx[j] for j in chosen]
        out[cls] = idx
    return out


ABLATION_ROWS = (
    ("full", dict()),
    ("mi", dict(lambda_similarity=0.0, lambda_ks_sum=0.0, lambda_ks_var=0.0)),
    ("mi+p", dict(lambda_ks_sum=0.0, lambda_ks_var=0.0)),
    ("mi+p+kssum", dict(lambda_ks_var=0.0)),
    ("mi+kssum+ksvar", dict(lambda_similarity=0.0)),
)


@dataclass
class AblationRow:
    name: str
    uses_mi: bool
    uses_similarity: bool
    uses_ks_sum: bool
    uses_ks_var: bool
    fidelity: float


def ablate(model: GnnModel, dataset: Dataset, base_cfg: BatchExplainConfig,
           split: str = "train",
           fidelity_threshold: float = 0.5) -> list[AblationRow]:
    """Toggle objective terms and report fidelity of the resulting maps.

    Each row runs the batch explainer per class on the same seeded class
    batches, then evaluates fidelity at `fidelity_threshold` over the union
    of explained graphs.
    """
    from dataclasses import replace

    from .bench import fidelity

    batches = compose_class_batches(dataset, split, base_cfg.batch_cap,
                                    base_cfg.seed)
    rows = []
    for name, overrides in ABLATION_ROWS:
        cfg = replace(base_cfg, **overrides)
        all_graphs = []
        all_maps = []
        for cls in sorted(batches):
            graphs = [dataset.graphs[i] for i in batches[cls]]
            if not graphs:
                continue
            result = explain_batch(model, graphs, cfg)
            all_graphs.extend(graphs)
            all_maps.extend(result.importance_maps)
        score = fidelity(model, all_graphs, all_maps, fidelity_threshold)
        rows.append(AblationRow(
            name=name, uses_mi=True,
            uses_similarity=cfg.lambda_similarity > 0.0,
            uses_ks_sum=cfg.lambda_ks_sum > 0.0,
            uses_ks_var=cfg.lambda_ks_var > 0.0,
            fidelity=score))
    return rows
