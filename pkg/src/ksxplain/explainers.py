"""Instance-level node-importance methods.

All explainers return a :class:`NodeImportanceMap` whose scores are per-graph
min-max normalized; when every raw score is equal (including single-node
graphs) the scores are all 0.5.  Each explainer is a pure function of
(model, graph, config/seed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graphs import CellGraph
from .model import (GnnModel, final_state_gradient, forward_trace, graph_arrays,
                    predict)


@dataclass(eq=False)
class NodeImportanceMap:
    graph_id: str
    scores: np.ndarray   # (V,) in [0, 1]
    method: str

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 1:
            raise ValueError("scores must be one-dimensional")
        if scores.size and (scores.min() < 0.0 or scores.max() > 1.0):
            raise ValueError("scores must lie in [0, 1]")
        self.scores = scores

    def to_dict(self) -> dict:
        return {"graph_id": self.graph_id, "method": self.method,
                "scores": [float(s) for s in self.scores]}

    @staticmethod
    def from_dict(payload: dict) -> "NodeImportanceMap":
        return NodeImportanceMap(graph_id=str(payload["graph_id"]),
                                 scores=np.asarray(payload["scores"], dtype=np.float64),
                                 method=str(payload["method"]))


def normalize_scores(raw: np.ndarray) -> np.ndarray:
    """Per-graph min-max normalization; all-equal raw scores map to 0.5."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        return raw.copy()
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.full(raw.shape, 0.5)
    return (raw - lo) / (hi - lo)


def ranking_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC of scores for labels==1 vs labels==0 (ties averaged)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative nodes")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = ranks[labels].sum()
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass
class MaskOptConfig:
    """Mask-optimization settings for the perturbation explainer."""

    iterations: int = 300
    learning_rate: float = 0.01
    size_penalty: float = 0.005
    entropy_penalty: float = 0.1
    init_logit: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.size_penalty < 0 or self.entropy_penalty < 0:
            raise ValueError("penalties must be nonnegative")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")


def explain_gnnexplainer(model: GnnModel, graph: CellGraph,
                         cfg: MaskOptConfig | None = None) -> NodeImportanceMap:
    """Gradient-optimized soft node mask explaining the model's own prediction.

    Minimizes  -log P(y_hat | g, sigma(theta)) + a * sum sigma + b * sum H_b(sigma)
    and returns the normalized mask of the best-loss iteration.
    """
    cfg = cfg or MaskOptConfig()
    cfg.validate()
    from .batch_explainer import BatchExplainConfig, explain_batch

    bcfg = BatchExplainConfig(
        lambda_similarity=0.0, lambda_ks_sum=0.0, lambda_ks_var=0.0,
        iterations=cfg.iterations, learning_rate=cfg.learning_rate,
        size_penalty=cfg.size_penalty, entropy_penalty=cfg.entropy_penalty,
        init_logit=cfg.init_logit, seed=cfg.seed,
    )
    result = explain_batch(model, [graph], bcfg)
    imp = result.importance_maps[0]
    return NodeImportanceMap(graph_id=imp.graph_id, scores=imp.scores,
                             method="gnnexplainer")


def explain_gradcam(model: GnnModel, graph: CellGraph) -> NodeImportanceMap:
    """Channel-weighted activation saliency on the final node states."""
    if graph.num_nodes == 0:
        raise ValueError("cannot explain an empty graph")
    adj, feats = graph_arrays(graph)
    trace = forward_trace(model, adj, feats)
    cls = int(np.argmax(trace.probs))
    grad = final_state_gradient(model, trace, cls)     # (V, W)
    acts = trace.h[-1]
    alpha = grad.mean(axis=0)
    raw = np.maximum(acts @ alpha, 0.0)
    return NodeImportanceMap(graph_id=graph.id, scores=normalize_scores(raw),
                             method="gradcam")


def explain_gradcampp(model: GnnModel, graph: CellGraph) -> NodeImportanceMap:
    """Grad-CAM++ variant: per-node channel weights from gradient powers."""
    if graph.num_nodes == 0:
        raise ValueError("cannot explain an empty graph")
    adj, feats = graph_arrays(graph)
    trace = forward_trace(model, adj, feats)
    cls = int(np.argmax(trace.probs))
    grad = final_state_gradient(model, trace, cls)     # (V, W)
    acts = trace.h[-1]
    g2 = grad * grad
    g3 = g2 * grad
    denom = 2.0 * g2 + acts.sum(axis=0)[None, :] * g3
    alpha = np.where(denom != 0.0, g2 / np.where(denom == 0.0, 1.0, denom), 0.0)
    weights = (alpha * np.maximum(grad, 0.0)).sum(axis=0)
    raw = np.maximum(acts @ weights, 0.0)
    return NodeImportanceMap(graph_id=graph.id, scores=normalize_scores(raw),
                             method="gradcampp")


def explain_graphlrp(model: GnnModel, graph: CellGraph,
                     epsilon: float = 1e-6) -> NodeImportanceMap:
    """Epsilon-rule relevance propagation from the predicted-class logit.

    Each linear step splits relevance over inputs in proportion to their
    contributions with epsilon-stabilized denominators (bias excluded from
    the split), then rescales the step's output so total relevance is
    conserved exactly; ReLU passes relevance through unchanged.
    """
    if graph.num_nodes == 0:
        raise ValueError("cannot explain an empty graph")
    adj, feats = graph_arrays(graph)
    trace = forward_trace(model, adj, feats)
    cls = int(np.argmax(trace.probs))
    relevance = np.zeros(model.num_classes)
    relevance[cls] = trace.logits[cls]
    rel = _lrp_linear(trace.head_e1, model.head_w2, relevance, epsilon)
    rel = _lrp_linear(trace.embedding, model.head_w1, rel, epsilon)
    # readout: e_k = sum_v m_v h_vk / den
    contrib = (trace.mask[:, None] * trace.h[-1]) / trace.den       # (V, W)
    rel_nodes = _conserve(contrib * (rel / _stab(trace.embedding, epsilon))[None, :],
                          rel.sum())
    for li in range(model.num_layers - 1, -1, -1):
        # affine: pre = zagg @ W (+ bias, excluded from the split)
        zagg = trace.zagg[li]
        hat = trace.pre[li] - model.layer_biases[li]
        rel_zagg = zagg * ((rel_nodes / _stab(hat, epsilon))
                           @ model.layer_weights[li].T)
        rel_zagg = _conserve(rel_zagg, rel_nodes.sum())
        # aggregation: zagg = ((1+eps) I + A) @ s, with s = mask * h
        mat = (1.0 + model.epsilons[li]) * np.eye(adj.shape[0]) + adj
        rel_nodes = trace.s[li] * (mat.T @ (rel_zagg / _stab(zagg, epsilon)))
        rel_nodes = _conserve(rel_nodes, rel_zagg.sum())
    node_rel = rel_nodes.sum(axis=1)
    return NodeImportanceMap(graph_id=graph.id, scores=normalize_scores(node_rel),
                             method="graphlrp")


def _stab(z: np.ndarray, epsilon: float) -> np.ndarray:
    """z shifted away from zero by a signed epsilon."""
    return z + epsilon * np.where(z >= 0.0, 1.0, -1.0)


def _conserve(rel: np.ndarray, target_total: float) -> np.ndarray:
    """Rescale a relevance array so its total matches the incoming total."""
    total = rel.sum()
    if total == 0.0:
        return rel
    return rel * (target_total / total)


def _lrp_linear(inputs: np.ndarray, weights: np.ndarray, rel_out: np.ndarray,
                epsilon: float) -> np.ndarray:
    """Distribute output relevance over the inputs of x @ W (bias excluded)."""
    contrib = inputs[:, None] * weights            # (in, out)
    hat = contrib.sum(axis=0)
    rel_in = (contrib * (rel_out / _stab(hat, epsilon))[None, :]).sum(axis=1)
    return _conserve(rel_in, rel_out.sum())


def explain_random(graph: CellGraph, seed: int = 0) -> NodeImportanceMap:
    """I.i.d. uniform scores; a floor control for the benchmark."""
    rng = np.random.default_rng(seed)
    raw = rng.uniform(size=graph.num_nodes)
    return NodeImportanceMap(graph_id=graph.id, scores=normalize_scores(raw),
                             method="random")


def explain_oracle(graph: CellGraph, ground_truth: np.ndarray) -> NodeImportanceMap:
    """Ground-truth node labels as scores; the benchmark's ceiling control."""
    gt = np.asarray(ground_truth, dtype=np.float64)
    if gt.shape != (graph.num_nodes,):
        raise ValueError("ground truth length must equal the node count")
    return NodeImportanceMap(graph_id=graph.id, scores=normalize_scores(gt),
                             method="oracle")


INSTANCE_METHODS = ("gnnexplainer", "gradcam", "gradcampp", "graphlrp",
                    "random", "oracle")


def explain_with_method(method: str, model: GnnModel, graph: CellGraph, *,
                        ground_truth: np.ndarray | None = None,
                        mask_cfg: MaskOptConfig | None = None,
                        seed: int = 0) -> NodeImportanceMap:
    """Dispatch one instance-level method by tag."""
    if method == "gnnexplainer":
        return explain_gnnexplainer(model, graph, mask_cfg)
    if method == "gradcam":
        return explain_gradcam(model, graph)
    if method == "gradcampp":
        return explain_gradcampp(model, graph)
    if method == "graphlrp":
        return explain_graphlrp(model, graph)
    if method == "random":
        return explain_random(graph, seed=seed)
    if method == "oracle":
        if ground_truth is None:
            raise ValueError("oracle explainer requires ground-truth node labels")
        return explain_oracle(graph, ground_truth)
    raise ValueError(f"unknown explainer method {method!r}")
