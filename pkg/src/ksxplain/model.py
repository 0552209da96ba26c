"""Sum-aggregation message-passing classifier with soft node masks.

Layer update (GIN style, mask-weighted):

    s_v = m_v * h_v
    h'_v = relu(W_l ((1 + eps_l) s_v + sum_{u in N(v)} s_u) + b_l)

Readout is a masked mean, sum(m_v h_v) / max(sum(m_v), 1e-9), followed by a
two-layer perceptron head producing the class logits.  A hard mask with
m_v = 0 is exactly equivalent to removing node v, and the empty graph yields
the zero embedding and head(0) logits through the same code path.

Two forward implementations share one arithmetic formulation: a taped one
(exact reverse-mode gradients for parameters and masks) and a plain numpy
one that evaluates many masks of one graph in a single batched call.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Adam, Tensor, cross_entropy_logits
from .graphs import CellGraph, Dataset

READOUT_DENOM_FLOOR = 1e-9


@dataclass(eq=False)
class GnnModel:
    """Parameters plus architecture hyperparameters of the classifier."""

    in_dim: int
    num_classes: int
    hidden: int = 32
    num_layers: int = 3
    layer_weights: list[np.ndarray] = None
    layer_biases: list[np.ndarray] = None
    epsilons: np.ndarray = None
    head_w1: np.ndarray = None
    head_b1: np.ndarray = None
    head_w2: np.ndarray = None
    head_b2: np.ndarray = None

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = []
        fan_in = self.in_dim
        for _ in range(self.num_layers):
            dims.append((fan_in, self.hidden))
            fan_in = self.hidden
        return dims

    def flat_params(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.layer_weights, self.layer_biases):
            parts.append(w.reshape(-1))
            parts.append(b)
        parts.extend([self.head_w1.reshape(-1), self.head_b1,
                      self.head_w2.reshape(-1), self.head_b2])
        parts.append(self.epsilons)
        return np.concatenate(parts)

    def set_flat_params(self, flat: np.ndarray) -> None:
        pos = 0

        def take(shape):
            nonlocal pos
            size = int(np.prod(shape))
            out = flat[pos:pos + size].reshape(shape).copy()
            pos += size
            return out

        ws, bs = [], []
        for din, dout in self.layer_dims():
            ws.append(take((din, dout)))
            bs.append(take((dout,)))
        self.layer_weights = ws
        self.layer_biases = bs
        self.head_w1 = take((self.hidden, self.hidden))
        self.head_b1 = take((self.hidden,))
        self.head_w2 = take((self.hidden, self.num_classes))
        self.head_b2 = take((self.num_classes,))
        self.epsilons = take((self.num_layers,))
        if pos != flat.size:
            raise ValueError("flat parameter vector has wrong length")

    def copy(self) -> "GnnModel":
        m = GnnModel(in_dim=self.in_dim, num_classes=self.num_classes,
                     hidden=self.hidden, num_layers=self.num_layers)
        m.set_flat_params(self.flat_params())
        return m

    def validate(self) -> None:
        flat = self.flat_params()
        if not np.all(np.isfinite(flat)):
            raise ValueError("non-finite model parameters")


def init_model(in_dim: int, num_classes: int, hidden: int = 32,
               num_layers: int = 3, seed: int = 0) -> GnnModel:
    """Glorot-uniform initialized model; epsilons start at zero."""
    if in_dim < 1 or num_classes < 1 or hidden < 1 or num_layers < 1:
        raise ValueError("invalid architecture dimensions")
    rng = np.random.default_rng(seed)
    model = GnnModel(in_dim=in_dim, num_classes=num_classes,
                     hidden=hidden, num_layers=num_layers)

    def glorot(din, dout):
        limit = np.sqrt(6.0 / (din + dout))
        return rng.uniform(-limit, limit, size=(din, dout))

    model.layer_weights = [glorot(din, dout) for din, dout in model.layer_dims()]
    model.layer_biases = [np.zeros(hidden) for _ in range(num_layers)]
    model.epsilons = np.zeros(num_layers)
    model.head_w1 = glorot(hidden, hidden)
    model.head_b1 = np.zeros(hidden)
    model.head_w2 = glorot(hidden, num_classes)
    model.head_b2 = np.zeros(num_classes)
    return model


def graph_arrays(g: CellGraph) -> tuple[np.ndarray, np.ndarray]:
    """(dense adjacency, feature matrix) for a graph."""
    return g.adjacency(), np.asarray(g.features, dtype=np.float64)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ForwardResult:
    logits: np.ndarray      # (C,)
    probs: np.ndarray       # (C,)
    embedding: np.ndarray   # (hidden,)


def forward_many_masks(model: GnnModel, adj: np.ndarray, feats: np.ndarray,
                       masks: np.ndarray):
    """Evaluate one graph under a batch of node masks.

    masks: (B, V) in [0, 1].  Returns (logits (B,C), probs (B,C), emb (B,W)).
    """
    masks = np.asarray(masks, dtype=np.float64)
    m = masks[:, :, None]
    h = feats[None, :, :]
    for w, b, eps in zip(model.layer_weights, model.layer_biases, model.epsilons):
        s = h * m
        z = (1.0 + eps) * s + np.matmul(adj, s)
        h = np.maximum(np.matmul(z, w) + b, 0.0)
    num = (h * m).sum(axis=1)
    den = np.maximum(masks.sum(axis=1), READOUT_DENOM_FLOOR)
    emb = num / den[:, None]
    e1 = np.maximum(emb @ model.head_w1 + model.head_b1, 0.0)
    logits = e1 @ model.head_w2 + model.head_b2
    return logits, softmax(logits), emb


def forward(model: GnnModel, graph: CellGraph, mask: np.ndarray | None = None,
            arrays: tuple[np.ndarray, np.ndarray] | None = None) -> ForwardResult:
    """Single forward pass; `mask` defaults to all ones."""
    adj, feats = arrays if arrays is not None else graph_arrays(graph)
    n = feats.shape[0]
    if feats.shape[1] != model.in_dim:
        raise ValueError(f"feature width {feats.shape[1]} != model input {model.in_dim}")
    if mask is None:
        mask = np.ones(n)
    else:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != (n,):
            raise ValueError("mask length must equal the node count")
    logits, probs, emb = forward_many_masks(model, adj, feats, mask[None, :])
    return ForwardResult(logits=logits[0], probs=probs[0], embedding=emb[0])


def predict(model: GnnModel, graph: CellGraph,
            arrays=None) -> tuple[int, np.ndarray]:
    """(argmax class, probabilities); ties break toward the smaller index."""
    res = forward(model, graph, arrays=arrays)
    return int(np.argmax(res.probs)), res.probs


@dataclass
class ForwardTrace:
    """Every intermediate of one unbatched forward pass (plain arrays)."""

    mask: np.ndarray
    h: list[np.ndarray]          # node states, h[0] = features, h[-1] = final
    s: list[np.ndarray]          # masked states entering each layer
    zagg: list[np.ndarray]       # (1+eps) s + A s per layer
    pre: list[np.ndarray]        # affine preactivations per layer
    den: float                   # readout denominator
    embedding: np.ndarray
    head_pre1: np.ndarray
    head_e1: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


def forward_trace(model: GnnModel, adj: np.ndarray, feats: np.ndarray,
                  mask: np.ndarray | None = None) -> ForwardTrace:
    """Unbatched forward keeping all intermediates (for saliency methods)."""
    n = feats.shape[0]
    mask = np.ones(n) if mask is None else np.asarray(mask, dtype=np.float64)
    mcol = mask[:, None]
    h_list, s_list, zagg_list, pre_list = [feats], [], [], []
    h = feats
    for w, b, eps in zip(model.layer_weights, model.layer_biases, model.epsilons):
        s = h * mcol
        zagg = (1.0 + eps) * s + adj @ s
        pre = zagg @ w + b
        h = np.maximum(pre, 0.0)
        s_list.append(s)
        zagg_list.append(zagg)
        pre_list.append(pre)
        h_list.append(h)
    den = float(max(mask.sum(), READOUT_DENOM_FLOOR))
    emb = (h * mcol).sum(axis=0) / den
    pre1 = emb @ model.head_w1 + model.head_b1
    e1 = np.maximum(pre1, 0.0)
    logits = e1 @ model.head_w2 + model.head_b2
    return ForwardTrace(mask=mask, h=h_list, s=s_list, zagg=zagg_list,
                        pre=pre_list, den=den, embedding=emb, head_pre1=pre1,
                        head_e1=e1, logits=logits, probs=softmax(logits))


def final_state_gradient(model: GnnModel, trace: ForwardTrace, cls: int) -> np.ndarray:
    """d logits[cls] / d (final node states), analytic through readout + head."""
    gate = (trace.head_pre1 > 0).astype(np.float64)
    dy_de = model.head_w1 @ (gate * model.head_w2[:, cls])
    return (trace.mask / trace.den)[:, None] * dy_de[None, :]


# -- taped forward -------------------------------------------------------------


def param_tensors(model: GnnModel, requires_grad: bool) -> list[Tensor]:
    """Parameter tensors in flat_params order (epsilons last)."""
    ts = []
    for w, b in zip(model.layer_weights, model.layer_biases):
        ts.append(Tensor(w, requires_grad))
        ts.append(Tensor(b, requires_grad))
    ts.append(Tensor(model.head_w1, requires_grad))
    ts.append(Tensor(model.head_b1, requires_grad))
    ts.append(Tensor(model.head_w2, requires_grad))
    ts.append(Tensor(model.head_b2, requires_grad))
    ts.append(Tensor(model.epsilons, requires_grad))
    return ts


def collect_param_grads(ts: list[Tensor]) -> np.ndarray:
    parts = []
    for t in ts:
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        parts.append(g.reshape(-1))
    return np.concatenate(parts)


def tape_forward(model: GnnModel, adj: np.ndarray, feats: np.ndarray,
                 mask_t: Tensor | None, params: list[Tensor]) -> tuple[Tensor, Tensor]:
    """Forward on the tape; returns (logits (1,C), embedding (1,W)) tensors.

    `params` must come from param_tensors (epsilons tensor last).  Arithmetic
    matches forward_many_masks exactly.
    """
    n = feats.shape[0]
    eps_t = params[-1]
    if mask_t is None:
        mask_t = Tensor(np.ones(n))
    mcol = mask_t if mask_t.data.ndim == 2 else _as_column(mask_t)
    a_t = Tensor(adj)
    h: Tensor = Tensor(feats)
    for li in range(model.num_layers):
        w_t, b_t = params[2 * li], params[2 * li + 1]
        s = h * mcol
        z = s * (eps_t[li] + 1.0) + (a_t @ s)
        h = ((z @ w_t) + b_t).relu()
    num = (h * mcol).sum(axis=0, keepdims=True)       # (1, W)
    den = mcol.sum().maximum_scalar(READOUT_DENOM_FLOOR)
    emb = num / den
    e1 = ((emb @ params[-5]) + params[-4]).relu()
    logits = (e1 @ params[-3]) + params[-2]
    return logits, emb


def _as_column(mask_t: Tensor) -> Tensor:
    # (V,) -> (V,1) view on the tape
    out = Tensor(mask_t.data.reshape(-1, 1))
    if mask_t.requires_grad:
        out.requires_grad = True
        out._parents = (mask_t,)

        def bw(g):
            mask_t._accumulate(g.reshape(mask_t.data.shape))

        out._backward = bw
    return out


def backward(model: GnnModel, graph: CellGraph, target: int,
             mask: np.ndarray | None = None,
             loss_seed: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradients of cross-entropy at `target` w.r.t. (params, mask)."""
    adj, feats = graph_arrays(graph)
    n = feats.shape[0]
    mask = np.ones(n) if mask is None else np.asarray(mask, dtype=np.float64)
    params = param_tensors(model, requires_grad=True)
    mask_t = Tensor(mask, requires_grad=True)
    logits, _ = tape_forward(model, adj, feats, mask_t, params)
    loss = cross_entropy_logits(logits, int(target))
    loss.backward(loss_seed)
    mg = mask_t.grad if mask_t.grad is not None else np.zeros(n)
    return collect_param_grads(params), mg


# -- training ------------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 3e-3
    epochs: int = 200
    seed: int = 0
    weight_decay: float = 0.0

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be nonnegative")


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_accuracy: float


def evaluate_accuracy(model: GnnModel, graphs: list[CellGraph]) -> float:
    if not graphs:
        raise ValueError("cannot evaluate on an empty split")
    hits = 0
    for g in graphs:
        label, _ = predict(model, g)
        hits += int(label == g.label)
    return hits / len(graphs)


def train(template: GnnModel, dataset: Dataset,
          config: TrainConfig) -> tuple[GnnModel, list[EpochMetrics]]:
    """Full-batch Adam on cross-entropy; returns the best-val-accuracy model.

    Parameters are re-initialized from config.seed, so the run is a pure
    function of (architecture, dataset, config).
    """
    config.validate()
    train_graphs = dataset.subset("train")
    val_graphs = dataset.subset("val")
    if not train_graphs or not val_graphs:
        raise ValueError("dataset must have nonempty train and val splits")
    model = init_model(template.in_dim, template.num_classes,
                       hidden=template.hidden, num_layers=template.num_layers,
                       seed=config.seed)
    cached = [graph_arrays(g) for g in train_graphs]
    opt = Adam(model.flat_params().size, lr=config.learning_rate,
               weight_decay=config.weight_decay)
    best_val = -1.0
    best_params = model.flat_params()
    metrics: list[EpochMetrics] = []
    inv_n = 1.0 / len(train_graphs)
    for epoch in range(config.epochs):
        params = param_tensors(model, requires_grad=True)
        total = None
        hits = 0
        for g, (adj, feats) in zip(train_graphs, cached):
            logits, _ = tape_forward(model, adj, feats, None, params)
            ce = cross_entropy_logits(logits, g.label)
            total = ce if total is None else total + ce
            hits += int(np.argmax(logits.data[0]) == g.label)
        loss = total * inv_n
        loss.backward()
        grads = collect_param_grads(params)
        model.set_flat_params(opt.step(model.flat_params(), grads))
        val_acc = evaluate_accuracy(model, val_graphs)
        metrics.append(EpochMetrics(
            epoch=epoch,
            train_loss=float(loss.data),
            train_accuracy=hits / len(train_graphs),
            val_accuracy=val_acc,
        ))
        if val_acc > best_val:
            best_val = val_acc
            best_params = model.flat_params()
    best = GnnModel(in_dim=model.in_dim, num_classes=model.num_classes,
                    hidden=model.hidden, num_layers=model.num_layers)
    best.set_flat_params(best_params)
    return best, metrics


# -- checkpoints ---------------------------------------------------------------


def save_model(model: GnnModel, path) -> None:
    flat = model.flat_params()
    affine = flat[: flat.size - model.num_layers]
    payload = {
        "header": {
            "num_layers": model.num_layers,
            "hidden": model.hidden,
            "in_dim": model.in_dim,
            "num_classes": model.num_classes,
            "epsilons": [float(e) for e in model.epsilons],
        },
        "params": [float(p) for p in affine],
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True,
                                     separators=(",", ":")) + "\n")


def load_model(path) -> GnnModel:
    try:
        payload = json.loads(Path(path).read_text())
        header = payload["header"]
        model = GnnModel(in_dim=int(header["in_dim"]),
                         num_classes=int(header["num_classes"]),
                         hidden=int(header["hidden"]),
                         num_layers=int(header["num_layers"]))
        flat = np.concatenate([
            np.asarray(payload["params"], dtype=np.float64),
            np.asarray(header["epsilons"], dtype=np.float64),
        ])
        model.set_flat_params(flat)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ValueError(f"malformed checkpoint {path}: {exc}") from exc
    model.validate()
    return model
