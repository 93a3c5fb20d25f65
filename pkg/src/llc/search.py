"""Bi-level architecture search, retraining and fixed baselines."""

from __future__ import annotations

import re
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from llc import autodiff as ad
from llc.autodiff import AdamState, Tape, Tensor
from llc.errors import NumericError
from llc.graph import DataSplit, Graph, substream
from llc.supernet import (
    FUSIONS,
    Architecture,
    DerivedNetwork,
    GumbelConfig,
    OperationWeights,
    Supernet,
    SupernetSpec,
    build_architecture,
    derive_architecture,
)


@dataclass
class SearchConfig:
    epochs: int = 200
    retrain_epochs: int = 300
    lr_w: float = 5e-3
    lr_alpha: float = 3e-3
    weight_decay_w: float = 5e-4
    lambda_start: float = 1.0
    lambda_end: float = 0.05
    seed: int = 0
    gnn_kind: str = "sage"
    n_gnn_blocks: int = 4
    hidden_dim: int = 64
    dropout: float = 0.0
    patience: int = 30
    heads: int = 1
    fusion_subset: tuple = FUSIONS

    def __post_init__(self):
        self.fusion_subset = tuple(self.fusion_subset)
        self.validate()

    def validate(self):
        if not self.lambda_start >= self.lambda_end > 0:
            raise ValueError("need lambda_start >= lambda_end > 0")
        if self.lr_w < 0 or self.lr_alpha < 0:
            raise ValueError("learning rates must be non-negative")
        if self.epochs < 0 or self.retrain_epochs < 0 or self.patience < 1:
            raise ValueError("epochs must be non-negative and patience positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.gnn_kind not in ("sage", "gat"):
            raise ValueError(f"unknown gnn_kind {self.gnn_kind!r}")
        if self.n_gnn_blocks < 0 or self.hidden_dim < 1 or self.heads < 1:
            raise ValueError("n_gnn_blocks, hidden_dim and heads out of range")
        if not set(self.fusion_subset) <= set(FUSIONS) or not self.fusion_subset:
            raise ValueError(f"fusion_subset must be a nonempty subset of {FUSIONS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fusion_subset"] = list(self.fusion_subset)
        return d

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    def spec(self, graph: Graph) -> SupernetSpec:
        return SupernetSpec(graph.n_features, graph.n_classes, self.n_gnn_blocks, self.hidden_dim,
                            self.gnn_kind, self.fusion_subset, self.heads)


def temperature_schedule(cfg: SearchConfig) -> np.ndarray:
    """Geometric interpolation from ``lambda_start`` (epoch 0) to ``lambda_end`` (last epoch)."""
    n = cfg.epochs
    if n <= 1:
        return np.full(n, cfg.lambda_start)
    t = np.arange(n) / (n - 1)
    lam = cfg.lambda_start * (cfg.lambda_end / cfg.lambda_start) ** t
    lam[0], lam[-1] = cfg.lambda_start, cfg.lambda_end
    return lam


def accuracy(logits: np.ndarray, labels, rows) -> float:
    rows = np.asarray(rows)
    return float(np.mean(np.argmax(logits[rows], axis=1) == labels[rows]))


def _checked(loss: Tensor, what: str, epoch: int) -> float:
    value = loss.item()
    if not np.isfinite(value):
        raise NumericError(f"non-finite {what} loss at epoch {epoch}", epoch)
    return value


@dataclass
class EpochRecord:
    train_loss: float
    val_loss: float
    val_acc: float
    temperature: float

    def to_dict(self):
        return {"train_loss": self.train_loss, "val_loss": self.val_loss,
                "val_acc": self.val_acc, "lambda": self.temperature}


@dataclass
class SearchReport:
    epochs: list
    architecture: Architecture
    seed: int
    wall_seconds: float
    test_acc: float | None = None

    def to_dict(self) -> dict:
        return {"epochs": [e.to_dict() for e in self.epochs],
                "architecture": self.architecture.to_dict(),
                "test_acc": self.test_acc, "seed": self.seed,
                "wall_seconds": self.wall_seconds}


class BilevelSearch:
    """State of one search run: supernet, optimiser moments and noise stream."""

    def __init__(self, graph: Graph, split: DataSplit, cfg: SearchConfig):
        self.graph, self.split, self.cfg = graph, split, cfg
        self.supernet = Supernet(cfg.spec(graph), substream(cfg.seed, "init"))
        self.gumbel_rng = substream(cfg.seed, "gumbel")
        self.dropout_rng = substream(cfg.seed, "dropout")
        self.w_state = AdamState()
        self.alpha_state = AdamState()
        self.schedule = temperature_schedule(cfg)
        self.last_val_logits = None

    def _loss(self, rows, temperature):
        gcfg = GumbelConfig(temperature, "sample", self.gumbel_rng)
        params = self.supernet.weight_params() + self.supernet.arch_params()
        ad.zero_grad(params)
        with Tape() as tape:
            res = self.supernet.forward(self.graph, gcfg, training=True,
                                        dropout=self.cfg.dropout, rng=self.dropout_rng)
            loss = ad.cross_entropy(res.logits, self.graph.labels, rows)
        return tape, loss, res.logits

    def alternate_step(self, epoch: int):
        """One w step on the training loss, then one alpha step on the validation loss."""
        cfg = self.cfg
        lam = float(self.schedule[epoch]) if epoch < len(self.schedule) else cfg.lambda_end
        tape, loss, _ = self._loss(self.split.train, lam)
        train_loss = _checked(loss, "training", epoch)
        tape.backward(loss)
        ad.adam_step(self.supernet.weight_params(), cfg.lr_w, state=self.w_state,
                     weight_decay=cfg.weight_decay_w)

        tape, loss, logits = self._loss(self.split.val, lam)
        val_loss = _checked(loss, "validation", epoch)
        tape.backward(loss)
        ad.adam_step(self.supernet.arch_params(), cfg.lr_alpha, state=self.alpha_state)
        self.last_val_logits = logits.data
        return train_loss, val_loss


def alternate_step(search: BilevelSearch, epoch: int):
    return search.alternate_step(epoch)


def run_search(graph: Graph, split: DataSplit, cfg: SearchConfig):
    """Search for ``cfg.epochs`` epochs and derive the discrete architecture.

    Returns ``(architecture, report, search)``; the last item exposes the
    trained supernet.
    """
    start = time.perf_counter()
    search = BilevelSearch(graph, split, cfg)
    history = []
    for epoch in range(cfg.epochs):
        tl, vl = search.alternate_step(epoch)
        va = accuracy(search.last_val_logits, graph.labels, split.val)
        history.append(EpochRecord(tl, vl, va, float(search.schedule[epoch])))
    arch = derive_architecture(search.supernet)
    report = SearchReport(history, arch, cfg.seed, time.perf_counter() - start)
    return arch, report, search


# ---------------------------------------------------------------- retraining


@dataclass
class TrainedModel:
    architecture: Architecture
    weights: OperationWeights
    best_val_acc: float
    test_acc: float
    best_epoch: int
    epochs: list = field(default_factory=list)
    seed: int = 0
    wall_seconds: float = 0.0

    def network(self) -> DerivedNetwork:
        return DerivedNetwork(self.architecture, self.weights)

    def to_dict(self) -> dict:
        return {"epochs": [e.to_dict() for e in self.epochs],
                "architecture": self.architecture.to_dict(),
                "test_acc": self.test_acc, "best_val_acc": self.best_val_acc,
                "best_epoch": self.best_epoch, "seed": self.seed,
                "wall_seconds": self.wall_seconds}


def init_weights(arch: Architecture, graph: Graph, cfg: SearchConfig) -> OperationWeights:
    spec = SupernetSpec(graph.n_features, graph.n_classes, arch.n_gnn_blocks, arch.hidden_dim,
                        arch.gnn_kind, FUSIONS, cfg.heads)
    return OperationWeights.init(spec, substream(cfg.seed, "init"))


def train_architecture(arch: Architecture, graph: Graph, split: DataSplit, cfg: SearchConfig,
                       weights: OperationWeights | None = None) -> TrainedModel:
    """Train the discrete network from fresh weights with early stopping on validation loss.

    The reported test accuracy belongs to the epoch with the best validation
    accuracy (ties go to the lower validation loss, then the earlier epoch).
    """
    start = time.perf_counter()
    weights = init_weights(arch, graph, cfg) if weights is None else weights
    net = DerivedNetwork(arch, weights)
    params = net.params()
    state = AdamState()
    drop_rng = substream(cfg.seed, "dropout")
    labels = graph.labels
    best = (-1.0, np.inf)
    best_epoch, best_weights, test_acc = -1, weights.copy(), float("nan")
    best_loss, stale = np.inf, 0
    history = []
    for epoch in range(cfg.retrain_epochs):
        ad.zero_grad(params)
        with Tape() as tape:
            res = net.forward(graph, training=True, dropout=cfg.dropout, rng=drop_rng)
            loss = ad.cross_entropy(res.logits, labels, split.train)
        train_loss = _checked(loss, "training", epoch)
        tape.backward(loss)
        ad.adam_step(params, cfg.lr_w, state=state, weight_decay=cfg.weight_decay_w)

        logits = net.forward(graph).logits
        val_loss = _checked(ad.cross_entropy(logits, labels, split.val), "validation", epoch)
        val_acc = accuracy(logits.data, labels, split.val)
        history.append(EpochRecord(train_loss, val_loss, val_acc, 0.0))
        if (val_acc, -val_loss) > (best[0], -best[1]):
            best = (val_acc, val_loss)
            best_epoch, best_weights = epoch, weights.copy()
            test_acc = accuracy(logits.data, labels, split.test)
        if val_loss < best_loss:
            best_loss, stale = val_loss, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if best_epoch < 0:
        logits = net.forward(graph).logits
        best = (accuracy(logits.data, labels, split.val), 0.0)
        test_acc = accuracy(logits.data, labels, split.test)
    return TrainedModel(arch, best_weights, best[0], test_acc, best_epoch, history, cfg.seed,
                        time.perf_counter() - start)


# ---------------------------------------------------------------- baselines

BASELINES = ("stack", "resgcn", "densegcn", "jknet")


def build_baseline(name: str, spec: SupernetSpec) -> Architecture:
    """Fixed-connection architecture such as ``stack2``, ``resgcn4``, ``densegcn4`` or ``jknet4``.

    A baseline of depth ``L`` uses GNN blocks ``1..L``; its output rule is
    applied as if the output block were ``L+1`` and blocks above ``L`` are
    pruned.
    """
    m = re.fullmatch(r"(stack|resgcn|densegcn|jknet)(\d+)", name)
    if not m:
        raise ValueError(f"unknown baseline {name!r}; expected stackL, resgcnL, densegcnL or jknetL")
    kind, L = m.group(1), int(m.group(2))
    if L < 1 or L > spec.n_gnn_blocks:
        raise ValueError(f"baseline depth {L} needs 1 <= L <= n_gnn_blocks ({spec.n_gnn_blocks})")
    preds, fusions = {}, {}
    for j in range(1, L + 2):
        if kind == "stack" or kind == "jknet":
            preds[j], fusions[j] = (j - 1,), "SUM"
        elif kind == "resgcn":
            preds[j], fusions[j] = tuple(i for i in (j - 2, j - 1) if i >= 0), "SUM"
        else:
            preds[j], fusions[j] = tuple(range(j)), "CONCAT"
    if kind == "jknet":
        preds[L + 1], fusions[L + 1] = tuple(range(1, L + 1)), "MAX"
    out = spec.output_block
    preds[out], fusions[out] = preds.pop(L + 1), fusions.pop(L + 1)
    for j in range(L + 1, out):
        preds[j], fusions[j] = (), spec.fusion_subset[0]
    return build_architecture(spec.gnn_kind, spec.hidden_dim, spec.n_gnn_blocks, preds, fusions)


# ---------------------------------------------------------------- persistence


def _flatten(obj, prefix, out):
    if isinstance(obj, Tensor):
        out[prefix] = obj
    elif isinstance(obj, dict):
        for k in sorted(obj):
            _flatten(obj[k], f"{prefix}.{k}", out)
    elif isinstance(obj, list):
        for k, v in enumerate(obj):
            _flatten(v, f"{prefix}.{k}", out)
    elif hasattr(obj, "__dataclass_fields__"):
        for k in obj.__dataclass_fields__:
            _flatten(getattr(obj, k), f"{prefix}.{k}" if prefix else k, out)
    return out


def named_tensors(weights: OperationWeights) -> dict:
    return _flatten(weights, "", {})


def save_weights(weights: OperationWeights, path):
    np.savez(path, **{k: t.data for k, t in named_tensors(weights).items()})


def load_weights(path, arch: Architecture, graph: Graph, cfg: SearchConfig) -> OperationWeights:
    weights = init_weights(arch, graph, cfg)
    with np.load(path) as stored:
        for name, t in named_tensors(weights).items():
            if name not in stored or stored[name].shape != t.shape:
                raise ValueError(f"weights file lacks a matching entry for {name}")
            t.data = stored[name].astype(np.float64)
    return weights
