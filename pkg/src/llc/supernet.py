"""Relaxed layer-connection search space and discrete architectures.

Blocks are numbered ``0 .. K+1``: block 0 is the input MLP, blocks ``1..K``
are GNN layers and block ``K+1`` is the output MLP head. Every block ``j >= 1``
has a ZERO/IDENTITY gate on each edge ``i -> j`` (``i < j``) and a selector
over the fusion operations that merge its selected inputs.

A block whose selected inputs are all absent produces no output at all and is
skipped by its successors, the same way a pruned block disappears from a
derived architecture. This keeps the argmax-mode supernet and the derived
network numerically identical.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, replace

import numpy as np

from llc import autodiff as ad
from llc.autodiff import Tensor
from llc.errors import FormatError, ShapeError
from llc.graph import Graph
from llc.layers import MlpBlockParams, glorot, gnn_forward, init_gnn, mlp2_forward

FUSIONS = ("SUM", "MEAN", "MAX", "CONCAT", "LSTM", "ATT")
SELECTIONS = ("ZERO", "IDENTITY")
GNN_KINDS = ("sage", "gat")
ZERO, IDENTITY = 0, 1


def _fusion_index(name):
    try:
        return FUSIONS.index(name)
    except ValueError:
        raise ValueError(f"unknown fusion {name!r}; expected one of {FUSIONS}") from None


@dataclass(frozen=True)
class SupernetSpec:
    input_dim: int
    n_classes: int
    n_gnn_blocks: int = 4
    hidden_dim: int = 64
    gnn_kind: str = "sage"
    fusion_subset: tuple = FUSIONS
    heads: int = 1
    activation: str = "relu"

    def __post_init__(self):
        if self.n_gnn_blocks < 0:
            raise ValueError("n_gnn_blocks must be non-negative")
        if self.gnn_kind not in GNN_KINDS:
            raise ValueError(f"gnn_kind must be one of {GNN_KINDS}")
        subset = tuple(f for f in FUSIONS if f in set(self.fusion_subset))
        if not subset or len(subset) != len(set(self.fusion_subset)):
            raise ValueError(f"fusion_subset must be a nonempty subset of {FUSIONS}")
        object.__setattr__(self, "fusion_subset", subset)

    @property
    def output_block(self):
        return self.n_gnn_blocks + 1

    @property
    def allowed(self) -> np.ndarray:
        return np.array([FUSIONS.index(f) for f in self.fusion_subset])


# ---------------------------------------------------------------- Gumbel-Softmax


@dataclass
class GumbelConfig:
    temperature: float = 1.0
    mode: str = "sample"
    rng: np.random.Generator | None = None

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.mode not in ("sample", "argmax"):
            raise ValueError(f"mode must be 'sample' or 'argmax', got {self.mode!r}")


ARGMAX = GumbelConfig(mode="argmax")


def gumbel_softmax(alpha: Tensor, cfg: GumbelConfig) -> Tensor:
    """Relaxed one-hot weights over the entries of ``alpha``.

    Sample mode draws ``G = -log(-log U)`` and returns
    ``softmax((log_softmax(alpha) + G) / temperature)``, differentiable in
    ``alpha``. Argmax mode returns the constant one-hot vector at the first
    maximum.
    """
    if cfg.mode == "argmax":
        onehot = np.zeros(alpha.shape)
        onehot[int(np.argmax(alpha.data))] = 1.0
        return Tensor(onehot)
    if cfg.rng is None:
        raise ValueError("sample mode needs a random generator")
    u = np.maximum(cfg.rng.random(alpha.shape), np.finfo(np.float64).tiny)
    g = -np.log(-np.log(u))
    logits = ad.add(ad.log_softmax(alpha, axis=0), Tensor(g))
    return ad.softmax(ad.mul_const(logits, 1.0 / cfg.temperature), axis=0)


# ---------------------------------------------------------------- parameters


@dataclass
class LstmParams:
    Wx: Tensor   # (d, 4d) gate order: input, forget, cell, output
    Wh: Tensor   # (d, 4d)
    b: Tensor    # (1, 4d)

    @classmethod
    def init(cls, rng, d):
        return cls(glorot(rng, d, 4 * d, "lstm.Wx"), glorot(rng, d, 4 * d, "lstm.Wh"),
                   ad.parameter(np.zeros((1, 4 * d)), "lstm.b"))

    def params(self):
        return [self.Wx, self.Wh, self.b]


@dataclass
class AttParams:
    W: Tensor   # (d, d)
    q: Tensor   # (d, 1)

    @classmethod
    def init(cls, rng, d):
        return cls(glorot(rng, d, d, "att.W"), glorot(rng, d, 1, "att.q"))

    def params(self):
        return [self.W, self.q]


@dataclass
class FusionParams:
    """Trainable weights of the parameterised fusions of one block.

    ``concat`` maps the zero-padded concatenation of all ``K+1`` possible
    input slots (slot ``i`` holds block ``i``) back to width ``d``.
    """

    concat: Tensor
    lstm: LstmParams
    att: AttParams

    @classmethod
    def init(cls, rng, n_slots, d):
        return cls(glorot(rng, n_slots * d, d, "concat.P"), LstmParams.init(rng, d), AttParams.init(rng, d))

    @property
    def dim(self):
        return self.concat.shape[1]

    def params(self, kinds=FUSIONS):
        out = []
        if "CONCAT" in kinds:
            out.append(self.concat)
        if "LSTM" in kinds:
            out.extend(self.lstm.params())
        if "ATT" in kinds:
            out.extend(self.att.params())
        return out


@dataclass
class OperationWeights:
    """All operation weights ``w``; shared by the supernet and derived networks."""

    mlp_in: MlpBlockParams
    gnn: dict
    fusion: dict
    mlp_out: MlpBlockParams

    @classmethod
    def init(cls, spec: SupernetSpec, rng: np.random.Generator):
        d, K = spec.hidden_dim, spec.n_gnn_blocks
        mlp_in = MlpBlockParams.init(rng, spec.input_dim, d, d, spec.activation)
        gnn = {j: init_gnn(spec.gnn_kind, rng, d, spec.heads) for j in range(1, K + 1)}
        fusion = {j: FusionParams.init(rng, K + 1, d) for j in range(1, K + 2)}
        mlp_out = MlpBlockParams.init(rng, d, d, spec.n_classes, spec.activation)
        return cls(mlp_in, gnn, fusion, mlp_out)

    def params(self, kinds=FUSIONS):
        out = self.mlp_in.params()
        for j in sorted(self.gnn):
            out.extend(self.gnn[j].params())
        for j in sorted(self.fusion):
            out.extend(self.fusion[j].params(kinds))
        out.extend(self.mlp_out.params())
        return out

    def copy(self) -> "OperationWeights":
        return _deepcopy_tensors(self)


def _deepcopy_tensors(obj):
    if isinstance(obj, Tensor):
        return ad.parameter(obj.data.copy(), obj.name)
    if isinstance(obj, dict):
        return {k: _deepcopy_tensors(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_deepcopy_tensors(v) for v in obj]
    if hasattr(obj, "__dataclass_fields__"):
        return replace(obj, **{k: _deepcopy_tensors(getattr(obj, k)) for k in obj.__dataclass_fields__})
    return obj


# ---------------------------------------------------------------- mixing


@dataclass
class EdgeGate:
    src: int
    dst: int
    alpha: Tensor   # logits over (ZERO, IDENTITY)


@dataclass
class FusionSelector:
    block: int
    alpha: Tensor   # logits over FUSIONS
    params: FusionParams


def edge_mix(gate: EdgeGate, x: Tensor, cfg: GumbelConfig, weights: Tensor | None = None) -> Tensor:
    """``c_identity * x``; exactly the zero tensor when the IDENTITY weight is 0."""
    if weights is None:
        weights = gumbel_softmax(gate.alpha, cfg)
    c = weights.data[IDENTITY]
    if c == 0.0:
        return Tensor(np.zeros(x.shape))
    if cfg.mode == "argmax":
        return x
    return ad.scale(x, ad.take(weights, IDENTITY))


def _lstm(params: LstmParams, inputs):
    d = params.Wx.shape[0]
    n = inputs[0].shape[0]
    h = c = None
    for x in inputs:
        gates = ad.add(ad.matmul(x, params.Wx), params.b)
        if h is not None:
            gates = ad.add(gates, ad.matmul(h, params.Wh))
        i = ad.sigmoid(ad.slice_axis(gates, 0, d, axis=1))
        f = ad.sigmoid(ad.slice_axis(gates, d, 2 * d, axis=1))
        g = ad.tanh(ad.slice_axis(gates, 2 * d, 3 * d, axis=1))
        o = ad.sigmoid(ad.slice_axis(gates, 3 * d, 4 * d, axis=1))
        c = ad.mul(i, g) if c is None else ad.add(ad.mul(f, c), ad.mul(i, g))
        h = ad.mul(o, ad.tanh(c))
    assert h.shape == (n, d)
    return h


def _attention(params: AttParams, inputs):
    scores = [ad.matmul(ad.tanh(ad.matmul(x, params.W)), params.q) for x in inputs]
    weights = ad.softmax(ad.concat(scores, axis=1), axis=1)
    parts = [ad.mul(x, ad.slice_axis(weights, k, k + 1, axis=1)) for k, x in enumerate(inputs)]
    return ad.stack_reduce("sum", parts)


def fusion_apply(kind: str, inputs, params: FusionParams | None = None, slots=None) -> Tensor:
    """Merge ``inputs`` (ordered by ascending source block) into one ``N x d`` tensor.

    ``slots`` are the source block ids of ``inputs``; CONCAT uses them to pick
    the matching rows of its projection. They default to ``0..len(inputs)-1``.
    """
    inputs = list(inputs)
    if not inputs:
        raise ValueError("fusion_apply needs at least one input")
    d = params.dim if params is not None else inputs[0].shape[1]
    for x in inputs:
        if x.ndim != 2 or x.shape[1] != d or x.shape[0] != inputs[0].shape[0]:
            raise ShapeError(f"fusion input of shape {x.shape}, expected width {d}")
    if kind in ("SUM", "MEAN", "MAX"):
        return ad.stack_reduce(kind.lower(), inputs)
    if params is None:
        raise ValueError(f"{kind} fusion needs parameters")
    if kind == "CONCAT":
        slots = range(len(inputs)) if slots is None else slots
        rows = np.concatenate([np.arange(s * d, (s + 1) * d) for s in slots])
        return ad.matmul(ad.concat(inputs, axis=1), ad.gather(params.concat, rows))
    if kind == "LSTM":
        return _lstm(params.lstm, inputs)
    if kind == "ATT":
        return _attention(params.att, inputs)
    raise ValueError(f"unknown fusion {kind!r}")


def fusion_mix(selector: FusionSelector, inputs, cfg: GumbelConfig, slots=None,
               allowed=None, weights: Tensor | None = None) -> Tensor:
    """Gumbel-weighted sum of every allowed fusion of ``inputs``.

    ``allowed`` lists the fusion indices taking part (all six by default).
    """
    allowed = np.arange(len(FUSIONS)) if allowed is None else np.asarray(allowed)
    if weights is None:
        weights = gumbel_softmax(ad.gather(selector.alpha, allowed), cfg)
    if cfg.mode == "argmax":
        k = allowed[int(np.argmax(weights.data))]
        return fusion_apply(FUSIONS[k], inputs, selector.params, slots)
    terms = []
    for pos, k in enumerate(allowed):
        if weights.data[pos] == 0.0:
            continue
        out = fusion_apply(FUSIONS[k], inputs, selector.params, slots)
        terms.append(ad.scale(out, ad.take(weights, pos)))
    return ad.stack_reduce("sum", terms)


# ---------------------------------------------------------------- architectures


@dataclass(frozen=True)
class Block:
    id: int
    predecessors: tuple
    fusion: str


@dataclass(frozen=True)
class Architecture:
    """Discrete design: retained blocks with their inputs and fusion.

    ``blocks`` lists retained GNN blocks and the output block ``K+1`` in
    ascending id order; ``pruned`` lists removed GNN block ids.
    """

    gnn_kind: str
    hidden_dim: int
    n_gnn_blocks: int
    blocks: tuple
    pruned: tuple = ()
    fallback_used: bool = False

    @property
    def output_block(self):
        return self.n_gnn_blocks + 1

    def block(self, j) -> Block:
        for b in self.blocks:
            if b.id == j:
                return b
        raise KeyError(j)

    @property
    def retained(self) -> tuple:
        return tuple(b.id for b in self.blocks if b.id != self.output_block)

    def to_dict(self) -> dict:
        return {
            "gnn_kind": self.gnn_kind,
            "hidden_dim": self.hidden_dim,
            "blocks": [{"id": b.id, "predecessors": list(b.predecessors), "fusion": b.fusion}
                       for b in self.blocks],
            "pruned": list(self.pruned),
            "fallback_used": self.fallback_used,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, raw) -> "Architecture":
        """Parse and validate; :class:`FormatError` messages name the failing field."""
        def fail(path, msg):
            raise FormatError(f"{path}: {msg}")

        if not isinstance(raw, dict):
            fail("$", "expected an object")
        for key in ("gnn_kind", "hidden_dim", "blocks", "pruned", "fallback_used"):
            if key not in raw:
                fail(f"$.{key}", "missing")
        if raw["gnn_kind"] not in GNN_KINDS:
            fail("$.gnn_kind", f"must be one of {GNN_KINDS}")
        if not isinstance(raw["hidden_dim"], int) or raw["hidden_dim"] < 1:
            fail("$.hidden_dim", "must be a positive integer")
        if not isinstance(raw["fallback_used"], bool):
            fail("$.fallback_used", "must be a boolean")
        if not isinstance(raw["blocks"], list) or not raw["blocks"]:
            fail("$.blocks", "must be a nonempty list")
        blocks = []
        for k, b in enumerate(raw["blocks"]):
            path = f"$.blocks[{k}]"
            if not isinstance(b, dict):
                fail(path, "expected an object")
            if not isinstance(b.get("id"), int) or b["id"] < 1:
                fail(f"{path}.id", "must be an integer >= 1")
            preds = b.get("predecessors")
            if not isinstance(preds, list) or not all(isinstance(p, int) for p in preds):
                fail(f"{path}.predecessors", "must be a list of integers")
            if b.get("fusion") not in FUSIONS:
                fail(f"{path}.fusion", f"must be one of {FUSIONS}")
            blocks.append(Block(b["id"], tuple(sorted(set(preds))), b["fusion"]))
        pruned = raw["pruned"]
        if not isinstance(pruned, list) or not all(isinstance(p, int) for p in pruned):
            fail("$.pruned", "must be a list of integers")
        blocks.sort(key=lambda b: b.id)
        arch = cls(raw["gnn_kind"], raw["hidden_dim"], blocks[-1].id - 1, tuple(blocks),
                   tuple(sorted(pruned)), raw["fallback_used"])
        try:
            validate_architecture(arch)
        except ValueError as exc:
            fail("$.blocks", str(exc))
        return arch

    @classmethod
    def from_json(cls, text: str) -> "Architecture":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"$: invalid JSON ({exc})") from None
        return cls.from_dict(raw)


def validate_architecture(arch: Architecture):
    """Raise ``ValueError`` unless ``arch`` satisfies the structural invariants."""
    K, out = arch.n_gnn_blocks, arch.output_block
    ids = [b.id for b in arch.blocks]
    if ids != sorted(set(ids)) or not ids or ids[-1] != out:
        raise ValueError("blocks must be unique, ascending and end with the output block")
    if set(ids[:-1]) & set(arch.pruned) or set(ids[:-1]) | set(arch.pruned) != set(range(1, K + 1)):
        raise ValueError("every GNN block must be either retained or pruned")
    available = {0} | set(ids[:-1])
    for b in arch.blocks:
        if not b.predecessors:
            raise ValueError(f"block {b.id} has no predecessors")
        if list(b.predecessors) != sorted(set(b.predecessors)):
            raise ValueError(f"block {b.id}: predecessors must be sorted and unique")
        for p in b.predecessors:
            if not 0 <= p < b.id or p not in available:
                raise ValueError(f"block {b.id}: invalid predecessor {p}")
        if b.fusion not in FUSIONS:
            raise ValueError(f"block {b.id}: unknown fusion {b.fusion!r}")
    used = set(arch.block(out).predecessors)
    for b in reversed(arch.blocks[:-1]):
        if b.id not in used:
            raise ValueError(f"block {b.id} does not reach the output block")
        used |= set(b.predecessors)


def build_architecture(gnn_kind, hidden_dim, n_gnn_blocks, predecessors: dict, fusions: dict) -> Architecture:
    """Canonical architecture from raw per-block choices.

    Blocks left without inputs are pruned (transitively), then, if the output
    block lost every input, it falls back to the highest surviving GNN block
    (or block 0). Finally blocks with no path to the output are pruned.
    """
    K = n_gnn_blocks
    out = K + 1
    alive = {0}
    preds = {}
    for j in range(1, K + 1):
        p = tuple(sorted(i for i in set(predecessors.get(j, ())) if i in alive and i < j))
        if p:
            alive.add(j)
            preds[j] = p
    out_preds = tuple(sorted(i for i in set(predecessors.get(out, ())) if i in alive and i < out))
    fallback = not out_preds
    if fallback:
        out_preds = (max(alive),)
    needed = set(out_preds)
    for j in range(K, 0, -1):
        if j in needed:
            needed |= set(preds[j])
    retained = [j for j in range(1, K + 1) if j in needed]
    blocks = tuple(Block(j, preds[j], fusions[j]) for j in retained) + (Block(out, out_preds, fusions[out]),)
    pruned = tuple(j for j in range(1, K + 1) if j not in needed)
    return Architecture(gnn_kind, hidden_dim, K, blocks, pruned, fallback)


def random_architecture(spec: SupernetSpec, rng: np.random.Generator) -> Architecture:
    """Architecture from uniformly drawn nonempty input sets and fusions."""
    preds, fusions = {}, {}
    for j in range(1, spec.output_block + 1):
        while True:
            mask = rng.random(j) < 0.5
            if mask.any():
                break
        preds[j] = tuple(np.flatnonzero(mask).tolist())
        fusions[j] = spec.fusion_subset[int(rng.integers(len(spec.fusion_subset)))]
    return build_architecture(spec.gnn_kind, spec.hidden_dim, spec.n_gnn_blocks, preds, fusions)


# ---------------------------------------------------------------- networks


@dataclass
class ForwardResult:
    logits: Tensor
    representation: Tensor   # fused input of the output head


def _post(x: Tensor, training, dropout, rng):
    if training and dropout > 0:
        return ad.dropout(x, dropout, rng)
    return x


class Supernet:
    """Relaxed network holding architecture logits ``alpha`` and weights ``w``."""

    def __init__(self, spec: SupernetSpec, rng: np.random.Generator):
        self.spec = spec
        self.weights = OperationWeights.init(spec, rng)
        out = spec.output_block
        self.gates = {(i, j): EdgeGate(i, j, ad.parameter(np.zeros(2), f"gate{i}->{j}"))
                      for j in range(1, out + 1) for i in range(j)}
        self.selectors = {j: FusionSelector(j, ad.parameter(np.zeros(len(FUSIONS)), f"fusion{j}"),
                                            self.weights.fusion[j])
                          for j in range(1, out + 1)}

    def arch_params(self) -> list:
        return [g.alpha for g in self.gates.values()] + [s.alpha for s in self.selectors.values()]

    def weight_params(self) -> list:
        return self.weights.params(self.spec.fusion_subset)

    def forward(self, graph: Graph, cfg: GumbelConfig, training=False, dropout=0.0, rng=None) -> ForwardResult:
        spec = self.spec
        out_id = spec.output_block
        allowed = spec.allowed
        x0 = Tensor(graph.features)
        outputs = {0: _post(mlp2_forward(self.weights.mlp_in, x0), training, dropout, rng)}
        fused = None
        for j in range(1, out_id + 1):
            gate_w = [gumbel_softmax(self.gates[i, j].alpha, cfg) for i in range(j)]
            sel_alpha = ad.gather(self.selectors[j].alpha, allowed)
            sel_w = gumbel_softmax(sel_alpha, cfg)
            inputs, slots = [], []
            for i in range(j):
                if outputs.get(i) is None or gate_w[i].data[IDENTITY] == 0.0:
                    continue
                inputs.append(edge_mix(self.gates[i, j], outputs[i], cfg, gate_w[i]))
                slots.append(i)
            if not inputs:
                outputs[j] = None
                fused = Tensor(np.zeros((graph.n_nodes, spec.hidden_dim)))
                continue
            fused = fusion_mix(self.selectors[j], inputs, cfg, slots, allowed, sel_w)
            if j < out_id:
                h = gnn_forward(self.weights.gnn[j], graph, fused)
                outputs[j] = _post(h, training, dropout, rng)
        logits = mlp2_forward(self.weights.mlp_out, fused, logits=True)
        return ForwardResult(logits, fused)

    def embed(self, arch: Architecture, magnitude=20.0):
        """Set every alpha to ``+-magnitude`` so that argmax mode realises ``arch``."""
        selected = {(i, b.id) for b in arch.blocks for i in b.predecessors}
        for (i, j), gate in self.gates.items():
            on = (i, j) in selected
            gate.alpha.data = np.array([-magnitude, magnitude] if on else [magnitude, -magnitude])
        choice = {b.id: b.fusion for b in arch.blocks}
        for j, sel in self.selectors.items():
            k = FUSIONS.index(choice.get(j, self.spec.fusion_subset[0]))
            a = np.full(len(FUSIONS), -magnitude)
            a[k] = magnitude
            sel.alpha.data = a


class DerivedNetwork:
    """Standalone discrete network for an :class:`Architecture`."""

    def __init__(self, arch: Architecture, weights: OperationWeights):
        self.arch = arch
        self.weights = weights

    def params(self) -> list:
        w = self.weights
        out = w.mlp_in.params()
        for b in self.arch.blocks:
            if b.id != self.arch.output_block:
                out.extend(w.gnn[b.id].params())
            out.extend(w.fusion[b.id].params((b.fusion,)))
        out.extend(w.mlp_out.params())
        return out

    def forward(self, graph: Graph, training=False, dropout=0.0, rng=None) -> ForwardResult:
        w = self.weights
        outputs = {0: _post(mlp2_forward(w.mlp_in, Tensor(graph.features)), training, dropout, rng)}
        fused = None
        for b in self.arch.blocks:
            inputs = [outputs[i] for i in b.predecessors]
            fused = fusion_apply(b.fusion, inputs, w.fusion[b.id], b.predecessors)
            if b.id != self.arch.output_block:
                outputs[b.id] = _post(gnn_forward(w.gnn[b.id], graph, fused), training, dropout, rng)
        logits = mlp2_forward(w.mlp_out, fused, logits=True)
        return ForwardResult(logits, fused)


def derive_architecture(supernet: Supernet) -> Architecture:
    """Keep IDENTITY where it strictly beats ZERO and the top allowed fusion per block, then prune."""
    spec = supernet.spec
    allowed = spec.allowed
    preds = {j: tuple(i for i in range(j)
                      if supernet.gates[i, j].alpha.data[IDENTITY] > supernet.gates[i, j].alpha.data[ZERO])
             for j in range(1, spec.output_block + 1)}
    fusions = {j: FUSIONS[allowed[int(np.argmax(s.alpha.data[allowed]))]]
               for j, s in supernet.selectors.items()}
    return build_architecture(spec.gnn_kind, spec.hidden_dim, spec.n_gnn_blocks, preds, fusions)


def architecture_spec(arch: Architecture, input_dim, n_classes, heads=1, activation="relu",
                      fusion_subset=FUSIONS) -> SupernetSpec:
    return SupernetSpec(input_dim, n_classes, arch.n_gnn_blocks, arch.hidden_dim, arch.gnn_kind,
                        fusion_subset, heads, activation)


def iter_subsets(items):
    """Nonempty subsets of ``items`` in size-then-lexicographic order."""
    items = list(items)
    for r in range(1, len(items) + 1):
        yield from itertools.combinations(items, r)
