"""Per-block operators: two-layer MLPs, GraphSAGE-mean and GAT layers.

Node representations are ``N x d`` row matrices, so a weight ``W`` acts as
``H @ W``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from llc import autodiff as ad
from llc.autodiff import Tensor
from llc.errors import ShapeError
from llc.graph import Graph


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, name=None) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return ad.parameter(rng.uniform(-limit, limit, size=(fan_in, fan_out)), name=name)


def _check_width(H: Tensor, d: int, what: str):
    if H.ndim != 2 or H.shape[1] != d:
        raise ShapeError(f"{what}: expected input width {d}, got shape {H.shape}")


@dataclass
class MlpBlockParams:
    W0: Tensor
    W1: Tensor
    activation: str = "relu"

    @classmethod
    def init(cls, rng, d_in, d_hidden, d_out, activation="relu"):
        return cls(glorot(rng, d_in, d_hidden, "W0"), glorot(rng, d_hidden, d_out, "W1"), activation)

    def params(self):
        return [self.W0, self.W1]


def mlp2_forward(params: MlpBlockParams, H: Tensor, logits=False) -> Tensor:
    """``act(act(H W0) W1)``; with ``logits=True`` the second layer stays linear."""
    _check_width(H, params.W0.shape[0], "mlp2_forward")
    act = ad.activation(params.activation)
    hidden = act(ad.matmul(H, params.W0))
    out = ad.matmul(hidden, params.W1)
    return out if logits else act(out)


@dataclass
class SageParams:
    W: Tensor      # (2d, d), rows [0:d] act on self, [d:2d] on the neighbour mean
    bias: Tensor   # (1, d)

    @classmethod
    def init(cls, rng, d):
        return cls(glorot(rng, 2 * d, d, "sage.W"), ad.parameter(np.zeros((1, d)), "sage.bias"))

    @property
    def dim(self):
        return self.W.shape[1]

    def params(self):
        return [self.W, self.bias]


def sage_forward(params: SageParams, graph: Graph, H: Tensor) -> Tensor:
    _check_width(H, params.dim, "sage_forward")
    # an order-independent sum divided by the count keeps the layer exactly
    # equivariant under node relabelling
    src, dst = graph.message_edges
    keep = src != dst
    total = ad.segment_sum(ad.gather(H, src[keep]), dst[keep], graph.n_nodes)
    neigh = ad.div(total, Tensor(graph.neighbor_count))
    z = ad.matmul(ad.concat([H, neigh], axis=1), params.W)
    return ad.relu(ad.add(z, params.bias))


@dataclass
class GatHead:
    W: Tensor       # (d, d)
    a_src: Tensor   # (d, 1)
    a_dst: Tensor   # (d, 1)


@dataclass
class GatParams:
    heads: list
    leaky_slope: float = 0.2

    @classmethod
    def init(cls, rng, d, heads=1, leaky_slope=0.2):
        if heads < 1:
            raise ValueError("GAT needs at least one head")
        hs = [GatHead(glorot(rng, d, d, "gat.W"), glorot(rng, d, 1, "gat.a_src"),
                      glorot(rng, d, 1, "gat.a_dst")) for _ in range(heads)]
        return cls(hs, leaky_slope)

    @property
    def dim(self):
        return self.heads[0].W.shape[1]

    def params(self):
        return [p for h in self.heads for p in (h.W, h.a_src, h.a_dst)]


def _gat_head(head: GatHead, graph: Graph, H: Tensor, slope: float):
    src, dst = graph.message_edges
    z = ad.matmul(H, head.W)
    s_src = ad.matmul(z, head.a_src)
    s_dst = ad.matmul(z, head.a_dst)
    e = ad.leaky_relu(ad.add(ad.gather(s_src, src), ad.gather(s_dst, dst)), slope)
    att = ad.segment_softmax(e, dst, graph.n_nodes)
    msg = ad.mul(ad.gather(z, src), att)
    return ad.elu(ad.segment_sum(msg, dst, graph.n_nodes)), att


def gat_forward(params: GatParams, graph: Graph, H: Tensor) -> Tensor:
    _check_width(H, params.dim, "gat_forward")
    outs = [_gat_head(h, graph, H, params.leaky_slope)[0] for h in params.heads]
    return ad.stack_reduce("mean", outs)


def gat_attention(params: GatParams, graph: Graph, H: Tensor) -> list[np.ndarray]:
    """Per-head attention coefficient per entry of ``graph.message_edges``."""
    _check_width(H, params.dim, "gat_attention")
    return [_gat_head(h, graph, H, params.leaky_slope)[1].data[:, 0] for h in params.heads]


def init_gnn(kind: str, rng, d, heads=1):
    if kind == "sage":
        return SageParams.init(rng, d)
    if kind == "gat":
        return GatParams.init(rng, d, heads)
    raise ValueError(f"unknown GNN kind {kind!r}")


def gnn_forward(params, graph: Graph, H: Tensor) -> Tensor:
    if isinstance(params, SageParams):
        return sage_forward(params, graph, H)
    return gat_forward(params, graph, H)
