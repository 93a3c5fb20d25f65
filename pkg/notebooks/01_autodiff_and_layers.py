# Checking the tape against finite differences.
#
# Every model in the package is built from a handful of tape operations,
# so a quick sanity pass is to compare the analytic gradient of a small
# network with central differences. Run with `python notebooks/01_autodiff_and_layers.py`.

import numpy as np

from llc import autodiff as ad
from llc.autodiff import Tensor
from llc.graph import Graph, generate_sbm
from llc.layers import GatParams, SageParams, gat_forward, sage_forward

# %% A two-layer perceptron written directly with tape operations
rng = np.random.default_rng(0)
X = Tensor(rng.normal(size=(6, 4)))
W0 = ad.parameter(rng.normal(size=(4, 5)), "W0")
W1 = ad.parameter(rng.normal(size=(5, 3)), "W1")
labels = rng.integers(0, 3, 6)


def loss():
    hidden = ad.relu(ad.matmul(X, W0))
    return ad.cross_entropy(ad.matmul(hidden, W1), labels, np.arange(6))


with ad.Tape() as tape:
    value = loss()
tape.backward(value)
print("loss", float(value.data), "grad norm of W0", np.linalg.norm(W0.grad))
print("relative error vs finite differences:", ad.gradient_check(loss, [W0, W1]))

# %% Graph layers: mean-aggregation (SAGE) and attention (GAT)
graph = generate_sbm(2, 5, 0.6, 0.1, 3, 0.5, seed=0)
H = Tensor(rng.normal(size=(graph.n_nodes, 3)))
sage = SageParams.init(rng, 3)
gat = GatParams.init(rng, 3, heads=2)
print("SAGE check:", ad.gradient_check(lambda: ad.sum(ad.tanh(sage_forward(sage, graph, H))), [sage.W, H]))
print("GAT check: ", ad.gradient_check(lambda: ad.sum(ad.tanh(gat_forward(gat, graph, H))), gat.params() + [H]))

# %% Relabelling the nodes relabels the output rows and nothing else
# Neighbour sums are taken in an order-free way, so the match is exact to the bit.
perm = rng.permutation(graph.n_nodes)
relabel = np.argsort(perm)
shuffled = Graph(graph.n_nodes, relabel[graph.edges], graph.features[perm], graph.labels[perm], graph.n_classes)
out = sage_forward(sage, graph, H).data
out_shuffled = sage_forward(sage, shuffled, Tensor(H.data[perm])).data
print("SAGE output permutes exactly:", np.array_equal(out[perm], out_shuffled))
