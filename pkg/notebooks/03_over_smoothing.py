# Over-smoothing: mean average distance (MAD) of the final representation.
#
# MAD averages the cosine distance between node representations. As plain
# stacks of mean-aggregation layers get deeper, representations of
# different nodes drift together and MAD falls. Connections that skip
# blocks let deep models keep shallower, more distinct features.
# Takes a few minutes on one core.

from llc.diagnostics import mad_depth_sweep
from llc.graph import generate_sbm, split_nodes
from llc.search import SearchConfig

graph = generate_sbm(4, 100, 0.1, 0.01, 16, 1.0, seed=0)
split = split_nodes(graph, seed=0)
cfg = SearchConfig(hidden_dim=32, seed=0)

# %% Plain stacks and JKNet-style aggregation at increasing depth
for family in ("stack", "jknet"):
    report = mad_depth_sweep(graph, split, family, [2, 4, 8], cfg)
    print(report.to_csv())

# %% A searched design at depth 4
print(mad_depth_sweep(graph, split, "llc", [4], cfg).to_csv())
