import numpy as np
import pytest

from llc import autodiff as ad
from llc.autodiff import Tape
from llc.errors import NumericError
from llc.graph import DataSplit, Graph, generate_sbm, split_nodes, substream
from llc.search import (
    BilevelSearch,
    SearchConfig,
    build_baseline,
    load_weights,
    run_search,
    save_weights,
    temperature_schedule,
    train_architecture,
)
from llc.supernet import (
    ARGMAX,
    FUSIONS,
    IDENTITY,
    ZERO,
    DerivedNetwork,
    GumbelConfig,
    Supernet,
    SupernetSpec,
    derive_architecture,
    random_architecture,
    validate_architecture,
)


def sbm(seed=0, npc=20, noise=0.5):
    graph = generate_sbm(3, npc, 0.4, 0.02, 6, noise, seed=seed)
    return graph, split_nodes(graph, seed=seed)


def small_cfg(**kw):
    base = dict(epochs=10, retrain_epochs=30, n_gnn_blocks=2, hidden_dim=8, seed=0)
    base.update(kw)
    return SearchConfig(**base)


def checksum(tensors):
    return [t.data.copy() for t in tensors]


def same(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(lambda_start=0.1, lambda_end=0.5), dict(lambda_end=0.0),
                                    dict(lr_w=-1.0), dict(gnn_kind="gcn"), dict(fusion_subset=("SUM", "CAT"))])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SearchConfig(**kw)

    def test_defaults(self):
        cfg = SearchConfig()
        assert (cfg.epochs, cfg.retrain_epochs, cfg.lr_w, cfg.lr_alpha) == (200, 300, 5e-3, 3e-3)
        assert (cfg.weight_decay_w, cfg.lambda_start, cfg.lambda_end) == (5e-4, 1.0, 0.05)
        assert (cfg.n_gnn_blocks, cfg.hidden_dim, cfg.patience, cfg.dropout) == (4, 64, 30, 0.0)


class TestSchedule:
    @pytest.mark.parametrize("epochs", [2, 3, 10, 200])
    def test_endpoints_and_monotone(self, epochs):
        lam = temperature_schedule(SearchConfig(epochs=epochs))
        assert lam[0] == 1.0 and abs(lam[-1] - 0.05) <= 1e-9
        assert np.all(np.diff(lam) <= 0)

    def test_geometric(self):
        lam = temperature_schedule(SearchConfig(epochs=5, lambda_start=1.0, lambda_end=0.0625))
        np.testing.assert_allclose(lam, [1.0, 0.5, 0.25, 0.125, 0.0625], rtol=1e-12)

    def test_degenerate(self):
        assert temperature_schedule(SearchConfig(epochs=1)).tolist() == [1.0]
        assert temperature_schedule(SearchConfig(epochs=0)).size == 0


class TestAlternation:
    def test_isolation(self):
        graph, split = sbm()
        search = BilevelSearch(graph, split, small_cfg())
        net = search.supernet
        for epoch in range(3):
            w0, a0 = checksum(net.weight_params()), checksum(net.arch_params())
            cfg = search.cfg
            tape, loss, _ = search._loss(split.train, 1.0)
            tape.backward(loss)
            ad.adam_step(net.weight_params(), cfg.lr_w, state=search.w_state, weight_decay=cfg.weight_decay_w)
            w1, a1 = checksum(net.weight_params()), checksum(net.arch_params())
            assert same(a0, a1) and not same(w0, w1)
            tape, loss, _ = search._loss(split.val, 1.0)
            tape.backward(loss)
            ad.adam_step(net.arch_params(), cfg.lr_alpha, state=search.alpha_state)
            w2, a2 = checksum(net.weight_params()), checksum(net.arch_params())
            assert same(w1, w2) and not same(a1, a2)

    def test_step_changes_both_groups(self):
        graph, split = sbm()
        search = BilevelSearch(graph, split, small_cfg())
        w0, a0 = checksum(search.supernet.weight_params()), checksum(search.supernet.arch_params())
        search.alternate_step(0)
        assert not same(w0, checksum(search.supernet.weight_params()))
        assert not same(a0, checksum(search.supernet.arch_params()))

    def test_zero_learning_rates(self):
        graph, split = sbm()
        search = BilevelSearch(graph, split, small_cfg(lr_w=0.0, lr_alpha=0.0, weight_decay_w=0.0,
                                                         lambda_start=0.5, lambda_end=0.5))
        params = search.supernet.weight_params() + search.supernet.arch_params()
        before = checksum(params)
        losses = []
        for epoch in range(3):
            # replaying the same noise isolates the effect of the (absent) updates
            search.gumbel_rng = substream(0, "gumbel")
            losses.append(search.alternate_step(epoch))
        assert same(before, checksum(params))
        assert losses[0] == losses[1] == losses[2]

    def test_frozen_alpha_is_plain_weight_training(self):
        graph, split = sbm()
        cfg = small_cfg(lr_alpha=0.0)
        search = BilevelSearch(graph, split, cfg)
        got = [search.alternate_step(e)[1] for e in range(4)]

        net = Supernet(cfg.spec(graph), substream(cfg.seed, "init"))
        rng = substream(cfg.seed, "gumbel")
        state = ad.AdamState()
        lam = temperature_schedule(cfg)
        expected = []
        for e in range(4):
            gcfg = GumbelConfig(float(lam[e]), "sample", rng)
            ad.zero_grad(net.weight_params())
            with Tape() as tape:
                loss = ad.cross_entropy(net.forward(graph, gcfg).logits, graph.labels, split.train)
            tape.backward(loss)
            ad.adam_step(net.weight_params(), cfg.lr_w, state=state, weight_decay=cfg.weight_decay_w)
            expected.append(ad.cross_entropy(net.forward(graph, gcfg).logits, graph.labels, split.val).item())
        assert got == expected

    def test_non_finite_loss_reports_epoch(self):
        graph, split = sbm()
        search = BilevelSearch(graph, split, small_cfg())
        search.supernet.weights.mlp_out.W1.data[:] = np.nan
        with pytest.raises(NumericError) as info:
            search.alternate_step(3)
        assert info.value.epoch == 3


def test_informative_connection_dominates():
    """Labels depend on a node's own features only; neighbours are random and uninformative."""
    rng = np.random.default_rng(0)
    n, classes = 90, 3
    labels = np.arange(n) % classes
    features = np.eye(classes)[labels] * 2.0 + rng.normal(scale=0.3, size=(n, classes))
    edges = rng.integers(0, n, size=(4 * n, 2))
    graph = Graph(n, edges, features, labels, classes)
    split = split_nodes(graph, seed=0)
    cfg = SearchConfig(epochs=100, n_gnn_blocks=1, hidden_dim=8, lr_alpha=0.05, lr_w=0.01, seed=0)
    _, _, search = run_search(graph, split, cfg)
    alpha = search.supernet.gates[0, 2].alpha.data
    assert alpha[IDENTITY] > alpha[ZERO]
    assert alpha[IDENTITY] - alpha[ZERO] > search.supernet.gates[1, 2].alpha.data @ [-1, 1]


class TestRunSearch:
    def test_deterministic(self):
        graph, split = sbm()
        a1, r1, _ = run_search(graph, split, small_cfg(seed=3))
        a2, r2, _ = run_search(graph, split, small_cfg(seed=3))
        assert a1 == a2
        assert [e.to_dict() for e in r1.epochs] == [e.to_dict() for e in r2.epochs]

    def test_zero_epochs_fallback(self):
        graph, split = sbm()
        arch, report, _ = run_search(graph, split, small_cfg(epochs=0))
        assert report.epochs == []
        assert arch.fallback_used and arch.blocks[-1].predecessors == (0,)

    def test_report_fields(self):
        graph, split = sbm()
        arch, report, _ = run_search(graph, split, small_cfg(epochs=4))
        d = report.to_dict()
        assert set(d) == {"epochs", "architecture", "test_acc", "seed", "wall_seconds"}
        assert set(d["epochs"][0]) == {"train_loss", "val_loss", "val_acc", "lambda"}
        lams = [e["lambda"] for e in d["epochs"]]
        assert lams == sorted(lams, reverse=True)
        validate_architecture(arch)

    def test_gat_search_runs(self):
        graph, split = sbm()
        arch, _, _ = run_search(graph, split, small_cfg(epochs=3, gnn_kind="gat", heads=2))
        validate_architecture(arch)


class TestTrain:
    def test_deterministic(self):
        graph, split = sbm()
        arch = build_baseline("resgcn2", small_cfg().spec(graph))
        m1 = train_architecture(arch, graph, split, small_cfg(seed=4))
        m2 = train_architecture(arch, graph, split, small_cfg(seed=4))
        assert m1.test_acc == m2.test_acc and m1.best_epoch == m2.best_epoch

    def test_seed_changes_initialisation(self):
        graph, split = sbm()
        arch = build_baseline("stack2", small_cfg().spec(graph))
        m1 = train_architecture(arch, graph, split, small_cfg(seed=1, retrain_epochs=1))
        m2 = train_architecture(arch, graph, split, small_cfg(seed=2, retrain_epochs=1))
        assert not np.array_equal(m1.weights.mlp_in.W0.data, m2.weights.mlp_in.W0.data)

    def test_fallback_beats_majority(self):
        graph, split = sbm(npc=40, noise=0.3)
        arch, _, _ = run_search(graph, split, small_cfg(epochs=0))
        model = train_architecture(arch, graph, split, small_cfg(retrain_epochs=100))
        majority = np.bincount(graph.labels[split.test]).max() / len(split.test)
        assert model.test_acc >= majority

    def test_best_epoch_reporting(self):
        graph, split = sbm()
        arch = build_baseline("stack2", small_cfg().spec(graph))
        model = train_architecture(arch, graph, split, small_cfg(retrain_epochs=40, patience=5))
        accs = [e.val_acc for e in model.epochs]
        assert model.best_val_acc == max(accs)
        assert accs[model.best_epoch] == max(accs)
        assert len(model.epochs) <= 40

    def test_restored_weights_reproduce_best_epoch(self):
        graph, split = sbm()
        arch = build_baseline("stack2", small_cfg().spec(graph))
        model = train_architecture(arch, graph, split, small_cfg(retrain_epochs=20))
        logits = model.network().forward(graph).logits.data
        acc = float(np.mean(np.argmax(logits[split.val], 1) == graph.labels[split.val]))
        assert acc == model.best_val_acc

    def test_derived_matches_supernet_before_training(self):
        graph, split = sbm()
        spec = SupernetSpec(graph.n_features, graph.n_classes, 3, 8)
        rng = np.random.default_rng(0)
        for _ in range(5):
            net = Supernet(spec, rng)
            arch = random_architecture(spec, rng)
            net.embed(arch)
            a = net.forward(graph, ARGMAX).logits.data
            b = DerivedNetwork(arch, net.weights.copy()).forward(graph).logits.data
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-9)

    def test_weights_roundtrip(self, tmp_path):
        graph, split = sbm()
        cfg = small_cfg(retrain_epochs=5)
        arch = build_baseline("jknet2", cfg.spec(graph))
        model = train_architecture(arch, graph, split, cfg)
        save_weights(model.weights, tmp_path / "w.npz")
        loaded = load_weights(tmp_path / "w.npz", arch, graph, cfg)
        a = model.network().forward(graph).logits.data
        b = DerivedNetwork(arch, loaded).forward(graph).logits.data
        assert np.array_equal(a, b)


class TestBaselines:
    def spec(self, K=4):
        return SupernetSpec(4, 2, K, 8)

    def preds(self, arch):
        return {b.id: b.predecessors for b in arch.blocks}

    def test_stack2(self):
        arch = build_baseline("stack2", self.spec(2))
        assert self.preds(arch) == {1: (0,), 2: (1,), 3: (2,)}

    def test_stack2_in_deeper_space(self):
        arch = build_baseline("stack2", self.spec(4))
        assert self.preds(arch) == {1: (0,), 2: (1,), 5: (2,)} and arch.pruned == (3, 4)

    def test_resgcn4(self):
        assert self.preds(build_baseline("resgcn4", self.spec())) == {
            1: (0,), 2: (0, 1), 3: (1, 2), 4: (2, 3), 5: (3, 4)}

    def test_densegcn4(self):
        arch = build_baseline("densegcn4", self.spec())
        assert arch.block(3).predecessors == (0, 1, 2)
        assert {b.fusion for b in arch.blocks} == {"CONCAT"}

    def test_jknet4(self):
        arch = build_baseline("jknet4", self.spec())
        assert arch.block(5).predecessors == (1, 2, 3, 4) and arch.block(5).fusion == "MAX"
        assert arch.block(3).predecessors == (2,)

    @pytest.mark.parametrize("name", ["stack5", "gcn4", "stack0"])
    def test_unknown_or_too_deep(self, name):
        with pytest.raises(ValueError):
            build_baseline(name, self.spec())

    @pytest.mark.parametrize("name", ["stack2", "stack4", "resgcn4", "densegcn4", "jknet4", "resgcn2"])
    def test_fixed_points(self, name):
        spec = SupernetSpec(4, 2, 4, 8, fusion_subset=FUSIONS)
        arch = build_baseline(name, spec)
        validate_architecture(arch)
        net = Supernet(spec, np.random.default_rng(0))
        net.embed(arch, 20.0)
        assert derive_architecture(net) == arch


def test_split_object_is_respected():
    graph, _ = sbm()
    split = DataSplit(np.arange(0, 30), np.arange(30, 45), np.arange(45, 60))
    model = train_architecture(build_baseline("stack1", small_cfg().spec(graph)), graph, split,
                               small_cfg(retrain_epochs=3))
    assert 0.0 <= model.test_acc <= 1.0
