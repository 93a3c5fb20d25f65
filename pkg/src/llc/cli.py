"""Command-line entry point: ``llc {search,train,eval,mad,oracle,gen-data}``.

Settings resolve in three layers: built-in defaults, then a flat
``key = value`` config file (``--config``) or a previous run manifest
(``--manifest``), then command-line flags. Every run writes
``manifest.json`` with the fully resolved settings before computing anything.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from llc.diagnostics import count_architectures, enumerate_architectures, mad_depth_sweep, oracle_search, test_mad
from llc.errors import EnumerationCapError, FormatError, NumericError
from llc.graph import generate_sbm, load_dataset, save_dataset, split_nodes
from llc.search import (
    SearchConfig,
    TrainedModel,
    accuracy,
    build_baseline,
    load_weights,
    run_search,
    save_weights,
    train_architecture,
)
from llc.supernet import Architecture

COMMANDS = ("search", "train", "eval", "mad", "oracle", "gen-data")


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


# settings outside SearchConfig, with defaults
RUN_DEFAULTS = {
    "data": "",
    "out": "runs",
    "seeds": 1,
    "split_seed": 0,
    "normalize_features": False,
    "symmetrize": True,
    "architecture": "",
    "baseline": "",
    "model": "",
    "depths": (2, 4, 8),
    "method": "stack",
    "cap": 5000,
    "communities": 4,
    "nodes_per_community": 100,
    "p_in": 0.1,
    "p_out": 0.01,
    "feature_dim": 16,
    "feature_noise": 1.0,
}

ALIASES = {"gnn": "gnn_kind", "blocks": "n_gnn_blocks", "hidden": "hidden_dim"}


def _defaults() -> dict:
    d = SearchConfig().to_dict()
    d.update(RUN_DEFAULTS)
    return d


def _coerce(key: str, value, default):
    try:
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
            v = str(value).strip().lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, (list, tuple)):
            items = value if isinstance(value, (list, tuple)) else [x for x in str(value).split(",") if x.strip()]
            kind = type(default[0]) if default else str
            return [kind(x.strip()) if isinstance(x, str) else kind(x) for x in items]
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"invalid value for {key}: {value!r}") from None


def read_config_file(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    out = {}
    for lineno, line in enumerate(p.read_text().splitlines(), start=1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            raise ConfigError(f"{p}:{lineno}: expected 'key = value'")
        key, value = (x.strip() for x in s.split("=", 1))
        out[ALIASES.get(key, key)] = value
    return out


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, the config file or manifest, and explicit flags."""
    cfg = _defaults()
    layered = {}
    if args.manifest:
        try:
            manifest = json.loads(Path(args.manifest).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read manifest: {exc}") from None
        if manifest.get("command") != args.command:
            raise ConfigError(f"manifest is for command {manifest.get('command')!r}")
        layered.update(manifest["config"])
    if args.config:
        layered.update(read_config_file(args.config))
    layered.update({k: v for k, v in vars(args).get("overrides", {}).items() if v is not None})
    for key, value in layered.items():
        if key not in cfg:
            raise ConfigError(f"unknown setting {key!r}")
        cfg[key] = _coerce(key, value, cfg[key])
    return cfg


def search_config(cfg: dict, seed: int | None = None) -> SearchConfig:
    keys = {f.name for f in fields(SearchConfig)}
    values = {k: v for k, v in cfg.items() if k in keys}
    values["fusion_subset"] = tuple(values["fusion_subset"])
    if seed is not None:
        values["seed"] = seed
    try:
        return SearchConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def dataset_fingerprint(directory) -> str:
    h = hashlib.sha256()
    root = Path(directory)
    for name in ("edges.tsv", "features.csv", "labels.csv", "splits.json"):
        p = root / name
        if p.is_file():
            h.update(name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_manifest(command: str, cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    seeds = [cfg["seed"] + k for k in range(cfg["seeds"])]
    fingerprint = dataset_fingerprint(cfg["data"]) if cfg["data"] and Path(cfg["data"]).is_dir() else None
    manifest = {"command": command, "config": cfg, "dataset_fingerprint": fingerprint,
                "seeds": seeds, "output_dir": str(out)}
    _write_json(out / "manifest.json", manifest)
    return out


def _load(cfg: dict):
    if not cfg["data"]:
        raise DataError("no dataset directory given (--data)")
    try:
        graph, split = load_dataset(cfg["data"], symmetric=cfg["symmetrize"],
                                    normalize=cfg["normalize_features"])
    except (OSError, FormatError) as exc:
        raise DataError(str(exc)) from None
    if split is None:
        try:
            split = split_nodes(graph, seed=cfg["split_seed"])
        except ValueError as exc:
            raise DataError(str(exc)) from None
    return graph, split


def _seeds(cfg):
    if cfg["seeds"] < 1:
        raise ConfigError("seeds must be at least 1")
    return [cfg["seed"] + k for k in range(cfg["seeds"])]


def _architecture(cfg: dict, graph):
    if cfg["baseline"]:
        try:
            return build_baseline(cfg["baseline"], search_config(cfg).spec(graph))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    if not cfg["architecture"]:
        raise ConfigError("train needs --architecture PATH or --baseline NAME")
    try:
        text = Path(cfg["architecture"]).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read architecture: {exc}") from None
    try:
        return Architecture.from_json(text)
    except FormatError as exc:
        raise ConfigError(f"malformed architecture: {exc}") from None


# ---------------------------------------------------------------- commands


def cmd_search(cfg: dict) -> int:
    seeds = _seeds(cfg)
    search_config(cfg)
    graph, split = _load(cfg)
    out = write_manifest("search", cfg)
    for seed in seeds:
        arch, report, _ = run_search(graph, split, search_config(cfg, seed))
        _write_json(out / f"architecture_{seed}.json", arch.to_dict())
        _write_json(out / f"search_report_{seed}.json", report.to_dict())
        last = report.epochs[-1] if report.epochs else None
        val = f"val_acc={last.val_acc:.4f}" if last else "no epochs"
        print(f"seed {seed}: {val} retained={list(arch.retained)} pruned={list(arch.pruned)}"
              f" fallback={arch.fallback_used}")
    return 0


def cmd_train(cfg: dict) -> int:
    seeds = _seeds(cfg)
    search_config(cfg)
    graph, split = _load(cfg)
    arch = _architecture(cfg, graph)
    out = write_manifest("train", cfg)
    accs = []
    for seed in seeds:
        model = train_architecture(arch, graph, split, search_config(cfg, seed))
        _write_json(out / f"model_{seed}.json", model.to_dict())
        save_weights(model.weights, out / f"weights_{seed}.npz")
        accs.append(model.test_acc)
    agg = {"mean_test_acc": float(np.mean(accs)), "std_test_acc": float(np.std(accs)),
           "seeds": seeds, "test_accs": accs}
    _write_json(out / "aggregate.json", agg)
    print(f"{agg['mean_test_acc']:.4f}({agg['std_test_acc']:.4f}) over {len(seeds)} runs")
    return 0


def cmd_eval(cfg: dict) -> int:
    graph, split = _load(cfg)
    arch = _architecture(cfg, graph)
    if not cfg["model"]:
        raise ConfigError("eval needs --model PATH (a weights_<seed>.npz file from train)")
    out = write_manifest("eval", cfg)
    try:
        weights = load_weights(cfg["model"], arch, graph, search_config(cfg))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load model: {exc}") from None
    model = TrainedModel(arch, weights, float("nan"), float("nan"), -1)
    logits = model.network().forward(graph).logits.data
    result = {"train_acc": accuracy(logits, graph.labels, split.train),
              "val_acc": accuracy(logits, graph.labels, split.val),
              "test_acc": accuracy(logits, graph.labels, split.test),
              "test_mad": test_mad(model, graph, split)}
    _write_json(out / "eval.json", result)
    print(" ".join(f"{k}={v:.4f}" for k, v in result.items()))
    return 0


def cmd_mad(cfg: dict) -> int:
    seeds = _seeds(cfg)
    search_config(cfg)
    if any(d < 2 for d in cfg["depths"]):
        raise ConfigError("depths must all be at least 2")
    if cfg["method"] not in ("llc", "stack", "resgcn", "densegcn", "jknet"):
        raise ConfigError(f"unknown method {cfg['method']!r}")
    graph, split = _load(cfg)
    out = write_manifest("mad", cfg)
    for seed in seeds:
        report = mad_depth_sweep(graph, split, cfg["method"], cfg["depths"], search_config(cfg, seed))
        _write_json(out / f"mad_report_{seed}.json", report.to_dict())
        (out / f"mad_report_{seed}.csv").write_text(report.to_csv())
        print(f"seed {seed}: " + ", ".join(f"L{d}: acc={a:.4f} mad={m:.4f}" for d, a, m in report.rows))
    return 0


def cmd_oracle(cfg: dict) -> int:
    scfg = search_config(cfg)
    graph, split = _load(cfg)
    spec = scfg.spec(graph)
    try:
        n = len(enumerate_architectures(spec, scfg.fusion_subset, cfg["cap"]))
    except EnumerationCapError as exc:
        raise ConfigError(str(exc)) from None
    out = write_manifest("oracle", cfg)
    print(f"enumerated {n} architectures")
    result = oracle_search(spec, graph, split, scfg, scfg.fusion_subset, cfg["cap"])
    _write_json(out / "oracle.json", result.to_dict())
    best, val, test = result.ranking[0]
    print(f"best val_acc={val:.4f} test_acc={test:.4f}: {best.to_json()}")
    return 0


def cmd_gen_data(cfg: dict) -> int:
    try:
        graph = generate_sbm(cfg["communities"], cfg["nodes_per_community"], cfg["p_in"],
                             cfg["p_out"], cfg["feature_dim"], cfg["feature_noise"], cfg["seed"])
        split = split_nodes(graph, seed=cfg["split_seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    target = cfg["data"] or str(Path(cfg["out"]) / "data")
    cfg = dict(cfg, data=target)
    write_manifest("gen-data", cfg)
    save_dataset(graph, target, split)
    print(f"wrote {graph.n_nodes} nodes, {len(graph.edges)} edges, {graph.n_classes} classes to {target}")
    return 0


HANDLERS = {"search": cmd_search, "train": cmd_train, "eval": cmd_eval, "mad": cmd_mad,
            "oracle": cmd_oracle, "gen-data": cmd_gen_data}


class _Parser(argparse.ArgumentParser):
    """Argument parser that reports usage mistakes as configuration errors (exit 1)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: config error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="llc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    defaults = _defaults()
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value settings file")
        p.add_argument("--manifest", help="replay the settings of a previous run")
        for key in defaults:
            flags = [f"--{key}", f"--{key.replace('_', '-')}"]
            flags += [f"--{a}" for a, k in ALIASES.items() if k == key]
            p.add_argument(*dict.fromkeys(flags), dest=f"set_{key}", metavar=key.upper())
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:   # --help or a usage error
        return int(exc.code or 0)
    args.overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("set_")}
    try:
        cfg = resolve(args)
        return HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
