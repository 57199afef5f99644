"""Command-line entry point: dgnet {train,eval,ablate,cost,export-graph,randwire-compare}."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import graph as G
from .config import ConfigError, RunConfig, dump_config, load_config, load_datasets, replace_section
from .cost import count_cost
from .data import DatasetError
from .model import MODES, Network, alpha_weights, dynamic_forward
from .tensor import no_grad
from .training import (
    AblationRecord,
    TrainingDiverged,
    evaluate,
    fit,
    format_table,
    load_checkpoint,
    run_ablation,
    save_checkpoint,
    write_metrics_csv,
)

log = logging.getLogger("dgnet")

EDGE_CSV_HEADER = "sample,stage,i,j,weight"


class CommandError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# per-sample edge CSV
# ---------------------------------------------------------------------------

def write_sample_edges(path, rows) -> None:
    """rows: iterable of (sample, stage, i, j, weight)."""
    lines = [EDGE_CSV_HEADER] + [f"{b},{s},{i},{j},{w!r}" for b, s, i, j, w in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def read_sample_edges(path) -> list[tuple[int, int, int, int, float]]:
    text = Path(path).read_text().strip().splitlines()
    if not text or text[0] != EDGE_CSV_HEADER:
        raise ValueError(f"{path}: expected header {EDGE_CSV_HEADER!r}")
    out = []
    for line in text[1:]:
        b, s, i, j, w = line.split(",")
        out.append((int(b), int(s), int(i), int(j), float(w)))
    return out


def sample_edge_weights(net: Network, images: np.ndarray) -> list[list[dict]]:
    """Edge weights per sample and stage: [sample][stage] -> {(i, j): weight}."""
    B = len(images)
    if net.mode == "dynamic":
        with no_grad():
            _, buffers = dynamic_forward(net, images)
        snaps = [b.snapshots() for b in buffers]
        return [[{(i, j): float(snaps[s][b, j - 1, i - 1]) for i, j in st.graph.sorted_edges()}
                 for s, st in enumerate(net.stages)] for b in range(B)]
    if net.mode == "static_alpha":
        shared = [{e: float(w.data) for e, w in ws.items()} for ws in alpha_weights(net)]
    else:
        shared = [{e: 1.0 for e in st.graph.sorted_edges()} for st in net.stages]
    return [shared for _ in range(B)]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output.dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CommandError(f"cannot create output directory {out}: {e.strerror}") from None
    dump_config(cfg, out / "config.yaml")
    return out


def _input_shape(cfg: RunConfig) -> tuple[int, int, int]:
    if cfg.dataset.source == "synthetic":
        return (3, cfg.dataset.size, cfg.dataset.size)
    return (3, 32, 32)


def _num_classes(cfg: RunConfig) -> int:
    return cfg.dataset.num_classes if cfg.dataset.source == "synthetic" else 10


def cmd_train(cfg: RunConfig, args) -> int:
    train, test = load_datasets(cfg)
    out = _out_dir(cfg)
    arch = cfg.arch_config(train.num_classes, train.images.shape[1])
    res = fit(arch, cfg.train_config(), train, test, eval_every=cfg.training.eval_every)
    save_checkpoint(res.state, out / "checkpoint.npz")
    write_metrics_csv(out / "metrics.csv", res.metrics)
    print(f"mode={res.mode} seed={res.seed} eval_acc={res.eval_acc:.4f} checkpoint={out / 'checkpoint.npz'}")
    return 0


def _load_state(cfg: RunConfig, path):
    path = Path(path) if path else Path(cfg.output.dir) / "checkpoint.npz"
    if not path.exists():
        raise CommandError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_eval(cfg: RunConfig, args) -> int:
    state = _load_state(cfg, args.checkpoint)
    _, test = load_datasets(cfg)
    acc = evaluate(state.net, test, policy=cfg.threshold_policy())
    print(f"mode={state.net.mode} eval_acc={acc:.4f} samples={len(test)}")
    return 0


def cmd_ablate(cfg: RunConfig, args) -> int:
    train, test = load_datasets(cfg)
    out = _out_dir(cfg)
    arch = cfg.arch_config(train.num_classes, train.images.shape[1])
    records = run_ablation(train, test, arch, cfg.train_config(), seeds=cfg.training.seeds, modes=MODES)
    table = format_table(records)
    (out / "ablation.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_cost(cfg: RunConfig, args) -> int:
    arch = cfg.arch_config(_num_classes(cfg), 3)
    net = Network(arch, cfg.routing.mode, seed=cfg.training.seed)
    report = count_cost(net, _input_shape(cfg))
    print(f"mode: {net.mode}")
    print(report.format())
    if args.layers:
        for layer in report.layers:
            print(f"  {layer.name:<18}{layer.kind:<8}params={layer.params:<8}multiadds={layer.multiadds}")
    return 0


def cmd_export_graph(cfg: RunConfig, args) -> int:
    if args.init:
        arch = cfg.arch_config(_num_classes(cfg), 3)
        net = Network(arch, cfg.routing.mode, seed=cfg.training.seed)
    else:
        net = _load_state(cfg, args.checkpoint).net
    _, test = load_datasets(cfg)
    idx = [int(i) for i in cfg.output.sample_indices]
    bad = [i for i in idx if not 0 <= i < len(test)]
    if bad:
        raise CommandError(f"sample indices {bad} outside the eval split of {len(test)} samples")
    net.eval()
    weights = sample_edge_weights(net, test.images[idx])
    out = _out_dir(cfg)
    rows = []
    for b, per_stage in zip(idx, weights):
        for s, ws in enumerate(per_stage):
            graph = net.stages[s].graph
            (out / f"sample{b}_stage{s}.dot").write_text(G.export_dot(graph, ws, name=f"sample{b}_stage{s}"))
            rows += [(b, s, i, j, ws[(i, j)]) for i, j in graph.sorted_edges()]
    write_sample_edges(out / "edges.csv", rows)
    print(f"exported {len(idx)} sample(s) x {len(net.stages)} stage(s) to {out}")
    return 0


def randwire_compare(cfg: RunConfig, train, test, seeds, kinds=G.RANDOM_KINDS):
    """Static random wirings vs. the dynamic model; returns ({label: record}, {label: mean multiadds})."""
    records: dict[str, AblationRecord] = {}
    costs: dict[str, float] = {}
    shape = train.images.shape[1:]
    arms = [(k, "baseline") for k in kinds] + [("complete", "dynamic")]
    for kind, mode in arms:
        label = f"{kind}{G.DEFAULT_PARAMS.get(kind, '')}" if mode == "baseline" else "dynamic"
        sub = replace_section(cfg, "architecture", pattern=kind, pattern_params=dict(G.DEFAULT_PARAMS.get(kind, {})))
        arch = sub.arch_config(train.num_classes, shape[0])
        rec = AblationRecord(label, [])
        madds = []
        for seed in seeds:
            res = fit(arch, cfg.train_config(mode=mode, seed=seed), train, test)
            rec.accuracies.append(res.eval_acc)
            madds.append(count_cost(res.state.net, shape).multiadds_total)
            log.info("randwire %s seed=%d acc=%.4f", label, seed, res.eval_acc)
        records[label] = rec
        costs[label] = float(np.mean(madds))
    return records, costs


def cmd_randwire_compare(cfg: RunConfig, args) -> int:
    train, test = load_datasets(cfg)
    out = _out_dir(cfg)
    records, costs = randwire_compare(cfg, train, test, cfg.training.seeds)
    lines = [f"{'wiring':<28}{'mean':>8}{'std':>8}{'multiadds':>14}"]
    for label, r in records.items():
        lines.append(f"{label:<28}{r.mean:>8.4f}{r.std:>8.4f}{costs[label]:>14.0f}")
    table = "\n".join(lines)
    (out / "randwire.txt").write_text(table + "\n")
    print(table)
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "cost": cmd_cost,
    "export-graph": cmd_export_graph,
    "randwire-compare": cmd_randwire_compare,
}


HELP = {
    "train": "train one model; writes checkpoint.npz, metrics.csv and config.yaml",
    "eval": "report eval-split accuracy of a checkpoint",
    "ablate": "train baseline, static_alpha and dynamic over the configured seeds",
    "cost": "print parameter and Multi-Adds counts",
    "export-graph": "write per-sample edge weights as edges.csv and DOT files",
    "randwire-compare": "train static ER/BA/WS wirings and the dynamic model, tabulate accuracy and Multi-Adds",
}

EPILOG = "Any config field can be overridden with --section.key=value, e.g. --training.lr=0.05."


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dgnet", description="Graph-wired CNNs with per-sample routed connectivity.",
                                epilog=EPILOG)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress of each training run")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, help=HELP[name], description=HELP[name], epilog=EPILOG)
        sp.add_argument("-c", "--config", help="YAML run config (defaults are used when omitted)")
        if name in ("eval", "export-graph"):
            sp.add_argument("--checkpoint", help="checkpoint path (default: <output.dir>/checkpoint.npz)")
        if name == "export-graph":
            sp.add_argument("--init", action="store_true", help="export an untrained network built from the config")
        if name == "cost":
            sp.add_argument("--layers", action="store_true", help="also list per-layer costs")
    return p


def main(argv: list[str] | None = None) -> int:
    # "--section.key=value" overrides are split off before argparse sees them
    argv = list(sys.argv[1:] if argv is None else argv)
    overrides = [a for a in argv if a.startswith("--") and "." in a.split("=", 1)[0]]
    args = build_parser().parse_args([a for a in argv if a not in overrides])
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, CommandError, DatasetError, TrainingDiverged) as e:
        print(f"dgnet {args.command}: error: {e}", file=sys.stderr)
    except OSError as e:
        print(f"dgnet {args.command}: error: {e.strerror or e}: {e.filename or ''}".rstrip(": "), file=sys.stderr)
    except (KeyError, ValueError) as e:
        print(f"dgnet {args.command}: error: {e}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
