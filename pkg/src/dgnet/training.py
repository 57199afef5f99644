"""Joint SGD training of network and router parameters."""
from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, iterate_batches
from .model import MODES, ArchConfig, Network, thresholded_inference
from .routing import ThresholdPolicy
from .tensor import backward, cross_entropy_smoothed, no_grad

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    mode: str = "dynamic"
    epochs: int = 64
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    label_smoothing: float = 0.1
    warmup_epochs: float = 2
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0,1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class Schedule:
    base_lr: float
    total_steps: int
    warmup_steps: int = 0

    @classmethod
    def from_config(cls, cfg: TrainConfig, steps_per_epoch: int) -> Schedule:
        return cls(cfg.lr, cfg.epochs * steps_per_epoch, int(round(cfg.warmup_epochs * steps_per_epoch)))


def lr_at(step: int, schedule: Schedule) -> float:
    """Linear warmup from 0, then a half-period cosine down to 0 at ``total_steps``."""
    base, total, warm = schedule.base_lr, schedule.total_steps, min(schedule.warmup_steps, schedule.total_steps)
    if step < warm:
        return base * step / warm
    span = total - warm
    if span <= 0:
        return base
    t = min(step - warm, span)
    return 0.5 * base * (1.0 + math.cos(math.pi * t / span))


def is_decayed(name: str) -> bool:
    # connectivity parameters are exempt: router biases and static edge scalars
    return not (name.endswith("alpha") or (".router" in name and name.endswith(".bias")))


@dataclass
class TrainState:
    net: Network
    config: TrainConfig
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    best_acc: float = float("nan")

    def __post_init__(self):
        for name, p in self.net.named_parameters().items():
            self.momentum.setdefault(name, np.zeros_like(p.data))

    def parameter_groups(self) -> tuple[list[str], list[str]]:
        names = list(self.net.named_parameters())
        return [n for n in names if is_decayed(n)], [n for n in names if not is_decayed(n)]


def sgd_update(state: TrainState, lr: float):
    cfg = state.config
    for name, p in state.net.named_parameters().items():
        if p.grad is None:
            continue
        g = p.grad
        if cfg.weight_decay and is_decayed(name):
            g = g + cfg.weight_decay * p.data
        buf = state.momentum[name]
        buf *= cfg.momentum
        buf += g
        p.data -= np.asarray(lr, dtype=p.dtype) * buf
        if name.endswith("alpha"):
            np.clip(p.data, 0.0, 1.0, out=p.data)


def train_step(state: TrainState, images, labels, lr: float) -> float:
    net = state.net
    net.train()
    net.zero_grad()
    loss = cross_entropy_smoothed(net(images), labels, state.config.label_smoothing)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite loss {value} at step {state.step} (lr={lr:.5g})")
    backward(loss)
    grads = [p.grad for p in net.parameters() if p.grad is not None]
    gmax = max((float(np.abs(g).max()) for g in grads), default=0.0)
    if not math.isfinite(gmax):
        raise TrainingDiverged(f"non-finite gradient at step {state.step} (lr={lr:.5g}, max|grad|={gmax})")
    sgd_update(state, lr)
    state.step += 1
    return value


def evaluate(net: Network, ds: Dataset, batch_size: int = 256, policy: ThresholdPolicy | None = None) -> float:
    """Top-1 accuracy; ``policy`` switches dynamic networks to thresholded, pruned inference."""
    if len(ds) == 0:
        return float("nan")
    correct = 0
    net.eval()
    try:
        with no_grad():
            for x, y in iterate_batches(ds, batch_size):
                if policy is not None and net.mode == "dynamic":
                    logits = thresholded_inference(net, x, policy)[0]
                else:
                    logits = net(x)
                correct += int((logits.data.argmax(axis=1) == y).sum())
    finally:
        net.train()
    return correct / len(ds)


@dataclass
class RunResult:
    mode: str
    seed: int
    eval_acc: float
    losses: list[float]
    metrics: list[tuple]
    state: TrainState | None = None


def fit(arch: ArchConfig, cfg: TrainConfig, train: Dataset, test: Dataset | None = None,
        eval_every: int = 0, state: TrainState | None = None, graphs=None,
        stop_after: int | None = None) -> RunResult:
    """Train for ``cfg.epochs``; metrics rows are (step, lr, loss, eval_acc).

    ``stop_after`` ends the run once that many epochs are complete (the
    schedule still spans ``cfg.epochs``), so a checkpoint can be resumed.
    """
    if state is None:
        net = Network(arch, cfg.mode, seed=cfg.seed, graphs=graphs)
        state = TrainState(net, cfg)
    steps_per_epoch = max(1, math.ceil(len(train) / cfg.batch_size))
    sched = Schedule.from_config(cfg, steps_per_epoch)
    rng = np.random.default_rng(cfg.seed + 7919)
    # replay the shuffles of completed epochs so resumed runs see the same order
    for _ in range(state.epoch):
        rng.permutation(len(train))
    losses, metrics = [], []
    last = cfg.epochs if stop_after is None else min(stop_after, cfg.epochs)
    while state.epoch < last:
        for x, y in iterate_batches(train, cfg.batch_size, rng):
            lr = lr_at(state.step, sched)
            loss = train_step(state, x, y, lr)
            losses.append(loss)
            acc = float("nan")
            if test is not None and eval_every and state.step % eval_every == 0:
                acc = evaluate(state.net, test)
            metrics.append((state.step, lr, loss, acc))
        state.epoch += 1
        log.debug("epoch %d done, last loss %.4f", state.epoch, losses[-1] if losses else float("nan"))
    acc = evaluate(state.net, test) if test is not None else float("nan")
    if test is not None:
        state.best_acc = acc if math.isnan(state.best_acc) else max(state.best_acc, acc)
        metrics.append((state.step, lr_at(state.step, sched), float("nan"), acc))
    return RunResult(cfg.mode, cfg.seed, acc, losses, metrics, state)


def write_metrics_csv(path, metrics) -> None:
    lines = ["step,lr,loss,eval_acc"]
    lines += [f"{s},{lr!r},{loss!r},{acc!r}" for s, lr, loss, acc in metrics]
    Path(path).write_text("\n".join(lines) + "\n")


def read_metrics_csv(path) -> list[tuple]:
    rows = []
    for line in Path(path).read_text().strip().splitlines()[1:]:
        s, lr, loss, acc = line.split(",")
        rows.append((int(s), float(lr), float(loss), float(acc)))
    return rows


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(state: TrainState, path) -> None:
    arrays = {}
    for name, p in state.net.named_parameters().items():
        arrays[f"param/{name}"] = p.data
        arrays[f"momentum/{name}"] = state.momentum[name]
    for name, b in state.net.named_buffers().items():
        arrays[f"buffer/{name}"] = b
    meta = {
        "version": CHECKPOINT_VERSION,
        "arch": asdict(state.net.arch),
        "train": asdict(state.config),
        "mode": state.net.mode,
        "seed": state.net.seed,
        "graphs": [[st.graph.n_nodes, st.graph.sorted_edges()] for st in state.net.stages],
        "step": state.step,
        "epoch": state.epoch,
        "best_acc": state.best_acc,
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> TrainState:
    from .graph import StageGraph

    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        arch = ArchConfig(**meta["arch"])
        cfg = TrainConfig(**meta["train"])
        graphs = [StageGraph(n, frozenset(map(tuple, edges))) for n, edges in meta["graphs"]]
        net = Network(arch, meta["mode"], seed=meta["seed"], graphs=graphs)
        state = TrainState(net, cfg, step=meta["step"], epoch=meta["epoch"], best_acc=meta["best_acc"])
        for name, p in net.named_parameters().items():
            p.data = z[f"param/{name}"].copy()
            state.momentum[name] = z[f"momentum/{name}"].copy()
        for name, b in net.named_buffers().items():
            b[...] = z[f"buffer/{name}"]
    return state


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

@dataclass
class AblationRecord:
    mode: str
    accuracies: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies, ddof=1)) if len(self.accuracies) > 1 else 0.0


def run_ablation(train: Dataset, test: Dataset, arch: ArchConfig, base: TrainConfig,
                 seeds=(0, 1, 2), modes=MODES) -> dict[str, AblationRecord]:
    """Train each connectivity mode under identical seeds and schedule."""
    out = {m: AblationRecord(m, []) for m in modes}
    for seed in seeds:
        for m in modes:
            cfg = TrainConfig(**{**asdict(base), "mode": m, "seed": seed})
            res = fit(arch, cfg, train, test)
            log.info("ablation mode=%s seed=%d acc=%.4f", m, seed, res.eval_acc)
            out[m].accuracies.append(res.eval_acc)
    return out


def format_table(records: dict[str, AblationRecord]) -> str:
    lines = [f"{'mode':<14}{'mean':>8}{'std':>8}  accuracies"]
    for r in records.values():
        accs = " ".join(f"{a:.4f}" for a in r.accuracies)
        lines.append(f"{r.mode:<14}{r.mean:>8.4f}{r.std:>8.4f}  {accs}")
    return "\n".join(lines)
