"""Optimization loop for GATE, the STL/MTL baselines, AdamW and early stopping."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Value
from .data import Dataset
from .dmpnn import GraphBatch, batch_graphs
from .losses import (CONS_MODES, DIST_MODES, LossBundle, LossWeights, loss_auto, loss_cons, loss_dist,
                     loss_map, loss_reg, loss_total)
from .networks import GateModel, ModelConfig, MTLModel, PerturbConfig, STLModel, perturb_stacked

log = logging.getLogger(__name__)

LOSS_NAMES = ("reg", "auto", "map", "cons", "dist", "total")
EVAL_BATCH = 512


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 5e-5
    batch_size: int = 512
    max_epochs: int = 600
    patience: int = 50
    val_fraction: float = 0.1
    seed: int = 0
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    cons_mode: str = "paired"
    dist_mode: str = "vector"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if isinstance(self.perturb, dict):
            self.perturb = PerturbConfig(**self.perturb)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if not (self.lr > 0 and self.batch_size > 0 and self.max_epochs > 0 and self.patience > 0):
            raise ValueError("lr, batch_size, max_epochs and patience must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.cons_mode not in CONS_MODES:
            raise ValueError(f"cons_mode must be one of {CONS_MODES}")
        if self.dist_mode not in DIST_MODES:
            raise ValueError(f"dist_mode must be one of {DIST_MODES}")

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ optimizer


@dataclass
class AdamWState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)
    steps: dict[int, int] = field(default_factory=dict)


def adamw_step(params: Sequence[Value], state: AdamWState, lr: float) -> None:
    """One decoupled-weight-decay Adam update.

    Parameters whose ``grad`` is ``None`` did not take part in the loss and
    are left untouched (no moment update, no decay).
    """
    for k, p in enumerate(params):
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter {p.name or k}")
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
            state.steps[k] = 0
        v = state.v[k]
        state.steps[k] += 1
        t = state.steps[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        p.data = p.data - lr * (m_hat / (np.sqrt(v_hat) + state.eps)) - lr * state.weight_decay * p.data


# ------------------------------------------------------------------ early stopping


@dataclass
class EarlyStopState:
    patience: int
    best_rmse: float = math.inf
    best_epoch: int = -1
    checkpoint: list[np.ndarray] | None = None
    since_improvement: int = 0


def early_stop(state: EarlyStopState, epoch: int, val_rmse: float,
               snapshot: Callable[[], list[np.ndarray]] | None = None) -> str:
    """Update ``state`` with this epoch's metric; return ``"continue"`` or ``"stop"``."""
    if not math.isfinite(val_rmse):
        raise TrainingError(f"validation RMSE is not finite at epoch {epoch}")
    if val_rmse < state.best_rmse:
        state.best_rmse = val_rmse
        state.best_epoch = epoch
        state.since_improvement = 0
        if snapshot is not None:
            state.checkpoint = snapshot()
    else:
        state.since_improvement += 1
    return "stop" if state.since_improvement >= state.patience else "continue"


# ------------------------------------------------------------------ helpers


@dataclass
class TrainResult:
    model: object
    history: list[dict]
    best_epoch: int
    best_val_rmse: float
    epochs_run: int


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("init", "shuffle", "dropout", "perturb", "split")
    seqs = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, seqs)}


def _model_seed(seed: int) -> int:
    return int(np.random.SeedSequence(seed).generate_state(1)[0])


def holdout_indices(n: int, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Sorted (train, val) index arrays with ``round(fraction*n)`` (at least 1) in val."""
    n_val = max(1, int(round(fraction * n)))
    if n - n_val < 1:
        raise TrainingError(f"too few records ({n}) to hold out a validation slice")
    order = rng.permutation(n)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def holdout(d: Dataset, fraction: float, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    tr, va = holdout_indices(len(d), fraction, rng)
    return d.subset(tr), d.subset(va)


def _batches(n: int, size: int, rng: np.random.Generator | None) -> list[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i:i + size] for i in range(0, n, size)]


def _clamp_batch(cfg: TrainConfig, sizes: Sequence[int]) -> int:
    biggest = max(sizes)
    if cfg.batch_size > biggest:
        log.warning("batch size %d exceeds dataset size %d; clamping", cfg.batch_size, biggest)
        return biggest
    return cfg.batch_size


def _check_nonempty(*ds: Dataset) -> None:
    for d in ds:
        if len(d) == 0:
            raise TrainingError(f"dataset {d.name!r} is empty")


class _BatchCache:
    """Fixed-order batches for evaluation passes."""

    def __init__(self, d: Dataset, size: int):
        self.parts = [(batch_graphs([d.graphs[i] for i in idx]), d.values[idx])
                      for idx in _batches(len(d), size, None)]


def predict(model, d: Dataset | _BatchCache, task: int = 0, batch_size: int = 512) -> np.ndarray:
    """Eval-mode predictions for every record of ``d``."""
    cache = d if isinstance(d, _BatchCache) else _BatchCache(d, batch_size)
    with ad.no_grad():
        return np.concatenate([model.predict(b, task).data for b, _ in cache.parts])


def _rmse(y: np.ndarray, y_hat: np.ndarray) -> float:
    return float(np.sqrt(np.mean((y - y_hat) ** 2)))


def _check_finite(bundle_total: Value, epoch: int) -> None:
    if not math.isfinite(bundle_total.item()):
        raise TrainingError(f"loss diverged (non-finite) at epoch {epoch}")


# ------------------------------------------------------------------ GATE


def gate_losses(model: GateModel, batch: GraphBatch, y: np.ndarray, task: int, cfg: TrainConfig,
                perturb_rng: np.random.Generator, dropout_rng: np.random.Generator | None,
                training: bool) -> LossBundle:
    """Every loss term for one batch of task ``task`` against each other task."""
    g = batch.num_graphs
    m_count = cfg.perturb.count
    y_v = Value(y)
    a = model.embed(batch)
    tiled, a_all = perturb_stacked(a, batch, cfg.perturb, perturb_rng)

    def pipeline(k: int):
        nets = model.tasks[k]
        z_all = nets.encode(tiled, a_all)
        m_all = nets.transfer(z_all, training, dropout_rng)
        z = ad.rows(z_all, 0, g)
        m = ad.rows(m_all, 0, g)
        mbar = [ad.rows(m_all, (j + 1) * g, (j + 2) * g) for j in range(m_count)]
        return z, m, mbar

    nt = model.tasks[task]
    z_t, m_t, mbar_t = pipeline(task)
    reg = loss_reg(y_v, nt.predict(z_t, training, dropout_rng))
    auto = loss_auto(z_t, nt.inverse_transfer(m_t, training, dropout_rng))

    others = [k for k in range(len(model.tasks)) if k != task]
    maps, conss, dists = [], [], []
    for s in others:
        _, m_s, mbar_s = pipeline(s)
        y_cross = nt.predict(nt.inverse_transfer(m_s, training, dropout_rng), training, dropout_rng)
        maps.append(loss_map(y_v, y_cross))
        conss.append(loss_cons(m_t, m_s, mbar_t, mbar_s, cfg.cons_mode))
        dists.append(loss_dist(m_t, mbar_t, m_s, mbar_s, cfg.dist_mode))
    if not others:
        zero = Value(0.0)
        maps, conss, dists = [zero], [zero], [zero]
    return loss_total(reg, auto, _sum(maps), _sum(conss), _sum(dists), cfg.weights)


def _sum(vals: list[Value]) -> Value:
    out = vals[0]
    for v in vals[1:]:
        out = ad.add(out, v)
    return out


# ------------------------------------------------------------------ driver


def _schedule(kind: str, sizes: list[int], batch_size: list[int], rng: np.random.Generator):
    """(task, indices) pairs for one epoch.

    GATE visits tasks in turn, all batches of each, with the target (task 0)
    last so every epoch ends on target updates before validation. MTL
    interleaves the tasks' batches round-robin; STL has a single task.
    """
    per_task = [_batches(n, b, rng) for n, b in zip(sizes, batch_size)]
    if kind == "mtl":
        out = []
        for j in range(max(len(b) for b in per_task)):
            for t, batches in enumerate(per_task):
                if j < len(batches):
                    out.append((t, batches[j]))
        return out
    order = list(range(1, len(per_task))) + [0]
    return [(t, idx) for t in order for idx in per_task[t]]


def _mean_dicts(items: list[dict[str, float]]) -> dict[str, float]:
    if not items:
        return {}
    return {k: float(np.mean([d[k] for d in items])) for k in items[0]}


def eval_batch_size(cfg: TrainConfig) -> int:
    """Batch size for no-grad passes; small training batches waste time here."""
    return max(cfg.batch_size, EVAL_BATCH)


def _reg_only(loss: Value) -> dict[str, Value]:
    zero = Value(0.0)
    return {"reg": loss, "auto": zero, "map": zero, "cons": zero, "dist": zero, "total": loss}


def _fit(kind: str, model, train: list[Dataset], val: list[Dataset], cfg: TrainConfig,
         sink: Callable[[dict], None] | None) -> TrainResult:
    rngs = _streams(cfg.seed)
    sizes = [len(d) for d in train]
    batch_sizes = []
    for d in train:
        if cfg.batch_size > len(d):
            log.warning("batch size %d exceeds %s size %d; clamping", cfg.batch_size, d.name, len(d))
        batch_sizes.append(min(cfg.batch_size, len(d)))
    eb = eval_batch_size(cfg)
    train_eval = [_BatchCache(train[0], eb)]
    val_eval = [_BatchCache(d, eb) for d in val]
    params = model.parameters()
    opt = AdamWState(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    stopper = EarlyStopState(cfg.patience)
    history: list[dict] = []
    n_tasks = len(train)

    def losses_for(t: int, batch: GraphBatch, y: np.ndarray, training: bool,
                   perturb_rng: np.random.Generator) -> dict[str, Value]:
        drop = rngs["dropout"] if training else None
        if kind == "gate":
            b = gate_losses(model, batch, y, t, cfg, perturb_rng, drop, training)
            return {k: getattr(b, k) for k in LOSS_NAMES}
        y_hat = model.forward(batch, t, training, drop)
        return _reg_only(loss_reg(Value(y), y_hat))

    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        collected: list[list[dict[str, float]]] = [[] for _ in range(n_tasks)]
        for t, idx in _schedule(kind, sizes, batch_sizes, rngs["shuffle"]):
            d = train[t]
            batch = batch_graphs([d.graphs[i] for i in idx])
            model.zero_grad()
            with Tape() as tape:
                parts = losses_for(t, batch, d.values[idx], True, rngs["perturb"])
            _check_finite(parts["total"], epoch)
            ad.backward(tape, parts["total"])
            adamw_step(params, opt, cfg.lr)
            collected[t].append({k: v.item() for k, v in parts.items()})

        # evaluation: fixed perturbation stream per epoch keeps val losses reproducible
        val_rng = np.random.default_rng([cfg.seed, epoch])
        val_rmse = []
        for t in range(n_tasks):
            val_parts = []
            with ad.no_grad():
                for b, y in val_eval[t].parts:
                    val_parts.append({k: v.item() for k, v in losses_for(t, b, y, False, val_rng).items()})
            vr = _rmse(val[t].values, predict(model, val_eval[t], t))
            val_rmse.append(vr)
            record = {"method": kind, "epoch": epoch, "task": t,
                      "train": _mean_dicts(collected[t]),
                      "val": _weighted_mean(val_parts, [len(y) for _, y in val_eval[t].parts]),
                      "val_rmse": vr}
            # a full eval-mode pass over the (large) auxiliary training sets
            # would cost a sizeable share of the epoch, so only the target gets one
            if t == 0:
                record["train_rmse"] = _rmse(train[0].values, predict(model, train_eval[0], 0))
            history.append(record)
            if sink is not None:
                sink(record)
        decision = early_stop(stopper, epoch, val_rmse[0], model.state)
        if decision == "stop":
            break

    if stopper.checkpoint is not None:
        model.load_state(stopper.checkpoint)
    return TrainResult(model, history, stopper.best_epoch, stopper.best_rmse, epoch)


def _weighted_mean(items: list[dict[str, float]], weights: list[int]) -> dict[str, float]:
    w = np.asarray(weights, dtype=float)
    return {k: float(np.dot([d[k] for d in items], w) / w.sum()) for k in items[0]}


def _split_val(datasets: Sequence[Dataset], val: Sequence[Dataset] | None, cfg: TrainConfig):
    _check_nonempty(*datasets)
    if val is not None:
        if len(val) != len(datasets):
            raise TrainingError("one validation set per task is required")
        _check_nonempty(*val)
        return list(datasets), list(val)
    rng = _streams(cfg.seed)["split"]
    pairs = [holdout(d, cfg.val_fraction, rng) for d in datasets]
    return [p[0] for p in pairs], [p[1] for p in pairs]


def train_gate(pair: Sequence[Dataset], cfg: TrainConfig, model_cfg: ModelConfig | None = None,
               val: Sequence[Dataset] | None = None,
               sink: Callable[[dict], None] | None = None) -> TrainResult:
    """Train GATE on ``(target, source)``; early stopping follows the target task.

    Without ``val``, ``cfg.val_fraction`` of each training set is held out.
    """
    train, val = _split_val(pair, val, cfg)
    model = GateModel(model_cfg or ModelConfig(), len(train), _model_seed(cfg.seed))
    return _fit("gate", model, train, val, cfg, sink)


def train_stl(d: Dataset, cfg: TrainConfig, model_cfg: ModelConfig | None = None,
              val: Dataset | None = None, sink: Callable[[dict], None] | None = None) -> TrainResult:
    train, vals = _split_val([d], None if val is None else [val], cfg)
    model = STLModel(model_cfg or ModelConfig(), 1, _model_seed(cfg.seed))
    return _fit("stl", model, train, vals, cfg, sink)


def train_mtl(pair: Sequence[Dataset], cfg: TrainConfig, model_cfg: ModelConfig | None = None,
              val: Sequence[Dataset] | None = None,
              sink: Callable[[dict], None] | None = None) -> TrainResult:
    train, val = _split_val(pair, val, cfg)
    model = MTLModel(model_cfg or ModelConfig(), len(train), _model_seed(cfg.seed))
    return _fit("mtl", model, train, val, cfg, sink)


def curve(history: list[dict], task: int, key: str) -> np.ndarray:
    """Per-epoch series from a history, e.g. ``curve(h, 0, "val_rmse")`` or ``"train.reg"``."""
    out = []
    for rec in history:
        if rec["task"] != task:
            continue
        node = rec
        for part in key.split("."):
            node = node[part]
        out.append(node)
    return np.asarray(out, dtype=float)


def write_ndjson(records: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
