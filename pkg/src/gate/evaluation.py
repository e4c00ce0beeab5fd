"""Metrics, four-fold cross-validation, PCA and the desk-scale experiments.

Every report carries the :class:`RunConfig` that produced it, so a report
file is enough to rerun the experiment.
"""
from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import Dataset, SplitManifest, corrupt, normalize
from .networks import ConfigError, ModelConfig, PerturbConfig
from .training import (TrainConfig, TrainResult, holdout, holdout_indices, predict, train_gate,
                       train_mtl, train_stl)

METHODS = ("gate", "stl", "mtl")


def rmse(y, y_hat) -> float:
    y = np.asarray(y, dtype=float).ravel()
    y_hat = np.asarray(y_hat, dtype=float).ravel()
    if y.shape != y_hat.shape:
        raise ValueError(f"rmse: length mismatch {y.size} vs {y_hat.size}")
    if y.size == 0:
        raise ValueError("rmse: empty input")
    return float(np.sqrt(np.mean((y - y_hat) ** 2)))


@dataclass
class RunConfig:
    """Everything needed to rerun an experiment."""

    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    split_mode: str = "random"
    synth: dict = field(default_factory=lambda: {"n_target": 200, "n_source": 2000, "rho": 0.9,
                                                  "noise": 0.1})
    corruption_fraction: float = 1.0

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "model": self.model.to_dict(), "train": self.train.to_dict(),
                "split_mode": self.split_mode, "synth": dict(self.synth),
                "corruption_fraction": self.corruption_fraction}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {"seed", "model", "train", "split_mode", "synth", "corruption_fraction"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown RunConfig keys: {sorted(extra)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def desk_config(seed: int = 7, epochs: int = 100, perturbations: int = 2) -> RunConfig:
    """The single-CPU setting used by the acceptance suite and the demos.

    Widths are quartered and training is shortened to ``epochs``. Batches of
    32 give a 120-record training fold several optimizer steps per epoch. The
    learning rate is raised to 1e-3 to suit the shorter run.
    """
    train = TrainConfig(lr=1e-3, batch_size=32, max_epochs=epochs, patience=min(50, epochs), seed=seed,
                        perturb=PerturbConfig(count=perturbations))
    return RunConfig(seed=seed, model=ModelConfig().scaled(0.25), train=train)


@dataclass
class MetricsReport:
    method: str
    pair: list[str]
    fold_rmse: list[float]
    mean_rmse: float
    std_rmse: float
    relative_rmse: float | None
    runtime_seconds: float
    folds: list[dict]
    run_config: dict

    def to_dict(self, timing: bool = True) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("runtime_seconds")
        return d


def _fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("GATE_THREADS", "1")))
    except ValueError:
        return 1


def _train(method: str, train: Sequence[Dataset], val: Sequence[Dataset], rc: RunConfig,
           seed: int) -> TrainResult:
    cfg = replace(rc.train, seed=seed)
    if method == "gate":
        return train_gate(train, cfg, rc.model, val=val)
    if method == "mtl":
        return train_mtl(train, cfg, rc.model, val=val)
    if method == "stl":
        return train_stl(train[0], cfg, rc.model, val=val[0])
    raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")


def prepare_pair(pair: Sequence[Dataset], manifest: SplitManifest) -> tuple[Dataset, Dataset]:
    """Normalize the target with statistics of its non-test records, the source with its own."""
    target, source = pair
    train_part = target.subset(manifest.train_indices)
    _, stats = normalize(train_part)
    target_n, _ = normalize(_raw(target), stats)
    source_n, _ = normalize(_raw(source))
    return target_n, source_n


def _raw(d: Dataset) -> Dataset:
    """``d`` with values mapped back to original units."""
    if d.stats is None:
        return d
    return d.with_values(d.values * d.stats.std + d.stats.mean, None)


def cross_validate(method: str, pair: Sequence[Dataset], manifest: SplitManifest,
                   rc: RunConfig) -> MetricsReport:
    """Four-fold cross-validation on the target task of ``pair``.

    Fold ``k`` early-stops on manifest fold ``k`` and trains on the other
    three; the test records are scored in original units. The source task
    keeps a fixed held-out slice for its own validation.
    """
    if manifest.num_folds != 4:
        raise ConfigError(f"cross-validation needs exactly 4 folds, manifest has {manifest.num_folds}")
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")
    start = time.perf_counter()
    target, source = prepare_pair(pair, manifest)
    std = target.stats.std
    test = target.subset(manifest.test_indices, f"{target.name}-test")
    split_rng = np.random.default_rng(np.random.SeedSequence([rc.seed, 1 << 20]))
    src_train, src_val = holdout(source, rc.train.val_fraction, split_rng)

    def one_fold(k: int) -> dict:
        val_t = target.subset(manifest.fold_indices(k), f"{target.name}-fold{k}")
        train_idx = np.sort(np.concatenate([manifest.fold_indices(j) for j in range(4) if j != k]))
        train_t = target.subset(train_idx, f"{target.name}-train{k}")
        res = _train(method, [train_t, src_train], [val_t, src_val], rc, _fold_seed(rc.seed, k))
        y_hat = predict(res.model, test, 0)
        return {"fold": k, "test_rmse": rmse(test.values, y_hat) * std,
                "best_epoch": res.best_epoch, "best_val_rmse": res.best_val_rmse * std,
                "epochs_run": res.epochs_run}

    workers = min(_threads(), 4)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            folds = list(pool.map(one_fold, range(4)))
    else:
        folds = [one_fold(k) for k in range(4)]
    folds.sort(key=lambda f: f["fold"])
    scores = [f["test_rmse"] for f in folds]
    return MetricsReport(
        method=method, pair=[pair[0].name, pair[1].name], fold_rmse=scores,
        mean_rmse=float(np.mean(scores)), std_rmse=float(np.std(scores)),
        relative_rmse=1.0 if method == "gate" else None,
        runtime_seconds=time.perf_counter() - start, folds=folds, run_config=rc.to_dict())


def relative_table(reports: Sequence[MetricsReport]) -> list[dict]:
    """GATE mean RMSE divided by each method's mean RMSE (GATE itself is 1.0)."""
    gate = [r for r in reports if r.method == "gate"]
    if not gate:
        raise ConfigError("a GATE report is required for relative RMSE")
    ref = gate[0].mean_rmse
    rows = []
    for r in reports:
        r.relative_rmse = 1.0 if r.method == "gate" else ref / r.mean_rmse
        rows.append({"method": r.method, "pair": "/".join(r.pair), "mean_rmse": r.mean_rmse,
                     "std_rmse": r.std_rmse, "relative_rmse": r.relative_rmse})
    return rows


def table_csv(rows: list[dict]) -> str:
    cols = list(rows[0]) if rows else []
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(_fmt(row[c]) for c in cols))
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


# ------------------------------------------------------------------ PCA


def jacobi_eigh(a: np.ndarray, tol: float = 1e-14, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns eigenvalues in descending order and the matching eigenvectors
    as columns.
    """
    a = np.array(a, dtype=float)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError("jacobi_eigh expects a square matrix")
    if not np.allclose(a, a.T, atol=1e-12 * max(1.0, np.abs(a).max())):
        raise ValueError("jacobi_eigh expects a symmetric matrix")
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    scale = max(np.linalg.norm(a), np.finfo(float).tiny)
    negligible = 1e-17 * scale
    for _ in range(max_sweeps):
        # summed directly: |A|^2 - |diag|^2 cancels when one eigenvalue dominates
        off = math.sqrt(2.0 * np.sum(np.triu(a, 1) ** 2))
        if off <= tol * scale:
            break
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= negligible:
                    continue
                rotated = True
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                # rotate rows/columns p and q
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                a[p, q] = a[q, p] = 0.0
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        if not rotated:
            break
    else:
        raise RuntimeError("Jacobi iteration did not converge")
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


@dataclass
class PCAResult:
    projections: np.ndarray
    eigenvalues: np.ndarray  # full spectrum, descending
    components: np.ndarray  # columns, top-k
    mean: np.ndarray
    covariance: np.ndarray


def pca_project(latents, k: int = 2) -> PCAResult:
    x = np.asarray(latents, dtype=float)
    if x.ndim != 2:
        raise ValueError("latents must be an N x D matrix")
    n, d = x.shape
    if n < k + 1:
        raise ValueError(f"PCA needs at least k+1={k + 1} samples, got {n}")
    if not 1 <= k <= d:
        raise ValueError(f"k must lie in [1, {d}]")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    w, v = jacobi_eigh(cov)
    comps = v[:, :k]
    return PCAResult(xc @ comps, w, comps, mean, cov)


# ------------------------------------------------------------------ experiments


def _gap(res: TrainResult) -> dict:
    """Target-task regression MSE on train and val at the best-val epoch."""
    rec = next(r for r in res.history if r["task"] == 0 and r["epoch"] == res.best_epoch)
    train_mse, val_mse = rec["train_rmse"] ** 2, rec["val_rmse"] ** 2
    return {"best_epoch": res.best_epoch, "train_mse": train_mse, "val_mse": val_mse,
            "gap": val_mse - train_mse}


ABLATIONS = {
    "map": {"beta": 1.0, "gamma": 0.0, "delta": 0.0},
    "map+cons": {"beta": 1.0, "gamma": 1.0, "delta": 0.0},
    "map+cons+dist": {"beta": 1.0, "gamma": 1.0, "delta": 1.0},
}


def ablation_losses(pair: Sequence[Dataset], rc: RunConfig,
                    variants: Sequence[str] = tuple(ABLATIONS)) -> dict:
    """Train GATE once per loss set and collect per-epoch curves.

    The overfit gap is validation MSE minus training MSE of the target task
    (both in eval mode) at the best validation epoch; larger means more
    overfitting.
    """
    target, source = pair
    target = target if target.stats is not None else normalize(target)[0]
    source = source if source.stats is not None else normalize(source)[0]
    out = {"run_config": rc.to_dict(), "variants": {}}
    for name in variants:
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}")
        w = replace(rc.train.weights, **ABLATIONS[name])
        cfg = replace(rc.train, weights=w, seed=rc.seed)
        res = train_gate([target, source], cfg, rc.model)
        curves = [r for r in res.history if r["task"] == 0]
        out["variants"][name] = {**_gap(res), "epochs_run": res.epochs_run, "curve": curves}
    return out


def corruption_experiment(pair: Sequence[Dataset], rc: RunConfig,
                          methods: Sequence[str] = ("gate", "mtl")) -> dict:
    """Train on a corrupted target and score against the values before corruption.

    Only corrupted records that were used for training are scored.
    """
    target, source = pair
    target = target if target.stats is not None else normalize(target)[0]
    source = source if source.stats is not None else normalize(source)[0]
    bad = corrupt(target, rc.seed, rc.corruption_fraction)
    if not bad.corrupted:
        raise ValueError("corruption selected no records; nothing to evaluate")
    split_rng = np.random.default_rng(np.random.SeedSequence([rc.seed, 1 << 21]))
    t_idx, v_idx = holdout_indices(len(bad), rc.train.val_fraction, split_rng)
    t_train, t_val = bad.subset(t_idx), bad.subset(v_idx)
    s_train, s_val = holdout(source, rc.train.val_fraction, split_rng)
    used = set(int(i) for i in t_idx)
    idx = np.array(sorted(i for i in bad.corrupted if i in used))
    if idx.size == 0:
        raise ValueError("no corrupted record landed in the training slice")
    original = np.array([bad.corrupted[i] for i in idx])
    probe = bad.subset(idx, f"{bad.name}-corrupted")
    out = {"run_config": rc.to_dict(), "corrupted_count": len(bad.corrupted),
           "scored_count": int(idx.size), "corrupted_indices": sorted(bad.corrupted), "methods": {}}
    for method in methods:
        res = _train(method, [t_train, s_train], [t_val, s_val], rc, rc.seed)
        y_hat = predict(res.model, probe, 0)
        out["methods"][method] = {
            "mse_original": float(np.mean((y_hat - original) ** 2)),
            "mse_corrupted": float(np.mean((y_hat - probe.values) ** 2)),
            "best_epoch": res.best_epoch}
    return out
