"""Datasets, normalization, splits, label corruption and a synthetic task pair."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .smiles import MolGraph, SmilesError, featurize, parse_smiles, scaffold_key

log = logging.getLogger(__name__)

NUM_FOLDS = 4
TEST_FRACTION = 0.2


class LoadError(ValueError):
    pass


class NormalizationError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise NormalizationError(f"std must be positive, got {self.std}")


@dataclass
class Dataset:
    name: str
    smiles: list[str]
    values: np.ndarray
    stats: NormStats | None = None
    dropped: int = 0
    # index -> label before corruption
    corrupted: dict[int, float] = field(default_factory=dict)
    _graphs: list[MolGraph] | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if len(self.smiles) != len(self.values):
            raise ValueError("smiles and values differ in length")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"{self.name}: non-finite label values")

    def __len__(self) -> int:
        return len(self.smiles)

    @property
    def graphs(self) -> list[MolGraph]:
        if self._graphs is None:
            self._graphs = [featurize(parse_smiles(s)) for s in self.smiles]
        return self._graphs

    def subset(self, indices, name: str | None = None) -> "Dataset":
        idx = [int(i) for i in indices]
        graphs = None if self._graphs is None else [self._graphs[i] for i in idx]
        return Dataset(name or self.name, [self.smiles[i] for i in idx], self.values[idx].copy(),
                       self.stats, 0, {}, graphs)

    def with_values(self, values: np.ndarray, stats: NormStats | None = None) -> "Dataset":
        return Dataset(self.name, list(self.smiles), values, stats if stats is not None else self.stats,
                       self.dropped, dict(self.corrupted), self._graphs)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["smiles", "value"])
            for s, v in zip(self.smiles, self.values):
                w.writerow([s, repr(float(v))])


def load_csv(path, name: str | None = None) -> Dataset:
    """Read a ``smiles,value`` CSV; rows whose SMILES fail to parse are dropped."""
    path = Path(path)
    smiles, values, dropped = [], [], 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != ["smiles", "value"]:
            raise LoadError(f"{path}: line 1: expected header 'smiles,value', got {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise LoadError(f"{path}: line {lineno}: expected 2 columns, got {len(row)}")
            s, raw = row[0].strip(), row[1].strip()
            try:
                value = float(raw)
            except ValueError:
                raise LoadError(f"{path}: line {lineno}: non-numeric value {raw!r}") from None
            if not math.isfinite(value):
                raise LoadError(f"{path}: line {lineno}: non-finite value {raw!r}")
            try:
                parse_smiles(s)
            except SmilesError as exc:
                log.warning("%s: line %d: dropping %r (%s)", path, lineno, s, exc)
                dropped += 1
                continue
            smiles.append(s)
            values.append(value)
    if dropped:
        log.info("%s: dropped %d unparseable rows", path, dropped)
    return Dataset(name or path.stem, smiles, np.array(values), dropped=dropped)


def normalize(d: Dataset, stats: NormStats | None = None) -> tuple[Dataset, NormStats]:
    """Standardize labels with population statistics (or the ones supplied)."""
    if stats is None:
        if len(np.unique(d.values)) < 2:
            raise NormalizationError(f"{d.name}: need at least two distinct values")
        stats = NormStats(float(d.values.mean()), float(d.values.std()))
    return d.with_values((d.values - stats.mean) / stats.std, stats), stats


def denormalize(y, stats: NormStats):
    return np.asarray(y) * stats.std + stats.mean if np.ndim(y) else float(y) * stats.std + stats.mean


# ------------------------------------------------------------------ splits


@dataclass
class SplitManifest:
    name: str
    mode: str
    seed: int
    folds: np.ndarray  # fold id per record; -1 for test records
    corrupted: list[int] = field(default_factory=list)

    @property
    def test_indices(self) -> np.ndarray:
        return np.flatnonzero(self.folds < 0)

    @property
    def train_indices(self) -> np.ndarray:
        return np.flatnonzero(self.folds >= 0)

    def fold_indices(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.folds == k)

    @property
    def num_folds(self) -> int:
        return int(self.folds.max()) + 1 if (self.folds >= 0).any() else 0

    def to_json(self) -> str:
        assignments = [
            {"index": i, "fold": int(f) if f >= 0 else None, "role": "train" if f >= 0 else "test"}
            for i, f in enumerate(self.folds)
        ]
        return json.dumps({"name": self.name, "mode": self.mode, "seed": self.seed,
                           "assignments": assignments, "corrupted": list(self.corrupted)}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        d = json.loads(text)
        folds = np.full(len(d["assignments"]), -1, dtype=np.int64)
        for a in d["assignments"]:
            folds[a["index"]] = -1 if a["role"] == "test" else a["fold"]
        return cls(d["name"], d["mode"], d["seed"], folds, list(d.get("corrupted", [])))

    def __eq__(self, other) -> bool:
        return (isinstance(other, SplitManifest) and self.name == other.name and self.mode == other.mode
                and self.seed == other.seed and np.array_equal(self.folds, other.folds)
                and self.corrupted == other.corrupted)


def _check_size(d: Dataset) -> None:
    if len(d) < 10:
        raise SplitError(f"{d.name}: need at least 10 records to split, got {len(d)}")


def split_random(d: Dataset, seed: int) -> SplitManifest:
    """80:20 train/test with four uniformly random folds inside train."""
    _check_size(d)
    n = len(d)
    order = np.random.default_rng(seed).permutation(n)
    n_test = int(round(TEST_FRACTION * n))
    folds = np.empty(n, dtype=np.int64)
    folds[order[:n_test]] = -1
    folds[order[n_test:]] = np.arange(n - n_test) % NUM_FOLDS
    return SplitManifest(d.name, "random", seed, folds)


def split_scaffold(d: Dataset, seed: int) -> SplitManifest:
    """Keep every scaffold group on one side; groups fill bins largest-first."""
    _check_size(d)
    groups: dict[str, list[int]] = {}
    for i, g in enumerate(d.graphs):
        groups.setdefault(scaffold_key(g), []).append(i)
    if len(groups) < NUM_FOLDS + 1:
        raise SplitError(f"{d.name}: only {len(groups)} scaffold groups for {NUM_FOLDS} folds "
                         "plus a test set; use random mode")
    rng = np.random.default_rng(seed)
    keys = sorted(groups)
    tiebreak = rng.permutation(len(keys))
    ordered = sorted(range(len(keys)), key=lambda k: (-len(groups[keys[k]]), tiebreak[k]))
    n = len(d)
    folds = np.empty(n, dtype=np.int64)
    # test set first: greedily take the largest groups that still fit
    need = int(round(TEST_FRACTION * n))
    rest = []
    for k in ordered:
        members = groups[keys[k]]
        if len(members) <= need:
            folds[members] = -1
            need -= len(members)
        else:
            rest.append(members)
    # remaining groups go to whichever train fold is furthest below its quota
    quota = sum(len(m) for m in rest) / NUM_FOLDS
    filled = np.zeros(NUM_FOLDS)
    for members in rest:
        b = int(np.argmax(quota - filled))
        filled[b] += len(members)
        folds[members] = b
    return SplitManifest(d.name, "scaffold", seed, folds)


def make_split(d: Dataset, mode: str, seed: int) -> SplitManifest:
    if mode == "random":
        return split_random(d, seed)
    if mode == "scaffold":
        return split_scaffold(d, seed)
    raise SplitError(f"unknown split mode {mode!r}")


# ------------------------------------------------------------------ corruption


def corrupt(d: Dataset, seed: int, fraction: float = 1.0) -> Dataset:
    """Flip labels beyond one std to twice the std with the opposite sign.

    ``d`` must already be normalized.  The returned dataset records the
    original label of every corrupted index in ``corrupted``.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    candidates = np.flatnonzero(np.abs(d.values) > 1.0)
    if len(candidates) == 0:
        log.warning("%s: no labels outside one standard deviation; nothing corrupted", d.name)
        return d.with_values(d.values.copy())
    rng = np.random.default_rng(seed)
    count = int(round(fraction * len(candidates)))
    chosen = np.sort(rng.choice(candidates, size=count, replace=False))
    values = d.values.copy()
    values[chosen] = -2.0 * np.sign(values[chosen])
    out = d.with_values(values)
    out.corrupted = {int(i): float(d.values[i]) for i in chosen}
    return out


# ------------------------------------------------------------------ synthetic pair

_CHAIN_ATOMS = ("C", "C", "C", "C", "N", "O")
_BRANCHES = ("(C)", "(O)", "(F)", "(Cl)", "(=O)", "(N)", "(CC)")
_RINGS = ("c{0}ccccc{0}", "C{0}CCCCC{0}", "c{0}ccncc{0}", "C{0}CCCC{0}", "c{0}ccoc{0}", "C{0}CCNCC{0}",
          "c{0}ccsc{0}")


def random_smiles(rng: np.random.Generator) -> str:
    """A small random molecule: chains, branches and up to two rings."""
    parts: list[str] = []
    ring_id = 1
    n_frag = int(rng.integers(1, 4))
    for _ in range(n_frag):
        if rng.random() < 0.4 and ring_id <= 2:
            parts.append(_RINGS[int(rng.integers(len(_RINGS)))].format(ring_id))
            ring_id += 1
            continue
        for _ in range(int(rng.integers(1, 4))):
            atom = _CHAIN_ATOMS[int(rng.integers(len(_CHAIN_ATOMS)))]
            if parts and parts[-1] in ("N", "O") and atom in ("N", "O"):
                atom = "C"
            parts.append(atom)
            if atom == "C" and rng.random() < 0.3:
                parts.append(_BRANCHES[int(rng.integers(len(_BRANCHES)))])
    smiles = "".join(parts)
    return smiles


def descriptor(g: MolGraph) -> tuple[float, float, float]:
    """(heavy-atom count, ring count, heteroatom fraction)."""
    n = g.num_atoms
    rings = len(g.bonds) - n + 1
    hetero = sum(1 for a in g.atoms if a.element != "C") / n
    return float(n), float(rings), hetero


def _standardize(x: np.ndarray) -> np.ndarray:
    sd = x.std()
    return (x - x.mean()) / sd if sd > 0 else x - x.mean()


def synth_pair(n_target: int, n_source: int, rho: float, seed: int,
               noise: float = 0.1) -> tuple[Dataset, Dataset]:
    """Two correlated regression tasks over one pool of random molecules.

    The latent score ``u`` is a standardized mix of atom count, ring count and
    heteroatom fraction.  Target labels are ``u + e_t``; source labels are
    ``rho*u + sqrt(1-rho^2)*w + e_s`` with ``w`` standard normal and the
    ``e`` terms ``N(0, noise^2)``.  The target molecules are the first
    ``n_target`` of the pool and the source molecules the first ``n_source``,
    so the smaller set is shared by both tasks.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    rng = np.random.default_rng(seed)
    n = max(n_target, n_source)
    smiles = [random_smiles(rng) for _ in range(n)]
    graphs = [featurize(parse_smiles(s)) for s in smiles]
    desc = np.array([descriptor(g) for g in graphs])
    u = _standardize(sum(_standardize(desc[:, k]) for k in range(3)))
    w = rng.standard_normal(n)
    y_t = u + noise * rng.standard_normal(n)
    y_s = rho * u + math.sqrt(max(0.0, 1.0 - rho * rho)) * w + noise * rng.standard_normal(n)
    target = Dataset("target", smiles[:n_target], y_t[:n_target], _graphs=graphs[:n_target])
    source = Dataset("source", smiles[:n_source], y_s[:n_source], _graphs=graphs[:n_source])
    return target, source
