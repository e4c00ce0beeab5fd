"""Model zoo: shared embedding, per-task encoder/transfer/inverse/head, baselines.

Default widths follow the network-size table of the method:

=================  ==================  ===========  =======
network            input, output       hidden       dropout
=================  ==================  ===========  =======
backbone (DMPNN)   embedding, 100      200          0
bottleneck (MLP)   100, 50             50           0
transfer (MLP)     50, 50              100,100,100  0.2
inverse transfer   50, 50              100,100,100  0.2
head (MLP)         50, 1               25,12        0.2
=================  ==================  ===========  =======
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, fields, replace
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Value
from .dmpnn import DMPNN, GraphBatch, GraphRepr, xavier_uniform
from .smiles import EDGE_FEATURES, NODE_FEATURES

__all__ = [
    "ModelConfig", "PerturbConfig", "Linear", "MLP", "Encoder", "TaskNetworks",
    "GateModel", "STLModel", "MTLModel", "perturb", "perturb_stacked",
    "save_checkpoint", "load_checkpoint", "xavier_uniform",
]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    node_features: int = NODE_FEATURES
    edge_features: int = EDGE_FEATURES
    embed_hidden: int = 200
    embed_out: int = 200
    depth: int = 2
    backbone_hidden: int = 200
    backbone_out: int = 100
    bottleneck_hidden: int = 50
    latent: int = 50
    transfer_hidden: tuple[int, ...] = (100, 100, 100)
    head_hidden: tuple[int, ...] = (25, 12)
    transfer_dropout: float = 0.2
    head_dropout: float = 0.2

    def __post_init__(self):
        widths = [self.node_features, self.edge_features, self.embed_hidden, self.embed_out,
                  self.backbone_hidden, self.backbone_out, self.bottleneck_hidden, self.latent,
                  *self.transfer_hidden, *self.head_hidden]
        if any(int(w) != w or w < 1 for w in widths):
            raise ConfigError(f"all widths must be positive integers: {widths}")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        for rate in (self.transfer_dropout, self.head_dropout):
            if not 0.0 <= rate < 1.0:
                raise ConfigError(f"dropout rate {rate} outside [0, 1)")
        object.__setattr__(self, "transfer_hidden", tuple(self.transfer_hidden))
        object.__setattr__(self, "head_hidden", tuple(self.head_hidden))

    def scaled(self, factor: float) -> "ModelConfig":
        """Shrink every hidden/latent width by ``factor`` (input widths unchanged)."""
        def s(w: int) -> int:
            return max(1, int(round(w * factor)))
        return replace(
            self,
            embed_hidden=s(self.embed_hidden), embed_out=s(self.embed_out),
            backbone_hidden=s(self.backbone_hidden), backbone_out=s(self.backbone_out),
            bottleneck_hidden=s(self.bottleneck_hidden), latent=s(self.latent),
            transfer_hidden=tuple(s(w) for w in self.transfer_hidden),
            head_hidden=tuple(s(w) for w in self.head_hidden),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["transfer_hidden"] = list(self.transfer_hidden)
        d["head_hidden"] = list(self.head_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class PerturbConfig:
    count: int = 10
    sigma: float = 0.01

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError("perturbation count must be >= 1")
        if not self.sigma > 0:
            raise ConfigError("perturbation sigma must be > 0")


class Module:
    """Ordered container of named parameters."""

    def named_parameters(self) -> Iterator[tuple[str, Value]]:
        for key, val in vars(self).items():
            if isinstance(val, Value) and val.requires_grad:
                yield val.name or key, val
            elif isinstance(val, DMPNN):
                for p in val.parameters():
                    yield p.name, p
            elif isinstance(val, Module):
                yield from val.named_parameters()
            elif isinstance(val, list):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.named_parameters()

    def parameters(self) -> list[Value]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def load_state(self, arrays: list[np.ndarray]) -> None:
        params = self.parameters()
        if len(arrays) != len(params):
            raise ConfigError(f"state has {len(arrays)} arrays, model has {len(params)}")
        for p, a in zip(params, arrays):
            if p.shape != a.shape:
                raise ConfigError(f"{p.name}: shape {a.shape} does not match {p.shape}")
            p.data = np.array(a, dtype=np.float64)


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, name: str):
        self.weight = Value(xavier_uniform(rng, fan_in, fan_out), True, f"{name}.weight")
        self.bias = Value(np.zeros(fan_out), True, f"{name}.bias")

    def __call__(self, x: Value) -> Value:
        return ad.add(ad.matmul(x, self.weight), self.bias)


class MLP(Module):
    """ReLU between layers, linear output, dropout after each hidden activation."""

    def __init__(self, widths: list[int], dropout: float, rng: np.random.Generator, name: str):
        if len(widths) < 2:
            raise ConfigError("an MLP needs at least input and output widths")
        self.widths = list(widths)
        self.dropout = dropout
        self.layers = [Linear(a, b, rng, f"{name}.{k}") for k, (a, b) in enumerate(zip(widths, widths[1:]))]

    def __call__(self, x: Value, training: bool = False, rng: np.random.Generator | None = None) -> Value:
        if x.shape[-1] != self.widths[0]:
            raise DimensionError(f"MLP expects width {self.widths[0]}, got {x.shape[-1]}")
        for k, layer in enumerate(self.layers):
            x = layer(x)
            if k < len(self.layers) - 1:
                x = ad.dropout(ad.relu(x), self.dropout, rng, training)
        return x


class Encoder(Module):
    """DMPNN backbone over the embedding, then the bottleneck MLP on pooled states."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, name: str):
        self.backbone = DMPNN(cfg.embed_out, cfg.embed_hidden, cfg.backbone_hidden,
                              cfg.backbone_out, cfg.depth, rng, f"{name}.backbone")
        self.bottleneck = MLP([cfg.backbone_out, cfg.bottleneck_hidden, cfg.latent], 0.0, rng,
                              f"{name}.bottleneck")

    def __call__(self, batch: GraphBatch, a: GraphRepr) -> Value:
        rep = self.backbone(batch, a.nodes, a.edges)
        return self.bottleneck(rep.pooled)


class TaskNetworks(Module):
    """Encoder, transfer, inverse transfer and head for one task."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, name: str):
        self.encoder = Encoder(cfg, rng, f"{name}.encoder")
        widths = [cfg.latent, *cfg.transfer_hidden, cfg.latent]
        self.transfer_net = MLP(widths, cfg.transfer_dropout, rng, f"{name}.transfer")
        self.inverse_net = MLP(widths, cfg.transfer_dropout, rng, f"{name}.inverse")
        self.head = MLP([cfg.latent, *cfg.head_hidden, 1], cfg.head_dropout, rng, f"{name}.head")

    def encode(self, batch: GraphBatch, a: GraphRepr) -> Value:
        return self.encoder(batch, a)

    def transfer(self, z: Value, training: bool = False, rng=None) -> Value:
        return self.transfer_net(z, training, rng)

    def inverse_transfer(self, m: Value, training: bool = False, rng=None) -> Value:
        return self.inverse_net(m, training, rng)

    def predict(self, z: Value, training: bool = False, rng=None) -> Value:
        """Head output as a ``[G]`` vector."""
        out = self.head(z, training, rng)
        return ad.reshape(out, (out.shape[0],))


def _embedding(cfg: ModelConfig, rng: np.random.Generator) -> DMPNN:
    return DMPNN(cfg.node_features, cfg.edge_features, cfg.embed_hidden, cfg.embed_out,
                 cfg.depth, rng, "embedding")


class _Model(Module):
    kind = "model"

    def __init__(self, cfg: ModelConfig, seed: int):
        self.config = cfg
        self.seed = seed

    def embed(self, batch: GraphBatch) -> GraphRepr:
        return self.embedding(batch)


class GateModel(_Model):
    """One shared embedding plus a :class:`TaskNetworks` per task."""

    kind = "gate"

    def __init__(self, cfg: ModelConfig, num_tasks: int = 2, seed: int = 0):
        super().__init__(cfg, seed)
        rng = np.random.default_rng(seed)
        self.embedding = _embedding(cfg, rng)
        self.tasks = [TaskNetworks(cfg, rng, f"task{k}") for k in range(num_tasks)]

    def predict(self, batch: GraphBatch, task: int = 0) -> Value:
        nets = self.tasks[task]
        return nets.predict(nets.encode(batch, self.embed(batch)))

    def latent(self, batch: GraphBatch, task: int = 0) -> Value:
        return self.tasks[task].encode(batch, self.embed(batch))


class STLModel(_Model):
    """Embedding, encoder and head for a single task."""

    kind = "stl"

    def __init__(self, cfg: ModelConfig, num_tasks: int = 1, seed: int = 0):
        super().__init__(cfg, seed)
        rng = np.random.default_rng(seed)
        self.embedding = _embedding(cfg, rng)
        self.encoder = Encoder(cfg, rng, "encoder")
        self.head = MLP([cfg.latent, *cfg.head_hidden, 1], cfg.head_dropout, rng, "head")

    def forward(self, batch: GraphBatch, task: int = 0, training: bool = False, rng=None) -> Value:
        out = self.head(self.encoder(batch, self.embed(batch)), training, rng)
        return ad.reshape(out, (out.shape[0],))

    def predict(self, batch: GraphBatch, task: int = 0) -> Value:
        return self.forward(batch, task)

    def latent(self, batch: GraphBatch, task: int = 0) -> Value:
        return self.encoder(batch, self.embed(batch))


class MTLModel(_Model):
    """Shared embedding, backbone and bottleneck; one head per task."""

    kind = "mtl"

    def __init__(self, cfg: ModelConfig, num_tasks: int = 2, seed: int = 0):
        super().__init__(cfg, seed)
        rng = np.random.default_rng(seed)
        self.embedding = _embedding(cfg, rng)
        self.encoder = Encoder(cfg, rng, "encoder")
        self.heads = [MLP([cfg.latent, *cfg.head_hidden, 1], cfg.head_dropout, rng, f"head{k}")
                      for k in range(num_tasks)]

    def forward(self, batch: GraphBatch, task: int = 0, training: bool = False, rng=None) -> Value:
        out = self.heads[task](self.encoder(batch, self.embed(batch)), training, rng)
        return ad.reshape(out, (out.shape[0],))

    def predict(self, batch: GraphBatch, task: int = 0) -> Value:
        return self.forward(batch, task)

    def latent(self, batch: GraphBatch, task: int = 0) -> Value:
        return self.encoder(batch, self.embed(batch))


MODEL_KINDS = {cls.kind: cls for cls in (GateModel, STLModel, MTLModel)}


def build_model(kind: str, cfg: ModelConfig, num_tasks: int, seed: int):
    try:
        cls = MODEL_KINDS[kind]
    except KeyError:
        raise ConfigError(f"unknown model kind {kind!r}") from None
    return cls(cfg, num_tasks, seed)


# ------------------------------------------------------------------ perturbation


def _noise(a: GraphRepr, cfg: PerturbConfig, rng: np.random.Generator) -> np.ndarray:
    v, h = a.nodes.shape
    return rng.normal(0.0, cfg.sigma, size=(cfg.count, v, h))


def perturb(a: GraphRepr, batch: GraphBatch, cfg: PerturbConfig, rng: np.random.Generator) -> list[GraphRepr]:
    """``cfg.count`` copies of ``a`` with Gaussian noise on every node state."""
    noise = _noise(a, cfg, rng)
    out = []
    for eps in noise:
        nodes = ad.add(a.nodes, Value(eps))
        out.append(GraphRepr(nodes, a.edges, ad.spmm(batch.pool, nodes)))
    return out


def perturb_stacked(a: GraphRepr, batch: GraphBatch, cfg: PerturbConfig,
                    rng: np.random.Generator) -> tuple[GraphBatch, GraphRepr]:
    """The pivot and its perturbations as one tiled batch.

    Copy 0 is ``a`` itself; copy ``j >= 1`` is perturbation ``j - 1``, using
    the same noise draws as :func:`perturb` for an identically seeded ``rng``.
    """
    noise = _noise(a, cfg, rng)
    copies = cfg.count + 1
    tiled = batch.tile(copies)
    v, h = a.nodes.shape
    offsets = np.concatenate([np.zeros((1, v, h)), noise]).reshape(copies * v, h)
    nodes = ad.add(ad.tile_rows(a.nodes, copies), Value(offsets))
    # edge states are shared by every replica; consumers repeat them as needed
    return tiled, GraphRepr(nodes, a.edges, ad.spmm(tiled.pool, nodes))


# ------------------------------------------------------------------ checkpoints

_MAGIC = b"GATECKPT"


def save_checkpoint(model: _Model, extra: dict | None = None) -> bytes:
    """Serialize ``model`` as magic, header length, JSON header, f64 blob."""
    named = list(model.named_parameters())
    header = {
        "kind": model.kind,
        "num_tasks": _num_tasks(model),
        "seed": model.seed,
        "config": model.config.to_dict(),
        "parameters": [{"name": n, "shape": list(p.shape)} for n, p in named],
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<Q", len(head)))
    buf.write(head)
    for _, p in named:
        buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return buf.getvalue()


def load_checkpoint(blob: bytes):
    """Inverse of :func:`save_checkpoint`; returns ``(model, extra)``."""
    if blob[:8] != _MAGIC:
        raise ConfigError("not a checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + n].decode("utf-8"))
    cfg = ModelConfig.from_dict(header["config"])
    model = build_model(header["kind"], cfg, header["num_tasks"], header["seed"])
    offset = 16 + n
    arrays = []
    for spec in header["parameters"]:
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(spec["shape"])
        arrays.append(arr.astype(np.float64))
        offset += 8 * count
    if offset != len(blob):
        raise ConfigError("trailing bytes after parameter blob")
    names = [name for name, _ in model.named_parameters()]
    if names != [s["name"] for s in header["parameters"]]:
        raise ConfigError("parameter names in checkpoint do not match the model")
    model.load_state(arrays)
    return model, header["extra"]


def _num_tasks(model: _Model) -> int:
    if isinstance(model, GateModel):
        return len(model.tasks)
    if isinstance(model, MTLModel):
        return len(model.heads)
    return 1
