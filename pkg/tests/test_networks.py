import numpy as np
import pytest

from gate import autodiff as ad
from gate.autodiff import Value
from gate.dmpnn import batch_graphs
from gate.networks import (MLP, ConfigError, GateModel, ModelConfig, MTLModel, PerturbConfig, STLModel,
                           load_checkpoint, perturb, perturb_stacked, save_checkpoint)
from gate.smiles import featurize, parse_smiles
from gate.training import TrainConfig, gate_losses

from gradcheck import max_rel_error

TINY = ModelConfig(embed_hidden=8, embed_out=8, backbone_hidden=8, backbone_out=8, bottleneck_hidden=4,
                   latent=4, transfer_hidden=(8, 8), head_hidden=(4,))
SMILES = ["CCO", "c1ccccc1C", "CC(=O)N", "C1CC1"]


def batch(smiles=SMILES):
    return batch_graphs([featurize(parse_smiles(s)) for s in smiles])


def test_default_widths():
    cfg = ModelConfig()
    m = GateModel(cfg, 2, 0)
    nets = m.tasks[0]
    assert nets.transfer_net.widths == [50, 100, 100, 100, 50]
    assert nets.head.widths == [50, 25, 12, 1]
    assert nets.encoder.bottleneck.widths == [100, 50, 50]
    assert nets.encoder.backbone.hidden == 200 and nets.encoder.backbone.out == 100
    assert cfg.transfer_dropout == 0.2 and cfg.head_dropout == 0.2


def test_config_validation_and_scaling():
    with pytest.raises(ConfigError):
        ModelConfig(latent=0)
    with pytest.raises(ConfigError):
        ModelConfig(head_dropout=1.0)
    q = ModelConfig().scaled(0.25)
    assert (q.backbone_hidden, q.backbone_out, q.latent, q.transfer_hidden) == (50, 25, 12, (25, 25, 25))
    assert ModelConfig.from_dict(q.to_dict()) == q
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        PerturbConfig(count=0)
    with pytest.raises(ConfigError):
        PerturbConfig(sigma=0.0)


def test_shapes_through_pipeline():
    m = GateModel(TINY, 2, 1)
    b = batch()
    a = m.embed(b)
    z = m.tasks[0].encode(b, a)
    mm = m.tasks[0].transfer(z)
    assert z.shape == (4, 4) and mm.shape == (4, 4)
    assert m.tasks[0].inverse_transfer(mm).shape == (4, 4)
    assert m.predict(b, 1).shape == (4,)
    assert np.allclose(a.pooled.data, b.pool @ a.nodes.data)


def test_mlp_dropout_only_on_hidden_layers():
    mlp = MLP([3, 5, 2], 0.5, np.random.default_rng(0), "m")
    x = Value(np.ones((4, 3)))
    eval_out = mlp(x).data
    assert np.array_equal(eval_out, mlp(x, False, None).data)
    train_out = mlp(x, True, np.random.default_rng(1)).data
    assert not np.array_equal(eval_out, train_out)


def test_parameter_sharing_counts():
    cfg = ModelConfig().scaled(0.25)
    stl = STLModel(cfg, 1, 0).num_parameters()
    mtl = MTLModel(cfg, 2, 0).num_parameters()
    assert mtl < 2 * stl
    names = [n for n, _ in GateModel(cfg, 2, 0).named_parameters()]
    assert len(names) == len(set(names))


def test_perturb_contract():
    m = GateModel(TINY, 2, 0)
    b = batch()
    with ad.no_grad():
        a = m.embed(b)
    cfg = PerturbConfig(count=3, sigma=0.01)
    sets = perturb(a, b, cfg, np.random.default_rng(5))
    again = perturb(a, b, cfg, np.random.default_rng(5))
    assert len(sets) == 3
    for p, q in zip(sets, again):
        assert np.array_equal(p.nodes.data, q.nodes.data)
        assert p.edges is a.edges
        assert np.allclose(p.pooled.data, b.pool @ p.nodes.data)
    tiled, stacked = perturb_stacked(a, b, cfg, np.random.default_rng(5))
    v = b.num_nodes
    assert np.array_equal(stacked.nodes.data[:v], a.nodes.data)
    for j, p in enumerate(sets):
        assert np.array_equal(stacked.nodes.data[(j + 1) * v:(j + 2) * v], p.nodes.data)
    assert tiled.num_graphs == 4 * b.num_graphs


def test_perturbation_mean_clt_bound():
    m = GateModel(TINY, 2, 0)
    b = batch(["C"])
    with ad.no_grad():
        a = m.embed(b)
    sigma, n = 0.01, 100_000
    sets = perturb(a, b, PerturbConfig(count=n, sigma=sigma), np.random.default_rng(9))
    vals = np.array([p.nodes.data[0, 0] for p in sets])
    assert abs(vals.mean() - a.nodes.data[0, 0]) <= 3 * sigma / np.sqrt(n)


def test_checkpoint_round_trip_is_byte_exact():
    for model in (GateModel(TINY, 2, 3), STLModel(TINY, 1, 3), MTLModel(TINY, 2, 3)):
        blob = save_checkpoint(model, {"note": "x", "value": 0.1})
        loaded, extra = load_checkpoint(blob)
        assert extra == {"note": "x", "value": 0.1}
        assert save_checkpoint(loaded, extra) == blob
        b = batch()
        with ad.no_grad():
            assert np.array_equal(model.predict(b).data, loaded.predict(b).data)
    assert blob[:8] == b"GATECKPT"
    with pytest.raises(ConfigError):
        load_checkpoint(b"NOTACKPT" + blob[8:])
    with pytest.raises(ConfigError):
        load_checkpoint(blob + b"\0" * 8)


def _loss_fn(model, b, y, task, cfg, training):
    def loss():
        return gate_losses(model, b, y, task, cfg, np.random.default_rng(11),
                           np.random.default_rng(12) if training else None, training).total
    return loss


@pytest.mark.parametrize("task", [0, 1])
def test_full_two_task_total_gradient(task):
    model = GateModel(TINY, 2, 4)
    b = batch(["CCO", "c1ccoc1", "CN"])
    y = np.array([0.5, -1.0, 0.2])
    cfg = TrainConfig(perturb=PerturbConfig(count=2, sigma=0.05))
    err = max_rel_error(_loss_fn(model, b, y, task, cfg, True), model.parameters(), h=1e-6)
    assert err < 1e-4


@pytest.mark.parametrize("mode", [("algorithm-literal", "scalar")])
def test_alternate_modes_gradient(mode):
    model = GateModel(TINY, 2, 6)
    b = batch(["CCO", "CN"])
    y = np.array([0.5, -1.0])
    cfg = TrainConfig(perturb=PerturbConfig(count=2, sigma=0.05), cons_mode=mode[0], dist_mode=mode[1])
    params = model.tasks[0].parameters() + model.tasks[1].transfer_net.parameters()
    assert max_rel_error(_loss_fn(model, b, y, 0, cfg, False), params, h=1e-6) < 1e-4


@pytest.mark.parametrize("cls", [STLModel, MTLModel])
def test_baseline_gradients(cls):
    model = cls(TINY, 2 if cls is MTLModel else 1, 2)
    b = batch()
    y = Value(np.array([0.1, 0.2, -0.3, 1.0]))
    assert max_rel_error(lambda: ad.mse(model.forward(b, 0), y), model.parameters(), h=1e-6) < 1e-4


def test_every_network_receives_gradient():
    model = GateModel(ModelConfig().scaled(0.25), 2, 0)
    b = batch()
    cfg = TrainConfig()
    model.zero_grad()
    for task in (0, 1):
        with ad.Tape() as tape:
            total = gate_losses(model, b, np.array([0.3, -0.2, 1.0, 0.0]), task, cfg,
                                np.random.default_rng(task), np.random.default_rng(9), True).total
        ad.backward(tape, total)
    groups = {"embedding": model.embedding.parameters()}
    for k, nets in enumerate(model.tasks):
        for part in ("encoder", "transfer_net", "inverse_net", "head"):
            groups[f"{part}{k}"] = getattr(nets, part).parameters()
    for name, params in groups.items():
        assert any(p.grad is not None and np.any(p.grad != 0) for p in params), name
