import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gate import autodiff as ad
from gate.autodiff import DimensionError, Value
from gate.losses import (LossWeights, loss_auto, loss_cons, loss_dist, loss_map, loss_reg,
                         loss_total)

from gradcheck import max_rel_error


def sets(rng, m=3, g=4, d=5):
    m_t = Value(rng.standard_normal((g, d)))
    m_s = Value(rng.standard_normal((g, d)))
    mbar_t = [Value(m_t.data + 0.1 * rng.standard_normal((g, d))) for _ in range(m)]
    mbar_s = [Value(m_s.data + 0.1 * rng.standard_normal((g, d))) for _ in range(m)]
    return m_t, m_s, mbar_t, mbar_s


def test_reg_examples():
    assert loss_reg(Value([1.0, 2.0]), Value([1.0, 2.0])).item() == 0.0
    assert loss_reg(Value([1.0, 2.0]), Value([0.0, 0.0])).item() == 2.5
    with pytest.raises(DimensionError):
        loss_reg(Value([1.0, 2.0]), Value([1.0]))


def test_auto_zero_for_identity_round_trip():
    z = Value(np.arange(10.0).reshape(2, 5))
    assert loss_auto(z, Value(z.data.copy())).item() == 0.0


def test_map_example():
    assert loss_map(Value([0.0, 0.0]), Value([3.0, 4.0])).item() == 12.5


def test_cons_pivot_term_is_eps_squared():
    eps = 0.3
    m_s = Value(np.zeros((1, 50)))
    m_t = Value(np.full((1, 50), eps))
    same = [Value(np.zeros((1, 50)))]
    assert loss_cons(m_t, m_s, same, same).item() == pytest.approx(eps ** 2, abs=1e-15)


def test_cons_modes_and_errors():
    rng = np.random.default_rng(0)
    m_t, m_s, mbar_t, mbar_s = sets(rng)
    paired = loss_cons(m_t, m_s, mbar_t, mbar_s, "paired").item()
    literal = loss_cons(m_t, m_s, mbar_t, mbar_s, "algorithm-literal").item()
    expect_paired = np.mean((m_t.data - m_s.data) ** 2) + np.mean(
        [np.mean((a.data - b.data) ** 2) for a, b in zip(mbar_t, mbar_s)])
    expect_literal = np.mean([np.mean((a.data - m_s.data) ** 2) for a in mbar_t])
    assert paired == pytest.approx(expect_paired, rel=1e-14)
    assert literal == pytest.approx(expect_literal, rel=1e-14)
    with pytest.raises(DimensionError):
        loss_cons(m_t, m_s, mbar_t, mbar_s[:-1])
    with pytest.raises(ValueError):
        loss_cons(m_t, m_s, mbar_t, mbar_s, "nope")


def test_dist_vector_and_scalar_against_numpy():
    rng = np.random.default_rng(1)
    m_t, m_s, mbar_t, mbar_s = sets(rng)
    vec = loss_dist(m_t, mbar_t, m_s, mbar_s, "vector").item()
    sca = loss_dist(m_t, mbar_t, m_s, mbar_s, "scalar").item()
    d_t = [m_t.data - a.data for a in mbar_t]
    d_s = [m_s.data - b.data for b in mbar_s]
    assert vec == pytest.approx(np.mean([np.mean((a - b) ** 2) for a, b in zip(d_t, d_s)]), rel=1e-14)
    norms = [np.mean((np.linalg.norm(a, axis=1) - np.linalg.norm(b, axis=1)) ** 2) for a, b in zip(d_t, d_s)]
    assert sca == pytest.approx(np.mean(norms), rel=1e-14)
    with pytest.raises(DimensionError):
        loss_dist(m_t, mbar_t, m_s, [])


def test_sign_flip_separates_distance_modes():
    # the source displacement is the mirror image of the target one
    m_t = Value(np.zeros((2, 3)))
    m_s = Value(np.zeros((2, 3)))
    disp = np.array([[0.1, -0.2, 0.3], [0.0, 0.5, -0.1]])
    mbar_t = [Value(m_t.data + disp)]
    mbar_s = [Value(m_s.data - disp)]
    assert loss_dist(m_t, mbar_t, m_s, mbar_s, "vector").item() > 0
    assert abs(loss_dist(m_t, mbar_t, m_s, mbar_s, "scalar").item()) <= 1e-12


def test_total_examples():
    parts = [Value(v) for v in (0.1, 0.2, 0.3, 0.4, 0.5)]
    assert loss_total(*parts, LossWeights(0, 0, 0, 0)).total.item() == 0.1
    assert loss_total(*parts, LossWeights(1, 1, 1, 1)).total.item() == pytest.approx(1.5, abs=1e-15)
    # weights bind by name: only beta (map) is nonzero here
    assert loss_total(*parts, LossWeights(0, 1, 0, 0)).total.item() == pytest.approx(0.1 + 0.3)
    with pytest.raises(ValueError):
        LossWeights(delta=-1.0)
    with pytest.raises(ValueError):
        LossWeights(alpha=float("nan"))


def test_delta_zero_detaches_distance_path():
    rng = np.random.default_rng(2)
    m_t, m_s, mbar_t, mbar_s = sets(rng)
    probe = Value(mbar_t[0].data.copy(), requires_grad=True)
    zero = Value(0.0)
    with ad.Tape() as tape:
        dist = loss_dist(m_t, [probe] + mbar_t[1:], m_s, mbar_s)
        total = loss_total(zero, zero, zero, zero, dist, LossWeights(1, 1, 1, 0)).total
    ad.backward(tape, total)
    assert np.all(probe.grad == 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.floats(-5, 5), st.integers(0, 2**31 - 1))
def test_translation_invariance_and_nonnegativity(m, g, shift, seed):
    rng = np.random.default_rng(seed)
    m_t, m_s, mbar_t, mbar_s = sets(rng, m=m, g=g)
    c = Value(np.full(m_t.shape, shift))
    moved_t = ad.add(m_t, c)
    moved_bar = [ad.add(a, c) for a in mbar_t]
    for mode in ("vector", "scalar"):
        before = loss_dist(m_t, mbar_t, m_s, mbar_s, mode).item()
        after = loss_dist(moved_t, moved_bar, m_s, mbar_s, mode).item()
        # differences cancel the shift; only float rounding of (x + c) - (y + c) remains
        assert after == pytest.approx(before, rel=1e-9, abs=1e-12)
        assert before >= 0
    for mode in ("paired", "algorithm-literal"):
        assert loss_cons(m_t, m_s, mbar_t, mbar_s, mode).item() >= 0
    assert loss_reg(Value(rng.standard_normal(g)), Value(rng.standard_normal(g))).item() >= 0


def test_exact_translation_invariance_with_representable_shift():
    rng = np.random.default_rng(3)
    m_t, m_s, mbar_t, mbar_s = sets(rng)
    # a power-of-two shift on dyadic data is exact in binary floating point
    q = lambda v: Value(np.round(v.data * 1024) / 1024)  # noqa: E731
    m_t, m_s = q(m_t), q(m_s)
    mbar_t, mbar_s = [q(a) for a in mbar_t], [q(b) for b in mbar_s]
    shifted = Value(m_t.data + 4.0)
    shifted_bar = [Value(a.data + 4.0) for a in mbar_t]
    for mode in ("vector", "scalar"):
        assert (loss_dist(m_t, mbar_t, m_s, mbar_s, mode).item()
                == loss_dist(shifted, shifted_bar, m_s, mbar_s, mode).item())


@pytest.mark.parametrize("mode", ["vector", "scalar"])
def test_dist_gradients(mode):
    rng = np.random.default_rng(4)
    m_t, m_s, mbar_t, mbar_s = sets(rng)
    for v in [m_t, m_s, *mbar_t, *mbar_s]:
        v.requires_grad = True
    params = [m_t, m_s, mbar_t[0], mbar_s[1]]
    assert max_rel_error(lambda: loss_dist(m_t, mbar_t, m_s, mbar_s, mode), params) < 1e-6


@pytest.mark.parametrize("mode", ["paired", "algorithm-literal"])
def test_cons_gradients(mode):
    rng = np.random.default_rng(5)
    m_t, m_s, mbar_t, mbar_s = sets(rng)
    for v in [m_t, m_s, *mbar_t, *mbar_s]:
        v.requires_grad = True
    params = [m_t, m_s, mbar_t[2], mbar_s[0]]
    assert max_rel_error(lambda: loss_cons(m_t, m_s, mbar_t, mbar_s, mode), params) < 1e-6
