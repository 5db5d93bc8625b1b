import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qfeedsim.signals import (
    MomentumParams,
    NonMarkovianRule,
    SignalLattice,
    UpdateRule,
    embedded_trajectory,
    history_buffer_trajectory,
    kernel_convergence_table,
    kernel_integral,
    kernel_limit_check,
    markovian_embed_history,
    markovian_embed_momentum,
    markovian_rule,
    project_to_lattice,
    reconstruct_history,
)

from oracles import constant_drive_kernel, momentum_recursion, ring_buffer_recursion


def outcomes(n, seed=0):
    return np.random.default_rng(seed).choice([-1.0, 0.0, 1.0], size=n)


# lattice projection

def test_on_grid_point_unchanged():
    lat = SignalLattice([0.0, -1.0], [1.0, 1.0], [0.1, 0.5])
    idx, clipped = project_to_lattice(lat, [0.3, 0.5])
    assert idx == (3, 3) and not clipped
    assert lat.point(idx) == pytest.approx([0.3, 0.5])


def test_beyond_max_saturates_and_flags():
    lat = SignalLattice([0.0], [1.0], [0.1])
    idx, clipped = project_to_lattice(lat, [7.0])
    assert idx == (10,) and clipped
    idx, clipped = project_to_lattice(lat, [-0.5])
    assert idx == (0,) and clipped


def test_midpoint_rounds_down():
    lat = SignalLattice([0.0], [1.0], [0.1])
    assert lat.point(project_to_lattice(lat, [0.15])[0]) == pytest.approx([0.1])
    lat = SignalLattice([0.0], [4.0], [1.0])
    assert project_to_lattice(lat, [2.5])[0] == (2,)
    assert project_to_lattice(lat, [2.5000001])[0] == (3,)


def test_tiny_excursion_past_edge_is_not_a_clip():
    lat = SignalLattice([0.0], [1.0], [0.5])
    assert project_to_lattice(lat, [1.0 + 1e-12]) == ((2,), False)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=2, max_size=2))
def test_projection_idempotent(raw):
    lat = SignalLattice([-5.0, -3.0], [5.0, 3.0], [0.3, 0.25])
    idx, _ = lat.project(raw)
    again, clipped = lat.project(lat.point(idx))
    assert again == idx and not clipped


def test_project_many_matches_single():
    lat = SignalLattice([-2.0, 0.0], [2.0, 3.0], [0.5, 1.0])
    raw = np.random.default_rng(3).uniform(-4, 4, size=(200, 2))
    idx, clipped = lat.project_many(raw)
    for r, i, c in zip(raw, idx, clipped):
        assert lat.project(r) == (tuple(i), bool(c))


def test_lattice_validation():
    with pytest.raises(ValueError):
        SignalLattice([0.0], [1.0], [0.0])
    with pytest.raises(ValueError):
        SignalLattice([1.0], [0.0], [0.1])
    with pytest.raises(ValueError):
        SignalLattice([0.0, 0.0], [1.0], [0.1])
    with pytest.raises(ValueError):
        SignalLattice([0.0], [1.0], [0.1]).project([np.nan])
    with pytest.raises(ValueError, match="cap"):
        SignalLattice([0.0, 0.0], [1e4, 1e4], [1.0, 1.0]).check_size(10**7)


def test_lattice_flat_keys_roundtrip_and_order():
    lat = SignalLattice([0.0, 0.0], [3.0, 2.0], [1.0, 1.0])
    idx = np.array([[i, j] for i in range(4) for j in range(3)])
    keys = lat.flat(idx)
    assert np.all(np.diff(keys) > 0)
    assert np.array_equal(lat.unflat(keys), idx)


def test_index_of_rejects_off_lattice():
    lat = SignalLattice([0.0], [2.0], [1.0])
    assert lat.index_of([1.0]) == (1,)
    with pytest.raises(KeyError):
        lat.index_of([1.5])
    with pytest.raises(KeyError):
        lat.index_of([9.0])


# rules

def test_update_rule_validates_output():
    rule = UpdateRule(2, lambda n, x, y: np.array([1.0]))
    with pytest.raises(ValueError):
        rule(1, 0.0, np.zeros(2))
    bad = UpdateRule(1, lambda n, x, y: np.array([np.inf]))
    with pytest.raises(ValueError):
        bad(1, 0.0, np.zeros(1))


def test_rule_batch_matches_scalar():
    rule = markovian_embed_history(NonMarkovianRule(2, lambda n, x, h: np.mean(h, axis=-1) + x))
    ys = np.random.default_rng(0).normal(size=(50, 3))
    got = rule.batch(4, 1.0, ys)
    for y, g in zip(ys, got):
        assert np.array_equal(rule(4, 1.0, y), g)


# reconstruct_history

def test_reconstruct_history_examples():
    assert reconstruct_history([5.0, 0.0, 0.0]).tolist() == [5.0, 5.0, 5.0]
    assert reconstruct_history([5.0, 1.0, 2.0]).tolist() == [5.0, 4.0, 2.0]
    assert reconstruct_history([5.0]).tolist() == [5.0]


# history embedding

def test_depth_zero_is_the_scalar_rule():
    g = lambda n, x, h: 0.7 * h[..., 0] + x  # noqa: E731
    rule = markovian_embed_history(NonMarkovianRule(0, g))
    assert rule.dim == 1
    xs = outcomes(500)
    direct = embedded_trajectory(markovian_rule(lambda n, x, s: 0.7 * s + x), [0.3], xs)
    assert np.array_equal(embedded_trajectory(rule, [0.3], xs), direct)


def test_depth_two_average_equals_ring_buffer():
    g = lambda n, x, h: np.mean(h, axis=-1) + x  # noqa: E731
    nm = NonMarkovianRule(2, g)
    xs = outcomes(10_000, seed=1)
    emb = embedded_trajectory(markovian_embed_history(nm), [0.0, 0.0, 0.0], xs)[:, 0]
    oracle = ring_buffer_recursion(lambda n, x, h: sum(h) / 3 + x, 2, 0.0, xs)
    # the embedding rebuilds the history by subtraction, so it agrees to rounding
    assert np.max(np.abs(emb - oracle)) <= 1e-12
    assert np.array_equal(history_buffer_trajectory(nm, 0.0, xs), oracle)


@settings(max_examples=50, deadline=None)
@given(depth=st.integers(0, 5), seed=st.integers(0, 2**32 - 1))
def test_history_embedding_matches_buffer_for_random_linear_rules(depth, seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1, 1, depth + 1)
    a *= 0.9 / np.abs(a).sum()
    nm = NonMarkovianRule(depth, lambda n, x, h: h @ a + x)
    xs = rng.choice([-1.0, 1.0], size=300)
    s0 = float(rng.uniform(-1, 1))
    y0 = np.zeros(depth + 1)
    y0[0] = s0
    emb = embedded_trajectory(markovian_embed_history(nm), y0, xs)[:, 0]
    oracle = ring_buffer_recursion(lambda n, x, h: float(np.dot(h, a)) + x, depth, s0, xs)
    assert np.max(np.abs(emb - oracle)) <= 1e-12


def test_history_rule_sees_step_index():
    nm = NonMarkovianRule(1, lambda n, x, h: h[..., 0] + n)
    got = embedded_trajectory(markovian_embed_history(nm), [0.0, 0.0], [0.0, 0.0, 0.0])[:, 0]
    assert got.tolist() == [0.0, 1.0, 3.0, 6.0]


def test_non_markovian_rule_validation():
    with pytest.raises(ValueError):
        NonMarkovianRule(-1, lambda n, x, h: 0.0)


# momentum embedding

def test_momentum_beta_zero_is_memoryless():
    g = lambda n, x, s: x - 0.1 * s  # noqa: E731
    rule = markovian_embed_momentum(g, MomentumParams(0.0))
    assert rule(1, 2.0, np.array([1.0, 5.0])).tolist() == [1.0 + 1.9, 1.9]
    xs = outcomes(10_000, seed=2)
    emb = embedded_trajectory(rule, [0.5, 0.0], xs)[:, 0]
    direct = embedded_trajectory(markovian_rule(lambda n, x, s: s + g(n, x, s)), [0.5], xs)[:, 0]
    assert np.array_equal(emb, direct)


def test_momentum_beta_one_freezes_momentum():
    g = lambda n, x, s: 3.0 * x + s  # noqa: E731
    xs = outcomes(1000, seed=3)
    traj = embedded_trajectory(markovian_embed_momentum(g, MomentumParams(1.0)), [2.0, 1.0], xs)
    assert np.array_equal(traj[:, 0], 2.0 + np.arange(1001))
    traj = embedded_trajectory(markovian_embed_momentum(g, MomentumParams(1.0)), [2.0, 0.0], xs)
    assert np.all(traj[:, 1] == 0.0) and np.all(traj[:, 0] == 2.0)


def test_momentum_half_constant_drive_sequence():
    rule = markovian_embed_momentum(lambda n, x, s: 1.0 + 0.0 * s, MomentumParams(0.5))
    traj = embedded_trajectory(rule, [0.0, 0.0], [0.0] * 4)
    assert traj[1:, 1].tolist() == [0.5, 0.75, 0.875, 0.9375]
    assert traj[1:4, 0].tolist() == [0.5, 1.25, 2.125]


def test_momentum_matches_second_order_recursion():
    g = lambda n, x, s: x - 0.05 * s  # noqa: E731
    xs = outcomes(10_000, seed=4)
    emb = embedded_trajectory(markovian_embed_momentum(g, MomentumParams(0.5)), [0.2, 0.1], xs)[:, 0]
    oracle = momentum_recursion(g, 0.5, 0.2, 0.1, xs)
    assert np.max(np.abs(emb - oracle)) <= 1e-12


def test_momentum_params_validation():
    with pytest.raises(ValueError):
        MomentumParams(1.5)
    p = MomentumParams.from_rate(2.0, 0.01)
    assert p.beta == pytest.approx(0.98) and p.gamma == 2.0 and p.delta_t == 0.01


# continuum kernel

def test_zero_drive_has_zero_error():
    assert kernel_limit_check(MomentumParams.from_rate(1.0, 0.01), lambda u: 0.0, 2.0) == 0.0


def test_kernel_integral_closed_form():
    assert kernel_integral(lambda u: 1.0, 1.0, 2.0) == pytest.approx(constant_drive_kernel(2.0), abs=1e-13)


def test_constant_drive_first_order():
    rows = kernel_convergence_table(lambda u: 1.0, 1.0, 2.0, [0.04, 0.02, 0.01, 0.005],
                                    reference=constant_drive_kernel(2.0))
    errs = [r["error"] for r in rows]
    assert all(a > b for a, b in zip(errs, errs[1:]))
    for r in rows[1:]:
        assert 1.6 <= r["ratio"] <= 2.4
        assert r["order"] == pytest.approx(1.0, abs=0.1)


def test_sin_drive_first_order():
    rows = kernel_convergence_table(math.sin, 2.0, 2.0, [0.04, 0.02, 0.01, 0.005])
    for r in rows[1:]:
        assert 1.6 <= r["ratio"] <= 2.4


def test_kernel_check_rejects_coarse_or_inconsistent_params():
    with pytest.raises(ValueError, match="coarse"):
        kernel_limit_check(MomentumParams.from_rate(6.0, 0.1), lambda u: 1.0, 2.0)
    with pytest.raises(ValueError, match="beta"):
        kernel_limit_check(MomentumParams(0.5, 1.0, 0.01), lambda u: 1.0, 2.0)
    with pytest.raises(ValueError, match="multiple"):
        kernel_limit_check(MomentumParams.from_rate(1.0, 0.03), lambda u: 1.0, 1.0)
