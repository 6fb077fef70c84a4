import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import tau_double_sum
from ssmgen.initialization import InitConfig, init_hippo
from ssmgen.measure import (
    SequenceStats,
    compute_stats,
    key_terms,
    layer_tau,
    measure_model,
    padding_measures,
    skip_tau,
    tau_continuous,
    tau_discrete,
    tau_profile,
    transfer_discrete,
    transfer_params,
)
from ssmgen.seqgen import ProcessSpec, sample_batch
from ssmgen.ssm import DiscreteKernel, SSMLayerParams, compute_kernel


def const(v):
    return lambda t: np.full(np.shape(t), float(v))


def scalar_layer(c=1.0):
    return SSMLayerParams.full([[-1.0]], [1.0], [[c]], [0.1])


def random_stats(rng, length, d):
    return SequenceStats(rng.normal(size=(length, d)), rng.uniform(0, 3, size=(length, d)))


def test_stats_identical_sequences():
    x = np.tile(np.arange(5.0)[None, :, None], (4, 1, 1))
    s = compute_stats(x)
    assert np.all(s.var == 0)
    np.testing.assert_array_equal(s.mu[:, 0], np.arange(5.0))


def test_stats_two_sequences():
    x = np.stack([np.zeros((6, 2)), 2 * np.ones((6, 2))])
    s = compute_stats(x)
    assert np.all(s.mu == 1) and np.all(s.var == 1)


def test_stats_need_two_sequences():
    with pytest.raises(ValueError):
        compute_stats(np.zeros((1, 5, 1)))


def test_stats_white_noise_variance():
    ds = sample_batch(ProcessSpec(length=16, seed=4), 4000)
    s = compute_stats(ds.inputs)
    np.testing.assert_allclose(s.var, 1 / math.sqrt(math.pi), rtol=0.1)


def test_tau_hand_example():
    k = DiscreteKernel(np.array([[1.0], [0.5], [0.25]]))
    s = SequenceStats.constant(3, 1, 1.0, 1.0)
    assert key_terms(k, s)[0] == pytest.approx(3.5, rel=1e-15)
    assert tau_discrete(k, s) == pytest.approx(12.25, rel=1e-15)
    assert tau_double_sum(k.values, s.mu, s.var) == pytest.approx(12.25, rel=1e-15)


def test_tau_zero_stats():
    k = DiscreteKernel(np.ones((4, 2)))
    assert tau_discrete(k, SequenceStats.constant(4, 2, 0.0, 0.0)) == 0.0


def test_tau_shape_mismatch():
    with pytest.raises(ValueError):
        tau_discrete(DiscreteKernel(np.ones((4, 1))), SequenceStats.constant(5, 1, 1.0, 1.0))


@settings(max_examples=60, deadline=None)
@given(length=st.integers(1, 64), d=st.integers(1, 3), seed=st.integers(0, 2**32 - 1))
def test_tau_matches_double_sum(length, d, seed):
    rng = np.random.default_rng(seed)
    k = rng.normal(size=(length, d))
    s = random_stats(rng, length, d)
    ref = tau_double_sum(k, s.mu, s.var)
    got = tau_discrete(DiscreteKernel(k), s)
    assert got >= 0
    assert abs(got - ref) <= 1e-10 * max(ref, 1e-300)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), xi=st.sampled_from([-2.0, 0.5, 3.0]))
def test_tau_quadratic_scaling(seed, xi):
    rng = np.random.default_rng(seed)
    (p,) = init_hippo(InitConfig(m=4, d=2, seed=int(rng.integers(2**31))))
    s = random_stats(rng, 32, 2)
    base = layer_tau(p, s)
    scaled = layer_tau(p.replace(c=xi * p.c), s)
    assert scaled == pytest.approx(xi**2 * base, rel=1e-12)


def test_tau_zero_kernel_is_zero():
    s = random_stats(np.random.default_rng(0), 8, 1)
    assert tau_discrete(DiscreteKernel(np.zeros((8, 1))), s) == 0.0


def test_tau_profile_matches_prefixes():
    rng = np.random.default_rng(1)
    k = rng.normal(size=(30, 2))
    s = random_stats(rng, 30, 2)
    prof = tau_profile(DiscreteKernel(k), s)
    for L in (1, 7, 30):
        sub = SequenceStats(s.mu[:L], s.var[:L])
        assert prof[L - 1] == pytest.approx(tau_double_sum(k[:L], sub.mu, sub.var), rel=1e-10)


def test_skip_tau_definition():
    p = scalar_layer().replace(d_skip=np.array([-2.0]))
    s = SequenceStats.constant(5, 1, 0.5, 4.0)
    assert skip_tau(p, s) == pytest.approx((2 * 2 + 2 * 0.5) ** 2)
    assert skip_tau(scalar_layer(), s) == 0.0


def test_tau_continuous_zero_moments():
    assert tau_continuous(scalar_layer(), const(0), const(0), 5.0) == 0.0


def test_tau_continuous_scalar_long_horizon():
    tau = tau_continuous(scalar_layer(), const(0), const(1), 40.0)
    assert tau == pytest.approx(1.0, abs=1e-10)


def test_tau_continuous_scalar_closed_form():
    # (sigma + |mu|) (1 - e^{-T}) for rho(s) = e^{-s}
    T = 3.0
    tau = tau_continuous(scalar_layer(), const(0.5), const(4.0), T)
    assert tau == pytest.approx((2.5 * (1 - math.exp(-T))) ** 2, rel=1e-10)


def test_tau_continuous_rejects_bad_horizon():
    with pytest.raises(ValueError):
        tau_continuous(scalar_layer(), const(1), const(1), 0.0)


def test_tau_continuous_rejects_nonfinite():
    with pytest.raises(ValueError, match="non-finite"):
        tau_continuous(scalar_layer(), const(np.inf), const(1), 1.0)


@pytest.mark.parametrize("kind", ["legs_full", "legs_diag"])
def test_tau_continuous_matches_fine_discrete(kind):
    (p,) = init_hippo(InitConfig(kind=kind, m=4, seed=2))
    delta, T = 1e-3, 5.0
    p = p.replace(delta=np.array([delta]))
    L = int(T / delta)
    cont = tau_continuous(p, const(1.0), const(0.5), T)
    disc = tau_discrete(compute_kernel(p, L), SequenceStats.constant(L, 1, 1.0, 0.5))
    assert abs(cont - disc) / cont < 1e-2


def test_padding_left_equals_unpadded_measure():
    (p,) = init_hippo(InitConfig(kind="legs_diag", m=8, seed=3))
    spec = ProcessSpec()
    left, _ = padding_measures(p, spec.mean_fn, spec.var_fn, 10.0)
    tau = tau_continuous(p, spec.mean_fn, spec.var_fn, 10.0)
    assert left - 1 == pytest.approx(math.sqrt(tau), rel=1e-12)


@pytest.mark.parametrize("T", [0.5, 2.0, 7.0])
def test_padding_scalar_factor(T):
    left, right = padding_measures(scalar_layer(), const(1), const(1), T)
    assert right - 1 == pytest.approx(math.exp(-T) * (left - 1), rel=1e-8)


@pytest.mark.parametrize("seed", range(5))
def test_padding_right_below_left(seed):
    for kind in ("legs_full", "legs_diag"):
        (p,) = init_hippo(InitConfig(kind=kind, m=8, d=2, seed=seed))
        spec = ProcessSpec()
        left, right = padding_measures(p, spec.mean_fn, spec.var_fn, 10.0)
        assert right <= left


def test_padding_right_decays_to_one():
    (p,) = init_hippo(InitConfig(kind="legs_full", m=8, seed=6))
    spec = ProcessSpec()
    rights = [padding_measures(p, spec.mean_fn, spec.var_fn, T)[1] for T in (5, 10, 20, 40)]
    lefts = [padding_measures(p, spec.mean_fn, spec.var_fn, T)[0] for T in (5, 10, 20, 40)]
    assert all(r < l for r, l in zip(rights, lefts))
    assert all(a > b for a, b in zip(rights, rights[1:]))
    assert rights[-1] - 1 < 1e-6


def test_transfer_params_scales_c_only():
    (p,) = init_hippo(InitConfig(kind="legs_full", m=3, seed=7))
    q = transfer_params(p, 2.0)
    np.testing.assert_array_equal(q.c, 2 * p.c)
    np.testing.assert_array_equal(q.a, p.a)
    np.testing.assert_array_equal(q.b, p.b)
    assert transfer_params(p, 1.0).c.tobytes() == p.c.tobytes()
    np.testing.assert_array_equal(transfer_discrete(p, 2.0).delta, 2 * p.delta)
    with pytest.raises(ValueError):
        transfer_params(p, 0.0)


@pytest.mark.parametrize("kind", ["legs_full", "legs_diag"])
def test_transfer_measure_invariance(kind):
    (p,) = init_hippo(InitConfig(kind=kind, m=4, seed=8))
    spec = ProcessSpec(b=0.5)
    t0 = tau_continuous(p, spec.mean_fn, spec.var_fn, 6.0)
    t1 = tau_continuous(transfer_params(p, 2.0), spec.mean_fn, spec.var_fn, 3.0, time_scale=2.0)
    assert abs(t1 - t0) / t0 < 1e-6


def test_measure_model_report():
    model = init_hippo(InitConfig(m=4, d=2, n_layers=2, seed=9))
    x = sample_batch(ProcessSpec(length=20, dim=2, seed=1), 16).inputs
    rep = measure_model(model, x)
    assert rep.tau_total == pytest.approx(sum(rep.tau_per_layer))
    assert all(t >= 0 for t in rep.tau_per_layer)
    assert rep.psi_sq_over_sqrt_n == pytest.approx(rep.tau_total / 4)
    assert rep.n == 16 and len(rep.model_hash) == 16 and len(rep.dataset_hash) == 16
    blob = rep.to_dict()
    for key in ("tau_per_layer", "tau_total", "psi_sq_over_sqrt_n", "n", "model_hash", "dataset_hash"):
        assert key in blob
