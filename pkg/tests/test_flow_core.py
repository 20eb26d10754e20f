import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import assert_grads_match, fd_param_grad, random_net
from flowdistill.flow_core import (
    DatasetSpec,
    EulerSchedule,
    TimestepSampler,
    consistency_fn,
    euler_sample,
    euler_trajectory,
    fm_loss,
    gaussian_moments,
    gaussian_oracle_velocity,
    interpolate,
    make_dataset,
    sample_timestep,
)
from flowdistill.numerics import NumericalError, ShapeError, stream

# 64-step vs 128-step self-refinement error ratio against 1024 steps for the
# oracle field of N(0.5, 0.25) data; measured once with 2000 samples.
EULER_RATIO_64_128 = 2.1307449721667804


def const_field(c):
    return lambda x, t, cond: np.broadcast_to(c, x.shape)


def oracle_field(mean0, var0):
    return lambda x, t, cond: gaussian_oracle_velocity(x, t, mean0, var0)


# -- datasets ------------------------------------------------------------------


def test_first_frame_is_condition():
    data = make_dataset(DatasetSpec(), 300)
    np.testing.assert_array_equal(data.frames[:, 0, :], data.cond)
    assert data.x0.shape == (300, 32)
    s = data[5]
    np.testing.assert_array_equal(s.frames[0], s.cond)


def test_dataset_is_deterministic_and_streams_differ():
    spec = DatasetSpec(seed=3)
    a, b = make_dataset(spec, 700), make_dataset(spec, 700)
    np.testing.assert_array_equal(a.frames, b.frames)
    c = make_dataset(spec, 700, "eval")
    assert not np.allclose(a.frames, c.frames)


def test_dataset_full_chunks_are_stable_across_sizes():
    spec = DatasetSpec(seed=1)
    np.testing.assert_array_equal(make_dataset(spec, 512).frames, make_dataset(spec, 1000).frames[:512])


def test_gaussian_sample_mean_within_clt_bound():
    spec = DatasetSpec(kind="gaussian", mean=0.7, scale=2.0, conditional=False, seed=11)
    n = 1000
    x = make_dataset(spec, n).x0
    bound = 4 * spec.scale / np.sqrt(n)
    assert np.all(np.abs(x.mean(axis=0) - spec.mean) < bound)


def test_moving_blob_zero_drift_frames_equal():
    data = make_dataset(DatasetSpec(kind="moving_blob", drift=0.0), 50)
    for k in range(1, data.spec.frames):
        np.testing.assert_array_equal(data.frames[:, k], data.frames[:, 0])


def test_mixture_components_follow_means():
    spec = DatasetSpec(scale=1e-6, seed=2)
    data = make_dataset(spec, 200)
    means = spec.mixture_means()
    np.testing.assert_allclose(data.frames, means[data.component], atol=1e-4)


@pytest.mark.parametrize(
    "kw",
    [
        dict(kind="nope"),
        dict(scale=0.0),
        dict(spread=-1.0),
        dict(weights=[0.5, 0.5]),
        dict(weights=[0.5, 0.5, 0.5, -0.5]),
        dict(frames=0),
    ],
)
def test_invalid_dataset_specs_rejected(kw):
    with pytest.raises(ValueError):
        make_dataset(DatasetSpec(**kw), 10)


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        make_dataset(DatasetSpec(), 0)


def test_gaussian_moments_pin_first_frame():
    spec = DatasetSpec(kind="gaussian", frames=3, dim=2, mean=0.5, scale=2.0)
    cond = np.array([[1.0, -1.0]])
    m, v = gaussian_moments(spec, cond)
    np.testing.assert_array_equal(m[0, :2], cond[0])
    np.testing.assert_array_equal(v[0, :2], 0.0)
    np.testing.assert_array_equal(v[0, 2:], 4.0)
    with pytest.raises(ValueError):
        gaussian_moments(DatasetSpec(), cond)


# -- interpolation and loss ----------------------------------------------------


def test_interpolate_endpoints_and_midpoint():
    x0, x1 = np.array([[0.0, 1.0]]), np.array([[2.0, 5.0]])
    np.testing.assert_array_equal(interpolate(x0, x1, 0.0), x0)
    np.testing.assert_array_equal(interpolate(x0, x1, 1.0), x1)
    np.testing.assert_array_equal(interpolate(0.0, 2.0, 0.5), 1.0)
    np.testing.assert_array_equal(interpolate(x0, x1, np.array([0.5])), [[1.0, 3.0]])
    with pytest.raises(ShapeError):
        interpolate(x0, x1[:, :1], 0.5)


class OraclePlug:
    """Returns a fixed velocity regardless of input; enough for loss tests."""

    def __init__(self, v):
        self.v = v

    def forward_cached(self, x, t, cond):
        return self.v, None


def test_fm_loss_oracle_plug_is_zero(rng):
    x0, x1 = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    loss, _ = fm_loss(OraclePlug(x1 - x0), x0, None, x1, rng.uniform(size=5), with_grad=False)
    assert loss == 0.0


def test_fm_loss_zero_field_is_mean_squared_velocity(rng):
    x0, x1 = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    loss, _ = fm_loss(OraclePlug(np.zeros((5, 3))), x0, None, x1, 0.3, with_grad=False)
    assert loss == pytest.approx(np.mean(np.sum((x1 - x0) ** 2, axis=1)), rel=1e-14)


def test_fm_loss_gradients_match_finite_differences(rng):
    net = random_net(seed=4)
    x0, x1 = rng.standard_normal((7, 6)), rng.standard_normal((7, 6))
    cond, t = rng.standard_normal((7, 2)), rng.uniform(0.05, 0.95, 7)
    _, grads = fm_loss(net, x0, cond, x1, t)
    numeric = fd_param_grad(lambda: fm_loss(net, x0, cond, x1, t, with_grad=False)[0], net.params)
    assert_grads_match(grads, numeric, 1e-4)


def test_fm_loss_rejects_empty_batch():
    with pytest.raises(ValueError):
        fm_loss(random_net(), np.zeros((0, 6)), np.zeros((0, 2)), np.zeros((0, 6)), 0.5)


# -- timesteps -----------------------------------------------------------------


def test_logit_normal_centre_is_half():
    s = TimestepSampler("logit_normal", p_mean=0.0, p_std=1e-300)
    assert sample_timestep(s, np.random.default_rng(0)) == 0.5


@given(st.sampled_from(["uniform", "logit_normal"]), st.integers(0, 2**32 - 1))
def test_timesteps_lie_strictly_inside_unit_interval(kind, seed):
    t = TimestepSampler(kind, p_mean=-0.6, p_std=6.0).sample(np.random.default_rng(seed), 500)
    assert np.all((t > 0) & (t < 1))


def test_logit_normal_mean_matches_quadrature():
    # Independent oracle: Gauss-Hermite quadrature of E[sigmoid(z)], z ~ N(-0.6, 1.4^2).
    nodes, weights = np.polynomial.hermite_e.hermegauss(80)
    expect = float(np.sum(weights / (1 + np.exp(-(-0.6 + 1.4 * nodes)))) / np.sqrt(2 * np.pi))
    t = TimestepSampler("logit_normal", -0.6, 1.4).sample(stream(0, "mc-t"), 10**6)
    se = t.std(ddof=1) / np.sqrt(t.size)
    assert abs(t.mean() - expect) < 3 * se


def test_bad_sampler_rejected():
    with pytest.raises(ValueError):
        TimestepSampler("beta")
    with pytest.raises(ValueError):
        TimestepSampler(p_std=0.0)


# -- Euler sampling ------------------------------------------------------------


def test_schedule_times():
    times = EulerSchedule(5).times
    assert times[0] == 1.0 and times[-1] == 0.0
    assert np.all(np.diff(times) < 0)
    with pytest.raises(ValueError):
        EulerSchedule(0)


@pytest.mark.parametrize("steps", [1, 2, 3, 7, 64])
def test_constant_field_exact(steps):
    x1 = np.array([[0.25, -1.5]])
    c = np.array([0.5, -0.25])
    # Exact up to rounding in the step sizes, which sum to one.
    np.testing.assert_allclose(euler_sample(const_field(c), x1, None, steps), x1 - c, rtol=0, atol=1e-15)
    np.testing.assert_array_equal(euler_sample(const_field(0.0), x1, None, steps), x1)


def test_euler_first_order_against_self_refinement():
    f = oracle_field(0.5, 0.25)
    x1 = np.random.default_rng(0).standard_normal((2000, 3))
    ref = euler_sample(f, x1, None, 1024)
    e64 = np.mean(np.abs(euler_sample(f, x1, None, 64) - ref))
    e128 = np.mean(np.abs(euler_sample(f, x1, None, 128) - ref))
    ratio = e64 / e128
    assert 1.6 <= ratio <= 2.4
    assert ratio == pytest.approx(EULER_RATIO_64_128, rel=1e-9)


def test_oracle_flow_reaches_exact_transport_map():
    # For Gaussian data the ODE maps x1 to m + sqrt(s) x1.
    m, s = -0.3, 2.0
    x1 = np.random.default_rng(1).standard_normal((500, 2))
    x0 = euler_sample(oracle_field(m, s), x1, None, 4096)
    np.testing.assert_allclose(x0, m + np.sqrt(s) * x1, atol=2e-3)


def test_euler_non_finite_raises():
    with pytest.raises(NumericalError):
        euler_sample(const_field(np.inf), np.zeros((1, 2)), None, 2)


def test_trajectory_snaps_to_grid_and_matches_sampler():
    f = oracle_field(0.0, 0.5)
    x1 = np.random.default_rng(2).standard_normal((4, 2))
    traj = euler_trajectory(f, x1, None, 8, (0.3, 1.0, 0.0))
    assert traj[0.3][0] == 0.25
    np.testing.assert_array_equal(traj[1.0][1], x1)
    np.testing.assert_array_equal(traj[0.0][1], euler_sample(f, x1, None, 8))


# -- consistency parameterization ----------------------------------------------


@given(st.integers(0, 1000))
def test_consistency_boundary_is_bit_exact(seed):
    net = random_net(seed % 5)
    x = np.random.default_rng(seed).standard_normal((3, 6)) * 10
    cond = np.ones((3, 2))
    assert np.array_equal(consistency_fn(net, x, 0.0, cond), x)
    assert np.array_equal(consistency_fn(net, x, np.zeros(3), cond), x)


def test_consistency_with_exact_velocity_recovers_x0(rng):
    x0, x1 = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    net = const_field(x1 - x0)
    np.testing.assert_allclose(consistency_fn(net, x1, 1.0, None), x0, atol=1e-15)
    xt = interpolate(x0, x1, 0.4)
    np.testing.assert_allclose(consistency_fn(net, xt, 0.4, None), x0, atol=1e-15)
    np.testing.assert_array_equal(consistency_fn(const_field(0.0), xt, 0.4, None), xt)


# -- Gaussian oracle -----------------------------------------------------------


def test_oracle_symmetry_at_half():
    x = np.linspace(-3, 3, 13)
    np.testing.assert_array_equal(gaussian_oracle_velocity(x, 0.5, 0.0, 1.0), 0.0)


def test_oracle_at_one_is_x_minus_mean():
    x = np.linspace(-3, 3, 7)
    np.testing.assert_allclose(gaussian_oracle_velocity(x, 1.0, 0.4, 2.0), x - 0.4, atol=1e-15)


def test_oracle_singular_conditioning_rejected():
    with pytest.raises(ValueError):
        gaussian_oracle_velocity(np.zeros(2), 0.0, 0.0, 0.0)


@pytest.mark.parametrize("t,x", [(0.2, 0.7), (0.5, -1.0), (0.8, 1.3), (0.35, 0.0)])
def test_oracle_matches_monte_carlo_conditional_mean(t, x):
    # 10^6 pairs; box kernel around x.  Inside the window the conditional mean
    # is linear, so the window average equals the oracle at the window's mean x_t.
    rng = stream(7, "mc-oracle", int(t * 100))
    x0, x1 = rng.standard_normal(10**6), rng.standard_normal(10**6)
    xt = (1 - t) * x0 + t * x1
    sel = np.abs(xt - x) < 0.05
    v = (x1 - x0)[sel]
    se = v.std(ddof=1) / np.sqrt(v.size)
    expect = gaussian_oracle_velocity(xt[sel].mean(), t, 0.0, 1.0)
    assert abs(v.mean() - expect) < 3 * se
