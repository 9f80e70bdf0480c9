"""Schedule and sampler contracts, checked against scalar re-derivations."""

import numpy as np
import pytest

from splatlab.diffusion import (
    NoiseSchedule,
    ScheduleError,
    add_noise,
    build_schedule,
    ddcm_step,
    ddcm_x0_step,
    ddim_step,
    predict_x0,
)

SHAPE = (3, 8, 8)


def test_linear_schedule_matches_forced_interpolation():
    s = build_schedule("linear-alphabar", 4, 0.2)
    np.testing.assert_allclose(s.alpha_bar, [1.0, 0.8, 0.6, 0.4, 0.2], atol=1e-15)


def test_accessors_at_zero_and_quarter():
    s = build_schedule("cosine", 10, 0.05)
    assert s.scale(0) == 1.0 and s.std(0) == 0.0 and s.gamma(0) == 0.0
    q = NoiseSchedule(np.array([1.0, 0.25]))
    assert q.scale(1) == pytest.approx(0.5, abs=1e-12)
    assert q.std(1) == pytest.approx(0.8660254037844386, abs=1e-12)
    assert q.gamma(1) == pytest.approx(1.7320508075688772, abs=1e-12)


@pytest.mark.parametrize("kind", ["linear-alphabar", "cosine"])
def test_schedule_consistency_and_endpoints(kind):
    s = build_schedule(kind, 50, 0.01)
    assert s.alpha_bar[0] == 1.0
    assert s.alpha_bar[-1] == pytest.approx(0.01, abs=1e-15)
    assert np.all(np.diff(s.alpha_bar) < 0)
    for t in range(s.T + 1):
        assert abs(s.scale(t) ** 2 + s.std(t) ** 2 - 1.0) <= 1e-12


@pytest.mark.parametrize(
    "kind,T,floor",
    [("linear-alphabar", 0, 0.5), ("linear-alphabar", 10, 0.0), ("cosine", 10, 1.0), ("bogus", 10, 0.5)],
)
def test_bad_schedule_parameters_rejected(kind, T, floor):
    with pytest.raises(ScheduleError):
        build_schedule(kind, T, floor)


def test_non_monotone_alpha_bar_rejected():
    with pytest.raises(ScheduleError):
        NoiseSchedule(np.array([1.0, 0.4, 0.4]))


def test_add_noise_cases(schedule, rng):
    e = rng.standard_normal(SHAPE)
    x0 = rng.standard_normal(SHAPE)
    np.testing.assert_array_equal(add_noise(schedule, np.zeros(SHAPE), e, 9), schedule.std(9) * e)
    np.testing.assert_array_equal(add_noise(schedule, x0, e, 0), x0)
    q = NoiseSchedule(np.array([1.0, 0.25]))
    got = add_noise(q, np.array([1.0, 1.0]), np.array([2.0, 0.0]), 1)
    np.testing.assert_allclose(got, [0.5 + np.sqrt(3.0), 0.5], atol=1e-12)


def test_add_noise_shape_mismatch(schedule):
    with pytest.raises(ValueError, match="shape"):
        add_noise(schedule, np.zeros((3, 4, 4)), np.zeros((3, 8, 8)), 5)


def test_predict_x0_inverts_forward(schedule, rng):
    for t in (1, 17, 50):
        x0 = rng.standard_normal(SHAPE)
        e = rng.standard_normal(SHAPE)
        z = add_noise(schedule, x0, e, t)
        np.testing.assert_allclose(predict_x0(schedule, z, e, t), x0, atol=1e-10)


def test_predict_x0_scalar_recomputation(schedule, rng):
    for _ in range(20):
        t = int(rng.integers(1, 51))
        z = rng.standard_normal(SHAPE)
        e = rng.standard_normal(SHAPE)
        ref = (z - np.sqrt(1 - schedule.alpha_bar[t]) * e) / np.sqrt(schedule.alpha_bar[t])
        np.testing.assert_array_equal(predict_x0(schedule, z, e, t), ref)
    np.testing.assert_array_equal(
        predict_x0(schedule, z, np.zeros(SHAPE), 5), z / schedule.scale(5)
    )
    with pytest.raises(ValueError):
        predict_x0(schedule, z, e, 0)


def test_ddim_deterministic_with_perfect_prediction(schedule, rng):
    x0 = rng.standard_normal(SHAPE)
    e = rng.standard_normal(SHAPE)
    t = 23
    z = add_noise(schedule, x0, e, t)
    got = ddim_step(schedule, z, e, t, 0.0, np.zeros(SHAPE))
    want = schedule.scale(t - 1) * x0 + schedule.std(t - 1) * e
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_ddim_scalar_recomputation(schedule, rng):
    for _ in range(50):
        t = int(rng.integers(1, 51))
        z = rng.standard_normal(SHAPE)
        e = rng.standard_normal(SHAPE)
        fresh = rng.standard_normal(SHAPE)
        sigma = float(rng.uniform(0, 0.9 * np.sqrt(1 - schedule.alpha_bar[t - 1])))
        x0 = (z - np.sqrt(1 - schedule.alpha_bar[t]) * e) / np.sqrt(schedule.alpha_bar[t])
        ref = (
            np.sqrt(schedule.alpha_bar[t - 1]) * x0
            + np.sqrt(1 - schedule.alpha_bar[t - 1] - sigma**2) * e
            + sigma * fresh
        )
        np.testing.assert_allclose(ddim_step(schedule, z, e, t, sigma, fresh), ref, atol=1e-12)


def test_ddim_rejects_excess_sigma(schedule, rng):
    z = rng.standard_normal(SHAPE)
    with pytest.raises(ValueError, match="exceeds"):
        ddim_step(schedule, z, z, 10, 1.5, z)


def test_ddim_reduces_to_ddcm_bitwise(schedule, rng):
    for _ in range(200):
        t = int(rng.integers(1, 51))
        z = rng.standard_normal(SHAPE)
        e = rng.standard_normal(SHAPE)
        fresh = rng.standard_normal(SHAPE)
        sigma = float(np.sqrt(1.0 - schedule.alpha_bar[t - 1]))
        a = ddim_step(schedule, z, e, t, sigma, fresh)
        b = ddcm_step(schedule, z, e, t, fresh)
        assert np.max(np.abs(a - b)) <= 1e-12


def test_ddcm_perfect_predictor_and_terminal_step(schedule, rng):
    x0 = rng.standard_normal(SHAPE)
    e = rng.standard_normal(SHAPE)
    fresh = rng.standard_normal(SHAPE)
    t = 30
    z = add_noise(schedule, x0, e, t)
    got = ddcm_step(schedule, z, e, t, fresh)
    np.testing.assert_allclose(got, schedule.scale(t - 1) * x0 + schedule.std(t - 1) * fresh, atol=1e-10)
    z1 = add_noise(schedule, x0, e, 1)
    np.testing.assert_array_equal(ddcm_step(schedule, z1, e, 1, fresh), predict_x0(schedule, z1, e, 1))


def test_x0_step_fixed_point(schedule, rng):
    x0 = rng.standard_normal(SHAPE)
    e = rng.standard_normal(SHAPE)
    np.testing.assert_array_equal(ddcm_x0_step(schedule, x0, e, e, 12), x0)


def test_x0_step_scalar_recomputation(schedule, rng):
    prev = rng.standard_normal(SHAPE)
    ef = rng.standard_normal(SHAPE)
    ep = rng.standard_normal(SHAPE)
    t = 7
    ref = prev + np.sqrt(1 - schedule.alpha_bar[t]) / np.sqrt(schedule.alpha_bar[t]) * (ef - ep)
    np.testing.assert_allclose(ddcm_x0_step(schedule, prev, ef, ep, t), ref, atol=1e-12)
    with pytest.raises(ValueError):
        ddcm_x0_step(schedule, prev, ef, ep, schedule.T)


def test_trajectory_reparameterization_identity(schedule):
    """Latent-track DDCM + per-step x0 prediction must equal the x0-track
    recursion when both consume the same noise and prediction draws."""
    for trial in range(10):
        rng = np.random.default_rng(100 + trial)
        z = rng.standard_normal(SHAPE)
        noises = {t: rng.standard_normal(SHAPE) for t in range(1, 51)}
        preds = {t: rng.standard_normal(SHAPE) for t in range(1, 51)}
        track_a = []
        z_t = z
        for t in range(50, 0, -1):
            track_a.append(predict_x0(schedule, z_t, preds[t], t))
            z_t = ddcm_step(schedule, z_t, preds[t], t, noises[t])
        track_b = [predict_x0(schedule, z, preds[50], 50)]
        for t in range(49, 0, -1):
            track_b.append(ddcm_x0_step(schedule, track_b[-1], noises[t + 1], preds[t], t))
        for a, b in zip(track_a, track_b):
            assert np.max(np.abs(a - b)) <= 1e-10
