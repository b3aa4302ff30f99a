import numpy as np
import pytest

from tshamo.diffusion import build_schedule, posterior_step, q_sample, q_step


def test_linear_endpoints_at_1000():
    s = build_schedule(1000)
    assert s.beta[1] == pytest.approx(1e-4)
    assert s.beta[1000] == pytest.approx(2e-2)


def test_terminal_alpha_bar_matches_direct_product():
    betas = np.linspace(1e-4, 2e-2, 1000)
    direct = np.prod(1.0 - betas)
    s = build_schedule(1000)
    assert direct < 1e-3
    assert s.alpha_bar[-1] == pytest.approx(direct, rel=1e-12)


def test_single_step_schedule():
    s = build_schedule(1)
    assert s.alpha_bar[1] == pytest.approx(1.0 - s.beta[1])


def test_short_schedules_still_reach_noise():
    for T in (10, 50, 100):
        assert build_schedule(T).alpha_bar[-1] < 1e-3


@pytest.mark.parametrize("kind", ["linear", "cosine"])
@pytest.mark.parametrize("T", [1, 7, 100, 1000])
def test_schedule_invariants(kind, T):
    s = build_schedule(T, kind)
    assert s.alpha_bar[0] == 1.0
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all((s.beta[1:] > 0) & (s.beta[1:] < 1))
    assert np.all(s.posterior_variance >= 0)
    assert s.posterior_variance[1] == 0.0


def test_bad_schedule_args():
    with pytest.raises(ValueError):
        build_schedule(0)
    with pytest.raises(ValueError):
        build_schedule(10, "quadratic")


def test_q_sample_by_hand():
    s = build_schedule(10)
    # pick the schedule step nearest abar = 0.64 and overwrite to get the round numbers
    abar = s.alpha_bar.copy()
    abar[3] = 0.64
    s2 = s.__class__(**{**s.__dict__, "alpha_bar": abar})
    assert q_sample(np.array(1.0), 3, np.array(0.5), s2) == pytest.approx(1.1)


def test_q_sample_edges():
    s = build_schedule(10)
    x0, eps = np.array([1.0, -2.0]), np.array([0.3, 0.4])
    np.testing.assert_array_equal(q_sample(x0, 0, eps, s), x0)
    abar = s.alpha_bar.copy()
    abar[10] = 0.0
    s2 = s.__class__(**{**s.__dict__, "alpha_bar": abar})
    np.testing.assert_array_equal(q_sample(x0, 10, eps, s2), eps)
    with pytest.raises(ValueError):
        q_sample(x0, 11, eps, s)
    with pytest.raises(ValueError):
        q_sample(x0, 1, eps[:1], s)


def test_q_sample_per_item_steps():
    s = build_schedule(50)
    x0 = np.ones((3, 2, 4))
    eps = np.zeros_like(x0)
    t = np.array([1, 10, 50])
    out = q_sample(x0, t, eps, s)
    for i in range(3):
        np.testing.assert_allclose(out[i], np.sqrt(s.alpha_bar[t[i]]))


def test_posterior_coefficients_rederived():
    s = build_schedule(10)
    b = s.beta[1:]
    a = 1.0 - b
    ab = np.cumprod(a)
    t = 5
    c0 = np.sqrt(ab[t - 2]) * b[t - 1] / (1 - ab[t - 1])
    ct = np.sqrt(a[t - 1]) * (1 - ab[t - 2]) / (1 - ab[t - 1])
    var = b[t - 1] * (1 - ab[t - 2]) / (1 - ab[t - 1])
    assert s.posterior_mean_coef_x0[t] == pytest.approx(c0, rel=1e-12)
    assert s.posterior_mean_coef_xt[t] == pytest.approx(ct, rel=1e-12)
    assert s.posterior_variance[t] == pytest.approx(var, rel=1e-12)
    x0, xt, z = 0.7, -0.2, 1.3
    assert posterior_step(np.array(xt), np.array(x0), t, np.array(z), s) == pytest.approx(
        c0 * x0 + ct * xt + np.sqrt(var) * z)


def test_posterior_final_step_is_deterministic():
    s = build_schedule(20)
    xt, x0 = np.array([0.5, -1.0]), np.array([0.1, 0.2])
    a = posterior_step(xt, x0, 1, np.array([10.0, -10.0]), s)
    b = posterior_step(xt, x0, 1, np.zeros(2), s)
    np.testing.assert_array_equal(a, b)
    # at t=1 the mean is exactly the predicted clean sample
    np.testing.assert_allclose(a, x0)


def test_posterior_linear_when_prediction_equals_input():
    s = build_schedule(30)
    x = np.array([0.4, -0.9])
    out = posterior_step(x, x, 12, np.zeros(2), s)
    np.testing.assert_allclose(out, (s.posterior_mean_coef_x0[12] + s.posterior_mean_coef_xt[12]) * x)
    with pytest.raises(ValueError):
        posterior_step(x, x, 0, np.zeros(2), s)


def test_stepwise_kernel_matches_closed_form():
    s = build_schedule(40)
    r = np.random.default_rng(0)
    n, t = 100_000, 25
    x0 = 0.8
    x = np.full(n, x0)
    for k in range(1, t + 1):
        x = q_step(x, k, r.standard_normal(n), s)
    ab = s.alpha_bar[t]
    assert x.mean() == pytest.approx(np.sqrt(ab) * x0, abs=0.01 * max(1, abs(np.sqrt(ab) * x0)))
    assert x.var() == pytest.approx(1 - ab, rel=0.01)


def test_terminal_variance_unit_data():
    s = build_schedule(1000)
    r = np.random.default_rng(1)
    x0 = r.standard_normal(100_000)
    xT = q_sample(x0, 1000, r.standard_normal(100_000), s)
    assert 0.98 <= xT.var() <= 1.02


def test_perfect_oracle_chain_recovers_x0():
    s = build_schedule(50)
    r = np.random.default_rng(2)
    x0 = np.array([0.3, -1.2, 2.0])
    chains = 2000
    x = r.standard_normal((chains, 3))
    for t in range(50, 0, -1):
        x = posterior_step(x, np.broadcast_to(x0, x.shape), t, r.standard_normal(x.shape), s)
    se = x.std(axis=0, ddof=1) / np.sqrt(chains) + 1e-12
    assert np.all(np.abs(x.mean(axis=0) - x0) <= 3 * se + 1e-12)
