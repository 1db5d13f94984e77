from __future__ import annotations

import time

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from flowhedge.coefficients import Affine, Constant
from flowhedge.engine import simulate_truth_ensemble
from flowhedge.kalman import innovations, run_kalman, solve_covariance, xi_matrix
from flowhedge.market import RiskPremiumModel, observable_projection

from conftest import two_factor_model


def test_tanh_closed_form():
    rp = RiskPremiumModel(Constant([0.0]), Constant([[0.0]]), Constant([[1.0]]), [0.0], [[0.0]])
    t0 = time.perf_counter()
    cov = solve_covariance(rp, 3.0, 1e-3)
    elapsed = time.perf_counter() - t0
    err = np.abs(cov.Sigma[:, 0, 0] - np.tanh(cov.times)).max()
    assert err < 1e-6
    assert elapsed < 1.0


def test_matches_reference_integrator_with_time_dependent_coefficients():
    rp = RiskPremiumModel(Constant([0.1, 0.0]), Affine([[0.5, 0.1], [0.0, 1.0]], [[0.2, 0.0], [0.0, -0.3]]),
                          Constant([[0.3, 0.0], [0.1, 0.2]]), [0.0, 0.0], [[0.2, 0.05], [0.05, 0.1]])
    cov = solve_covariance(rp, 2.0, 1e-3)

    def rhs(t, y):
        S = y.reshape(2, 2)
        _, F, dl = rp.coefficients(t)
        return (dl @ dl.T - F @ S - S @ F.T - S @ S).ravel()

    ref = solve_ivp(rhs, (0, 2), rp.Sigma0.ravel(), t_eval=cov.times[::100], rtol=1e-11, atol=1e-13)
    got = cov.Sigma[::100].reshape(-1, 4)
    assert np.abs(got - ref.y.T).max() < 1e-8


def test_stationary_limit_scalar():
    # Sigma' = delta^2 - 2 F Sigma - Sigma^2 settles at -F + sqrt(F^2 + delta^2)
    F, dl = 0.7, 0.4
    rp = RiskPremiumModel(Constant([0.0]), Constant([[F]]), Constant([[dl]]), [0.0], [[0.0]])
    cov = solve_covariance(rp, 20.0, 1e-2)
    assert abs(cov.Sigma[-1, 0, 0] - (-F + np.hypot(F, dl))) < 1e-10


def test_interpolation_and_blocks():
    m = two_factor_model()
    cov = solve_covariance(m.premium, 1.0, 0.01, d=1)
    mid = cov.at(0.005)
    assert np.allclose(mid, 0.5 * (cov.Sigma[0] + cov.Sigma[1]))
    assert cov.Sigma_d(0.3).shape == (1, 2)
    assert cov.Sigma_m(0.3).shape == (1, 2)
    S = cov.at(0.3)
    assert np.allclose(cov.Xi(0.3), xi_matrix(S, 1))


@settings(max_examples=30, deadline=None)
@given(
    f=st.floats(-1.0, 2.0),
    dl=st.floats(0.0, 1.5),
    s0=st.floats(0.0, 1.0),
    c=st.floats(-0.5, 0.5),
)
def test_covariance_stays_symmetric_psd(f, dl, s0, c):
    F = np.array([[f, c], [0.0, 0.5]])
    D = np.array([[dl, 0.0], [c, dl]])
    S0 = s0 * np.eye(2)
    rp = RiskPremiumModel(Constant([0.0, 0.0]), Constant(F), Constant(D), [0.0, 0.0], S0)
    cov = solve_covariance(rp, 1.0, 0.01)
    assert np.allclose(cov.Sigma, np.transpose(cov.Sigma, (0, 2, 1)))
    assert np.linalg.eigvalsh(cov.Sigma).min() > -1e-10


def test_online_filter_equals_offline_replay():
    m = two_factor_model()
    cov = solve_covariance(m.premium, 1.0, 0.001, d=1)
    ens = simulate_truth_ensemble(m, 1.0, 0.01, 3, 4, cov=cov)
    for i in range(4):
        run = run_kalman(observable_projection(ens.path(i)), m.market, m.premium, cov)
        assert np.abs(run.z_hat - ens.zhat[i]).max() < 1e-12
        nu = innovations(run)
        assert nu.shape == (len(ens.times), 2)
        assert np.all(nu[0] == 0)


def test_innovations_are_standard_brownian():
    m = two_factor_model()
    cov = solve_covariance(m.premium, 1.0, 0.001, d=1)
    ens = simulate_truth_ensemble(m, 1.0, 0.05, 8, 400, cov=cov)
    finals = []
    for i in range(400):
        run = run_kalman(observable_projection(ens.path(i)), m.market, m.premium, cov)
        finals.append(innovations(run)[-1])
    finals = np.array(finals)
    # N(0, I) at T = 1: mean within 4 SE, variance within 25%
    assert np.all(np.abs(finals.mean(axis=0)) < 4 / np.sqrt(400))
    assert np.all(np.abs(finals.var(axis=0) - 1) < 0.25)


def test_filter_reduces_error_against_prior_mean():
    m = two_factor_model()
    cov = solve_covariance(m.premium, 2.0, 0.001, d=1)
    ens = simulate_truth_ensemble(m, 2.0, 0.01, 9, 500, cov=cov)
    err_filter = np.mean((ens.zhat[:, -1] - ens.z[:, -1]) ** 2, axis=0)
    # the posterior variance of the filter is Sigma(T)
    assert np.allclose(err_filter, np.diag(cov.Sigma[-1]), rtol=0.25)
