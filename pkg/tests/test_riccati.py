from __future__ import annotations

import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowhedge import riccati
from flowhedge.coefficients import Constant
from flowhedge.errors import BlowUp
from flowhedge.kalman import CovarianceSolution, solve_covariance
from flowhedge.market import ChainModel, Model, RiskPremiumModel

from conftest import two_factor_model
from oracles import bsde_residual


def _deterministic(z0, d):
    n = len(z0)
    rp = RiskPremiumModel(Constant(np.zeros(n)), Constant(np.zeros((n, n))), Constant(np.zeros((n, n))), z0,
                          np.zeros((n, n)))
    return rp, solve_covariance(rp, 1.0, 1e-3, d=d)


def test_terminal_values():
    m = two_factor_model()
    cov = solve_covariance(m.premium, 1.0, 1e-3, d=1)
    sol = riccati.solve(m.premium, cov, 1.0)
    assert np.all(sol.a2[-1] == 0) and np.all(sol.a1[-1] == 0) and sol.a0[-1] == 0
    z = np.random.default_rng(0).normal(size=(5, 2))
    assert np.all(riccati.v2(sol, 1.0, z) == 1.0)
    zl, gl = riccati.z_l(sol, cov, 1.0, z)
    assert np.all(zl == 0) and np.all(gl == 0)


@pytest.mark.parametrize("z0,d", [([0.2], 1), ([0.3, -0.2], 2), ([0.2, 0.7], 1)])
def test_deterministic_premium_closed_form(z0, d):
    rp, cov = _deterministic(z0, d)
    sol = riccati.solve(rp, cov, 1.0)
    theta2 = float(np.sum(np.square(z0[:d])))
    assert abs(riccati.v2(sol, 0.0, z0) - np.exp(-theta2)) < 1e-8
    Pd = sol.P_d
    for k in (0, len(sol.times) // 2):
        assert np.allclose(sol.a2[k], -2 * (1.0 - sol.times[k]) * Pd, atol=1e-12)
    assert np.abs(sol.a1).max() == 0 and np.abs(sol.a0).max() == 0


@pytest.mark.parametrize("c", [1.0, 2.0])
def test_blowup_reports_time(c):
    # Scalar comparison equation with a prescribed Sigma = c and F = -c: backward
    # in time x = -a2 solves x' = (c x - 1)^2 + 1 and diverges after 3 pi / (4 c).
    T = 5.0
    rp = RiskPremiumModel(Constant([0.0]), Constant([[-c]]), Constant([[0.0]]), [0.1], [[c]])
    times = np.linspace(0.0, T, 5001)
    cov = CovarianceSolution(times, np.full((times.size, 1, 1), c), 1)
    with pytest.raises(BlowUp) as info:
        riccati.solve(rp, cov, T)
    assert info.value.time == pytest.approx(T - 3 * np.pi / (4 * c), abs=5e-3)
    assert info.value.norm > riccati.BLOWUP_NORM


def test_v_l_at_origin_is_a0():
    m = two_factor_model()
    cov = solve_covariance(m.premium, 1.0, 1e-3, d=1)
    sol = riccati.solve(m.premium, cov, 1.0)
    for t in (0.0, 0.37, 0.9):
        assert riccati.v_l(sol, t, np.zeros(2)) == pytest.approx(sol.coeffs(t)[2], abs=1e-15)


def test_gradient_matches_central_differences():
    m = two_factor_model()
    cov = solve_covariance(m.premium, 1.0, 1e-3, d=1)
    sol = riccati.solve(m.premium, cov, 1.0)
    z = np.array([0.3, -0.4])
    g = riccati.grad_v_l(sol, 0.2, z)
    eps = 1e-5
    fd = [(riccati.v_l(sol, 0.2, z + eps * e) - riccati.v_l(sol, 0.2, z - eps * e)) / (2 * eps) for e in np.eye(2)]
    assert np.allclose(g, fd, atol=1e-6)


def test_loadings_and_z2():
    m = two_factor_model()
    cov = solve_covariance(m.premium, 1.0, 1e-3, d=1)
    sol = riccati.solve(m.premium, cov, 1.0)
    z = np.array([[0.1, 0.2], [-0.3, 0.0]])
    zl, gl = riccati.z_l(sol, cov, 0.4, z)
    assert zl.shape == (2, 1) and gl.shape == (2, 1)
    full = (cov.at(0.4) @ riccati.grad_v_l(sol, 0.4, z).T).T
    assert np.allclose(np.c_[zl, gl], full)
    assert np.allclose(riccati.z2(sol, cov, 0.4, z), zl * riccati.v2(sol, 0.4, z)[:, None])
    # perfect information: no loadings
    zero = CovarianceSolution(cov.times, np.zeros_like(cov.Sigma), 1)
    zl0, gl0 = riccati.z_l(sol, zero, 0.4, z)
    assert np.all(zl0 == 0) and np.all(gl0 == 0)


@settings(max_examples=25, deadline=None)
@given(
    f=st.floats(-0.3, 2.0),
    dl=st.floats(0.0, 1.0),
    s0=st.floats(0.0, 0.5),
    mu=st.floats(-0.5, 0.5),
)
def test_value_bounds_and_negative_semidefinite(f, dl, s0, mu):
    rp = RiskPremiumModel(Constant([mu, 0.0]), Constant([[f, 0.2], [0.0, 1.0]]), Constant(dl * np.eye(2)),
                          [0.1, 0.0], s0 * np.eye(2))
    cov = solve_covariance(rp, 1.0, 5e-3, d=1)
    sol = riccati.solve(rp, cov, 1.0)
    assert np.linalg.eigvalsh(sol.a2).max() <= 1e-10
    assert np.allclose(sol.a2, np.transpose(sol.a2, (0, 2, 1)))
    z = np.random.default_rng(1).normal(scale=2.0, size=(200, 2))
    for t in (0.0, 0.5):
        v = riccati.v2(sol, t, z)
        assert np.all(v > 0) and np.all(v <= 1 + 1e-12)


def test_bsde_residual_decays_with_step():
    m = two_factor_model()
    model = Model(m.market, m.premium, ChainModel(1, Constant([[0.0]]), [1.0]), (), ())
    cov = solve_covariance(m.premium, 1.0, 1e-4, d=1)
    sol = riccati.solve(m.premium, cov, 1.0)
    coarse = bsde_residual(model, cov, sol, 1.0, 0.04, 5, 200)
    fine = bsde_residual(model, cov, sol, 1.0, 0.01, 5, 200)
    # first order: a 4x finer step cuts the residual roughly 4x
    assert 2.5 < coarse / fine < 6.0


def test_csv_export(tmp_path):
    rp, cov = _deterministic([0.2], 1)
    sol = riccati.solve(rp, cov, 1.0)
    out = tmp_path / "ric.csv"
    riccati.write_csv(sol, out, z_ref=[0.2])
    with open(out, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "a2_00", "a1_0", "a0", "V2_z0"]
    assert len(rows) == len(sol.times) + 1
    assert float(rows[1][-1]) == pytest.approx(np.exp(-0.04), abs=1e-8)
    assert float(rows[-1][-1]) == 1.0
