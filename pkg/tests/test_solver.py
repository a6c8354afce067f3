from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.polynomial.hermite_e import hermegauss

from qbsde.constraints import ConstraintSet
from qbsde.generators import (
    energy_bound,
    make_custom_generator,
    make_exponential_generator,
    make_quadratic_generator,
)
from qbsde.market import MarketModel
from qbsde.solver import (
    BSDEProblem,
    PicardError,
    RegressionSettings,
    batch_stderr,
    basis,
    energy_estimate,
    lattice_value,
    picard_step,
    solve,
)

MODEL = MarketModel(d=1, vol=0.5, premium=0.4, T=1.0)
NODES, WEIGHTS = hermegauss(120)
WEIGHTS = WEIGHTS / WEIGHTS.sum()


def gauss_mean(fn, shift=0.0, T=1.0):
    """``E[fn(sqrt(T) xi + shift)]`` for a standard normal ``xi``."""
    return float(WEIGHTS @ fn(math.sqrt(T) * NODES + shift))


def _zero(model, d=1):
    return make_custom_generator(model, lambda s, y, z, x=None: np.zeros(len(y)), d=d, y_free=True)


def sin_term(w):
    return np.sin(w[:, 0])


# ---------------------------------------------------------------------------
# implicit step
# ---------------------------------------------------------------------------
def test_picard_y_free_single_iteration():
    F = make_quadratic_generator(MODEL, constant=1.0, z_quadratic=1.0)
    y, it = picard_step(F, 0.0, 2.0, np.array([0.0]), 0.1)
    assert it == 1
    assert y == pytest.approx(2.1)


def test_picard_linear_in_y():
    F = make_custom_generator(None, lambda s, y, z, x=None: -y, d=1)
    y, _ = picard_step(F, 0.0, 1.0, np.zeros(1), 0.01)
    assert y == pytest.approx(1 / 1.01, abs=1e-12)


def test_picard_raises_without_fixed_point():
    # y = 1 + y^2 has no real root
    F = make_custom_generator(None, lambda s, y, z, x=None: y**2, d=1)
    with pytest.raises(PicardError):
        picard_step(F, 0.0, 1.0, np.zeros(1), 1.0, max_iters=100)


@given(E=st.floats(-3, 3), k=st.floats(-2, 2), dt=st.floats(1e-3, 0.2))
def test_picard_solves_affine_step(E, k, dt):
    F = make_custom_generator(None, lambda s, y, z, x=None: k * y + 0.5, d=1)
    y, _ = picard_step(F, 0.0, E, np.zeros(1), dt)
    assert y == pytest.approx((E + 0.5 * dt) / (1 - k * dt), abs=1e-10)


# ---------------------------------------------------------------------------
# lattice
# ---------------------------------------------------------------------------
def test_lattice_zero_driver_is_martingale():
    sol = solve(BSDEProblem(driver=_zero(MODEL), model=MODEL, terminal=lambda w: w[:, 0], n_steps=50))
    for i in (0, 10, 49):
        assert np.allclose(sol.Y[i], sol.states[i][:, 0], atol=1e-13)
    # B = W_T gives m Z = 1 everywhere
    assert np.allclose(sol.Z[0], 1 / 0.5)
    assert energy_estimate(sol) == pytest.approx(1.0, rel=1e-12)


def test_lattice_constant_driver():
    kappa = 0.7
    F = make_quadratic_generator(MODEL, constant=kappa)
    sol = solve(BSDEProblem(driver=F, model=MODEL, terminal=sin_term, n_steps=100))
    # E[sin(W_T)] = 0 on the symmetric tree
    assert sol.y0 == pytest.approx(kappa * MODEL.T, abs=1e-13)


def test_lattice_zero_energy_for_constant_terminal():
    sol = solve(BSDEProblem(driver=_zero(MODEL), model=MODEL, terminal=lambda w: np.full(len(w), 3.0), n_steps=20))
    assert sol.y0 == 3.0
    assert energy_estimate(sol) == 0.0


def test_lattice_exponential_full_space():
    alpha = 1.2
    F = make_exponential_generator(MODEL, ConstraintSet.full_space(1), alpha)
    sol = solve(BSDEProblem(driver=F, model=MODEL, terminal=sin_term, n_steps=400))
    ml = 0.5 * 0.4
    # Girsanov: W_T = sqrt(T) xi - m lambda T under the pricing measure
    oracle = gauss_mean(np.sin, -ml) - ml**2 / (2 * alpha)
    assert sol.y0 == pytest.approx(oracle, abs=2e-3)


def test_lattice_quadratic_cole_hopf():
    gamma = 1.5
    F = make_quadratic_generator(MODEL, z_quadratic=gamma)
    sol = solve(BSDEProblem(driver=F, model=MODEL, terminal=sin_term, n_steps=400))
    # exp(gamma Y) is a martingale
    oracle = math.log(gauss_mean(lambda w: np.exp(gamma * np.sin(w)))) / gamma
    assert sol.y0 == pytest.approx(oracle, abs=2e-3)


def test_lattice_error_halves_with_step_doubling():
    gamma = 1.5
    F = make_quadratic_generator(MODEL, z_quadratic=gamma)
    oracle = math.log(gauss_mean(lambda w: np.exp(gamma * np.cos(w)))) / gamma
    errs = [abs(solve(BSDEProblem(driver=F, model=MODEL, terminal=lambda w: np.cos(w[:, 0]), n_steps=n)).y0 - oracle)
            for n in (50, 100, 200, 400)]
    ratios = [a / b for a, b in zip(errs[:-1], errs[1:])]
    assert all(1.6 <= r <= 2.4 for r in ratios), ratios


def test_lattice_energy_below_certificate():
    F = make_exponential_generator(MODEL, ConstraintSet.box([-1], [1]), 1.0)
    sol = solve(BSDEProblem(driver=F, model=MODEL, terminal=sin_term, n_steps=200, b_sup=1.0))
    assert 0 < energy_estimate(sol) <= energy_bound(F.h1, 1.0)
    assert sol.diagnostics["bound_violations"] == 0


def test_lattice_scheme_comparison():
    F = make_exponential_generator(MODEL, ConstraintSet.box([-1], [1]), 1.0)
    lo = solve(BSDEProblem(driver=F, model=MODEL, terminal=sin_term, n_steps=200))
    hi = solve(BSDEProblem(driver=F, model=MODEL, terminal=lambda w: np.maximum(np.sin(w[:, 0]), 0.0),
                           n_steps=200))
    for i in range(0, 201, 20):
        assert np.all(lo.Y[i] <= hi.Y[i] + 1e-13)


def test_lattice_value_interpolates():
    sol = solve(BSDEProblem(driver=_zero(MODEL), model=MODEL, terminal=lambda w: w[:, 0], n_steps=10))
    assert lattice_value(sol, 0, 0.3) == pytest.approx(0.0)
    assert lattice_value(sol, 10, 0.1) == pytest.approx(0.1)


def test_lattice_rejects_multi_dimensional_model():
    m2 = MarketModel(d=2, vol=[0.3, 0.2], premium=[0.1, 0.1], T=1.0)
    with pytest.raises(ValueError):
        solve(BSDEProblem(driver=_zero(m2, 2), model=m2, terminal=sin_term, n_steps=5))


# ---------------------------------------------------------------------------
# regression
# ---------------------------------------------------------------------------
def _reg(n_paths=20_000, seed=3, **kw):
    return RegressionSettings(n_paths=n_paths, seed=seed, **kw)


def test_regression_constant_case():
    F = make_quadratic_generator(MODEL, constant=0.25)
    sol = solve(BSDEProblem(driver=F, model=MODEL, terminal=lambda w: np.full(len(w), 2.0), n_steps=10,
                            backend="regression", regression=_reg(2000)))
    assert sol.y0 == pytest.approx(2.25, abs=1e-12)
    assert sol.y0_stderr == pytest.approx(0.0, abs=1e-12)


def test_regression_two_dimensional_closed_form():
    model = MarketModel(d=2, vol=[[0.3, 0.0], [0.1, 0.25]], premium=[0.5, -0.3], T=1.0)
    alpha = 1.0
    F = make_exponential_generator(model, ConstraintSet.full_space(2), alpha)
    sol = solve(BSDEProblem(driver=F, model=model, terminal=sin_term, n_steps=20, backend="regression",
                            regression=_reg(50_000)))
    ml = model.m_at(0.0) @ model.lambda_at(0.0)
    oracle = gauss_mean(np.sin, -ml[0]) - ml @ ml / (2 * alpha)
    assert abs(sol.y0 - oracle) <= 4 * sol.y0_stderr + 5e-3


def test_regression_matches_lattice():
    F = make_exponential_generator(MODEL, ConstraintSet.box([-1], [1]), 1.0)
    lat = solve(BSDEProblem(driver=F, model=MODEL, terminal=sin_term, n_steps=400))
    reg = solve(BSDEProblem(driver=F, model=MODEL, terminal=sin_term, n_steps=20, backend="regression",
                            regression=_reg(50_000)))
    assert abs(reg.y0 - lat.y0) <= 4 * reg.y0_stderr + 5e-3


def test_regression_independent_of_threads():
    F = make_exponential_generator(MODEL, ConstraintSet.box([-1], [1]), 1.0)
    sols = [solve(BSDEProblem(driver=F, model=MODEL, terminal=sin_term, n_steps=5, backend="regression",
                              regression=_reg(10_000, threads=t))) for t in (1, 3)]
    assert sols[0].y0 == sols[1].y0
    assert np.array_equal(sols[0].Y, sols[1].Y)


def test_regression_terminal_consistency():
    F = make_exponential_generator(MODEL, ConstraintSet.box([-1], [1]), 1.0)
    sol = solve(BSDEProblem(driver=F, model=MODEL, terminal=sin_term, n_steps=5, backend="regression",
                            regression=_reg(5000)))
    assert np.array_equal(sol.Y[-1], np.sin(sol.states[-1][:, 0]))
    assert sol.Y.shape == (6, 5000)
    assert sol.Z.shape == (5, 5000, 1)


def test_regression_rejects_few_paths():
    with pytest.raises(ValueError):
        solve(BSDEProblem(driver=_zero(MODEL), model=MODEL, terminal=sin_term, n_steps=5, backend="regression",
                          regression=_reg(100)))


def test_basis_size_and_constant_column():
    states = np.random.Generator(np.random.Philox(0)).normal(size=(50, 2))
    phi = basis(states, 0.5, 3)
    # monomials of total degree <= 3 in two variables
    assert phi.shape == (50, 10)
    assert np.any(np.all(phi == 1.0, axis=0))


def test_batch_stderr_of_constant_is_zero():
    assert batch_stderr(np.ones(1000)) == 0.0
    x = np.random.Generator(np.random.Philox(2)).normal(size=100_000)
    assert batch_stderr(x) == pytest.approx(1 / math.sqrt(100_000), rel=0.5)
