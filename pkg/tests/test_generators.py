from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qbsde.constraints import ConstraintSet
from qbsde.generators import (
    H1Certificate,
    H2Certificate,
    Phi_L,
    SampleBox,
    apriori_bounds,
    check_h1,
    check_h2,
    make_custom_generator,
    make_exponential_generator,
    make_log_generator,
    make_power_generator,
    make_quadratic_generator,
    phi,
    psi_gamma,
    psi_gamma_prime,
)
from qbsde.market import MarketModel

MODEL1 = MarketModel(d=1, vol=0.4, premium=0.7, T=1.0)
MODEL2 = MarketModel(d=2, vol=[[0.3, 0.0], [0.1, 0.25]], premium=[0.5, -0.3], T=1.0)
SMALL = SampleBox(n=500)


def _mlam(model):
    return model.m_at(0.0) @ model.lambda_at(0.0)


# ---------------------------------------------------------------------------
# exponential
# ---------------------------------------------------------------------------
def test_exponential_full_space_is_linear():
    alpha = 1.3
    F = make_exponential_generator(MODEL2, ConstraintSet.full_space(2), alpha)
    z = np.array([0.4, -1.2])
    ml = _mlam(MODEL2)
    mz = MODEL2.m_at(0.0) @ z
    assert F(0.0, 0.0, z) == pytest.approx(-mz @ ml - ml @ ml / (2 * alpha), abs=1e-14)


def test_exponential_singleton_is_quadratic():
    alpha = 0.8
    F = make_exponential_generator(MODEL2, ConstraintSet.singleton([0.0, 0.0]), alpha)
    rng = np.random.Generator(np.random.Philox(1))
    for z in rng.uniform(-3, 3, (20, 2)):
        mz = MODEL2.m_at(0.0) @ z
        assert F(0.0, 0.0, z) == pytest.approx(0.5 * alpha * mz @ mz, rel=1e-12, abs=1e-14)


@given(z0=st.floats(-5, 5), z1=st.floats(-5, 5), k=st.integers(0, 3))
def test_exponential_two_sided_bounds(z0, z1, k):
    sets = [ConstraintSet.full_space(2), ConstraintSet.box([-1, -1], [1, 1]),
            ConstraintSet.ball([0, 0], 0.5), ConstraintSet.finite_set([[0, 0], [1, 2]])]
    alpha = 1.5
    F = make_exponential_generator(MODEL2, sets[k], alpha)
    z = np.array([z0, z1])
    mz = MODEL2.m_at(0.0) @ z
    ml = _mlam(MODEL2)
    f = F(0.0, 0.0, z)
    assert f <= 0.5 * alpha * mz @ mz + 1e-12
    assert f >= -(0.5 * alpha * mz @ mz + ml @ ml / alpha) - 1e-12


@given(z=st.floats(-5, 5))
def test_enlarging_the_set_lowers_every_driver(z):
    small = ConstraintSet.box([-0.5], [0.5])
    large = small.subset_of_union(ConstraintSet.singleton([2.0], require_origin=False))
    zz = np.array([z])
    for make in (lambda c: make_exponential_generator(MODEL1, c, 1.0),
                 lambda c: make_power_generator(MODEL1, c, 0.4),
                 lambda c: make_log_generator(MODEL1, c)):
        assert make(large)(0.0, 0.0, zz) <= make(small)(0.0, 0.0, zz) + 1e-12


def test_exponential_rejects_bad_inputs():
    with pytest.raises(ValueError):
        make_exponential_generator(MODEL1, ConstraintSet.full_space(1), 0.0)
    with pytest.raises(ValueError):
        make_exponential_generator(MODEL1, ConstraintSet.box([0.5], [1.0], require_origin=False), 1.0)


# ---------------------------------------------------------------------------
# power and log
# ---------------------------------------------------------------------------
def test_power_full_space_at_zero():
    g = 0.3
    F = make_power_generator(MODEL2, ConstraintSet.full_space(2), g)
    ml = _mlam(MODEL2)
    assert F(0.0, 0.0, np.zeros(2)) == pytest.approx(-g / (2 * (1 - g)) * ml @ ml, rel=1e-12)


def test_power_zero_premium_and_singleton():
    F0 = make_power_generator(MarketModel(d=1, vol=0.4, premium=0.0, T=1.0), ConstraintSet.box([-1], [1]), 0.5)
    assert F0(0.0, 0.0, np.zeros(1)) == 0.0
    Fs = make_power_generator(MODEL1, ConstraintSet.singleton([0.0]), 0.5)
    assert Fs(0.0, 0.0, np.zeros(1)) == pytest.approx(0.0, abs=1e-15)
    assert Fs.beta == 0.5


def test_power_rejects_gamma():
    for g in (0.0, 1.0, -0.2, 1.5):
        with pytest.raises(ValueError):
            make_power_generator(MODEL1, ConstraintSet.full_space(1), g)


def test_log_driver_values():
    full = make_log_generator(MODEL2, ConstraintSet.full_space(2))
    ml = _mlam(MODEL2)
    assert full(0.0, 0.0, np.zeros(2)) == pytest.approx(-0.5 * ml @ ml, rel=1e-12)
    single = make_log_generator(MODEL2, ConstraintSet.singleton([0.0, 0.0]))
    assert single(0.0, 0.0, np.zeros(2)) == pytest.approx(0.0, abs=1e-15)
    flat = make_log_generator(MarketModel(d=1, vol=0.3, premium=0.0, T=1.0), ConstraintSet.box([-1], [1]))
    assert flat(0.0, 0.0, np.zeros(1)) == 0.0
    assert full.beta == 0.0


@given(y1=st.floats(-10, 10), y2=st.floats(-10, 10), z=st.floats(-3, 3))
def test_builtin_drivers_ignore_y(y1, y2, z):
    zz = np.array([z])
    for F in (make_exponential_generator(MODEL1, ConstraintSet.box([-1], [2]), 1.2),
              make_power_generator(MODEL1, ConstraintSet.box([-1], [2]), 0.4),
              make_log_generator(MODEL1, ConstraintSet.box([-1], [2]))):
        assert F(0.0, y1, zz) == F(0.0, y2, zz)


# ---------------------------------------------------------------------------
# certificates
# ---------------------------------------------------------------------------
def test_h1_zero_driver_slack_zero():
    h1 = H1Certificate(alpha_bar=lambda s, x=None: 0.0, a=0.0, b=0.0, gamma=1.0, beta=0.0)
    F = make_custom_generator(None, lambda s, y, z, x=None: np.zeros(len(y)), h1=h1)
    rep = check_h1(F, SMALL)
    assert rep.passed
    assert rep.worst_slack >= 0


@pytest.mark.parametrize("make", [
    lambda: make_exponential_generator(MODEL2, ConstraintSet.ball([0, 0], 1.0), 1.1),
    lambda: make_power_generator(MODEL2, ConstraintSet.box([-1, -1], [1, 1]), 0.4),
    lambda: make_log_generator(MODEL2, ConstraintSet.finite_set([[0, 0], [1, 1]])),
    lambda: make_quadratic_generator(MODEL1, constant=0.3, y_coef=-0.5, z_linear=[0.2], z_quadratic=1.0),
])
def test_builtin_certificates_validate(make):
    F = make()
    assert check_h1(F, SMALL).passed
    assert check_h2(F, SMALL).passed


def test_cubic_driver_fails_h1():
    h1 = H1Certificate(alpha_bar=lambda s, x=None: 1.0, a=1.0, b=0.0, gamma=10.0, beta=0.0)
    F = make_custom_generator(None, lambda s, y, z, x=None: np.abs(z[:, 0]) ** 3, h1=h1)
    rep = check_h1(F, SampleBox(z=(-20.0, 20.0), n=500))
    assert not rep.passed
    # |z|^3 > 1 + 5 z^2 beyond z ~ 5.04
    assert abs(rep.worst_point["z"][0]) > 5.0


def test_exponential_h2_constants():
    alpha = 1.7
    F = make_exponential_generator(MODEL1, ConstraintSet.box([-1], [1]), alpha)
    assert F.h2.C2 == alpha / 2
    assert F.h2.mu == 0.0
    assert np.allclose(F.h2.theta(0.0), 4 * MODEL1.lambda_at(0.0) / alpha)


def test_pure_quadratic_h2():
    gamma = 2.0
    F = make_quadratic_generator(MODEL1, z_quadratic=gamma)
    assert F.h2.C2 == gamma / 2
    assert check_h2(F, SMALL).passed


def test_h2_absent_raises():
    F = make_custom_generator(None, lambda s, y, z, x=None: np.zeros(len(y)))
    with pytest.raises(ValueError):
        check_h2(F)


# ---------------------------------------------------------------------------
# bounds and helper functions
# ---------------------------------------------------------------------------
def _h1(a, b, gamma=1.0):
    return H1Certificate(alpha_bar=lambda s, x=None: a, a=a, b=b, gamma=max(gamma, b), beta=0.0)


def test_apriori_bounds_examples():
    assert apriori_bounds(_h1(0.0, 0.0), 0.7).c_high == 0.7
    assert apriori_bounds(_h1(1.0, 0.0), 0.0).c_high == 1.0
    assert apriori_bounds(_h1(1.0, 1e-12), 0.0).c_high == pytest.approx(1.0, rel=1e-9)
    b = apriori_bounds(_h1(1.0, 1.0), 1.0)
    assert b.c_high == pytest.approx(4.436564, abs=1e-6)
    assert b.c_low == -b.c_high


@given(a=st.floats(0, 3), b=st.floats(0, 2), s=st.floats(0, 3), da=st.floats(0, 1), db=st.floats(0, 1),
       ds=st.floats(0, 1))
def test_apriori_bounds_monotone(a, b, s, da, db, ds):
    base = apriori_bounds(_h1(a, b, 2.5), s).c_high
    assert apriori_bounds(_h1(a + da, b, 2.5), s).c_high >= base - 1e-12
    assert apriori_bounds(_h1(a, b + db, 2.5), s).c_high >= base - 1e-12
    assert apriori_bounds(_h1(a, b, 2.5), s + ds).c_high >= base - 1e-12


def test_helpers_vanish_at_zero():
    assert psi_gamma(0.0, 1.3) == 0.0
    assert Phi_L(0.0, 2.0) == 0.0


@given(x=st.floats(0, 4), L=st.floats(0.05, 3))
def test_phi_L_ode(x, L):
    # Phi'' - L Phi' = 1 with Phi' = (e^{Lx} - 1)/L and Phi'' = e^{Lx}
    d1 = psi_gamma_prime(x, L)
    d2 = math.exp(L * x)
    assert d2 - L * d1 == pytest.approx(1.0, rel=1e-9)
    h = 1e-4
    num = (Phi_L(x + h, L) - 2 * Phi_L(x, L) + Phi_L(x - h, L)) / h**2 if x > h else d2
    assert num == pytest.approx(d2, rel=1e-4)


def test_phi_ordering_in_time():
    h1 = H1Certificate(alpha_bar=lambda s, x=None: 0.4 + 0.2 * s, a=0.5, b=0.3, gamma=1.2, beta=0.0)
    T = 1.0
    z = np.linspace(0, 3, 31)
    vals = [phi(t, z, h1, T) for t in (0.0, 0.3, 0.7, 1.0)]
    assert np.all(vals[-1] >= 1.0)
    for early, late in zip(vals[:-1], vals[1:]):
        assert np.all(late <= early + 1e-15)
    with pytest.raises(ValueError):
        phi(0.0, -1.0, h1, T)


def test_h1_invariants_enforced():
    with pytest.raises(ValueError):
        H1Certificate(alpha_bar=lambda s, x=None: 1.0, a=1.0, b=2.0, gamma=1.0, beta=0.0)
    with pytest.raises(ValueError):
        H1Certificate(alpha_bar=lambda s, x=None: 1.0, a=1.0, b=0.0, gamma=1.0, beta=2.0)


def test_h2_rejects_negative_constants():
    with pytest.raises(ValueError):
        H2Certificate(mu=0.0, C2=-1.0, theta=lambda s, x=None: np.ones(1), c_theta=1.0)
    with pytest.raises(ValueError):
        H2Certificate(mu=0.0, C2=1.0, theta=lambda s, x=None: np.ones(1), c_theta=-1.0)
