"""Drivers for the utility problems, growth certificates and a priori bounds.

A driver is evaluated on batches: ``y`` has shape ``(n,)``, ``z`` and the
optional state ``x`` have shape ``(n, d)``.  Scalar ``y`` with a single
d-vector ``z`` is also accepted and returns a float.

Sign convention: the backward equation is ``Y_t = B + int_t^T F(s, Y_s, Z_s) ds
- int_t^T Z_s dM_s``.  The power and log drivers are returned exactly as
written in their closed forms; the value-function equations integrate their
negatives, see :func:`negate`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy import integrate
from scipy.stats import qmc

from .constraints import ConstraintSet, contains, dist_sq
from .market import MarketModel, matvec

VARIANTS = ("H1", "H1_prime", "H1_double_prime")
_CHECK_RTOL = 1e-9


def _const_fn(value: float) -> Callable:
    def fn(s, x=None):
        return np.float64(value)

    return fn


@dataclass
class H1Certificate:
    """Quadratic-growth certificate ``|F| <= abar + b abar |y| + (gamma/2)|m z|^2``.

    ``alpha_bar(s, x)`` returns the process value at time ``s`` (scalar, or one
    value per state row).  ``a`` bounds its time integral.  ``C1`` is only used
    by the H1_double_prime lower bound ``-C1 (abar + |m z|) <= F``.
    """

    alpha_bar: Callable
    a: float
    b: float
    gamma: float
    beta: float
    variant: str = "H1"
    C1: float = 0.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown certificate variant {self.variant!r}")
        if self.a < 0 or self.b < 0 or self.gamma < 0 or self.C1 < 0:
            raise ValueError("certificate parameters a, b, gamma, C1 must be non-negative")
        tol = 1e-12 * max(1.0, self.gamma)
        if self.gamma + tol < abs(self.beta) or self.gamma + tol < self.b:
            raise ValueError("certificate needs gamma >= |beta| and gamma >= b")

    def integrated(self, t0: float, t1: float) -> float:
        """``int_{t0}^{t1} alpha_bar ds`` along the zero state."""
        if t1 <= t0:
            return 0.0
        val, _ = integrate.quad(lambda s: float(np.max(self.alpha_bar(s, None))), t0, t1, limit=200)
        return float(val)

    def check_integral(self, times) -> bool:
        """Left-point sum of ``alpha_bar`` on ``times`` stays below ``a``."""
        times = np.asarray(times, dtype=float)
        total = sum(float(np.max(self.alpha_bar(t, None))) * (t1 - t)
                    for t, t1 in zip(times[:-1], times[1:]))
        return total <= self.a * (1 + 1e-12) + 1e-15


@dataclass
class H2Certificate:
    """Monotonicity in ``y`` and local Lipschitz growth in ``z``.

    ``(y1 - y2)(F(y1) - F(y2)) <= mu |y1 - y2|^2`` and
    ``|F(z1) - F(z2)| <= C2 (|m theta| + |m z1| + |m z2|) |m (z1 - z2)|``.
    """

    mu: float
    C2: float
    theta: Callable
    c_theta: float

    def __post_init__(self):
        if self.C2 < 0 or self.c_theta < 0:
            raise ValueError("H2 constants C2 and c_theta must be non-negative")


@dataclass
class GeneratorSpec:
    """A driver ``F(s, y, z)`` of the Y-equation plus its certificates."""

    eval: Callable
    d: int
    beta: float
    h1: H1Certificate | None = None
    h2: H2Certificate | None = None
    model: MarketModel | None = None
    name: str = "custom"
    y_free: bool = False
    lipschitz_y: float | None = None
    params: dict = field(default_factory=dict)

    def __call__(self, s, y, z, x=None):
        y_arr = np.asarray(y, dtype=float)
        z_arr = np.asarray(z, dtype=float)
        scalar = y_arr.ndim == 0 and z_arr.ndim <= 1
        y_b = np.atleast_1d(y_arr)
        z_b = z_arr.reshape(-1, self.d)
        if y_b.shape[0] != z_b.shape[0]:
            y_b = np.broadcast_to(y_b, (z_b.shape[0],))
        x_b = None if x is None else np.asarray(x, dtype=float).reshape(-1, self.d)
        out = np.asarray(self.eval(s, y_b, z_b, x_b), dtype=float)
        out = np.broadcast_to(out, (z_b.shape[0],))
        return float(out[0]) if scalar else out

    def m_norm_sq(self, s, z, x=None) -> np.ndarray:
        """``|m_s z|^2`` for a batch of ``z`` (identity metric without a model)."""
        z = np.asarray(z, dtype=float).reshape(-1, self.d)
        if self.model is None:
            return np.sum(z**2, axis=-1)
        mz = matvec(self.model.m_at(s, x), z)
        return np.sum(mz**2, axis=-1)


# ---------------------------------------------------------------------------
# built-in drivers
# ---------------------------------------------------------------------------
def _require_origin(cset: ConstraintSet) -> None:
    if not contains(cset, np.zeros(cset.d)):
        raise ValueError("constraint set must contain 0")


def _sharpe_fn(model: MarketModel, scale: float) -> Callable:
    def fn(s, x=None):
        return scale * model.sharpe_sq(s, x)

    return fn


def make_exponential_generator(model: MarketModel, cset: ConstraintSet, alpha: float) -> GeneratorSpec:
    """Exponential-utility driver with liability-free certificates.

    ``F(s, z) = (alpha/2) dist^2(z + lambda/alpha) - (m z)'(m lambda) - |m lambda|^2/(2 alpha)``,
    with the distance measured in the ``m``-metric.
    """
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    _require_origin(cset)
    d = model.d

    def F(s, y, z, x=None):
        m = model.m_at(s, x)
        lam = model.lambda_at(s, x)
        ml = matvec(m, lam)
        mz = matvec(m, z)
        infimum = 0.5 * alpha * dist_sq(cset, z + lam / alpha, m)
        return infimum - np.sum(mz * ml, axis=-1) - np.sum(ml**2, axis=-1) / (2 * alpha)

    h1 = h2 = None
    if model.a_lambda is not None:
        h1 = H1Certificate(alpha_bar=_sharpe_fn(model, 1 / alpha), a=model.a_lambda / alpha,
                           b=0.0, gamma=alpha, beta=alpha, variant="H1")
        h2 = H2Certificate(mu=0.0, C2=alpha / 2, theta=lambda s, x=None: 4 * model.lambda_at(s, x) / alpha,
                           c_theta=16 * model.a_lambda / alpha**2)
    return GeneratorSpec(eval=F, d=d, beta=alpha, h1=h1, h2=h2, model=model, name="exponential",
                         y_free=True, lipschitz_y=0.0, params={"alpha": alpha})


def make_power_generator(model: MarketModel, cset: ConstraintSet, gamma_u: float) -> GeneratorSpec:
    """Power-utility driver ``f1`` (the value equation integrates ``-f1``).

    ``f1(s, z) = k dist^2((z + lambda)/(1 - g)) - k |m (z + lambda)/(1 - g)|^2 - |m z|^2 / 2``
    with ``k = g (1 - g) / 2`` and ``g = gamma_u``.
    """
    if not 0 < gamma_u < 1:
        raise ValueError("gamma_u must lie in (0, 1)")
    _require_origin(cset)
    d = model.d
    k = gamma_u * (1 - gamma_u) / 2

    def F(s, y, z, x=None):
        m = model.m_at(s, x)
        target = (z + model.lambda_at(s, x)) / (1 - gamma_u)
        mt = matvec(m, target)
        mz = matvec(m, z)
        return k * dist_sq(cset, target, m) - k * np.sum(mt**2, axis=-1) - 0.5 * np.sum(mz**2, axis=-1)

    h1 = h2 = None
    ratio = gamma_u / (1 - gamma_u)
    if model.a_lambda is not None:
        h1 = H1Certificate(alpha_bar=_sharpe_fn(model, ratio), a=ratio * model.a_lambda, b=0.0,
                           gamma=(1 + gamma_u) / (1 - gamma_u), beta=0.5, variant="H1")
        c2 = ratio + 0.5
        scale = 2 * ratio / c2
        h2 = H2Certificate(mu=0.0, C2=c2, theta=lambda s, x=None: scale * model.lambda_at(s, x),
                           c_theta=scale**2 * model.a_lambda)
    return GeneratorSpec(eval=F, d=d, beta=0.5, h1=h1, h2=h2, model=model, name="power",
                         y_free=True, lipschitz_y=0.0, params={"gamma_u": gamma_u})


def make_log_generator(model: MarketModel, cset: ConstraintSet) -> GeneratorSpec:
    """Log-utility driver ``f2(s) = dist^2(lambda)/2 - |m lambda|^2/2`` (integrated as ``-f2``)."""
    _require_origin(cset)
    d = model.d

    def F(s, y, z, x=None):
        m = model.m_at(s, x)
        lam = model.lambda_at(s, x)
        ml = matvec(m, lam)
        n = z.shape[0]
        lam_b = np.broadcast_to(lam, (n, d))
        return 0.5 * dist_sq(cset, lam_b, m) - 0.5 * np.sum(ml**2, axis=-1)

    h1 = h2 = None
    if model.a_lambda is not None:
        h1 = H1Certificate(alpha_bar=_sharpe_fn(model, 0.5), a=0.5 * model.a_lambda, b=0.0,
                           gamma=1.0, beta=0.0, variant="H1")
        h2 = H2Certificate(mu=0.0, C2=0.0, theta=lambda s, x=None: np.zeros(d), c_theta=0.0)
    return GeneratorSpec(eval=F, d=d, beta=0.0, h1=h1, h2=h2, model=model, name="log",
                         y_free=True, lipschitz_y=0.0)


def make_quadratic_generator(model: MarketModel, constant: float = 0.0, y_coef: float = 0.0,
                             z_linear=None, z_quadratic: float = 0.0, beta: float = 0.0) -> GeneratorSpec:
    """Table-defined driver ``kappa + l_y y + l_z'(m z) + (q/2)|m z|^2``.

    Certificates are derived from the coefficients (constant ``m`` required).
    """
    d = model.d
    lz = np.zeros(d) if z_linear is None else np.asarray(z_linear, dtype=float).reshape(d)
    kappa, ly, q = float(constant), float(y_coef), float(z_quadratic)

    def F(s, y, z, x=None):
        mz = matvec(model.m_at(s, x), z)
        return kappa + ly * y + mz @ lz + 0.5 * q * np.sum(mz**2, axis=-1)

    lz_norm = float(np.linalg.norm(lz))
    # |l_z||m z| <= |l_z|^2/2 + |m z|^2/2 absorbs the linear term
    abar = abs(kappa) + 0.5 * lz_norm**2
    gamma = abs(q) + (1.0 if lz_norm > 0 else 0.0)
    b = 0.0
    if ly != 0.0:
        abar = max(abar, abs(ly))
        b = abs(ly) / abar
    gamma = max(gamma, b, abs(beta))
    h1 = H1Certificate(alpha_bar=_const_fn(abar), a=abar * model.T, b=b, gamma=gamma, beta=beta)
    h2 = None
    if model.constant:
        m_inv = np.linalg.inv(model.m_at(0.0))
        if q != 0.0:
            c2, theta_norm = abs(q) / 2, lz_norm / (abs(q) / 2)
        else:
            c2, theta_norm = lz_norm, (1.0 if lz_norm > 0 else 0.0)
        theta_vec = m_inv @ np.eye(d)[0] * theta_norm
        h2 = H2Certificate(mu=ly, C2=c2, theta=lambda s, x=None: theta_vec, c_theta=theta_norm**2 * model.T)
    params = {"constant": kappa, "y_coef": ly, "z_linear": lz.tolist(), "z_quadratic": q}
    return GeneratorSpec(eval=F, d=d, beta=beta, h1=h1, h2=h2, model=model, name="custom",
                         y_free=(ly == 0.0), lipschitz_y=abs(ly), params=params)


def make_custom_generator(model: MarketModel | None, fn: Callable, d: int = 1, beta: float = 0.0,
                          h1: H1Certificate | None = None, h2: H2Certificate | None = None,
                          y_free: bool = False, lipschitz_y: float | None = None,
                          name: str = "custom") -> GeneratorSpec:
    """Wrap a vectorised ``fn(s, y, z, x)`` with user-declared certificates."""
    if model is not None:
        d = model.d
    return GeneratorSpec(eval=fn, d=d, beta=beta, h1=h1, h2=h2, model=model, name=name,
                         y_free=y_free, lipschitz_y=lipschitz_y)


def negate(spec: GeneratorSpec) -> GeneratorSpec:
    """The driver ``-F``; growth bounds carry over, one-sided ones do not."""
    base = spec.eval

    def F(s, y, z, x=None):
        return -np.asarray(base(s, y, z, x))

    h1 = spec.h1
    if h1 is not None and h1.variant == "H1_double_prime":
        h1 = replace(h1, variant="H1_prime", C1=0.0)
    h2 = spec.h2
    if h2 is not None and not spec.y_free:
        h2 = None
    return replace(spec, eval=F, h1=h1, h2=h2, name=f"-{spec.name}")


def shift(spec: GeneratorSpec, kappa: float) -> GeneratorSpec:
    """The driver ``F + kappa``; the growth certificate absorbs ``|kappa|`` into ``abar``."""
    base = spec.eval

    def F(s, y, z, x=None):
        return np.asarray(base(s, y, z, x)) + kappa

    h1 = spec.h1
    if h1 is not None and kappa != 0.0:
        old = h1.alpha_bar
        T = spec.model.T if spec.model is not None else 1.0

        def abar(s, x=None):
            return old(s, x) + abs(kappa)

        if h1.b > 0:
            # keep b * abar fixed so the y-term of the bound is unchanged
            h1 = None
        else:
            h1 = replace(h1, alpha_bar=abar, a=h1.a + abs(kappa) * T)
    return replace(spec, eval=F, h1=h1, name=f"{spec.name}+{kappa:g}")


# ---------------------------------------------------------------------------
# certificate sampling
# ---------------------------------------------------------------------------
@dataclass
class SampleBox:
    """Compact box over which certificates are audited."""

    s: tuple = (0.0, 1.0)
    y: tuple = (-5.0, 5.0)
    z: tuple = (-5.0, 5.0)
    x: tuple | None = None
    n: int = 10_000


@dataclass
class CertificateReport:
    passed: bool
    worst_slack: float
    n_samples: int
    worst_point: dict
    detail: str = ""


def _halton(dim: int, n: int) -> np.ndarray:
    # scrambling off: the audit grid must be the same on every run
    return qmc.Halton(d=dim, scramble=False).random(n + 1)[1:]


def _scale(u, lo_hi):
    lo, hi = lo_hi
    return lo + (hi - lo) * u


def check_h1(spec: GeneratorSpec, box: SampleBox | None = None) -> CertificateReport:
    """Audit the declared H1 variant on a Halton grid; slack = bound - |F|."""
    box = box or SampleBox()
    h1 = spec.h1
    if h1 is None:
        return CertificateReport(False, -math.inf, 0, {}, "no H1 certificate")
    d = spec.d
    with_x = box.x is not None
    u = _halton(2 + d + (d if with_x else 0), box.n)
    s = _scale(u[:, 0], box.s)
    y = _scale(u[:, 1], box.y)
    z = _scale(u[:, 2:2 + d], box.z)
    x = _scale(u[:, 2 + d:], box.x) if with_x else None
    slack = np.empty(box.n)
    for i in range(box.n):
        xi = None if x is None else x[i:i + 1]
        f = spec(s[i], y[i:i + 1], z[i:i + 1], xi)[0]
        ab = float(np.max(h1.alpha_bar(s[i], xi)))
        mz_sq = spec.m_norm_sq(s[i], z[i:i + 1], xi)[0]
        upper = ab + 0.5 * h1.gamma * mz_sq
        if h1.variant == "H1":
            upper += h1.b * ab * abs(y[i])
        if h1.variant == "H1_double_prime":
            val = min(upper - f, f + h1.C1 * (ab + math.sqrt(mz_sq)))
        else:
            val = upper - abs(f)
        slack[i] = val + _CHECK_RTOL * (1 + abs(f) + upper)
    worst_idx = int(np.argmin(slack))
    worst = float(slack[worst_idx])
    point = {"s": float(s[worst_idx]), "y": float(y[worst_idx]), "z": z[worst_idx].tolist()}
    return CertificateReport(worst >= 0, worst, box.n, point)


def check_h2(spec: GeneratorSpec, box: SampleBox | None = None) -> CertificateReport:
    """Audit the monotonicity and local-Lipschitz inequalities on sampled pairs."""
    if spec.h2 is None:
        raise ValueError("generator has no H2 certificate")
    box = box or SampleBox()
    h2 = spec.h2
    d = spec.d
    with_x = box.x is not None
    u = _halton(3 + 2 * d + (d if with_x else 0), box.n)
    s = _scale(u[:, 0], box.s)
    y1 = _scale(u[:, 1], box.y)
    y2 = _scale(u[:, 2], box.y)
    z1 = _scale(u[:, 3:3 + d], box.z)
    z2 = _scale(u[:, 3 + d:3 + 2 * d], box.z)
    x = _scale(u[:, 3 + 2 * d:], box.x) if with_x else None
    slack = np.empty(box.n)
    for i in range(box.n):
        xi = None if x is None else x[i:i + 1]
        f11 = spec(s[i], y1[i:i + 1], z1[i:i + 1], xi)[0]
        f21 = spec(s[i], y2[i:i + 1], z1[i:i + 1], xi)[0]
        f12 = spec(s[i], y1[i:i + 1], z2[i:i + 1], xi)[0]
        dy = y1[i] - y2[i]
        mono = h2.mu * dy * dy - dy * (f11 - f21)
        theta = np.asarray(h2.theta(s[i], xi), dtype=float).reshape(1, d)
        mt = math.sqrt(spec.m_norm_sq(s[i], theta, xi)[0])
        n1 = math.sqrt(spec.m_norm_sq(s[i], z1[i:i + 1], xi)[0])
        n2 = math.sqrt(spec.m_norm_sq(s[i], z2[i:i + 1], xi)[0])
        ndz = math.sqrt(spec.m_norm_sq(s[i], z1[i:i + 1] - z2[i:i + 1], xi)[0])
        lip = h2.C2 * (mt + n1 + n2) * ndz - abs(f11 - f12)
        scale = 1 + abs(f11) + abs(f21) + abs(f12)
        slack[i] = min(mono, lip) + _CHECK_RTOL * scale
    worst_idx = int(np.argmin(slack))
    point = {"s": float(s[worst_idx]), "y1": float(y1[worst_idx]), "y2": float(y2[worst_idx]),
             "z1": z1[worst_idx].tolist(), "z2": z2[worst_idx].tolist()}
    return CertificateReport(bool(slack[worst_idx] >= 0), float(slack[worst_idx]), box.n, point)


# ---------------------------------------------------------------------------
# a priori bounds
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class AprioriBounds:
    c_low: float
    c_high: float


def _expm1_over(b: float, x: float) -> float:
    """``(e^{b x} - 1)/b`` with the limit ``x`` at ``b = 0``."""
    if b == 0.0:
        return x
    return math.expm1(b * x) / b


def apriori_bounds(h1: H1Certificate, b_sup: float) -> AprioriBounds:
    """Envelope ``|Y| <= a_tilde + |B|_inf e^{b a}`` for any solution."""
    b = h1.b if h1.variant == "H1" else 0.0
    a_tilde = _expm1_over(b, h1.a)
    c = a_tilde + b_sup * math.exp(b * h1.a)
    return AprioriBounds(c_low=-c, c_high=c)


def psi_gamma(x, gamma: float):
    """``(e^{gamma x} - 1 - gamma x) / gamma^2`` with the ``x^2/2`` limit at ``gamma = 0``."""
    x = np.asarray(x, dtype=float)
    if gamma == 0.0:
        out = 0.5 * x * x
    else:
        gx = gamma * x
        small = np.abs(gx) < 1e-5
        series = 0.5 * x * x * (1 + gx / 3 + gx * gx / 12)
        exact = (np.expm1(gx) - gx) / gamma**2
        out = np.where(small, series, exact)
    return float(out) if out.ndim == 0 else out


def psi_gamma_prime(x, gamma: float):
    x = np.asarray(x, dtype=float)
    out = x.copy() if gamma == 0.0 else np.expm1(gamma * x) / gamma
    return float(out) if np.ndim(out) == 0 else out


def Phi_L(x, L: float):
    """``(e^{L x} - L x - 1) / L^2``; the same function as ``psi_gamma`` with ``gamma = L``."""
    return psi_gamma(x, L)


def energy_bound(h1: H1Certificate, b_sup: float) -> float:
    """Constant bounding the conditional remaining energy ``E int |m Z|^2 ds``.

    Ito on ``psi_gamma(Y + |c|)`` with ``psi'' - gamma psi' = 1`` gives
    ``C' = 2 [psi_gamma(|B|_inf + C) + psi_gamma'(2 C) a (1 + b C)]`` where
    ``[c, C]`` are the a priori bounds.
    """
    bounds = apriori_bounds(h1, b_sup)
    C = bounds.c_high
    b = h1.b if h1.variant == "H1" else 0.0
    return 2.0 * (psi_gamma(b_sup + C, h1.gamma) + psi_gamma_prime(2 * C, h1.gamma) * h1.a * (1 + b * C))


def phi(t: float, z, h1: H1Certificate, T: float):
    """Domination function ``exp(gamma (e^{b I} - 1)/b) exp(gamma z e^{b I})``, ``I = int_t^T abar``."""
    z = np.asarray(z, dtype=float)
    if np.any(z < 0):
        raise ValueError("phi is defined for z >= 0")
    integral = h1.integrated(t, T)
    b = h1.b if h1.variant == "H1" else 0.0
    growth = math.exp(b * integral)
    out = np.exp(h1.gamma * _expm1_over(b, integral)) * np.exp(h1.gamma * z * growth)
    return float(out) if out.ndim == 0 else out
