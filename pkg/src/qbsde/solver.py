"""Backward schemes for the Y-equation (and the U-equation, same interface).

Both backends use the explicit-Z / implicit-Y step

    Z_i = E_i[Y_{i+1} dW_i] / dt   (mapped through m^{-1})
    Y_i = E_i[Y_{i+1}] + F(t_i, Y_i, Z_i) dt,

with the fixed point in ``Y_i`` solved by damped Picard iteration.  The
lattice backend (d = 1) takes conditional expectations exactly on a
recombining binomial tree in ``W``; the regression backend projects on
monomials of the scaled Brownian state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .generators import GeneratorSpec, apriori_bounds, energy_bound
from .market import MarketModel, matvec, simulate_paths
from .transform import Eq2Problem


class PicardError(RuntimeError):
    """The implicit step did not reach its tolerance."""


class RegressionError(RuntimeError):
    """Least-squares design matrix is too ill-conditioned."""


@dataclass
class PicardSettings:
    tol: float = 1e-12
    max_iters: int = 200


@dataclass
class RegressionSettings:
    n_paths: int = 100_000
    basis_degree: int = 4
    seed: int = 1
    batches: int = 30
    threads: int | None = None
    keep_paths: bool = True
    cond_max: float = 1e10


@dataclass
class BSDEProblem:
    """Driver, terminal map and discretisation settings.

    ``driver`` is a :class:`GeneratorSpec` (Y-equation, ``form="Eq1"``) or an
    :class:`Eq2Problem` (``form="Eq2"``).  ``terminal`` maps terminal Brownian
    states ``(n, d)`` to values; for Eq2 problems it defaults to the driver's
    own terminal map.  ``init`` selects the Picard starting point: the
    propagated expectation, zero, or one of the a priori bounds.
    """

    driver: GeneratorSpec | Eq2Problem
    model: MarketModel
    terminal: Callable | None = None
    n_steps: int = 400
    beta: float = 0.0
    b_sup: float | None = None
    backend: str = "lattice"
    picard: PicardSettings = field(default_factory=PicardSettings)
    regression: RegressionSettings = field(default_factory=RegressionSettings)
    init: str = "propagated"
    clamp_z: bool = True
    bound_eps: float | None = None

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.terminal is None and isinstance(self.driver, Eq2Problem):
            self.terminal = self.driver.terminal
        if self.terminal is None:
            raise ValueError("problem needs a terminal map")
        if self.b_sup is None and isinstance(self.driver, Eq2Problem):
            self.b_sup = self.driver.b_sup
        if self.backend not in ("lattice", "regression"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.init not in ("propagated", "zero", "low", "high"):
            raise ValueError(f"unknown Picard initialisation {self.init!r}")

    @property
    def form(self) -> str:
        return "Eq2" if isinstance(self.driver, Eq2Problem) else "Eq1"

    @property
    def h1(self):
        return self.driver.h1

    @property
    def dt(self) -> float:
        return self.model.T / self.n_steps

    @property
    def eps(self) -> float:
        """Discretisation slack for the a priori box, ``10 / N`` unless set."""
        return 10.0 / self.n_steps if self.bound_eps is None else self.bound_eps


@dataclass
class DiscreteSolution:
    """Solution on the time grid.

    Lattice: ``Y[i]`` has shape ``(i + 1,)``, ``Z[i]`` shape ``(i + 1, d)`` for
    ``i < N`` and ``states[i]`` the node values of ``W``.  Regression:
    ``Y`` is ``(N + 1, n_paths)`` and ``Z`` is ``(N, n_paths, d)`` when paths are
    kept, and ``states`` is the ``(N + 1, n_paths, d)`` path array.  The
    orthogonal martingale part is identically zero in this instantiation.
    """

    times: np.ndarray
    Y: list | np.ndarray | None
    Z: list | np.ndarray | None
    states: list | np.ndarray | None
    backend: str
    y0: float
    z0: np.ndarray
    diagnostics: dict
    y0_stderr: float | None = None
    energy_profile: np.ndarray | None = None
    y_range: tuple = (math.nan, math.nan)
    coefficients: list | None = None

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def orthogonal(self) -> float:
        return 0.0


# ---------------------------------------------------------------------------
# implicit step
# ---------------------------------------------------------------------------
def picard_step(F, s: float, y_next_expectation, z, dt: float, tol: float = 1e-12,
                max_iters: int = 200, x=None, y_init=None, y_free: bool | None = None):
    """Solve ``y = E + F(s, y, z) dt`` by damped fixed-point iteration.

    Vectorised over a batch; returns ``(y, iterations)``.  The damping factor
    halves whenever the residual grows.  Raises :class:`PicardError` when the
    tolerance is not met within ``max_iters`` iterations.
    """
    E = np.asarray(y_next_expectation, dtype=float)
    scalar = E.ndim == 0
    E = np.atleast_1d(E)
    d = getattr(F, "d", 1)
    z = np.asarray(z, dtype=float).reshape(E.shape[0], d) if np.size(z) else np.zeros((E.shape[0], d))
    if y_free is None:
        y_free = bool(getattr(F, "y_free", False))
    if y_free:
        y = E + np.asarray(F(s, E, z, x), dtype=float) * dt
        if not np.all(np.isfinite(y)):
            raise PicardError(f"non-finite value in the implicit step at t={s:.6g}")
        return (float(y[0]) if scalar else y), 1
    y = E.copy() if y_init is None else np.broadcast_to(np.asarray(y_init, dtype=float), E.shape).copy()
    damping = 1.0
    prev = math.inf
    for it in range(1, max_iters + 1):
        target = E + np.asarray(F(s, y, z, x), dtype=float) * dt
        res = float(np.max(np.abs(target - y))) if target.size else 0.0
        if not math.isfinite(res):
            break
        scale = max(1.0, float(np.max(np.abs(y)))) if y.size else 1.0
        if res <= tol * scale:
            # one more undamped application tightens a contraction further
            nxt = E + np.asarray(F(s, target, z, x), dtype=float) * dt
            if np.all(np.isfinite(nxt)) and float(np.max(np.abs(nxt - target))) <= res:
                y = target
            return (float(y[0]) if scalar else y), it
        if res > prev:
            damping *= 0.5
        y = y + damping * (target - y)
        prev = res
    raise PicardError(f"Picard iteration did not converge within {max_iters} iterations at t={s:.6g}")


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------
def _bounds(problem: BSDEProblem, terminal_values: np.ndarray):
    """A priori box and Z cap from the driver's certificate, if any."""
    h1 = problem.h1
    if h1 is None:
        return None, None, math.inf
    b_sup = problem.b_sup
    if b_sup is None:
        b_sup = float(np.max(np.abs(terminal_values)))
    bounds = apriori_bounds(h1, b_sup)
    zcap = math.inf
    if problem.clamp_z:
        zcap = math.sqrt(energy_bound(h1, b_sup) / problem.dt)
    return bounds, b_sup, zcap


def _initial_guess(problem: BSDEProblem, E: np.ndarray, bounds):
    mode = problem.init
    if mode == "propagated":
        return None
    if mode == "zero":
        return np.zeros_like(E)
    if bounds is None:
        raise ValueError("bound initialisation needs an H1 certificate")
    return np.full_like(E, bounds.c_low if mode == "low" else bounds.c_high)


def _clamp(mz_norm: np.ndarray, cap: float) -> np.ndarray:
    """Scale factors bringing ``|m Z|`` down to ``cap``."""
    if not math.isfinite(cap):
        return np.ones_like(mz_norm)
    return np.where(mz_norm > cap, cap / np.maximum(mz_norm, 1e-300), 1.0)


def _state_arg(model: MarketModel, states: np.ndarray):
    return None if model.constant else states


def solve(problem: BSDEProblem) -> DiscreteSolution:
    if problem.backend == "lattice":
        return solve_lattice(problem)
    return solve_regression(problem)


# ---------------------------------------------------------------------------
# lattice
# ---------------------------------------------------------------------------
def lattice_states(n_steps: int, dt: float, i: int) -> np.ndarray:
    """Node values of ``W`` at step ``i``, shape ``(i + 1, 1)``, lowest first."""
    return ((2 * np.arange(i + 1) - i) * math.sqrt(dt)).reshape(-1, 1)


def solve_lattice(problem: BSDEProblem) -> DiscreteSolution:
    """Exact binomial conditional expectations on the recombining ``W`` tree (d = 1)."""
    model = problem.model
    if model.d != 1:
        raise ValueError("lattice backend requires d = 1")
    N, dt = problem.n_steps, problem.dt
    sq = math.sqrt(dt)
    times = np.linspace(0.0, model.T, N + 1)
    F = problem.driver
    states = [lattice_states(N, dt, i) for i in range(N + 1)]
    yT = np.asarray(problem.terminal(states[N]), dtype=float).reshape(N + 1)
    bounds, b_sup, zcap = _bounds(problem, yT)
    Y = [None] * (N + 1)
    Z = [None] * N
    Y[N] = yT
    picard_max = 0
    clamps = 0
    violations = 0
    eps = problem.eps
    energy = np.zeros(N + 1)
    remaining = np.zeros(N + 1)
    if bounds is not None:
        violations += int(np.sum((yT < bounds.c_low - eps) | (yT > bounds.c_high + eps)))
    for i in range(N - 1, -1, -1):
        nxt = Y[i + 1]
        w = states[i]
        E = 0.5 * (nxt[1:] + nxt[:-1])
        zw = (nxt[1:] - nxt[:-1]) / (2 * sq)
        m = model.m_at(times[i], _state_arg(model, w))
        m_scalar = m.reshape(-1) if m.ndim == 3 else np.full(i + 1, float(m[0, 0]))
        scale = _clamp(np.abs(zw), zcap)
        clamps += int(np.sum(scale < 1.0))
        zw = zw * scale
        z = (zw / m_scalar).reshape(-1, 1)
        y, iters = picard_step(F, times[i], E, z, dt, problem.picard.tol, problem.picard.max_iters,
                               x=_state_arg(model, w), y_init=_initial_guess(problem, E, bounds),
                               y_free=bool(getattr(F, "y_free", False)))
        picard_max = max(picard_max, iters)
        Y[i] = y
        Z[i] = z
        if bounds is not None:
            violations += int(np.sum((y < bounds.c_low - eps) | (y > bounds.c_high + eps)))
        remaining = zw**2 * dt + 0.5 * (remaining[1:] + remaining[:-1])
        energy[i] = float(np.max(remaining))
    y_all = np.concatenate(Y)
    diagnostics = {
        "picard_iters": picard_max,
        "bound_violations": violations,
        "z_clamps": clamps,
        "energy_estimate": float(np.max(energy)),
        "b_sup": b_sup,
    }
    if bounds is not None:
        diagnostics["c_low"] = bounds.c_low
        diagnostics["c_high"] = bounds.c_high
    return DiscreteSolution(times=times, Y=Y, Z=Z, states=states, backend="lattice",
                            y0=float(Y[0][0]), z0=Z[0][0].copy(), diagnostics=diagnostics,
                            energy_profile=energy, y_range=(float(y_all.min()), float(y_all.max())))


# ---------------------------------------------------------------------------
# regression
# ---------------------------------------------------------------------------
def _exponents(d: int, degree: int) -> list[tuple]:
    out = [()]
    for total in range(1, degree + 1):
        def rec(prefix, start, left):
            if left == 0:
                out.append(tuple(prefix))
                return
            for k in range(start, d):
                rec(prefix + [k], k, left - 1)
        rec([], 0, total)
    return out


def basis(states: np.ndarray, t: float, degree: int) -> np.ndarray:
    """Monomials of ``W / sqrt(t)`` up to total ``degree`` (constant at ``t = 0``)."""
    n, d = states.shape
    if t <= 0:
        return np.ones((n, 1))
    x = states / math.sqrt(t)
    cols = []
    for combo in _exponents(d, degree):
        col = np.ones(n)
        for k in combo:
            col = col * x[:, k]
        cols.append(col)
    return np.stack(cols, axis=1)


def _fit(phi: np.ndarray, target: np.ndarray, cond_max: float):
    coef, _, rank, sv = np.linalg.lstsq(phi, target, rcond=None)
    if sv.size and sv[-1] <= sv[0] / cond_max:
        raise RegressionError(f"regression design condition number {sv[0] / max(sv[-1], 1e-300):.3g} "
                              f"exceeds {cond_max:.3g}")
    return coef


def _m_inverse_apply(model: MarketModel, t: float, states, zw: np.ndarray) -> np.ndarray:
    m = model.m_at(t, _state_arg(model, states))
    if m.ndim == 2:
        return np.linalg.solve(m, zw.T).T
    return np.linalg.solve(m, zw[..., None])[..., 0]


def solve_regression(problem: BSDEProblem) -> DiscreteSolution:
    """Least-squares Monte Carlo on simulated Brownian paths (any d)."""
    model = problem.model
    reg = problem.regression
    if reg.n_paths < 1000:
        raise ValueError("regression backend needs n_paths >= 1000")
    N, dt = problem.n_steps, problem.dt
    times = np.linspace(0.0, model.T, N + 1)
    bundle = simulate_paths(model, reg.n_paths, N, reg.seed, threads=reg.threads)
    W = bundle.states()
    dW = bundle.increments
    F = problem.driver
    d = model.d
    n = reg.n_paths
    y = np.asarray(problem.terminal(W[N]), dtype=float).reshape(n)
    bounds, b_sup, zcap = _bounds(problem, y)
    eps = problem.eps
    keep = reg.keep_paths
    Y = np.empty((N + 1, n)) if keep else None
    Zs = np.empty((N, n, d)) if keep else None
    if keep:
        Y[N] = y
    picard_max = clamps = violations = e_out = 0
    if bounds is not None:
        violations += int(np.sum((y < bounds.c_low - eps) | (y > bounds.c_high + eps)))
    y_min, y_max = float(y.min()), float(y.max())
    remaining = np.zeros(n)
    energy = np.zeros(N + 1)
    coefficients = [None] * N
    # y0 equals the path mean of B + sum_i (Y_i - E_i) because the constant is
    # in every basis; batch means of that sum give the Monte Carlo error
    pathwise = y.copy()
    for i in range(N - 1, -1, -1):
        w = W[i]
        phi = basis(w, times[i], reg.basis_degree)
        a = _fit(phi, y, reg.cond_max)
        E = phi @ a
        resid = y - E
        # fits outside the regressand's range signal a misfitting basis; they are
        # counted, not clipped, since clipping breaks the mean preserved by the
        # constant basis function and biases Y(0)
        y_lo, y_hi = float(y.min()), float(y.max())
        slack = 1e-12 * (1.0 + max(abs(y_lo), abs(y_hi)))
        e_out += int(np.sum((E < y_lo - slack) | (E > y_hi + slack)))
        zw_target = resid[:, None] * dW[:, i, :] / dt
        bz = _fit(phi, zw_target, reg.cond_max)
        zw = phi @ bz
        # |E[Y dW]| / dt <= (osc Y / 2) E|dW| / dt bounds each component
        cap = min(zcap, 0.5 * (y_hi - y_lo) * math.sqrt(2.0 / (math.pi * dt)) * math.sqrt(d))
        norm = np.sqrt(np.sum(zw**2, axis=-1))
        scale = _clamp(norm, cap)
        clamps += int(np.sum(scale < 1.0))
        zw = zw * scale[:, None]
        z = _m_inverse_apply(model, times[i], w, zw)
        y, iters = picard_step(F, times[i], E, z, dt, problem.picard.tol, problem.picard.max_iters,
                               x=_state_arg(model, w), y_init=_initial_guess(problem, E, bounds),
                               y_free=bool(getattr(F, "y_free", False)))
        picard_max = max(picard_max, iters)
        pathwise += y - E
        coefficients[i] = (a, bz)
        if bounds is not None:
            violations += int(np.sum((y < bounds.c_low - eps) | (y > bounds.c_high + eps)))
        y_min, y_max = min(y_min, float(y.min())), max(y_max, float(y.max()))
        remaining = remaining + np.sum(zw**2, axis=-1) * dt
        energy[i] = float(np.max(phi @ _fit(phi, remaining, reg.cond_max)))
        if keep:
            Y[i] = y
            Zs[i] = z
    y0 = float(y[0])
    z0 = z[0].copy()
    stderr = batch_stderr(pathwise, reg.batches)
    diagnostics = {
        "picard_iters": picard_max,
        "bound_violations": violations,
        "z_clamps": clamps,
        "fits_outside_range": e_out,
        "energy_estimate": float(np.max(energy)),
        "b_sup": b_sup,
    }
    if bounds is not None:
        diagnostics["c_low"] = bounds.c_low
        diagnostics["c_high"] = bounds.c_high
    return DiscreteSolution(times=times, Y=Y, Z=Zs, states=W if keep else None, backend="regression",
                            y0=y0, z0=z0, diagnostics=diagnostics, y0_stderr=stderr,
                            energy_profile=energy, y_range=(y_min, y_max), coefficients=coefficients)


def batch_stderr(samples: np.ndarray, batches: int = 30) -> float:
    """Standard error of the sample mean from contiguous batch means."""
    n = samples.size
    b = max(2, min(batches, n // 2))
    means = np.array([np.mean(chunk) for chunk in np.array_split(samples, b)])
    return float(np.std(means, ddof=1) / math.sqrt(b))


def energy_estimate(sol: DiscreteSolution) -> float:
    """Largest conditional remaining energy ``E_tau[int_tau^T |m Z|^2 ds]`` over the grid."""
    if sol.energy_profile is None:
        return 0.0
    return float(np.max(sol.energy_profile))


def lattice_value(sol: DiscreteSolution, i: int, w) -> np.ndarray:
    """Piecewise-linear interpolation of lattice ``Y`` at step ``i`` in the state ``w``."""
    nodes = sol.states[i][:, 0]
    vals = sol.Y[i]
    if nodes.size == 1:
        return np.full(np.shape(w), vals[0])
    return np.interp(w, nodes, vals)


def lattice_z(sol: DiscreteSolution, i: int, w) -> np.ndarray:
    """Piecewise-linear interpolation of lattice ``Z`` at step ``i`` (d = 1)."""
    nodes = sol.states[i][:, 0]
    vals = sol.Z[i][:, 0]
    if nodes.size == 1:
        return np.full(np.shape(w), vals[0])
    return np.interp(w, nodes, vals)
