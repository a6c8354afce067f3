"""Utility maximisation on top of the BSDE solvers.

Each utility maps to one Y-equation:

* exponential ``-exp(-alpha x)`` with bounded liability ``B``: driver ``F^alpha``,
  ``beta = alpha``, terminal ``B``; ``V_t(x) = -exp(-alpha (x - Y_t))``.
* power ``x^g / g``: driver ``-f1``, ``beta = 1/2``, terminal 0;
  ``V_t(x) = (x^g / g) exp(Y_t)``.
* log: driver ``-f2``, terminal 0; ``V_t(x) = ln x + Y_t``.

Strategies are amounts ``nu`` (exponential) or wealth proportions ``rho``
(power, log) obtained by projecting the utility's target onto the constraint
set in the ``m``-metric.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .constraints import ConstraintSet, contains, project
from .generators import (
    GeneratorSpec,
    make_exponential_generator,
    make_log_generator,
    make_power_generator,
    negate,
)
from .market import BLOCK_PATHS, MarketModel, PathBundle, default_threads, iter_increment_blocks, matvec
from .solver import (
    BSDEProblem,
    DiscreteSolution,
    PicardSettings,
    RegressionSettings,
    basis,
    batch_stderr,
    lattice_value,
    lattice_z,
    picard_step,
    solve,
)

UTILITY_KINDS = ("exponential", "power", "log")


@dataclass
class UtilitySpec:
    """Utility kind, its parameter, the liability and the initial wealth.

    ``liability`` maps terminal Brownian states ``(n, d)`` to values; it must
    be absent for power and log utility.  ``liability_sup`` declares its
    sup-norm (computed on the solver's terminal nodes when omitted).
    """

    kind: str
    alpha: float | None = None
    gamma_u: float | None = None
    liability: Callable | None = None
    liability_sup: float | None = None
    x: float = 1.0

    def __post_init__(self):
        if self.kind not in UTILITY_KINDS:
            raise ValueError(f"unknown utility kind {self.kind!r}")
        if self.kind == "exponential":
            if self.alpha is None or not self.alpha > 0:
                raise ValueError("exponential utility needs alpha > 0")
        else:
            if self.liability is not None:
                raise ValueError(f"{self.kind} utility takes no liability")
            if not self.x > 0:
                raise ValueError(f"{self.kind} utility needs initial wealth x > 0")
        if self.kind == "power" and (self.gamma_u is None or not 0 < self.gamma_u < 1):
            raise ValueError("power utility needs gamma_u in (0, 1)")

    @property
    def beta(self) -> float:
        return {"exponential": self.alpha, "power": 0.5, "log": 0.0}[self.kind]

    def utility(self, x):
        """``U(x)`` evaluated elementwise."""
        x = np.asarray(x, dtype=float)
        if self.kind == "exponential":
            return -np.exp(-self.alpha * x)
        if self.kind == "power":
            return x**self.gamma_u / self.gamma_u
        return np.log(x)


def _zero_terminal(w):
    return np.zeros(np.asarray(w).shape[0])


def make_generator(u: UtilitySpec, model: MarketModel, cset: ConstraintSet) -> GeneratorSpec:
    """Driver of the Y-equation for utility ``u``."""
    if u.kind == "exponential":
        return make_exponential_generator(model, cset, u.alpha)
    if u.kind == "power":
        return negate(make_power_generator(model, cset, u.gamma_u))
    return negate(make_log_generator(model, cset))


def build_problem(u: UtilitySpec, model: MarketModel, cset: ConstraintSet, n_steps: int = 400,
                  backend: str | None = None, picard: PicardSettings | None = None,
                  regression: RegressionSettings | None = None) -> BSDEProblem:
    """The BSDE whose solution gives the value function of ``u``."""
    if backend is None:
        backend = "lattice" if model.d == 1 else "regression"
    terminal = u.liability if u.liability is not None else _zero_terminal
    b_sup = u.liability_sup if u.liability is not None else 0.0
    return BSDEProblem(driver=make_generator(u, model, cset), model=model, terminal=terminal,
                       n_steps=n_steps, beta=u.beta, b_sup=b_sup, backend=backend,
                       picard=picard or PicardSettings(), regression=regression or RegressionSettings())


def solve_utility(u: UtilitySpec, model: MarketModel, cset: ConstraintSet, **numerics):
    """Build and solve; returns ``(problem, solution)``."""
    problem = build_problem(u, model, cset, **numerics)
    return problem, solve(problem)


def value_from_y(u: UtilitySpec, y, x=None):
    """Compose the value function from ``Y`` values: exact formula, no solving."""
    x = u.x if x is None else x
    y = np.asarray(y, dtype=float)
    if u.kind == "exponential":
        out = -np.exp(-u.alpha * (x - y))
    elif u.kind == "power":
        if not np.all(np.asarray(x) > 0):
            raise ValueError("power utility needs x > 0")
        out = np.asarray(x, dtype=float) ** u.gamma_u / u.gamma_u * np.exp(y)
    else:
        if not np.all(np.asarray(x) > 0):
            raise ValueError("log utility needs x > 0")
        out = np.log(x) + y
    return float(out) if np.ndim(out) == 0 else out


def _step_index(sol: DiscreteSolution, t: float) -> int:
    i = int(round(t / (sol.times[-1] / sol.n_steps)))
    if i < 0 or i > sol.n_steps or abs(sol.times[i] - t) > 1e-9 * max(1.0, sol.times[-1]):
        raise ValueError(f"t={t} is not a grid time")
    return i


def value_function(u: UtilitySpec, model: MarketModel, cset: ConstraintSet, t: float = 0.0,
                   x: float | None = None, sol: DiscreteSolution | None = None, **numerics):
    """``V_t(x)``: a scalar at ``t = 0``, per-node (lattice) or per-path values otherwise."""
    if sol is None:
        _, sol = solve_utility(u, model, cset, **numerics)
    x = u.x if x is None else x
    if u.kind != "exponential" and not x > 0:
        raise ValueError(f"{u.kind} utility needs x > 0")
    i = _step_index(sol, t)
    if i == 0:
        return value_from_y(u, sol.y0, x)
    y = sol.Y[i]
    if y is None:
        raise ValueError("solution does not keep per-step values")
    return value_from_y(u, y, x)


# ---------------------------------------------------------------------------
# strategies
# ---------------------------------------------------------------------------
def strategy_target(u: UtilitySpec, z: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Point whose ``m``-projection onto the constraint set is optimal."""
    if u.kind == "exponential":
        return z + lam / u.alpha
    if u.kind == "power":
        return (z + lam) / (1.0 - u.gamma_u)
    return np.broadcast_to(lam, z.shape).copy()


@dataclass
class StrategyProcess:
    """Optimal amounts (exponential) or proportions (power, log) on the solution grid.

    ``values[i]`` has shape ``(nodes_i, d)`` on the lattice and ``(n_paths, d)``
    for regression.  ``policy(i, w)`` evaluates the strategy at step ``i`` for
    arbitrary Brownian states ``w`` of shape ``(n, d)`` by interpolating the
    solution and projecting, so values always lie in the set.
    """

    kind: str
    times: np.ndarray
    values: list
    policy: Callable
    cset: ConstraintSet
    admissibility: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return self.times.size - 1


class SolutionField:
    """``Y`` and ``Z`` of a solved problem evaluated at arbitrary states."""

    def __init__(self, problem: BSDEProblem, sol: DiscreteSolution):
        self.problem = problem
        self.sol = sol
        self.model = problem.model
        self.dt = problem.dt

    def z(self, i: int, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=float).reshape(-1, self.model.d)
        if self.sol.backend == "lattice":
            return lattice_z(self.sol, i, w[:, 0]).reshape(-1, 1)
        _, bz = self.sol.coefficients[i]
        zw = basis(w, self.sol.times[i], self._degree()) @ bz
        m = self.model.m_at(self.sol.times[i], None if self.model.constant else w)
        if m.ndim == 2:
            return np.linalg.solve(m, zw.T).T
        return np.linalg.solve(m, zw[..., None])[..., 0]

    def y(self, i: int, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=float).reshape(-1, self.model.d)
        if i == self.sol.n_steps:
            return np.asarray(self.problem.terminal(w), dtype=float).reshape(-1)
        if self.sol.backend == "lattice":
            return lattice_value(self.sol, i, w[:, 0])
        if i == 0:
            return np.full(w.shape[0], self.sol.y0)
        a, _ = self.sol.coefficients[i]
        t = self.sol.times[i]
        E = basis(w, t, self._degree()) @ a
        x = None if self.model.constant else w
        y, _ = picard_step(self.problem.driver, t, E, self.z(i, w), self.dt, self.problem.picard.tol,
                           self.problem.picard.max_iters, x=x)
        return y

    def _degree(self) -> int:
        return self.problem.regression.basis_degree


def optimal_strategy(u: UtilitySpec, sol: DiscreteSolution, model: MarketModel, cset: ConstraintSet,
                     problem: BSDEProblem | None = None) -> StrategyProcess:
    """Project the utility's target nodewise; attach a path policy and the admissibility proxy.

    The proxy is the nodewise inequality ``|m(nu - Z)| <= |m(Z + lambda/alpha)| + |m lambda/alpha|``
    for exponential utility and ``|m(rho - target)| <= |m target|`` otherwise.
    """
    if problem is None:
        problem = build_problem(u, model, cset, n_steps=sol.n_steps, backend=sol.backend)
    fieldv = SolutionField(problem, sol)
    values = []
    worst = -math.inf
    n_checked = n_ok = n_member = 0
    for i in range(sol.n_steps):
        t = sol.times[i]
        if sol.backend == "lattice":
            w = sol.states[i]
            z = sol.Z[i]
        else:
            if sol.Z is None:
                w = np.zeros((1, model.d))
                z = np.asarray(sol.z0, dtype=float).reshape(1, -1)
            else:
                w = sol.states[i]
                z = sol.Z[i]
        x = None if model.constant else w
        m = model.m_at(t, x)
        lam = np.broadcast_to(model.lambda_at(t, x), z.shape)
        target = strategy_target(u, z, lam)
        nu = project(cset, target, m)
        values.append(nu)
        n_member += int(np.sum(contains(cset, nu)))
        if u.kind == "exponential":
            lhs = np.linalg.norm(matvec(m, nu - z), axis=-1)
            rhs = np.linalg.norm(matvec(m, target), axis=-1) + np.linalg.norm(matvec(m, lam / u.alpha), axis=-1)
        else:
            lhs = np.linalg.norm(matvec(m, nu - target), axis=-1)
            rhs = np.linalg.norm(matvec(m, target), axis=-1)
        slack = lhs - rhs
        worst = max(worst, float(np.max(slack)))
        tol = 1e-12 * (1.0 + np.abs(rhs))
        n_ok += int(np.sum(slack <= tol))
        n_checked += slack.size

    def policy(i: int, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=float).reshape(-1, model.d)
        t = sol.times[i]
        x = None if model.constant else w
        z = fieldv.z(i, w)
        lam = np.broadcast_to(model.lambda_at(t, x), z.shape)
        return project(cset, strategy_target(u, z, lam), model.m_at(t, x))

    report = {
        "proxy_nodes": n_checked,
        "proxy_pass": n_ok,
        "proxy_worst_slack": worst,
        "membership_pass": n_member,
        "admissible": bool(n_ok == n_checked and n_member == n_checked),
    }
    return StrategyProcess(kind="amount" if u.kind == "exponential" else "proportion",
                           times=sol.times.copy(), values=values, policy=policy, cset=cset,
                           admissibility=report)


# ---------------------------------------------------------------------------
# wealth
# ---------------------------------------------------------------------------
def wealth_step(kind: str, X: np.ndarray, pos: np.ndarray, m, lam, dw: np.ndarray, dt: float) -> np.ndarray:
    """One step of the wealth recursion.

    Amounts: ``X + (m nu).dW + (m nu).(m lambda) dt`` (exact for step-constant ``nu``).
    Proportions: log-Euler ``X exp((m rho).(m lambda) dt - |m rho|^2 dt / 2 + (m rho).dW)``.
    """
    mp = matvec(m, pos)
    drift = np.sum(mp * matvec(m, np.broadcast_to(lam, pos.shape)), axis=-1)
    noise = np.sum(mp * dw, axis=-1)
    if kind == "amount":
        return X + noise + drift * dt
    return X * np.exp(drift * dt - 0.5 * np.sum(mp**2, axis=-1) * dt + noise)


def simulate_wealth(strategy: StrategyProcess | Callable, u: UtilitySpec, bundle: PathBundle,
                    model: MarketModel, x: float | None = None, t: float = 0.0) -> np.ndarray:
    """Wealth trajectories from grid time ``t`` to ``T``, shape ``(N - i0 + 1, n_paths)``.

    ``strategy`` is a :class:`StrategyProcess` or a bare policy ``(i, w) -> (n, d)``.
    The bundle's grid must match the strategy's.
    """
    policy = strategy.policy if isinstance(strategy, StrategyProcess) else strategy
    kind = "amount" if u.kind == "exponential" else "proportion"
    x = u.x if x is None else x
    N, dt = bundle.n_steps, bundle.dt
    i0 = int(round(t / dt))
    W = bundle.states()
    out = np.empty((N - i0 + 1, bundle.n_paths))
    X = np.full(bundle.n_paths, float(x))
    out[0] = X
    for i in range(i0, N):
        w = W[i]
        s = i * dt
        sx = None if model.constant else w
        X = wealth_step(kind, X, policy(i, w), model.m_at(s, sx), model.lambda_at(s, sx),
                        bundle.increments[:, i, :], dt)
        out[i - i0 + 1] = X
    return out


# ---------------------------------------------------------------------------
# dynamic programming check
# ---------------------------------------------------------------------------
def r_value(u: UtilitySpec, X, Y):
    """``R = U(X - Y)`` (exponential), ``X^g e^Y / g`` (power), ``ln X + Y`` (log)."""
    X = np.asarray(X, dtype=float)
    if u.kind == "exponential":
        return -np.exp(-u.alpha * (X - Y))
    if u.kind == "power":
        return X**u.gamma_u / u.gamma_u * np.exp(Y)
    return np.log(X) + Y


@dataclass
class Perturbation:
    """Shift ``delta`` added to the optimal strategy on ``[t_lo, t_hi)``, then projected."""

    delta: np.ndarray
    t_lo: float
    t_hi: float
    label: str

    def apply(self, nu: np.ndarray, t: float) -> np.ndarray:
        if self.t_lo <= t < self.t_hi:
            return nu + self.delta
        return nu


def perturbation_family(d: int, T: float, shifts=(-0.25, 0.25), buckets: int = 2) -> list[Perturbation]:
    """Constant shifts along each axis plus the same shifts restricted to ``buckets`` time buckets."""
    out = []
    edges = np.linspace(0.0, T, buckets + 1)
    for k in range(d):
        for h in shifts:
            delta = np.zeros(d)
            delta[k] = h
            out.append(Perturbation(delta, 0.0, math.inf, f"e{k}{h:+g}"))
            for b in range(buckets):
                hi = edges[b + 1] if b < buckets - 1 else math.inf
                out.append(Perturbation(delta, float(edges[b]), float(hi), f"e{k}{h:+g}@[{edges[b]:g},{edges[b + 1]:g})"))
    return out


def _pair_indices(N: int, pairs) -> list[tuple[int, int]]:
    if pairs is None:
        pairs = [(0, N), (0, N // 2), (N // 2, N)]
    return [(int(a), int(b)) for a, b in pairs]


def verify_R_process(u: UtilitySpec, strategy: StrategyProcess, sol: DiscreteSolution,
                     bundle: PathBundle | None = None, *, problem: BSDEProblem | None = None,
                     model: MarketModel | None = None, n_paths: int = 100_000, seed: int = 1,
                     pairs=None, perturbations: list[Perturbation] | None = None,
                     batches: int = 30, threads: int | None = None, n_sigma: float = 3.0) -> dict:
    """Martingale test of ``R`` under the optimal strategy and supermartingale tests under perturbations.

    For each step pair ``(tau, sigma)`` the report holds the mean of
    ``R_sigma - R_tau`` over paths and its batch-means standard error.  The
    optimal strategy passes when ``|mean| <= n_sigma * se``; a perturbed one
    when ``mean <= n_sigma * se``.  Paths are streamed in fixed blocks, either
    from ``bundle`` or freshly simulated from ``(n_paths, seed)``.
    """
    if problem is None:
        if model is None:
            raise ValueError("need the solved problem or its market model")
        problem = build_problem(u, model, strategy.cset, n_steps=sol.n_steps, backend=sol.backend)
    model = problem.model
    N = sol.n_steps
    dt = problem.dt
    if bundle is not None and bundle.n_steps != N:
        raise ValueError("bundle grid does not match the solution grid")
    idx = _pair_indices(N, pairs)
    check_steps = sorted({k for pair in idx for k in pair})
    if perturbations is None:
        perturbations = perturbation_family(model.d, model.T)
    fieldv = SolutionField(problem, sol)
    kind = strategy.kind
    # perturbed policies act on the optimal position, computed once per step
    shifts = []
    for p in perturbations:
        def pol(i, w, base, p=p):
            t = sol.times[i]
            x = None if model.constant else w
            return project(strategy.cset, p.apply(base, t), model.m_at(t, x))
        shifts.append(pol)
    n_pol = 1 + len(shifts)

    def run_block(block: np.ndarray) -> np.ndarray:
        n = block.shape[0]
        W = np.zeros((n, model.d))
        X = np.full((n_pol, n), float(u.x))
        R = np.empty((n_pol, len(check_steps), n))
        for i in range(N + 1):
            if i in check_steps:
                y = fieldv.y(i, W)
                R[:, check_steps.index(i), :] = r_value(u, X, y[None, :])
            if i == N:
                break
            s = sol.times[i]
            sx = None if model.constant else W
            m = model.m_at(s, sx)
            lam = model.lambda_at(s, sx)
            dw = block[:, i, :]
            base = strategy.policy(i, W)
            X[0] = wealth_step(kind, X[0], base, m, lam, dw, dt)
            for j, pol in enumerate(shifts, start=1):
                X[j] = wealth_step(kind, X[j], pol(i, W, base), m, lam, dw, dt)
            W = W + dw
        return R

    if bundle is not None:
        blocks = [bundle.increments[lo:lo + BLOCK_PATHS] for lo in range(0, bundle.n_paths, BLOCK_PATHS)]
    else:
        blocks = list(iter_increment_blocks(model, n_paths, N, seed))
    threads = default_threads() if threads is None else max(1, int(threads))
    if threads == 1 or len(blocks) == 1:
        parts = [run_block(b) for b in blocks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run_block, blocks))
    R = np.concatenate(parts, axis=2)

    def summarize(j: int, optimal: bool) -> dict:
        rows = []
        ok = True
        for a, b in idx:
            diff = R[j, check_steps.index(b)] - R[j, check_steps.index(a)]
            mean = float(np.mean(diff))
            se = batch_stderr(diff, batches)
            band = n_sigma * se
            passed = abs(mean) <= band if optimal else mean <= band
            ok = ok and passed
            rows.append({"tau": float(sol.times[a]), "sigma": float(sol.times[b]), "mean_diff": mean,
                         "stderr": se, "band": band, "pass": bool(passed),
                         "R_tau": float(np.mean(R[j, check_steps.index(a)]))})
        return {"pairs": rows, "pass": bool(ok)}

    optimal = summarize(0, True)
    perturbed = []
    for j, p in enumerate(perturbations, start=1):
        entry = summarize(j, False)
        entry["label"] = p.label
        perturbed.append(entry)
    r0 = float(np.mean(R[0, check_steps.index(idx[0][0])]))
    return {
        "R0": r0,
        "n_paths": int(R.shape[2]),
        "optimal": optimal,
        "perturbed": perturbed,
        "pass": bool(optimal["pass"] and all(e["pass"] for e in perturbed)),
    }
