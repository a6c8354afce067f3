"""Command dispatch for resolved configs: solve, maximize, verify, ladder, converge.

Each runner returns a :class:`RunResult` holding scalars for ``results.json``,
tables for the CSV files and plot specifications; writing happens in
:mod:`qbsde.output`.  Nothing here depends on the thread count, so results are
byte-identical under any ``QBSDE_THREADS``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import config as cfgmod
from .generators import apriori_bounds, energy_bound
from .maximize import (
    UtilitySpec,
    build_problem,
    optimal_strategy,
    perturbation_family,
    value_from_y,
    verify_R_process,
)
from .solver import BSDEProblem, DiscreteSolution, PicardSettings, RegressionSettings, solve
from .verify import TheoremReport, check_prop1, ladder_case, run_suite


@dataclass
class Table:
    columns: list[str]
    rows: list[list]


@dataclass
class RunResult:
    command: str
    scalars: dict
    tables: dict = field(default_factory=dict)
    plots: dict = field(default_factory=dict)
    reports: list[TheoremReport] = field(default_factory=list)
    failed: bool = False

    @property
    def exit_code(self) -> int:
        return 1 if self.failed else 0


# ---------------------------------------------------------------------------
# builders shared by solve / maximize / converge
# ---------------------------------------------------------------------------
def _settings(cfg: dict):
    num = cfg["numerics"]
    picard = PicardSettings(tol=num["picard_tol"], max_iters=num["picard_max_iters"])
    reg = RegressionSettings(n_paths=num["n_paths"], basis_degree=num["basis_degree"], seed=num["seed"])
    return picard, reg


def utility_spec(cfg: dict) -> UtilitySpec:
    ub = cfg["utility"]
    liability, sup = None, None
    if ub["B"]["kind"] != "zero":
        liability, sup = cfgmod.build_terminal(ub["B"])
    return UtilitySpec(kind=ub["kind"], alpha=ub.get("alpha"), gamma_u=ub.get("gamma_u"),
                       liability=liability, liability_sup=sup, x=float(ub["x"]))


def solve_problem(cfg: dict, n_steps: int | None = None) -> BSDEProblem:
    """The BSDE of a ``solve`` config."""
    model = cfgmod.build_model(cfg)
    cset = cfgmod.build_constraint(cfg)
    driver = cfgmod.build_driver(cfg, model, cset)
    terminal, b_sup = cfgmod.build_terminal(cfg["terminal"])
    picard, reg = _settings(cfg)
    return BSDEProblem(driver=driver, model=model, terminal=terminal,
                       n_steps=n_steps or cfg["numerics"]["n_steps"], beta=driver.beta, b_sup=b_sup,
                       backend=cfgmod.backend_for(cfg), picard=picard, regression=reg)


def utility_problem(cfg: dict, n_steps: int | None = None):
    model = cfgmod.build_model(cfg)
    cset = cfgmod.build_constraint(cfg)
    u = utility_spec(cfg)
    picard, reg = _settings(cfg)
    problem = build_problem(u, model, cset, n_steps=n_steps or cfg["numerics"]["n_steps"],
                            backend=cfgmod.backend_for(cfg), picard=picard, regression=reg)
    return u, model, cset, problem


def _bound_scalars(problem: BSDEProblem, sol: DiscreteSolution) -> dict:
    if problem.h1 is None:
        return {}
    b_sup = sol.diagnostics["b_sup"]
    bounds = apriori_bounds(problem.h1, b_sup)
    return {"c_low": bounds.c_low, "c_high": bounds.c_high, "C_prime": energy_bound(problem.h1, b_sup),
            "eps": problem.eps, "b_sup": b_sup}


def _solution_table(sol: DiscreteSolution, max_paths: int, extra=None) -> Table:
    """Rows ``(time, node, state..., Y, Z...)``; regression keeps the first ``max_paths`` paths."""
    d = int(np.size(sol.z0))
    cols = ["time", "node"] + [f"state_{k}" for k in range(d)] + ["Y"] + [f"Z_{k}" for k in range(d)]
    extra_cols = [] if extra is None else extra[0]
    cols += extra_cols
    rows = []
    N = sol.n_steps
    for i in range(N + 1):
        if sol.backend == "lattice":
            w = sol.states[i].reshape(-1, 1)
            y = sol.Y[i]
        else:
            if sol.Y is None:
                break
            w = sol.states[i][:max_paths]
            y = sol.Y[i][:max_paths]
        z = sol.Z[i][: len(y)] if i < N else np.full((len(y), d), np.nan)
        ex = None if extra is None or i >= N else extra[1][i][: len(y)]
        for j in range(len(y)):
            row = [float(sol.times[i]), j] + [float(v) for v in w[j]] + [float(y[j])] + [float(v) for v in z[j]]
            if extra_cols:
                row += [float(v) for v in ex[j]] if ex is not None else [math.nan] * len(extra_cols)
            rows.append(row)
    return Table(cols, rows)


def _profile_plot(sol: DiscreteSolution, title: str, values=None, label: str = "Y") -> dict:
    """Slices of a nodewise field at five times for the lattice, a path fan for regression."""
    N = sol.n_steps
    steps = sorted({0, N // 4, N // 2, 3 * N // 4, N if values is None else N - 1})
    series = []
    for i in steps:
        if sol.backend == "lattice":
            w = sol.states[i][:, 0]
            v = sol.Y[i] if values is None else np.asarray(values[i])[:, 0]
            series.append({"x": w.tolist(), "y": np.asarray(v).tolist(), "label": f"t = {sol.times[i]:.3g}"})
    if sol.backend != "lattice" and sol.Y is not None and values is None:
        k = min(20, sol.Y.shape[1])
        for j in range(k):
            series.append({"x": sol.times.tolist(), "y": sol.Y[:, j].tolist(), "label": None})
        return {"kind": "lines", "title": title, "xlabel": "t", "ylabel": label, "series": series}
    return {"kind": "lines", "title": title, "xlabel": "W", "ylabel": label, "series": series}


def _prop1_summary(reports: list[TheoremReport]) -> dict:
    return {r.theorem_id: {"status": r.status, "worst_slack": r.worst_slack, "tolerance": r.tolerance}
            for r in reports}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------
def run_solve(cfg: dict) -> RunResult:
    problem = solve_problem(cfg)
    sol = solve(problem)
    reports = check_prop1(problem, sol)
    scalars = {"Y0": sol.y0, "Z0": np.asarray(sol.z0).tolist(), "Y0_stderr": sol.y0_stderr,
               "backend": sol.backend, "n_steps": sol.n_steps, "bounds": _bound_scalars(problem, sol),
               "diagnostics": sol.diagnostics, "checks": _prop1_summary(reports)}
    res = RunResult("solve", scalars, reports=reports)
    res.tables["solution"] = _solution_table(sol, cfg["output"]["max_paths"])
    res.plots["solution"] = _profile_plot(sol, "Y on the grid")
    res.failed = any(not r.passed for r in reports)
    return res


def run_maximize(cfg: dict) -> RunResult:
    u, model, cset, problem = utility_problem(cfg)
    sol = solve(problem)
    strategy = optimal_strategy(u, sol, model, cset, problem=problem)
    reports = check_prop1(problem, sol)
    d = model.d
    scalars = {
        "V0": value_from_y(u, sol.y0),
        "Y0": sol.y0,
        "Y0_stderr": sol.y0_stderr,
        "x": u.x,
        "utility": u.kind,
        "strategy_kind": strategy.kind,
        "strategy0": np.asarray(strategy.values[0][0]).tolist(),
        "admissibility": strategy.admissibility,
        "backend": sol.backend,
        "n_steps": sol.n_steps,
        "bounds": _bound_scalars(problem, sol),
        "diagnostics": sol.diagnostics,
        "checks": _prop1_summary(reports),
    }
    failed = any(not r.passed for r in reports) or not strategy.admissibility["admissible"]
    dpp = cfg["dpp"]
    if dpp["enabled"]:
        perts = perturbation_family(d, model.T, shifts=tuple(dpp["shifts"]))
        rep = verify_R_process(u, strategy, sol, problem=problem, n_paths=dpp["n_paths"], seed=dpp["seed"],
                               perturbations=perts, n_sigma=dpp["n_sigma"])
        scalars["dpp"] = rep
        failed = failed or not rep["pass"]
    res = RunResult("maximize", scalars, reports=reports, failed=failed)
    cols = [f"strategy_{k}" for k in range(d)]
    res.tables["solution"] = _solution_table(sol, cfg["output"]["max_paths"])
    res.tables["strategy"] = _solution_table(sol, cfg["output"]["max_paths"], extra=(cols, strategy.values))
    res.plots["solution"] = _profile_plot(sol, "Y on the grid")
    if sol.backend == "lattice":
        res.plots["strategy"] = _profile_plot(sol, f"optimal {strategy.kind}", values=strategy.values,
                                              label=strategy.kind)
    return res


def run_verify(cfg: dict) -> RunResult:
    vb = cfg["verify"]
    reports = run_suite(vb["theorems"], n_steps=cfg["numerics"]["n_steps"], n_paths=vb["n_paths"],
                        seed=cfg["numerics"]["seed"], ladder_steps=vb["ladder_steps"])
    summary = {}
    for tid in vb["theorems"]:
        mine = [r for r in reports if r.theorem_id == tid]
        app = [r for r in mine if r.applicable]
        summary[tid] = {
            "checks": len(mine),
            "applicable": len(app),
            "failed": sum(r.status == "fail" for r in mine),
            "worst_slack": max((r.worst_slack for r in app), default=None),
            "pass": all(r.passed for r in mine),
        }
    failed = any(not r.passed for r in reports)
    res = RunResult("verify", {"summary": summary, "pass": not failed}, reports=reports, failed=failed)
    res.tables["verify"] = Table(["theorem_id", "index", "status", "worst_slack", "tolerance"],
                                 [[r.theorem_id, k, r.status, r.worst_slack, r.tolerance]
                                  for k, r in enumerate(reports)])
    bars = [{"label": tid, "value": _normalised_slack([r for r in reports if r.theorem_id == tid])}
            for tid in vb["theorems"]]
    res.plots["verify"] = {"kind": "bars", "title": "worst slack relative to tolerance scale",
                           "ylabel": "slack / max(tol, 1e-12)", "bars": bars}
    return res


def _normalised_slack(reports: list[TheoremReport]) -> float:
    vals = [r.worst_slack / max(r.tolerance, 1e-12) for r in reports if r.applicable]
    return max(vals) if vals else 0.0


def run_ladder(cfg: dict) -> RunResult:
    lb = cfg["ladder"]
    rep, direct = ladder_case(n_steps=lb["n_steps"], n_list=lb["n_list"], T=lb["T"], k=lb["steepness"],
                              v_max=lb["v_max"], size=lb["grid_size"], gamma=lb["gamma"])
    det = rep.detail
    scalars = {"report": rep.to_dict(), "reference_Y0": direct.y0}
    res = RunResult("ladder", scalars, reports=[rep], failed=not rep.passed)
    if rep.applicable:
        rows = [[n, y0, gap, en] for n, y0, gap, en in zip(lb["n_list"], det["y0"], det["gaps"], det["energies"])]
        res.tables["ladder"] = Table(["n", "U0", "sup_gap", "energy_gap"], rows)
        res.plots["ladder"] = {"kind": "loglog", "title": "inf-convolution ladder", "xlabel": "n",
                               "ylabel": "distance to the quadratic solution",
                               "series": [{"x": list(lb["n_list"]), "y": det["gaps"], "label": "sup gap"},
                                          {"x": list(lb["n_list"]), "y": det["energies"], "label": "energy gap"}]}
    return res


RUNNERS = {"solve": run_solve, "maximize": run_maximize, "verify": run_verify, "ladder": run_ladder}


def run(cfg: dict) -> RunResult:
    return RUNNERS[cfg["command"]](cfg)


# ---------------------------------------------------------------------------
# convergence tables
# ---------------------------------------------------------------------------
def _gauss_expectation(fn, mean: float, T: float, n: int = 120) -> float:
    nodes, weights = np.polynomial.hermite_e.hermegauss(n)
    w = (mean + math.sqrt(T) * nodes).reshape(-1, 1)
    return float(np.sum(weights * np.asarray(fn(w), dtype=float)) / math.sqrt(2 * math.pi))


def closed_form_y0(cfg: dict) -> tuple[float | None, str | None]:
    """``Y(0)`` in closed form where one exists, with a short label, else ``(None, None)``."""
    model = cfgmod.build_model(cfg)
    if not model.constant:
        return None, None
    T = model.T
    if cfg["command"] == "maximize":
        u, _, cset, problem = utility_problem(cfg, n_steps=1)
        if u.liability is None:
            # Z vanishes, so Y is deterministic: Y(0) = F(0, 0, 0) T
            return float(problem.driver(0.0, 0.0, np.zeros(model.d))) * T, "deterministic driver"
        if u.kind == "exponential" and cset.kind == "full_space" and model.d == 1:
            mlam = float(model.m_at(0.0)[0, 0] * model.lambda_at(0.0)[0])
            val = _gauss_expectation(u.liability, -mlam * T, T) - mlam**2 * T / (2 * u.alpha)
            return val, "linear driver under the risk-neutral drift"
        return None, None
    if cfg["command"] != "solve" or cfg["driver"]["kind"] != "quadratic":
        return None, None
    drv = cfg["driver"]
    kappa, ly, q = drv.get("constant", 0.0), drv.get("y_coef", 0.0), drv.get("z_quadratic", 0.0)
    lz = np.zeros(model.d) if drv.get("z_linear") is None else np.asarray(drv["z_linear"], dtype=float).reshape(-1)
    term = cfg["terminal"]
    if term["kind"] in ("zero", "constant"):
        b = float(term.get("value", 0.0)) if term["kind"] == "constant" else 0.0
        if ly == 0.0:
            return b + kappa * T, "constant terminal"
        g = math.exp(ly * T)
        return b * g + kappa * (g - 1.0) / ly, "linear ODE"
    if model.d != 1:
        return None, None
    fn, _ = cfgmod.build_terminal(term)
    drift = float(lz[0]) * T
    if q == 0.0:
        g = math.exp(ly * T)
        return _gauss_expectation(fn, drift, T) * g + (kappa * (g - 1.0) / ly if ly else kappa * T), "linear driver"
    if ly != 0.0:
        return None, None
    val = math.log(_gauss_expectation(lambda w: np.exp(q * np.asarray(fn(w), dtype=float)), drift, T)) / q
    return kappa * T + val, "exponential transform"


def convergence_table(cfg: dict, n_list) -> RunResult:
    """``(N, Y0, error)`` rows; errors against the closed form when available, else the finest ``N``."""
    n_list = [int(n) for n in n_list]
    if not n_list or any(b <= a for a, b in zip(n_list[:-1], n_list[1:])):
        raise cfgmod.ConfigError([("--N", "step counts must be strictly increasing")])
    if cfgmod.backend_for(cfg) != "lattice":
        raise cfgmod.ConfigError([("numerics.backend", "convergence tables need the lattice backend")])
    if cfg["command"] not in ("solve", "maximize"):
        raise cfgmod.ConfigError([("command", "convergence tables apply to solve and maximize configs")])
    y0s = []
    for n in n_list:
        problem = solve_problem(cfg, n) if cfg["command"] == "solve" else utility_problem(cfg, n)[3]
        y0s.append(solve(problem).y0)
    ref, label = closed_form_y0(cfg)
    if ref is None:
        ref, label = y0s[-1], f"finest N = {n_list[-1]}"
    errors = [abs(y - ref) for y in y0s]
    rows = [[n, y, e] for n, y, e in zip(n_list, y0s, errors)]
    scalars = {"reference": ref, "reference_kind": label, "n_list": n_list, "Y0": y0s, "errors": errors}
    res = RunResult("converge", scalars)
    res.tables["convergence"] = Table(["N", "Y0", "error"], rows)
    pos = [(n, e) for n, e in zip(n_list, errors) if e > 0]
    if pos:
        res.plots["convergence"] = {"kind": "loglog", "title": f"error against {label}", "xlabel": "N",
                                    "ylabel": "|Y0(N) - reference|",
                                    "series": [{"x": [p[0] for p in pos], "y": [p[1] for p in pos], "label": "error"}]}
    return res
