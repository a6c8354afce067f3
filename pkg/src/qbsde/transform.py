"""Exponential change of variable, truncations and inf-convolution ladders.

``U = exp(beta Y)`` turns the Y-equation with driver ``F`` into the
U-equation ``dU = -g(s, U, V) ds + V dM`` with

    g(s, u, v) = (beta u F(s, ln(u)/beta, v/(beta u)) - |m v|^2 / (2u)) 1_{u > 0}.

The inf-convolution ``g^n`` is evaluated as a minimum over a finite tensor grid
of ``(u', v')`` augmented by the query point and its two grid "cross sections",
which keeps ``g^n <= g`` everywhere and exact Lipschitz behaviour on the grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .generators import GeneratorSpec, H1Certificate, apriori_bounds, energy_bound
from .market import MarketModel, matvec


@dataclass
class Eq2Problem:
    """Driver ``g(s, u, v)`` of the U-equation with its terminal map.

    ``terminal`` maps terminal Brownian states ``(n, d)`` to values ``(n,)``.
    ``lipschitz_n`` is set for inf-convolution stages; ``lipschitz_L`` declares
    a global Lipschitz constant when one is known.
    """

    g: Callable
    terminal: Callable | None
    d: int
    model: MarketModel | None = None
    lipschitz_n: int | None = None
    lipschitz_L: float | None = None
    h1: H1Certificate | None = None
    b_sup: float | None = None
    beta: float | None = None
    state_free: bool = True
    name: str = "g"
    y_free: bool = False

    def __call__(self, s, u, v, x=None):
        u_arr = np.asarray(u, dtype=float)
        v_arr = np.asarray(v, dtype=float)
        scalar = u_arr.ndim == 0 and v_arr.ndim <= 1
        v_b = v_arr.reshape(-1, self.d)
        u_b = np.broadcast_to(np.atleast_1d(u_arr), (v_b.shape[0],))
        x_b = None if x is None else np.asarray(x, dtype=float).reshape(-1, self.d)
        out = np.broadcast_to(np.asarray(self.g(s, u_b, v_b, x_b), dtype=float), (v_b.shape[0],))
        return float(out[0]) if scalar else out

    # the solver treats both equation forms through the same interface
    eval = property(lambda self: self.g)
    h2 = None
    lipschitz_y = property(lambda self: self.lipschitz_L if self.lipschitz_L is not None else self.lipschitz_n)


@dataclass(frozen=True)
class TruncationConstants:
    c1: float
    c2: float
    K: float


def _metric(model: MarketModel | None, s, x, d: int):
    return np.eye(d) if model is None else model.m_at(s, x)


def to_eq2(F: GeneratorSpec, beta: float, terminal: Callable | None = None,
           b_sup: float | None = None) -> Eq2Problem:
    """U-equation driver and terminal ``exp(beta B)`` for the Y-equation ``(F, beta, B)``."""
    if beta == 0:
        raise ValueError("beta must be non-zero for the exponential change of variable")
    d = F.d
    model = F.model

    def g(s, u, v, x=None):
        out = np.zeros(u.shape[0])
        pos = u > 0
        if not np.any(pos):
            return out
        up, vp = u[pos], v[pos]
        xp = None if x is None else x[pos]
        m = _metric(model, s, xp, d)
        mv = matvec(m, vp)
        f = F(s, np.log(up) / beta, vp / (beta * up)[:, None], xp)
        out[pos] = beta * up * f - np.sum(mv**2, axis=-1) / (2 * up)
        return out

    term = None
    if terminal is not None:
        def term(w):
            return np.exp(beta * np.asarray(terminal(w), dtype=float))

    tb = None if b_sup is None else math.exp(abs(beta) * b_sup)
    return Eq2Problem(g=g, terminal=term, d=d, model=model, b_sup=tb, beta=beta,
                      state_free=model is None or model.constant, name=f"eq2[{F.name}]")


def from_eq2_solution(U, V, beta: float):
    """``Y = ln(U)/beta`` and ``Z = V/(beta U)``; lists of per-step arrays are mapped elementwise."""
    if beta == 0:
        raise ValueError("beta must be non-zero")
    if isinstance(U, (list, tuple)):
        Y = [from_eq2_solution(u, None, beta)[0] for u in U]
        Z = None if V is None else [_z_from_v(u, v, beta) for u, v in zip(U, V)]
        return Y, Z
    U = np.asarray(U, dtype=float)
    if np.any(~(U > 0)):
        raise ValueError("U must be strictly positive to invert the exponential transform")
    Y = np.log(U) / beta
    return Y, (None if V is None else _z_from_v(U, V, beta))


def _z_from_v(U, V, beta):
    U = np.asarray(U, dtype=float)
    V = np.asarray(V, dtype=float)
    if np.any(~(U > 0)):
        raise ValueError("U must be strictly positive to invert the exponential transform")
    n = V.shape[0] if V.ndim else 1
    return V / (beta * U[:n].reshape(-1, *([1] * (V.ndim - 1))))


def truncation_constants(a: float, beta: float, b_sup: float, b: float = 0.0) -> TruncationConstants:
    """Bounds ``c1 <= U <= c2`` for the truncated U-equation and ``K = |c| + |C|``.

    ``a`` is the time integral bound of the Y-driver's certificate; the
    truncated U-driver has integral bound ``|beta| a``, which enters ``c2``.
    ``b`` is the Y-driver's certificate ``b`` and only affects ``K``.
    """
    a_u = abs(beta) * a
    c2 = math.exp(a_u) - 1.0 + math.exp(abs(beta) * b_sup) * math.exp(a_u)
    c1 = math.exp(-abs(beta) * (b_sup + a))
    cert = H1Certificate(alpha_bar=lambda s, x=None: 0.0, a=a, b=b, gamma=max(b, abs(beta)), beta=beta)
    bounds = apriori_bounds(cert, b_sup)
    return TruncationConstants(c1=c1, c2=c2, K=abs(bounds.c_low) + abs(bounds.c_high))


def truncate_y(F: GeneratorSpec, K: float) -> GeneratorSpec:
    """``F(s, clamp(y, -K, K), z)``; its certificate drops the ``|y|`` term."""
    if not K > 0:
        raise ValueError("K must be > 0")
    base = F.eval

    def FK(s, y, z, x=None):
        return base(s, np.clip(y, -K, K), z, x)

    h1 = F.h1
    if h1 is not None:
        b = h1.b if h1.variant == "H1" else 0.0
        old = h1.alpha_bar

        def abar(s, x=None):
            return old(s, x) * (1 + b * K)

        h1 = replace(h1, alpha_bar=abar, a=h1.a * (1 + b * K), b=0.0, variant="H1_prime", C1=0.0)
    return replace(F, eval=FK, h1=h1, name=f"{F.name}|K={K:g}")


def truncate_u(F: GeneratorSpec, beta: float, c1: float, c2: float, terminal: Callable | None = None,
               b_sup: float | None = None) -> Eq2Problem:
    """Globally defined U-driver that coincides with ``to_eq2(F, beta)`` on ``[c1, c2]``.

    ``F`` must carry a certificate without the ``|y|`` term (apply
    :func:`truncate_y` first otherwise).
    """
    if not 0 < c1 <= c2:
        raise ValueError("need 0 < c1 <= c2")
    if beta == 0:
        raise ValueError("beta must be non-zero")
    d = F.d
    model = F.model

    def G(s, u, v, x=None):
        lower = np.maximum(u, c1)
        m = _metric(model, s, x, d)
        mv = matvec(m, v)
        f = F(s, np.log(lower) / beta, v / (beta * lower)[:, None], x)
        return beta * np.clip(u, -c2, c2) * f - np.sum(mv**2, axis=-1) / (2 * lower)

    h1 = None
    if F.h1 is not None:
        if F.h1.variant == "H1" and F.h1.b > 0:
            raise ValueError("truncate the y-dependence first (truncate_y)")
        old = F.h1.alpha_bar

        def abar(s, x=None):
            return abs(beta) * old(s, x)

        gamma_hat = F.h1.gamma * c2 / (abs(beta) * c1**2) + 1.0 / c1
        h1 = H1Certificate(alpha_bar=abar, a=abs(beta) * F.h1.a, b=1.0, gamma=gamma_hat, beta=0.0)
    term = None
    if terminal is not None:
        def term(w):
            return np.exp(beta * np.asarray(terminal(w), dtype=float))

    tb = None if b_sup is None else math.exp(abs(beta) * b_sup)
    return Eq2Problem(g=G, terminal=term, d=d, model=model, h1=h1, b_sup=tb, beta=beta,
                      state_free=model is None or model.constant, name=f"G[{F.name}]")


# ---------------------------------------------------------------------------
# inf-convolution
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class TensorGrid:
    """Tensor grid: ``u_nodes`` of shape ``(nu,)`` times ``v_nodes`` of shape ``(nv, d)``."""

    u_nodes: np.ndarray
    v_nodes: np.ndarray

    @property
    def size(self) -> int:
        return self.u_nodes.size * self.v_nodes.shape[0]

    def points(self) -> tuple[np.ndarray, np.ndarray]:
        """All grid points as ``(u, v)`` arrays of shapes ``(k,)`` and ``(k, d)``."""
        nu, nv = self.u_nodes.size, self.v_nodes.shape[0]
        return np.repeat(self.u_nodes, nv), np.tile(self.v_nodes, (nu, 1))


def tensor_grid(u_lo: float, u_hi: float, v_max: float, d: int = 1, size: int = 101) -> TensorGrid:
    """``size`` points per axis on ``[u_lo, u_hi] x [-v_max, v_max]^d``."""
    if size < 1:
        raise ValueError("grid needs at least one point per axis")
    u = np.linspace(u_lo, u_hi, size)
    axis = np.linspace(-v_max, v_max, size)
    v = np.stack(np.meshgrid(*([axis] * d), indexing="ij"), axis=-1).reshape(-1, d)
    return TensorGrid(u_nodes=u, v_nodes=v)


def default_grid(problem: Eq2Problem, size: int = 101, dt: float | None = None,
                 c1: float | None = None, c2: float | None = None) -> TensorGrid:
    """Grid over the a priori box ``[c1, c2] x [-v_max, v_max]^d``.

    ``v_max`` is the square root of the certificate's energy constant, divided
    by ``sqrt(dt)`` when a step size is given (the largest one-step ``|m V|``).
    """
    if problem.h1 is None or problem.b_sup is None:
        raise ValueError("default grid needs an H1 certificate and a terminal bound")
    if c1 is None or c2 is None:
        bounds = apriori_bounds(problem.h1, problem.b_sup)
        c1 = bounds.c_low if c1 is None else c1
        c2 = bounds.c_high if c2 is None else c2
    energy = energy_bound(problem.h1, problem.b_sup)
    v_max = math.sqrt(energy / dt) if dt else math.sqrt(energy)
    return tensor_grid(c1, c2, max(v_max, 1e-12), problem.d, size)


class _InfConvolution:
    """Callable ``g^n(s, u, v, x)`` over a fixed grid, with per-time caching."""

    def __init__(self, base: Eq2Problem, n: float, grid: TensorGrid):
        self.base = base
        self.n = float(n)
        self.grid = grid
        self._table: dict = {}
        self._last_v: tuple | None = None

    def _metric(self, s, x):
        return _metric(self.base.model, s, x, self.base.d)

    def _grid_values(self, s, x_row=None) -> np.ndarray:
        """``g(s, u_i, v_j)`` of shape ``(nu, nv)``; cached by ``s`` when state-free."""
        key = float(s)
        if x_row is None and key in self._table:
            return self._table[key]
        uu, vv = self.grid.points()
        xx = None if x_row is None else np.broadcast_to(x_row, (uu.size, self.base.d))
        vals = self.base.g(s, uu, vv, xx).reshape(self.grid.u_nodes.size, -1)
        if x_row is None:
            if len(self._table) > 4096:
                self._table.clear()
            self._table[key] = vals
        return vals

    def _v_distance(self, s, v, x):
        """``|m (v_q - v_j)|`` of shape ``(q, nv)``."""
        m = self._metric(s, x)
        diff = v[:, None, :] - self.grid.v_nodes[None, :, :]
        if m.ndim == 2:
            md = diff @ m.T
        else:
            md = np.einsum("qij,qkj->qki", m, diff)
        return np.sqrt(np.sum(md**2, axis=-1))

    def _v_part(self, s, v, x):
        """Per query and u-node: ``min_j g(s, u_i, v_j) + n|m(v - v_j)|`` and ``g(s, u_i, v)``."""
        key = (float(s), v.shape, v.tobytes(), None if x is None else x.tobytes())
        if self._last_v is not None and self._last_v[0] == key:
            return self._last_v[1]
        nq, nu = v.shape[0], self.grid.u_nodes.size
        dist = self._v_distance(s, v, x)
        if self.base.state_free or x is None:
            table = self._grid_values(s)
            h = np.min(table[None, :, :] + self.n * dist[:, None, :], axis=-1)
        else:
            h = np.empty((nq, nu))
            for q in range(nq):
                h[q] = np.min(self._grid_values(s, x[q]) + self.n * dist[q][None, :], axis=-1)
        # cross section through the query's v
        uq = np.repeat(self.grid.u_nodes, nq)
        vq = np.tile(v, (nu, 1))
        xq = None if x is None else np.tile(x, (nu, 1))
        cross = self.base.g(s, uq, vq, xq).reshape(nu, nq).T
        part = (np.minimum(h, cross), dist)
        self._last_v = (key, part)
        return part

    def __call__(self, s, u, v, x=None):
        part, dist = self._v_part(s, v, x)
        n = self.n
        best = np.min(part + n * np.abs(u[:, None] - self.grid.u_nodes[None, :]), axis=-1)
        # cross section through the query's u
        nq, nv = v.shape[0], self.grid.v_nodes.shape[0]
        uq = np.repeat(u, nv)
        vq = np.tile(self.grid.v_nodes, (nq, 1))
        xq = None if x is None else np.repeat(x, nv, axis=0)
        cross = self.base.g(s, uq, vq, xq).reshape(nq, nv) + n * dist
        best = np.minimum(best, np.min(cross, axis=-1))
        return np.minimum(best, self.base.g(s, u, v, x))


def inf_convolve(g: Eq2Problem, n: int, grid: TensorGrid) -> Eq2Problem:
    """``g^n(s, u, v) = min g(s, u', v') + n |m (v - v')| + n |u - u'|`` over the grid.

    The candidate set is the grid, the grid with ``u'`` replaced by the query's
    ``u``, the grid with ``v'`` replaced by the query's ``v``, and the query
    point itself.  Hence ``g^n <= g`` everywhere and ``g^n`` is nondecreasing
    in ``n``; on grid points the minimum is an exact inf-convolution over the
    grid and therefore ``n``-Lipschitz there.
    """
    if grid is None or grid.size == 0:
        raise ValueError("inf-convolution needs a non-empty grid")
    if n < 1:
        raise ValueError("n must be >= 1")
    fn = _InfConvolution(g, n, grid)
    return replace(g, g=fn, lipschitz_n=int(n), name=f"{g.name}^{n}", y_free=False)


def _positive_part(g: Eq2Problem, sign: float) -> Eq2Problem:
    base = g.g

    def part(s, u, v, x=None):
        return np.maximum(sign * np.asarray(base(s, u, v, x)), 0.0)

    return replace(g, g=part, name=f"{g.name}{'+' if sign > 0 else '-'}")


def inf_convolve_two_sided(g: Eq2Problem, n: int, p: int, grid: TensorGrid) -> Eq2Problem:
    """``(g+)^n - (g-)^p``: nondecreasing in ``n`` and nonincreasing in ``p``."""
    upper = inf_convolve(_positive_part(g, 1.0), n, grid)
    lower = inf_convolve(_positive_part(g, -1.0), p, grid)

    def gnp(s, u, v, x=None):
        return upper.g(s, u, v, x) - lower.g(s, u, v, x)

    return replace(g, g=gnp, lipschitz_n=int(max(n, p)), name=f"{g.name}^({n},{p})", y_free=False)
