"""Market primitives and Brownian path simulation.

The driving martingale is instantiated as ``dM = m' dW`` with ``W`` a
d-dimensional Brownian motion and the clock fixed to ``dC = dt``.  With that
convention ``z' d<M> z = |m z|^2 dt``, so every quadratic form in the library
reads ``|m z|^2`` exactly as in the generator formulas.  The "state" passed to
coefficient functions is the Brownian state ``W_t``.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

# Paths are generated in fixed-size blocks, each with its own counter-derived
# seed, so the output never depends on how many workers produce it.
BLOCK_PATHS = 4096


def default_threads() -> int:
    """Worker cap read from ``QBSDE_THREADS`` (defaults to 1)."""
    raw = os.environ.get("QBSDE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _as_matrix(value, d: int) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return arr * np.eye(d)
    if arr.ndim == 1:
        if arr.shape[0] != d:
            raise ValueError(f"volatility diagonal has length {arr.shape[0]}, expected {d}")
        return np.diag(arr)
    if arr.shape != (d, d):
        raise ValueError(f"volatility matrix has shape {arr.shape}, expected {(d, d)}")
    return arr


def _as_vector(value, d: int) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(d, float(arr))
    if arr.shape != (d,):
        raise ValueError(f"risk premium has shape {arr.shape}, expected {(d,)}")
    return arr


@dataclass
class MarketModel:
    """Volatility loading ``m``, risk premium ``lambda`` and horizon ``T``.

    ``vol`` and ``premium`` are either constants (scalar, diagonal or full
    matrix / vector) or callables ``f(t, x)`` taking a time and a batch of
    states of shape ``(n, d)``.
    """

    d: int
    vol: object
    premium: object
    T: float
    a_lambda: float | None = None
    _m_const: np.ndarray | None = field(default=None, init=False, repr=False)
    _lam_const: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if int(self.d) < 1:
            raise ValueError("dimension d must be >= 1")
        self.d = int(self.d)
        if not math.isfinite(self.T) or self.T <= 0:
            raise ValueError("horizon T must be a positive finite number")
        if not callable(self.vol):
            self._m_const = _as_matrix(self.vol, self.d)
            if abs(np.linalg.det(self._m_const)) < 1e-14:
                raise ValueError("volatility matrix m must be invertible")
        if not callable(self.premium):
            self._lam_const = _as_vector(self.premium, self.d)
        if self.a_lambda is None and self.constant:
            self.a_lambda = float(np.sum((self._m_const @ self._lam_const) ** 2) * self.T)

    @classmethod
    def from_black_scholes(cls, sigma: float, mu: float, r: float, T: float) -> "MarketModel":
        """One risky asset with constant ``mu``, ``sigma`` and rate ``r``.

        Prices are discounted, so ``m = sigma`` and ``lambda = (mu - r) / sigma^2``.
        """
        return cls(d=1, vol=sigma, premium=(mu - r) / sigma**2, T=T)

    @property
    def constant(self) -> bool:
        return self._m_const is not None and self._lam_const is not None

    def m_at(self, t: float, x: np.ndarray | None = None) -> np.ndarray:
        """Volatility at time ``t``: ``(d, d)`` if constant, else ``(n, d, d)``."""
        if self._m_const is not None:
            return self._m_const
        x = self._states(x)
        out = np.asarray(self.vol(t, x), dtype=float)
        if out.shape == (self.d, self.d):
            return out
        return out.reshape(x.shape[0], self.d, self.d)

    def lambda_at(self, t: float, x: np.ndarray | None = None) -> np.ndarray:
        """Risk premium at time ``t``: ``(d,)`` if constant, else ``(n, d)``."""
        if self._lam_const is not None:
            return self._lam_const
        x = self._states(x)
        out = np.asarray(self.premium(t, x), dtype=float)
        if out.shape == (self.d,):
            return out
        return out.reshape(x.shape[0], self.d)

    def _states(self, x):
        if x is None:
            return np.zeros((1, self.d))
        return np.asarray(x, dtype=float).reshape(-1, self.d)

    def sharpe_sq(self, t: float, x: np.ndarray | None = None) -> np.ndarray:
        """``|m lambda|^2`` at time ``t`` (scalar array if constant)."""
        ml = matvec(self.m_at(t, x), self.lambda_at(t, x))
        return np.sum(ml**2, axis=-1)

    def check_invertible(self, times, states) -> bool:
        """True if ``m`` is invertible at every sampled ``(time, state)``."""
        for t in times:
            m = self.m_at(t, states)
            if np.any(np.abs(np.linalg.det(m)) < 1e-14):
                return False
        return True


def matvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Batched ``m @ v`` for ``m`` of shape ``(..., d, d)`` and ``v`` of ``(..., d)``."""
    return np.einsum("...ij,...j->...i", m, v)


@dataclass
class PathBundle:
    """Brownian increments for ``n_paths`` paths over ``n_steps`` equal steps."""

    n_paths: int
    n_steps: int
    increments: np.ndarray  # (n_paths, n_steps, d)
    seed: int
    T: float

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def d(self) -> int:
        return self.increments.shape[2]

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)

    def states(self) -> np.ndarray:
        """Brownian states ``W`` of shape ``(n_steps + 1, n_paths, d)``."""
        out = np.zeros((self.n_steps + 1, self.n_paths, self.d))
        np.cumsum(np.moveaxis(self.increments, 1, 0), axis=0, out=out[1:])
        return out


def _block_generator(seed: int, block: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=(block,))
    return np.random.Generator(np.random.Philox(ss))


def _check_sizes(T: float, n_paths: int, n_steps: int) -> None:
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if not math.isfinite(T) or T <= 0:
        raise ValueError("horizon T must be a positive finite number")


def iter_increment_blocks(model: MarketModel, n_paths: int, n_steps: int, seed: int) -> Iterator[np.ndarray]:
    """Yield increment blocks of at most ``BLOCK_PATHS`` paths, in path order.

    Streaming variant of :func:`simulate_paths`; concatenating the blocks gives
    exactly the bundle's increments.
    """
    _check_sizes(model.T, n_paths, n_steps)
    scale = math.sqrt(model.T / n_steps)
    n_blocks = -(-n_paths // BLOCK_PATHS)
    for b in range(n_blocks):
        size = min(BLOCK_PATHS, n_paths - b * BLOCK_PATHS)
        yield _block_generator(seed, b).standard_normal((size, n_steps, model.d)) * scale


def simulate_paths(model: MarketModel, n_paths: int, n_steps: int, seed: int,
                   threads: int | None = None) -> PathBundle:
    """Exact Gaussian Brownian increments with covariance ``(T / n_steps) I``.

    Identical ``(model, n_paths, n_steps, seed)`` give bit-identical bundles
    for any ``threads`` value.
    """
    _check_sizes(model.T, n_paths, n_steps)
    threads = default_threads() if threads is None else max(1, int(threads))
    scale = math.sqrt(model.T / n_steps)
    out = np.empty((n_paths, n_steps, model.d))
    n_blocks = -(-n_paths // BLOCK_PATHS)

    def fill(b: int) -> None:
        lo = b * BLOCK_PATHS
        hi = min(n_paths, lo + BLOCK_PATHS)
        out[lo:hi] = _block_generator(seed, b).standard_normal((hi - lo, n_steps, model.d))
        out[lo:hi] *= scale

    if threads == 1 or n_blocks == 1:
        for b in range(n_blocks):
            fill(b)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill, range(n_blocks)))
    return PathBundle(n_paths=n_paths, n_steps=n_steps, increments=out, seed=int(seed), T=model.T)


@dataclass
class StructureReport:
    a_lambda_hat: float
    a_lambda: float | None
    passed: bool


def check_structure_condition(model: MarketModel, bundle: PathBundle) -> StructureReport:
    """Largest discretised ``int_0^T |m lambda|^2 dt`` over the simulated paths.

    Left-point sums on the bundle's grid; passes when it does not exceed the
    model's declared ``a_lambda``.
    """
    dt = bundle.dt
    w = np.zeros((bundle.n_paths, model.d))
    total = np.zeros(bundle.n_paths)
    for k in range(bundle.n_steps):
        t = k * dt
        total += np.broadcast_to(model.sharpe_sq(t, w), total.shape) * dt
        w = w + bundle.increments[:, k, :]
    hat = float(total.max())
    declared = model.a_lambda
    passed = declared is not None and hat <= declared * (1 + 1e-12) + 1e-15
    return StructureReport(a_lambda_hat=hat, a_lambda=declared, passed=bool(passed))


def realized_covariation(model: MarketModel, n_paths: int, n_steps: int, seed: int) -> np.ndarray:
    """Per-path realised ``<M>_T`` (shape ``(n_paths, d, d)``), streamed by block.

    Only meaningful for constant volatility; the bundle is never materialised.
    """
    m = model.m_at(0.0)
    out = []
    for block in iter_increment_blocks(model, n_paths, n_steps, seed):
        dm = np.einsum("ji,pkj->pki", m, block)  # m' dW
        out.append(np.einsum("pki,pkj->pij", dm, dm))
    return np.concatenate(out, axis=0)
