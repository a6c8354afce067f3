"""Closed constraint sets and their m-weighted nearest-point maps.

Every projection minimises ``|m (nu - target)|^2`` over the set.  Non-convex
sets are finite point sets and finite unions; they are projected member by
member and the best candidate kept.  Ties are broken towards the
lexicographically smallest minimiser, which keeps the selection deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

KINDS = ("full_space", "singleton", "box", "ball", "finite_set", "union", "halfspace")

MEMBERSHIP_TOL = 1e-12
_TIE_RTOL = 1e-12
_CD_TOL = 1e-13
_CD_MAX_SWEEPS = 10_000


class ConstraintError(ValueError):
    pass


@dataclass(frozen=True)
class ConstraintSet:
    """A closed subset of R^d described by ``kind`` and its parameters.

    Use the classmethod constructors; they validate shapes and that the set
    contains the origin.  Members meant only for a union may skip the origin
    check with ``require_origin=False``; the union itself is always checked.
    """

    kind: str
    d: int
    point: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    center: np.ndarray | None = None
    radius: float | None = None
    points: np.ndarray | None = None
    members: tuple = field(default_factory=tuple)
    normal: np.ndarray | None = None
    offset: float | None = None
    require_origin: bool = field(default=True, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConstraintError(f"unknown constraint kind {self.kind!r}")
        if self.kind == "union" and not self.members:
            raise ConstraintError("union must have at least one member")
        if self.require_origin and not contains(self, np.zeros(self.d)):
            raise ConstraintError(f"{self.kind} constraint set must contain 0")

    # constructors -----------------------------------------------------------
    @classmethod
    def full_space(cls, d: int) -> "ConstraintSet":
        return cls("full_space", d)

    @classmethod
    def singleton(cls, point, require_origin: bool = True) -> "ConstraintSet":
        p = np.atleast_1d(np.asarray(point, dtype=float))
        return cls("singleton", p.size, point=p, require_origin=require_origin)

    @classmethod
    def box(cls, lower, upper, require_origin: bool = True) -> "ConstraintSet":
        lo = np.atleast_1d(np.asarray(lower, dtype=float))
        hi = np.atleast_1d(np.asarray(upper, dtype=float))
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ConstraintError("box needs lower <= upper with matching shapes")
        return cls("box", lo.size, lower=lo, upper=hi, require_origin=require_origin)

    @classmethod
    def ball(cls, center, radius: float, require_origin: bool = True) -> "ConstraintSet":
        c = np.atleast_1d(np.asarray(center, dtype=float))
        if radius < 0:
            raise ConstraintError("ball radius must be non-negative")
        return cls("ball", c.size, center=c, radius=float(radius), require_origin=require_origin)

    @classmethod
    def finite_set(cls, points, require_origin: bool = True) -> "ConstraintSet":
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.shape[0] == 0:
            raise ConstraintError("finite_set needs at least one point")
        # lexicographic order makes first-minimiser selection the tie-break
        order = np.lexsort(pts.T[::-1])
        return cls("finite_set", pts.shape[1], points=pts[order], require_origin=require_origin)

    @classmethod
    def union(cls, members) -> "ConstraintSet":
        members = tuple(members)
        if not members:
            raise ConstraintError("union must have at least one member")
        dims = {m.d for m in members}
        if len(dims) != 1:
            raise ConstraintError("union members must share a dimension")
        return cls("union", dims.pop(), members=members)

    @classmethod
    def halfspace(cls, normal, offset: float, require_origin: bool = True) -> "ConstraintSet":
        """``{x : normal . x <= offset}``."""
        a = np.atleast_1d(np.asarray(normal, dtype=float))
        if not np.any(a):
            raise ConstraintError("halfspace normal must be non-zero")
        return cls("halfspace", a.size, normal=a, offset=float(offset), require_origin=require_origin)

    @classmethod
    def from_dict(cls, spec: dict, d: int | None = None, require_origin: bool = True) -> "ConstraintSet":
        """Build from a JSON-style object with a ``kind`` discriminator."""
        kind = spec.get("kind")
        ro = require_origin
        if kind == "full_space":
            if d is None and "d" not in spec:
                raise ConstraintError("full_space needs a dimension")
            return cls.full_space(int(spec.get("d", d)))
        if kind == "singleton":
            return cls.singleton(spec["point"], require_origin=ro)
        if kind == "box":
            return cls.box(spec["lower"], spec["upper"], require_origin=ro)
        if kind == "ball":
            return cls.ball(spec["center"], spec["radius"], require_origin=ro)
        if kind == "finite_set":
            return cls.finite_set(spec["points"], require_origin=ro)
        if kind == "union":
            return cls.union([cls.from_dict(m, d, require_origin=False) for m in spec["members"]])
        if kind == "halfspace":
            return cls.halfspace(spec["normal"], spec["offset"], require_origin=ro)
        raise ConstraintError(f"unknown constraint kind {kind!r}")

    def to_dict(self) -> dict:
        if self.kind == "full_space":
            return {"kind": "full_space", "d": self.d}
        if self.kind == "singleton":
            return {"kind": "singleton", "point": self.point.tolist()}
        if self.kind == "box":
            return {"kind": "box", "lower": self.lower.tolist(), "upper": self.upper.tolist()}
        if self.kind == "ball":
            return {"kind": "ball", "center": self.center.tolist(), "radius": self.radius}
        if self.kind == "finite_set":
            return {"kind": "finite_set", "points": self.points.tolist()}
        if self.kind == "union":
            return {"kind": "union", "members": [m.to_dict() for m in self.members]}
        return {"kind": "halfspace", "normal": self.normal.tolist(), "offset": self.offset}

    def subset_of_union(self, extra: "ConstraintSet") -> "ConstraintSet":
        """This set enlarged by one more union member."""
        own = list(self.members) if self.kind == "union" else [self]
        return ConstraintSet.union(own + [extra])


# membership -----------------------------------------------------------------
def contains(cset: ConstraintSet, x, tol: float = MEMBERSHIP_TOL) -> np.ndarray | bool:
    """Membership predicate; vectorised over a leading batch axis."""
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 1
    x = np.atleast_2d(x)
    k = cset.kind
    if k == "full_space":
        out = np.ones(x.shape[0], dtype=bool)
    elif k == "singleton":
        out = np.all(np.abs(x - cset.point) <= tol, axis=-1)
    elif k == "box":
        out = np.all((x >= cset.lower - tol) & (x <= cset.upper + tol), axis=-1)
    elif k == "ball":
        out = np.linalg.norm(x - cset.center, axis=-1) <= cset.radius + tol
    elif k == "finite_set":
        diff = np.abs(x[:, None, :] - cset.points[None, :, :])
        out = np.any(np.all(diff <= tol, axis=-1), axis=-1)
    elif k == "union":
        out = np.zeros(x.shape[0], dtype=bool)
        for member in cset.members:
            out |= contains(member, x, tol)
    else:
        out = x @ cset.normal <= cset.offset + tol
    return bool(out[0]) if scalar else out


# projection -----------------------------------------------------------------
def _prepare(target, m):
    t = np.asarray(target, dtype=float)
    m = np.asarray(m, dtype=float)
    scalar = t.ndim <= 1
    t = np.atleast_2d(t) if t.ndim else t.reshape(1, 1)
    d = t.shape[-1]
    if m.ndim == 0:
        m = m * np.eye(d)
    if m.shape[-2:] != (d, d):
        raise ConstraintError(f"metric has shape {m.shape}, expected (..., {d}, {d})")
    _check_invertible(m)
    return t, m, scalar


def _check_invertible(m: np.ndarray) -> None:
    if m.ndim == 2 or (m.ndim == 3 and m.strides[0] == 0):
        sample = m if m.ndim == 2 else m[0]
        s = np.linalg.svd(sample, compute_uv=False)
        bad = s[-1] <= 1e-14 * max(s[0], 1e-300)
    else:
        s = np.linalg.svd(m, compute_uv=False)
        bad = np.any(s[..., -1] <= 1e-14 * np.maximum(s[..., 0], 1e-300))
    if bad:
        raise ConstraintError("metric m is singular")


def _gram(m: np.ndarray) -> np.ndarray:
    return np.swapaxes(m, -1, -2) @ m


def _wdist_sq(m: np.ndarray, diff: np.ndarray) -> np.ndarray:
    md = np.einsum("...ij,...j->...i", m, diff)
    return np.sum(md * md, axis=-1)


def _lex_less(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise lexicographic ``a < b``."""
    neq = a != b
    first = np.argmax(neq, axis=-1)
    rows = np.arange(a.shape[0])
    return neq.any(axis=-1) & (a[rows, first] < b[rows, first])


def _select_best(cands: list[np.ndarray], dists: list[np.ndarray]):
    best, best_d = cands[0].copy(), dists[0].copy()
    for c, dist in zip(cands[1:], dists[1:]):
        tol = _TIE_RTOL * np.maximum(1.0, np.maximum(best_d, dist))
        better = (dist < best_d - tol) | ((np.abs(dist - best_d) <= tol) & _lex_less(c, best))
        best[better] = c[better]
        best_d = np.where(better, dist, best_d)
    return best, best_d


def _project_box(cset, t, m):
    q = _gram(m)
    off = q - np.eye(t.shape[-1]) * np.diagonal(q, axis1=-2, axis2=-1)[..., None]
    clamped = np.clip(t, cset.lower, cset.upper)
    if not np.any(off):
        return clamped
    # projected coordinate descent on the convex quadratic (nu - t)' Q (nu - t)
    q = np.broadcast_to(q, (t.shape[0],) + q.shape[-2:])
    nu = clamped.copy()
    diag = np.diagonal(q, axis1=-2, axis2=-1)
    for _ in range(_CD_MAX_SWEEPS):
        prev = nu.copy()
        for k in range(t.shape[-1]):
            grad_k = np.einsum("nj,nj->n", q[:, k, :], nu - t)
            nu[:, k] = np.clip(nu[:, k] - grad_k / diag[:, k], cset.lower[k], cset.upper[k])
        if np.max(np.abs(nu - prev)) <= _CD_TOL:
            break
    return nu


def _project_ball(cset, t, m):
    c, r = cset.center, cset.radius
    w = t - c
    inside = np.linalg.norm(w, axis=-1) <= r
    if np.all(inside):
        return t.copy()
    if t.shape[-1] == 1:
        # an interval: every metric agrees with the clamp
        return np.clip(t, c - r, c + r)
    q = np.broadcast_to(_gram(m), (t.shape[0],) + (t.shape[-1],) * 2)
    evals, evecs = np.linalg.eigh(q)
    coef = np.einsum("nji,nj->ni", evecs, w)  # U' w

    def radius_of(mu):
        scale = evals / (evals + mu[:, None])
        return np.sqrt(np.sum((scale * coef) ** 2, axis=-1))

    # |nu(mu) - c| decreases in mu; bracket then bisect on the secular equation
    lo = np.zeros(t.shape[0])
    hi = np.maximum(evals.max(axis=-1), 1.0)
    while np.any((radius_of(hi) > r) & ~inside):
        hi = np.where(radius_of(hi) > r, hi * 2.0, hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        too_far = radius_of(mid) > r
        lo = np.where(too_far, mid, lo)
        hi = np.where(too_far, hi, mid)
    mu = hi
    scale = evals / (evals + mu[:, None])
    nu_rel = np.einsum("nij,nj->ni", evecs, scale * coef)
    norm = np.linalg.norm(nu_rel, axis=-1)
    nu_rel *= np.minimum(1.0, r / np.maximum(norm, 1e-300))[:, None]
    return np.where(inside[:, None], t, c + nu_rel)


def _project_halfspace(cset, t, m):
    a, b = cset.normal, cset.offset
    viol = t @ a - b
    q = np.broadcast_to(_gram(m), (t.shape[0],) + (t.shape[-1],) * 2)
    qinv_a = np.linalg.solve(q, np.broadcast_to(a, t.shape)[..., None])[..., 0]
    denom = qinv_a @ a
    step = np.where(viol > 0, viol / denom, 0.0)
    nu = t - step[:, None] * qinv_a
    # guard the boundary against rounding
    over = nu @ a - b
    fix = over > 0
    if np.any(fix):
        nu[fix] -= (over[fix] / (a @ a))[:, None] * a
    return nu


def _project_batch(cset: ConstraintSet, t: np.ndarray, m: np.ndarray) -> np.ndarray:
    k = cset.kind
    if k == "full_space":
        return t.copy()
    if k == "singleton":
        return np.broadcast_to(cset.point, t.shape).copy()
    if k == "box":
        return _project_box(cset, t, m)
    if k == "ball":
        return _project_ball(cset, t, m)
    if k == "halfspace":
        return _project_halfspace(cset, t, m)
    if k == "finite_set":
        cands = [np.broadcast_to(p, t.shape) for p in cset.points]
    else:
        cands = [_project_batch(member, t, m) for member in cset.members]
    dists = [_wdist_sq(m, c - t) for c in cands]
    best, _ = _select_best(cands, dists)
    return best


def project(cset: ConstraintSet, target, m) -> np.ndarray:
    """Point of ``cset`` minimising ``|m (nu - target)|^2``.

    ``target`` may be a single d-vector or a batch ``(n, d)``; ``m`` a single
    ``(d, d)`` matrix or a batch ``(n, d, d)``.  Among several minimisers the
    lexicographically smallest is returned.
    """
    t, m, scalar = _prepare(target, m)
    if t.shape[-1] != cset.d:
        raise ConstraintError(f"target dimension {t.shape[-1]} does not match set dimension {cset.d}")
    out = _project_batch(cset, t, m)
    return out[0] if scalar else out


def dist_sq(cset: ConstraintSet, target, m) -> np.ndarray | float:
    """``|m (project(target) - target)|^2``; zero exactly on the set."""
    t, mm, scalar = _prepare(target, m)
    nu = _project_batch(cset, t, mm)
    out = _wdist_sq(mm, nu - t)
    if cset.kind != "full_space":
        out = np.where(contains(cset, t), 0.0, out)
    return float(out[0]) if scalar else out


def grid_project(cset: ConstraintSet, target, m, lo, hi, n: int = 401) -> np.ndarray:
    """Exhaustive nearest point over members of a tensor grid (test oracle).

    Only grid points inside ``cset`` are candidates; finite-set points are
    added explicitly so isolated points are not missed.
    """
    target = np.asarray(target, dtype=float)
    d = target.size
    axes = [np.linspace(lo[i], hi[i], n) for i in range(d)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    grid = grid[contains(cset, grid, tol=1e-9)]
    extra = _isolated_points(cset)
    if extra is not None:
        grid = np.vstack([grid, extra])
    dist = _wdist_sq(np.asarray(m, dtype=float), grid - target)
    return grid[np.argmin(dist)]


def _isolated_points(cset):
    if cset.kind == "finite_set":
        return cset.points
    if cset.kind == "singleton":
        return cset.point[None, :]
    if cset.kind == "union":
        parts = [p for p in (_isolated_points(mb) for mb in cset.members) if p is not None]
        return np.vstack(parts) if parts else None
    return None


def sample_points(cset: ConstraintSet, n: int, rng: np.random.Generator, scale: float = 5.0) -> np.ndarray:
    """Random points of ``cset`` (used by minimality audits)."""
    d = cset.d
    k = cset.kind
    if k == "full_space":
        return rng.uniform(-scale, scale, (n, d))
    if k == "singleton":
        return np.tile(cset.point, (n, 1))
    if k == "box":
        lo = np.maximum(cset.lower, -scale)
        hi = np.minimum(cset.upper, scale)
        return rng.uniform(lo, hi, (n, d))
    if k == "ball":
        v = rng.standard_normal((n, d))
        v /= np.linalg.norm(v, axis=-1, keepdims=True)
        rad = cset.radius * rng.uniform(0, 1, n) ** (1.0 / d)
        return cset.center + v * rad[:, None]
    if k == "finite_set":
        return cset.points[rng.integers(0, cset.points.shape[0], n)]
    if k == "union":
        which = rng.integers(0, len(cset.members), n)
        out = np.empty((n, d))
        for i, member in enumerate(cset.members):
            sel = which == i
            if sel.any():
                out[sel] = sample_points(member, int(sel.sum()), rng, scale)
        return out
    x = rng.uniform(-scale, scale, (n, d))
    return project(cset, x, np.eye(d))
