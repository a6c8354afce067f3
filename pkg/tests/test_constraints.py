from __future__ import annotations

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from qbsde.constraints import (
    ConstraintError,
    ConstraintSet,
    contains,
    dist_sq,
    grid_project,
    project,
    sample_points,
)


# ---------------------------------------------------------------------------
# examples
# ---------------------------------------------------------------------------
def test_full_space_projection_is_identity():
    p = np.array([0.3, -2.0])
    assert np.array_equal(project(ConstraintSet.full_space(2), p, np.array([[2.0, 0.5], [0.0, 1.0]])), p)


def test_singleton_origin():
    assert np.array_equal(project(ConstraintSet.singleton([0.0]), [5.0], 1.0), [0.0])


def test_finite_set_nearest_point():
    cs = ConstraintSet.finite_set([[-1.0], [0.0], [2.0]])
    assert project(cs, [0.4], 1.0)[0] == 0.0
    assert project(cs, [1.2], 1.0)[0] == 2.0


def test_finite_pair_brute_force():
    # {-1, 2} does not contain 0, so it is built as a bare projection target;
    # distances from 0.4 are 1.4 and 1.6
    cs = ConstraintSet.finite_set([[-1.0], [2.0]], require_origin=False)
    assert project(cs, [0.4], 1.0)[0] == -1.0


def test_tie_break_is_lexicographic():
    cs = ConstraintSet.finite_set([[-1.0], [2.0]], require_origin=False)
    assert project(cs, [0.5], 1.0)[0] == -1.0
    cs2 = ConstraintSet.finite_set([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    # (1,0) and (0,1) tie for target (1,1); lexicographic smallest is (0,1)
    assert np.array_equal(project(cs2, [1.0, 1.0], np.eye(2)), [0.0, 1.0])


def test_dist_sq_examples():
    assert dist_sq(ConstraintSet.box([0.0], [1.0]), [1.5], 1.0) == pytest.approx(0.25)
    assert dist_sq(ConstraintSet.ball([0.0, 0.0], 1.0), [3.0, 4.0], np.eye(2)) == pytest.approx(16.0)
    assert dist_sq(ConstraintSet.box([-1.0], [1.0]), [0.3], 2.0) == 0.0


def test_constructors_require_origin():
    with pytest.raises(ConstraintError):
        ConstraintSet.box([0.5], [1.0])
    with pytest.raises(ConstraintError):
        ConstraintSet.singleton([1.0])
    with pytest.raises(ConstraintError):
        ConstraintSet.union([ConstraintSet.singleton([1.0], require_origin=False)])
    with pytest.raises(ConstraintError):
        ConstraintSet.union([])


def test_rejects_singular_metric():
    with pytest.raises(ConstraintError):
        project(ConstraintSet.box([-1, -1], [1, 1]), [2.0, 2.0], np.array([[1.0, 1.0], [1.0, 1.0]]))


def test_from_dict_round_trip():
    spec = {"kind": "union", "members": [{"kind": "box", "lower": [-1.0], "upper": [0.5]},
                                         {"kind": "singleton", "point": [2.0]}]}
    cs = ConstraintSet.from_dict(spec, 1)
    assert project(cs, [1.9], 1.0)[0] == 2.0
    again = ConstraintSet.from_dict(cs.to_dict(), 1)
    assert project(again, [1.9], 1.0)[0] == 2.0


def test_box_under_correlated_metric_matches_grid():
    cs = ConstraintSet.box([-1.0, -0.5], [1.0, 0.5])
    m = np.array([[1.0, 0.8], [0.0, 0.6]])
    target = np.array([1.7, 1.3])
    got = project(cs, target, m)
    ref = grid_project(cs, target, m, [-1.0, -0.5], [1.0, 0.5], n=801)
    w = lambda v: float(np.sum((m @ (v - target)) ** 2))
    assert w(got) <= w(ref) + 1e-9


# ---------------------------------------------------------------------------
# properties
# ---------------------------------------------------------------------------
finite = st.floats(-4.0, 4.0, allow_nan=False)


def _sets_2d():
    return [
        ConstraintSet.full_space(2),
        ConstraintSet.singleton([0.0, 0.0]),
        ConstraintSet.box([-1.0, -0.5], [1.5, 0.5]),
        ConstraintSet.ball([0.2, -0.1], 0.9),
        ConstraintSet.finite_set([[0.0, 0.0], [1.0, 1.0], [-2.0, 0.5]]),
        ConstraintSet.halfspace([1.0, -1.0], 0.5),
        ConstraintSet.union([ConstraintSet.ball([0.0, 0.0], 0.5),
                             ConstraintSet.box([1.0, 1.0], [2.0, 2.0], require_origin=False)]),
    ]


SETS = _sets_2d()
metric = st.tuples(st.floats(0.3, 2.0), st.floats(-0.8, 0.8), st.floats(0.3, 2.0)).map(
    lambda t: np.array([[t[0], t[1]], [0.0, t[2]]]))


@given(k=st.integers(0, len(SETS) - 1), x=finite, y=finite, m=metric)
def test_projection_is_member(k, x, y, m):
    nu = project(SETS[k], [x, y], m)
    assert contains(SETS[k], nu, tol=1e-12)


@given(k=st.integers(0, len(SETS) - 1), x=finite, y=finite, m=metric)
def test_projection_is_minimal_over_samples(k, x, y, m):
    cs = SETS[k]
    t = np.array([x, y])
    best = dist_sq(cs, t, m)
    rng = np.random.Generator(np.random.Philox(k))
    pts = sample_points(cs, 1000, rng)
    d = np.sum(((pts - t) @ m.T) ** 2, axis=1)
    assert best <= d.min() + 1e-9 * (1 + d.min())


@given(k=st.integers(1, len(SETS) - 2), x=finite, y=finite, m=metric)
def test_projection_agrees_with_grid_oracle(k, x, y, m):
    cs = SETS[k]
    t = np.array([x, y])
    # the error bound below needs the exact projection inside the grid box
    # (targets may leave it and the half-space is unbounded)
    assume(np.all(np.abs(project(cs, t, m)) <= 2.5))
    ref = grid_project(cs, t, m, [-2.5, -2.5], [2.5, 2.5], n=201)
    h = 5.0 / 200
    # some grid member lies within h sqrt(2) of the exact projection, so the grid
    # distance exceeds the exact one by at most |m| h sqrt(2)
    got = np.sqrt(dist_sq(cs, t, m))
    ref_d = np.sqrt(np.sum((m @ (ref - t)) ** 2))
    assert got <= ref_d + 1e-9
    assert ref_d - got <= np.linalg.norm(m, 2) * h * np.sqrt(2) + 1e-9


@given(k=st.integers(0, len(SETS) - 1), a=st.tuples(finite, finite), b=st.tuples(finite, finite), m=metric)
def test_weighted_distance_is_one_lipschitz(k, a, b, m):
    cs = SETS[k]
    a, b = np.array(a), np.array(b)
    da, db = np.sqrt(dist_sq(cs, a, m)), np.sqrt(dist_sq(cs, b, m))
    assert abs(da - db) <= np.linalg.norm(m @ (a - b)) + 1e-9


@given(x=finite, y=finite, m=metric)
def test_dist_zero_iff_member(x, y, m):
    cs = SETS[2]
    t = np.array([x, y])
    assert (dist_sq(cs, t, m) == 0.0) == bool(contains(cs, t))


def test_batch_projection_matches_scalar():
    rng = np.random.Generator(np.random.Philox(4))
    t = rng.uniform(-3, 3, (50, 2))
    m = np.array([[1.0, 0.4], [0.0, 0.7]])
    for cs in SETS:
        batch = project(cs, t, m)
        single = np.array([project(cs, row, m) for row in t])
        assert np.allclose(batch, single, atol=1e-10)
