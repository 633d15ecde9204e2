import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linprog as scipy_linprog

from otp_safe_rl.transport import (
    INF, DiscreteDist, TransportCost, TransportError, cost_matrix, eval_cost, otc_discrete,
    solve_transport,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def vec(n):
    return st.lists(finite, min_size=n, max_size=n).map(np.array)


def test_percent_sq_examples():
    c = TransportCost.percent_sq([0.0, 0.0])
    assert eval_cost(c, [1, 1], [1, 1]) == 0.0
    assert eval_cost(c, [1, 1], [1.1, 0.9]) == pytest.approx(0.01, abs=1e-15)


def test_indicator_examples():
    c = TransportCost.indicator()
    assert eval_cost(c, [1.0], [2.0]) == 1.0
    assert eval_cost(c, [1.0], [1.0]) == 0.0


def test_percent_sq_frozen_coordinates():
    c = TransportCost.percent_sq([1.0, 2.0])
    # first coordinate does not move in the observed transition
    assert eval_cost(c, [1.0, 3.0], [1.0, 3.0]) == 0.0
    assert eval_cost(c, [1.0, 3.0], [1.0, 3.5]) == pytest.approx(0.125)
    assert eval_cost(c, [1.0, 3.0], [1.2, 3.0]) == INF


def test_pnorm_pow():
    assert eval_cost(TransportCost.pnorm_pow(2), [0, 0], [3, 4]) == 25.0
    assert eval_cost(TransportCost.pnorm_pow(1), [0, 0], [3, -4]) == 7.0
    with pytest.raises(TransportError):
        TransportCost.pnorm_pow(0.5)


@pytest.mark.parametrize("bad", [[np.nan, 0.0], [np.inf, 0.0]])
def test_eval_cost_rejects_non_finite(bad):
    with pytest.raises(TransportError):
        eval_cost(TransportCost.pnorm_pow(1), bad, [0.0, 0.0])


def test_eval_cost_dimension_mismatch():
    with pytest.raises(TransportError):
        eval_cost(TransportCost.indicator(), [0.0, 1.0], [0.0])
    with pytest.raises(TransportError):
        eval_cost(TransportCost.percent_sq([0.0]), [1.0, 1.0], [1.0, 1.0])


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 4).flatmap(lambda n: st.tuples(vec(n), vec(n), vec(n))))
def test_costs_nonnegative_and_zero_on_diagonal(xyz):
    s, x, y = xyz
    for c in (TransportCost.percent_sq(s), TransportCost.pnorm_pow(1),
              TransportCost.pnorm_pow(2.5), TransportCost.indicator()):
        assert eval_cost(c, x, y) >= 0.0
        assert eval_cost(c, x, x) == 0.0


def test_discrete_dist_validation():
    with pytest.raises(TransportError):
        DiscreteDist([0.0, 1.0], [0.6, 0.6])
    with pytest.raises(TransportError):
        DiscreteDist([0.0, 1.0], [1.5, -0.5])
    with pytest.raises(TransportError):
        DiscreteDist([0.0, 0.0], [0.5, 0.5])
    with pytest.raises(TransportError):
        DiscreteDist([0.0, 1.0], [1.0])


def test_otc_examples():
    l1 = TransportCost.pnorm_pow(1)
    p = DiscreteDist([0.0, 1.0], [0.5, 0.5])
    q = DiscreteDist([0.0, 1.0], [1.0, 0.0])
    assert otc_discrete(p, q, l1) == pytest.approx(0.5, abs=1e-12)
    assert otc_discrete(p, p, l1) == pytest.approx(0.0, abs=1e-14)
    a = DiscreteDist([[0.0, 0.0]], [1.0])
    b = DiscreteDist([[3.0, 4.0]], [1.0])
    assert otc_discrete(a, b, TransportCost.pnorm_pow(2)) == pytest.approx(25.0)


def test_otc_one_parameter_coupling_family():
    # 2x2 couplings form a one-parameter family; scan it densely
    rng = np.random.default_rng(3)
    for _ in range(20):
        a = rng.dirichlet(np.ones(2))
        b = rng.dirichlet(np.ones(2))
        C = rng.uniform(0, 1, (2, 2))
        # nu11 = t; others follow from marginals
        lo, hi = max(0.0, a[0] - b[1]), min(a[0], b[0])
        ts = np.linspace(lo, hi, 20001)
        vals = (C[0, 0] * ts + C[0, 1] * (a[0] - ts) + C[1, 0] * (b[0] - ts)
                + C[1, 1] * (a[1] - b[0] + ts))
        assert solve_transport(a, b, C).value == pytest.approx(vals.min(), abs=1e-9)


def test_two_point_closed_form_l1():
    rng = np.random.default_rng(11)
    for _ in range(50):
        x = np.sort(rng.uniform(-3, 3, 2))
        pa, pb = rng.uniform(0.05, 0.95, 2)
        p = DiscreteDist(x, [pa, 1 - pa])
        q = DiscreteDist(x, [pb, 1 - pb])
        # W1 on two common points is |F_p - F_q| times the gap
        expect = abs(pa - pb) * (x[1] - x[0])
        assert otc_discrete(p, q, TransportCost.pnorm_pow(1)) == pytest.approx(expect, abs=1e-12)


def _random_instance(rng, m, k):
    a = rng.dirichlet(np.ones(m))
    b = rng.dirichlet(np.ones(k))
    C = rng.uniform(0, 5, (m, k))
    return a, b, C


def test_matches_scipy_and_kkt():
    rng = np.random.default_rng(0)
    for m, k in [(1, 1), (2, 3), (5, 5), (8, 4), (12, 12), (32, 32)]:
        for _ in range(3):
            a, b, C = _random_instance(rng, m, k)
            res = solve_transport(a, b, C)
            A = np.zeros((m + k, m * k))
            for i, j in itertools.product(range(m), range(k)):
                A[i, i * k + j] = 1
                A[m + j, i * k + j] = 1
            ref = scipy_linprog(C.ravel(), A_eq=A, b_eq=np.concatenate([a, b]), method="highs")
            assert res.value == pytest.approx(ref.fun, abs=1e-10)
            P = res.plan
            assert np.abs(P.sum(1) - a).max() <= 1e-10
            assert np.abs(P.sum(0) - b).max() <= 1e-10
            assert P.min() >= -1e-12
            reduced = C - res.u[:, None] - res.v[None, :]
            assert reduced.min() >= -1e-8
            assert np.abs(P * reduced).max() <= 1e-8
            assert res.u @ a + res.v @ b == pytest.approx(res.value, abs=1e-9)


def test_not_above_random_feasible_couplings():
    rng = np.random.default_rng(5)
    for _ in range(5):
        a, b, C = _random_instance(rng, 4, 4)
        best = solve_transport(a, b, C).value
        # product coupling plus random mass-preserving cycles keep marginals
        for _ in range(1000):
            P = np.outer(a, b)
            i, i2 = rng.choice(4, 2, replace=False)
            j, j2 = rng.choice(4, 2, replace=False)
            t = rng.uniform(0, min(P[i, j2], P[i2, j]))
            P[i, j] += t
            P[i2, j2] += t
            P[i, j2] -= t
            P[i2, j] -= t
            assert best <= np.sum(P * C) + 1e-12


def test_symmetry_for_symmetric_cost():
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(5, 2))
    cost = TransportCost.pnorm_pow(2)
    for _ in range(10):
        p = DiscreteDist(pts, rng.dirichlet(np.ones(5)))
        q = DiscreteDist(pts, rng.dirichlet(np.ones(5)))
        assert otc_discrete(p, q, cost) == pytest.approx(otc_discrete(q, p, cost), abs=1e-12)


def test_infinite_entries_are_forbidden_routes():
    C = np.array([[0.0, INF], [1.0, 0.0]])
    res = solve_transport([0.5, 0.5], [0.75, 0.25], C)
    assert res.plan[0, 1] == 0.0
    assert res.value == pytest.approx(0.25)


def test_infeasible_transport():
    C = np.array([[INF, INF], [0.0, 1.0]])
    with pytest.raises(TransportError, match="infeasible transport"):
        solve_transport([0.5, 0.5], [0.5, 0.5], C)
    # every row and column has a finite entry but the marginals cannot be carried
    C = np.array([[INF, 0.0], [0.0, 0.0], [INF, 0.0]])
    with pytest.raises(TransportError, match="infeasible transport"):
        solve_transport([0.2, 0.0, 0.8], [0.1, 0.9], C)


def test_percent_sq_cost_matrix_has_infinities():
    s = np.array([0.0, 0.0])
    xs = np.array([[1.0, 0.0], [1.0, 1.0]])
    C = cost_matrix(TransportCost.percent_sq(s), xs, xs)
    assert C[0, 0] == 0.0 and C[1, 1] == 0.0
    assert math.isinf(C[0, 1])
    assert C[1, 0] == pytest.approx(0.5)
