import cvxpy as cp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dropf.conic import (ProgramBuilder, check_solution, smat, solve, svec, svec_size)


def trip(rows, cols, vals):
    return np.asarray(rows), np.asarray(cols), np.asarray(vals, dtype=float)


def test_min_square_above_three():
    b = ProgramBuilder()
    x = b.variable("x")
    b.linear("lb", "le", *trip([0], [x.offset], [-1.0]), [-3.0])
    b.add_quadratic([x.offset], [2.0])
    prog = b.build()
    assert prog.classification == "qp"
    sol = solve(prog)
    assert sol.optimal
    assert sol.x[0] == pytest.approx(3.0, abs=1e-6)
    assert sol.objective == pytest.approx(9.0, rel=1e-7)


def test_psd_two_by_two():
    # [[x, 1], [1, x]] >= 0, min x  ->  x = 1
    b = ProgramBuilder()
    x = b.variable("x")
    s2 = np.sqrt(2.0)
    b.psd("lmi", 2, trip([0, 2], [x.offset, x.offset], [1.0, 1.0]), [0.0, s2 * 1.0, 0.0])
    b.add_linear_objective(x.offset, 1.0)
    prog = b.build()
    assert prog.classification == "sdp"
    sol = solve(prog)
    assert sol.optimal
    assert sol.x[0] == pytest.approx(1.0, abs=1e-6)


def test_infeasible_pair():
    b = ProgramBuilder()
    x = b.variable("x")
    b.linear("c", "le", *trip([0, 1], [x.offset, x.offset], [-1.0, 1.0]), [-1.0, 0.0])
    b.add_linear_objective(x.offset, 1.0)
    sol = solve(b.build())
    assert sol.status == "infeasible"
    assert not sol.optimal


def test_unbounded():
    b = ProgramBuilder()
    x = b.variable("x")
    b.linear("c", "le", *trip([0], [x.offset], [1.0]), [0.0])
    b.add_linear_objective(x.offset, 1.0)
    assert solve(b.build()).status == "unbounded"


def small_program():
    b = ProgramBuilder()
    x = b.variable("x", 2)
    b.linear("sum", "eq", *trip([0, 0], x.index(), [1.0, 1.0]), [1.0])
    b.linear("cap", "le", *trip([0], [x.offset], [1.0]), [0.75])
    # ||x|| <= 1
    b.norm_cones("ball", 2, 2, trip([0, 1], x.index(), [1.0, 1.0]), [0.0, 0.0], trip([], [], []), [1.0])
    return b.build()


def test_check_solution_exact_point():
    prog = small_program()
    r = check_solution(prog, np.array([0.5, 0.5]))
    assert r.equality <= 1e-12 and r.inequality <= 1e-12 and r.cone <= 1e-12


def test_check_solution_perturbed_equality():
    prog = small_program()
    r = check_solution(prog, np.array([0.5, 0.5 + 1e-3]))
    assert r.equality == pytest.approx(1e-3, rel=1e-9)
    r = check_solution(prog, np.array([1.0, 0.8]))
    assert r.cone == pytest.approx(np.hypot(1.0, 0.8) - 1.0)
    assert r.inequality == pytest.approx(0.25)


def test_check_solution_psd_eigenvalue():
    b = ProgramBuilder()
    g = b.sym_variable("S", 2)
    b.psd("S", 2, trip(range(3), g.index(), np.ones(3)), np.zeros(3))
    prog = b.build()
    r = check_solution(prog, svec(np.diag([1.0, -0.25])))
    assert r.psd_min_eig == pytest.approx(-0.25)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6).flatmap(lambda n: st.tuples(
    arrays(np.float64, (n, n), elements=st.floats(-10, 10)),
    arrays(np.float64, (n, n), elements=st.floats(-10, 10)))))
def test_svec_round_trip_and_inner_product(pair):
    A, B = pair
    A = A + A.T
    B = B + B.T
    np.testing.assert_allclose(smat(svec(A)), A, atol=1e-12)
    assert svec(A) @ svec(B) == pytest.approx(np.trace(A @ B), abs=1e-9 * (1 + np.abs(A).sum() * np.abs(B).sum()))
    assert svec(A).shape == (svec_size(len(A)),)


def random_conic(seed):
    rng = np.random.default_rng(seed)
    n, m, k = 4, 3, 3
    c = rng.normal(size=n)
    U = rng.normal(size=(m, n))
    u = rng.normal(size=m)
    T = rng.normal(size=n)
    t = np.linalg.norm(u) + 1.0  # x = 0 strictly feasible
    F = [rng.normal(size=(k, k)) for _ in range(n)]
    F = [0.5 * (M + M.T) for M in F]
    return c, U, u, T, t, F, k


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_against_independent_modeller(seed):
    c, U, u, T, t, F, k = random_conic(seed)
    n = len(c)
    b = ProgramBuilder()
    x = b.variable("x", n)
    rows, cols = np.nonzero(U)
    b.norm_cones("soc", 2, len(u), trip(rows, x.offset + cols, U[rows, cols]), u,
                 trip([0] * n, x.index(), -T), [t])
    Fs = np.stack([svec(M) for M in F], axis=1)
    r, cc = np.nonzero(Fs)
    b.psd("lmi", k, trip(r, x.offset + cc, Fs[r, cc]), svec(np.eye(k)))
    b.add_quadratic(x.index(), np.ones(n))
    b.add_linear_objective(x.index(), c)
    sol = solve(b.build())
    assert sol.optimal

    # same problem through cvxpy with a different solver
    y = cp.Variable(n)
    lmi = np.eye(k) + sum(y[i] * F[i] for i in range(n))
    cons = [cp.norm(U @ y + u, 2) <= t - T @ y, 0.5 * (lmi + lmi.T) >> 0]
    ref = cp.Problem(cp.Minimize(0.5 * cp.sum_squares(y) + c @ y), cons)
    ref.solve(solver=cp.SCS, eps_abs=1e-10, eps_rel=1e-10, max_iters=200_000)
    assert sol.objective == pytest.approx(ref.value, rel=1e-6, abs=1e-6)


@pytest.mark.parametrize("p,expected", [(1.0, 0.5), (np.inf, 1.0)])
def test_linear_norm_cones(p, expected):
    # max x1 with x2 = 0.5 inside the unit l1 ball (x1 = 0.5) or unit linf ball (x1 = 1)
    b = ProgramBuilder()
    x = b.variable("x", 2)
    b.norm_cones("n", p, 2, trip([0, 1], x.index(), [1.0, 1.0]), [0.0, 0.0], trip([], [], []), [1.0])
    b.linear("fix", "eq", *trip([0], [x.offset + 1], [1.0]), [0.5])
    b.add_linear_objective(x.offset, -1.0)
    prog = b.build()
    assert prog.classification == "qp"
    sol = solve(prog)
    assert sol.optimal
    assert sol.x[0] == pytest.approx(expected, abs=1e-6)


def test_dump_lists_every_block(tmp_path):
    prog = small_program()
    path = tmp_path / "p.txt"
    prog.dump(path)
    text = path.read_text()
    assert "LINEAR sum sense=eq" in text and "NORMCONE ball p=2.0" in text
    assert text.count("LIN_A") == 3


def test_dry_run_refuses_solve():
    b = ProgramBuilder(dry_run=True)
    x = b.variable("x")
    b.linear("c", "le", *trip([0], [x.offset], [1.0]), [1.0])
    prog = b.build()
    assert prog.count_constraints(aux_only=False) == 1
    with pytest.raises(ValueError, match="dry-run"):
        solve(prog)
