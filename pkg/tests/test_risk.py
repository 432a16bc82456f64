import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import chain_case, gen
from dropf.case import compute_ptdf
from dropf.risk import (DispatchDecision, PenaltyWeights, PieceLimitError, RiskModel, evaluate_risk,
                        max_over_families, piece_count)
from dropf.uncertainty import UncertaintyIndex


def model_for(problem, pen=PenaltyWeights()):
    return problem.risk_model(pen)


def random_point(rm, rng, case):
    G = rm.G
    p = rng.uniform(0, 10, G)
    rup = rng.uniform(0, 3, G)
    rdn = rng.uniform(0, 3, G)
    alpha = rng.dirichlet(np.ones(G))
    x = np.concatenate([p, rup, rdn, alpha])
    lo = rm.index.forecasts(case) * 0.3
    xi = lo + rng.uniform(0, 2, rm.d) * rm.index.forecasts(case)
    return x, xi


def enumerated_max(rm, x, xi):
    """Max over the K = 4^G 3^L sums of one piece from every hinge, built index by index."""
    atoms = rm.atoms()
    vals = [f.values(x, xi) for f in atoms["shed"] + atoms["curtail"] + atoms["line"]]
    return max(sum(v[j] for v, j in zip(vals, idx)) for idx in itertools.product(*[range(len(v)) for v in vals]))


def test_piece_count_examples():
    assert piece_count(3, 3) == 1728
    assert piece_count(1, 0) == 4
    assert piece_count(2, 1) == 48
    assert piece_count(40, 60) == 4 ** 40 * 3 ** 60  # exact integer, no overflow


def test_family_sizes(problem5):
    rm = model_for(problem5)
    assert [f.K for f in rm.families("exact")] == [1728]
    assert [f.K for f in rm.families("grouped")] == [8, 8, 27]
    sep = rm.families("separable")
    assert len(sep) == 9
    assert sorted(f.K for f in sep) == [2] * 6 + [3] * 3


def test_exact_cap_refused(problem5):
    with pytest.raises(PieceLimitError, match="1728"):
        model_for(problem5).families("exact", max_pieces=1000)


def one_generator_model(beta_d=1e4):
    c = chain_case(2, gens=[gen("G1", 1, 0, 20, 1, 1)],
                   winds=[{"id": "W1", "bus": 2, "forecast": 10.0, "capacity": 20.0}],
                   loads=[{"id": "D1", "bus": 2, "demand": 15.0}])
    idx = UncertaintyIndex.from_case(c, [])
    return c, RiskModel(c, compute_ptdf(c), [], idx, PenaltyWeights(beta_d, 1e3, 5e3))


def test_load_shed_hand_example():
    c, rm = one_generator_model()
    dec = DispatchDecision(("G1",), np.array([5.0]), np.array([1.0]), np.array([0.0]), np.array([1.0]))
    xi = np.array([6.0])
    # 1e4 * (1 * (10 - 6) - 1)^+ = 3e4
    assert rm.evaluate(dec, xi) == pytest.approx(3e4)
    shed, curt = rm.generator_pieces(0)
    assert shed.max(dec.vector, xi) == pytest.approx(3e4)
    assert curt.max(dec.vector, xi) == 0.0


def test_zero_participation_pieces():
    _, rm = one_generator_model()
    x = np.array([5.0, 2.0, 1.5, 0.0])
    shed, curt = rm.generator_pieces(0)
    a, b = shed.at(x)
    assert np.all(a[0] == 0.0) and b[0] == pytest.approx(-1e4 * 2.0)
    a, b = curt.at(x)
    assert np.all(a[0] == 0.0) and b[0] == pytest.approx(-1e3 * 1.5)
    assert np.all(shed.a0[1] == 0) and np.all(shed.a1[1] == 0) and shed.b0[1] == 0 and np.all(shed.b1[1] == 0)


def test_forecast_realised_gives_zero(problem5, case5):
    rm = model_for(problem5)
    G = rm.G
    # feasible forecast dispatch: no line limit reached at forecast ratings
    from dropf.formulations import build_deterministic, extract_decision
    from dropf.conic import solve
    prog = build_deterministic(problem5)
    dec = extract_decision(problem5, prog, solve(prog))
    xi = problem5.index.forecasts(case5)
    assert rm.evaluate(dec, xi) == pytest.approx(0.0, abs=1e-6 * 5e3)
    assert G == 3


def line_model():
    # G1 and wind at bus 1, load 12 at bus 2: the only line carries p + wind
    c = chain_case(2, gens=[gen("G1", 1, 0, 20, 1, 1)],
                   winds=[{"id": "W1", "bus": 1, "forecast": 4.0, "capacity": 8.0}],
                   loads=[{"id": "D1", "bus": 2, "demand": 12.0}], ratings=[9.0])
    idx = UncertaintyIndex.from_case(c, ["L1"])
    return c, RiskModel(c, compute_ptdf(c), ["L1"], idx, PenaltyWeights(1e4, 1e3, 5e3))


def test_line_overload_hand_example():
    c, rm = line_model()
    dec = DispatchDecision(("G1",), np.array([8.0]), np.zeros(1), np.zeros(1), np.ones(1))
    xi = np.array([4.0, 10.0])  # wind at forecast, realised rating 10
    # flow 12 against rating 10: 5e3 * 2 = 1e4
    assert rm.evaluate(dec, xi) == pytest.approx(1e4)
    assert rm.line_pieces(0).max(dec.vector, xi) == pytest.approx(1e4)


def test_rating_coefficient_sign():
    _, rm = line_model()
    pc = rm.line_pieces(0)
    slot = rm.rating_slot[0]
    assert pc.a0[0, slot] == -5e3 and pc.a0[1, slot] == -5e3
    assert np.all(pc.a0[2] == 0) and pc.b0[2] == 0


def test_zero_injection_no_overload():
    c = chain_case(2, gens=[gen("G1", 1, 0, 20, 1, 1)],
                   winds=[{"id": "W1", "bus": 1, "forecast": 0.0, "capacity": 8.0}],
                   loads=[{"id": "D1", "bus": 2, "demand": 0.0}], ratings=[9.0])
    rm = RiskModel(c, compute_ptdf(c), ["L1"], UncertaintyIndex.from_case(c, ["L1"]), PenaltyWeights())
    pc = rm.line_pieces(0)
    x = np.array([0.0, 0.0, 0.0, 1.0])
    for rating in (0.0, 9.0, 30.0):
        xi = np.array([0.0, rating])
        assert pc.max(x, xi) == 0.0
        assert pc.values(x, xi)[2] == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_exact_pieces_equal_direct_evaluation(problem5, case5, seed):
    rm = model_for(problem5)
    x, xi = random_point(rm, np.random.default_rng(seed), case5)
    direct = rm.evaluate(x, xi)
    scale = max(abs(direct), 1.0)
    assert abs(enumerated_max(rm, x, xi) - direct) <= 1e-9 * scale
    for mode in ("exact", "grouped", "separable"):
        assert abs(float(max_over_families(rm.families(mode), x, xi)) - direct) <= 1e-9 * scale


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(-50, 50), st.floats(-50, 50))
def test_risk_nonnegative(problem5, case5, seed, shift_w, shift_l):
    rm = model_for(problem5)
    rng = np.random.default_rng(seed)
    x, xi = random_point(rm, rng, case5)
    x[: rm.G] += rng.normal(0, 20, rm.G)  # any decision, feasible or not
    xi = xi + np.array([shift_w] + [shift_l] * (rm.d - 1))
    assert evaluate_risk(rm, x, xi) >= 0.0


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100.0))
def test_pieces_homogeneous_in_penalties(problem5, factor):
    base = PenaltyWeights()
    rm1 = model_for(problem5, base)
    rm2 = model_for(problem5, base.scaled(factor))
    for f1, f2 in zip(rm1.families("grouped"), rm2.families("grouped")):
        for name in ("a0", "a1", "b0", "b1"):
            ref = factor * getattr(f1, name)
            np.testing.assert_allclose(getattr(f2, name), ref, rtol=1e-12, atol=1e-14 * np.abs(ref).max(initial=1.0))


def test_many_samples_vectorised(problem5, case5, rng):
    rm = model_for(problem5)
    x, _ = random_point(rm, rng, case5)
    XI = np.stack([random_point(rm, rng, case5)[1] for _ in range(50)])
    batch = rm.evaluate(x, XI)
    single = [rm.evaluate(x, row) for row in XI]
    np.testing.assert_allclose(batch, single, rtol=1e-14)
    parts = rm.evaluate(x, XI[0], breakdown=True)
    assert parts["total"] == pytest.approx(parts["shed"] + parts["curtail"] + parts["line"])
