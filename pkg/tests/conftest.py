import numpy as np
import pytest

from dropf.case import case_from_dict, load_bundled_case
from dropf.formulations import DispatchProblem
from dropf.risk import PenaltyWeights
from dropf.uncertainty import SampleSpec, generate_samples


def quad(c2, c1, c0=0.0):
    return [c2, c1, c0]


def gen(gid, bus, pmin, pmax, c2, c1, agc=True):
    return {"id": gid, "bus": bus, "p_min": pmin, "p_max": pmax, "cost": quad(c2, c1),
            "cost_up": quad(c2 / 4, c1 / 2), "cost_down": quad(c2 / 4, c1 / 3), "agc": agc}


def line(lid, f, t, rating, forecast=None, x=10.0, dlr=True):
    return {"id": lid, "from": f, "to": t, "susceptance": x, "static_rating": rating,
            "forecast_rating": rating if forecast is None else forecast, "dlr": dlr}


def chain_case(n_bus=3, gens=(), winds=(), loads=(), ratings=None, forecast_factor=1.2, name="chain"):
    """Radial network 1-2-...-n with the given elements."""
    ratings = ratings or [100.0] * (n_bus - 1)
    lines = [line(f"L{i + 1}", i + 1, i + 2, r, forecast_factor * r) for i, r in enumerate(ratings)]
    return case_from_dict({
        "name": name, "buses": list(range(1, n_bus + 1)), "slack_bus": 1,
        "generators": list(gens), "lines": lines, "wind_farms": list(winds), "loads": list(loads),
    })


def tiny_case():
    """G=2, L=2 (both DLR), W=1 on a 3-bus chain; both lines can bind."""
    return chain_case(
        3,
        gens=[gen("G1", 1, 0.0, 12.0, 2.0, 20.0), gen("G2", 2, 0.0, 8.0, 4.0, 40.0)],
        winds=[{"id": "W1", "bus": 3, "forecast": 3.0, "capacity": 6.0}],
        loads=[{"id": "D1", "bus": 2, "demand": 4.0}, {"id": "D2", "bus": 3, "demand": 6.0}],
        ratings=[5.0, 3.0], name="tiny3")


def grid_case():
    """G=2 (one AGC unit), L=1, W=1 on two buses, for the brute-force SAA oracle."""
    return chain_case(
        2,
        gens=[gen("G1", 1, 0.0, 10.0, 2.0, 20.0), gen("G2", 2, 1.0, 6.0, 4.0, 40.0, agc=False)],
        winds=[{"id": "W1", "bus": 2, "forecast": 2.0, "capacity": 5.0}],
        loads=[{"id": "D1", "bus": 2, "demand": 8.0}],
        ratings=[4.0], name="grid2")


def large_config_case():
    """118-bus-sized structure: 30 AGC units, 59 DLR lines, 3 wind farms on a 60-bus chain."""
    n = 60
    gens = [gen(f"G{i + 1}", i + 1, 0.0, 50.0, 0.01, 20.0 + i) for i in range(30)]
    winds = [{"id": f"W{i + 1}", "bus": b, "forecast": 20.0, "capacity": 40.0} for i, b in enumerate((35, 45, 55))]
    loads = [{"id": f"D{i + 1}", "bus": 31 + i, "demand": 20.0} for i in range(30)]
    return chain_case(n, gens, winds, loads, ratings=[2000.0] * (n - 1), name="large60")


def draw(problem, n, rho=0.4, seed=0):
    spec = SampleSpec.draw(problem.case, problem.index, rho, seed)
    return generate_samples(problem.case, problem.index, spec, n)


@pytest.fixture(scope="session")
def case5():
    return load_bundled_case()


@pytest.fixture(scope="session")
def problem5(case5):
    return DispatchProblem(case5)


@pytest.fixture(scope="session")
def samples20(problem5):
    return draw(problem5, 20, 0.4, 7)


@pytest.fixture(scope="session")
def tiny_problem():
    return DispatchProblem(tiny_case(), kept_lines=["L1", "L2"])


@pytest.fixture(scope="session")
def tiny_samples(tiny_problem):
    return draw(tiny_problem, 5, 0.4, 3)


@pytest.fixture(scope="session")
def penalties():
    return PenaltyWeights()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
