"""Grid data types, case-file I/O, shift factors and line screening."""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import scipy.linalg
from scipy.optimize import linprog

log = logging.getLogger(__name__)


class CaseError(ValueError):
    """Raised for malformed case files and invariant violations."""


class DisconnectedNetworkError(CaseError):
    pass


class ScreeningError(RuntimeError):
    pass


@dataclass(frozen=True)
class ConvexQuadratic:
    c2: float
    c1: float
    c0: float = 0.0

    def __post_init__(self):
        if not np.isfinite([self.c2, self.c1, self.c0]).all():
            raise CaseError(f"non-finite cost coefficients {self}")
        if self.c2 <= 0:
            raise CaseError(f"cost curve must be strictly convex (c2 > 0), got c2={self.c2}")

    def __call__(self, x):
        return self.c2 * np.square(x) + self.c1 * x + self.c0

    def scaled(self, factor: float) -> "ConvexQuadratic":
        return ConvexQuadratic(self.c2 * factor, self.c1 * factor, self.c0 * factor)


@dataclass(frozen=True)
class Generator:
    id: str
    bus: int
    p_min: float
    p_max: float
    cost: ConvexQuadratic
    cost_up: ConvexQuadratic
    cost_down: ConvexQuadratic
    agc_enabled: bool = True


@dataclass(frozen=True)
class Line:
    id: str
    from_bus: int
    to_bus: int
    susceptance: float
    static_rating: float
    forecast_rating: float
    dlr_enabled: bool = True


@dataclass(frozen=True)
class WindFarm:
    id: str
    bus: int
    forecast: float
    capacity: float


@dataclass(frozen=True)
class Load:
    id: str
    bus: int
    demand: float


@dataclass(frozen=True)
class Case:
    buses: tuple[int, ...]
    generators: tuple[Generator, ...]
    lines: tuple[Line, ...]
    wind_farms: tuple[WindFarm, ...]
    loads: tuple[Load, ...]
    slack_bus: int
    name: str = "case"

    def __post_init__(self):
        validate_case(self)

    @property
    def bus_index(self) -> dict[int, int]:
        return {b: i for i, b in enumerate(self.buses)}

    @property
    def agc_generators(self) -> list[int]:
        """Positions of generators that take part in AGC."""
        return [i for i, g in enumerate(self.generators) if g.agc_enabled]

    def line_position(self, line_id: str) -> int:
        for i, ln in enumerate(self.lines):
            if ln.id == line_id:
                return i
        raise KeyError(line_id)

    @property
    def total_demand(self) -> float:
        return float(sum(d.demand for d in self.loads))

    def with_static_ratings(self) -> "Case":
        """Copy of the case operated under static line ratings."""
        lines = tuple(replace(ln, forecast_rating=ln.static_rating) for ln in self.lines)
        return replace(self, lines=lines, name=f"{self.name}-slr")

    def to_dict(self) -> dict[str, Any]:
        def q(c: ConvexQuadratic):
            return [c.c2, c.c1, c.c0]

        return {
            "name": self.name,
            "buses": list(self.buses),
            "slack_bus": self.slack_bus,
            "generators": [
                {"id": g.id, "bus": g.bus, "p_min": g.p_min, "p_max": g.p_max,
                 "cost": q(g.cost), "cost_up": q(g.cost_up), "cost_down": q(g.cost_down),
                 "agc": g.agc_enabled}
                for g in self.generators
            ],
            "lines": [
                {"id": ln.id, "from": ln.from_bus, "to": ln.to_bus, "susceptance": ln.susceptance,
                 "static_rating": ln.static_rating, "forecast_rating": ln.forecast_rating,
                 "dlr": ln.dlr_enabled}
                for ln in self.lines
            ],
            "wind_farms": [
                {"id": w.id, "bus": w.bus, "forecast": w.forecast, "capacity": w.capacity}
                for w in self.wind_farms
            ],
            "loads": [{"id": d.id, "bus": d.bus, "demand": d.demand} for d in self.loads],
        }

    def digest(self) -> str:
        """Short content hash used for provenance records."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def validate_case(case: Case) -> None:
    buses = set(case.buses)
    if len(buses) != len(case.buses):
        raise CaseError("duplicate bus ids")
    if case.slack_bus not in buses:
        raise CaseError(f"slack bus {case.slack_bus} is not a bus of the case")

    def check_ids(kind, items):
        seen = set()
        for it in items:
            if it.id in seen:
                raise CaseError(f"duplicate {kind} id {it.id!r}")
            seen.add(it.id)
            for attr in ("bus", "from_bus", "to_bus"):
                b = getattr(it, attr, None)
                if b is not None and b not in buses:
                    raise CaseError(f"{kind} {it.id!r} references unknown bus {b}")

    check_ids("generator", case.generators)
    check_ids("line", case.lines)
    check_ids("wind farm", case.wind_farms)
    check_ids("load", case.loads)

    if not case.generators:
        raise CaseError("case has no generators")
    for g in case.generators:
        if not (0 <= g.p_min <= g.p_max):
            raise CaseError(f"generator {g.id!r}: need 0 <= p_min <= p_max, got [{g.p_min}, {g.p_max}]")
    for ln in case.lines:
        if ln.from_bus == ln.to_bus:
            raise CaseError(f"line {ln.id!r} is a self-loop")
        if not np.isfinite(ln.susceptance) or ln.susceptance == 0:
            raise CaseError(f"line {ln.id!r}: susceptance must be finite and nonzero")
        if not (ln.forecast_rating >= ln.static_rating > 0):
            raise CaseError(
                f"line {ln.id!r}: need forecast_rating >= static_rating > 0, "
                f"got {ln.forecast_rating} / {ln.static_rating}")
    for w in case.wind_farms:
        if not (0 <= w.forecast <= w.capacity):
            raise CaseError(f"wind farm {w.id!r}: need 0 <= forecast <= capacity")
    for d in case.loads:
        if d.demand < 0:
            raise CaseError(f"load {d.id!r}: negative demand")
    if not _is_connected(case):
        raise DisconnectedNetworkError("network graph is disconnected")


def _is_connected(case: Case) -> bool:
    adj: dict[int, set[int]] = {b: set() for b in case.buses}
    for ln in case.lines:
        adj[ln.from_bus].add(ln.to_bus)
        adj[ln.to_bus].add(ln.from_bus)
    start = case.buses[0]
    seen, stack = {start}, [start]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen) == len(case.buses)


# ---------------------------------------------------------------------------
# JSON I/O

def _quadratic(raw, where: str, default: ConvexQuadratic | None = None) -> ConvexQuadratic:
    if raw is None:
        if default is None:
            raise CaseError(f"{where}: missing cost curve")
        return default
    if not isinstance(raw, (list, tuple)) or len(raw) != 3:
        raise CaseError(f"{where}: cost must be [c2, c1, c0]")
    try:
        return ConvexQuadratic(*(float(v) for v in raw))
    except (TypeError, ValueError) as exc:
        raise CaseError(f"{where}: {exc}") from None


def _field(obj: dict, key: str, where: str, conv=float, default=...):
    if key not in obj:
        if default is ...:
            raise CaseError(f"{where}: missing field {key!r}")
        return default
    try:
        return conv(obj[key])
    except (TypeError, ValueError):
        raise CaseError(f"{where}.{key}: invalid value {obj[key]!r}") from None


def case_from_dict(data: dict[str, Any], name: str = "case") -> Case:
    if not isinstance(data, dict):
        raise CaseError("case document must be a JSON object")
    try:
        buses = tuple(int(b) for b in data["buses"])
    except KeyError:
        raise CaseError("missing field 'buses'") from None
    except (TypeError, ValueError):
        raise CaseError("buses: expected a list of integers") from None

    gens = []
    for i, g in enumerate(data.get("generators", [])):
        where = f"generators[{i}]"
        cost = _quadratic(g.get("cost"), f"{where}.cost")
        gens.append(Generator(
            id=_field(g, "id", where, str, default=f"G{i + 1}"),
            bus=_field(g, "bus", where, int),
            p_min=_field(g, "p_min", where),
            p_max=_field(g, "p_max", where),
            cost=cost,
            # reserve costs default to a tenth of the energy curve
            cost_up=_quadratic(g.get("cost_up"), f"{where}.cost_up", cost.scaled(0.1)),
            cost_down=_quadratic(g.get("cost_down"), f"{where}.cost_down", cost.scaled(0.1)),
            agc_enabled=_field(g, "agc", where, bool, default=True),
        ))
    lines = []
    for i, ln in enumerate(data.get("lines", [])):
        where = f"lines[{i}]"
        static = _field(ln, "static_rating", where)
        lines.append(Line(
            id=_field(ln, "id", where, str, default=f"L{i + 1}"),
            from_bus=_field(ln, "from", where, int),
            to_bus=_field(ln, "to", where, int),
            susceptance=_field(ln, "susceptance", where),
            static_rating=static,
            forecast_rating=_field(ln, "forecast_rating", where, default=static),
            dlr_enabled=_field(ln, "dlr", where, bool, default=True),
        ))
    winds = [
        WindFarm(
            id=_field(w, "id", f"wind_farms[{i}]", str, default=f"W{i + 1}"),
            bus=_field(w, "bus", f"wind_farms[{i}]", int),
            forecast=_field(w, "forecast", f"wind_farms[{i}]"),
            capacity=_field(w, "capacity", f"wind_farms[{i}]"),
        )
        for i, w in enumerate(data.get("wind_farms", []))
    ]
    loads = [
        Load(
            id=_field(d, "id", f"loads[{i}]", str, default=f"D{i + 1}"),
            bus=_field(d, "bus", f"loads[{i}]", int),
            demand=_field(d, "demand", f"loads[{i}]"),
        )
        for i, d in enumerate(data.get("loads", []))
    ]
    slack = data.get("slack_bus")
    if slack is None:
        if not gens:
            raise CaseError("case has no generators")
        slack = min(g.bus for g in gens)
    return Case(
        buses=buses,
        generators=tuple(gens),
        lines=tuple(lines),
        wind_farms=tuple(winds),
        loads=tuple(loads),
        slack_bus=int(slack),
        name=str(data.get("name", name)),
    )


def load_case(path: str | Path) -> Case:
    """Read and validate a JSON case file."""
    path = Path(path)
    if not path.is_file():
        raise CaseError(f"case file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CaseError(f"{path}: JSON parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    try:
        return case_from_dict(data, name=path.stem)
    except CaseError as exc:
        raise type(exc)(f"{path}: {exc}") from None


def save_case(case: Case, path: str | Path) -> None:
    Path(path).write_text(json.dumps(case.to_dict(), indent=2) + "\n")


def bundled_case_path(name: str = "case5") -> Path:
    return Path(__file__).parent / "data" / f"{name}.json"


def load_bundled_case(name: str = "case5") -> Case:
    return load_case(bundled_case_path(name))


# ---------------------------------------------------------------------------
# Shift factors

@dataclass(frozen=True)
class PtdfMatrix:
    """Line flows per unit nodal injection, relative to the slack bus.

    ``matrix[l, n]`` is the flow on line ``l`` (from->to positive) caused by
    injecting 1 MW at bus ``n`` and withdrawing it at the slack.
    """

    matrix: np.ndarray
    line_ids: tuple[str, ...]
    buses: tuple[int, ...]
    generators: np.ndarray = field(repr=False)  # lines x generators
    wind: np.ndarray = field(repr=False)  # lines x wind farms
    loads: np.ndarray = field(repr=False)  # lines x loads

    def flows(self, injections: np.ndarray) -> np.ndarray:
        """Flows for nodal injection vector(s); last axis indexes buses."""
        return np.asarray(injections) @ self.matrix.T

    def rows(self, line_positions: Sequence[int]) -> "PtdfMatrix":
        idx = np.asarray(line_positions, dtype=int)
        return PtdfMatrix(
            matrix=self.matrix[idx],
            line_ids=tuple(self.line_ids[i] for i in idx),
            buses=self.buses,
            generators=self.generators[idx],
            wind=self.wind[idx],
            loads=self.loads[idx],
        )


def _freeze(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


def incidence_matrix(case: Case) -> np.ndarray:
    """Branch-bus incidence (+1 at from bus, -1 at to bus)."""
    pos = case.bus_index
    C = np.zeros((len(case.lines), len(case.buses)))
    for k, ln in enumerate(case.lines):
        C[k, pos[ln.from_bus]] = 1.0
        C[k, pos[ln.to_bus]] = -1.0
    return C


def injection_maps(case: Case) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Bus-by-element maps for generators, wind farms and loads."""
    pos = case.bus_index
    nb = len(case.buses)

    def build(items):
        M = np.zeros((nb, len(items)))
        for j, it in enumerate(items):
            M[pos[it.bus], j] = 1.0
        return M

    return build(case.generators), build(case.wind_farms), build(case.loads)


def compute_ptdf(case: Case) -> PtdfMatrix:
    C = incidence_matrix(case)
    b = np.array([ln.susceptance for ln in case.lines])
    Bbus = C.T @ (b[:, None] * C)
    s = case.bus_index[case.slack_bus]
    keep = np.array([i for i in range(len(case.buses)) if i != s], dtype=int)
    Bred = Bbus[np.ix_(keep, keep)]
    try:
        lu = scipy.linalg.lu_factor(Bred, check_finite=True)
        if np.min(np.abs(np.diag(lu[0]))) < 1e-12 * max(1.0, np.abs(Bred).max()):
            raise np.linalg.LinAlgError
        # angles for unit injections at every non-slack bus
        X = scipy.linalg.lu_solve(lu, np.eye(len(keep)))
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning):
        raise DisconnectedNetworkError("reduced susceptance matrix is singular (disconnected network)") from None
    theta = np.zeros((len(case.buses), len(case.buses)))
    theta[np.ix_(keep, keep)] = X
    M = (b[:, None] * C) @ theta
    M[:, s] = 0.0
    if np.abs(M).max(initial=0.0) > 1.5:
        warnings.warn(f"large shift factor {np.abs(M).max():.3f} in {case.name}", RuntimeWarning, stacklevel=2)
    Ag, Aw, Ad = injection_maps(case)
    return PtdfMatrix(
        matrix=_freeze(M),
        line_ids=tuple(ln.id for ln in case.lines),
        buses=case.buses,
        generators=_freeze(M @ Ag),
        wind=_freeze(M @ Aw),
        loads=_freeze(M @ Ad),
    )


def dc_flows(case: Case, injections: np.ndarray) -> np.ndarray:
    """Line flows from a direct reduced-susceptance solve (no shift factors)."""
    C = incidence_matrix(case)
    b = np.array([ln.susceptance for ln in case.lines])
    Bbus = C.T @ (b[:, None] * C)
    s = case.bus_index[case.slack_bus]
    keep = [i for i in range(len(case.buses)) if i != s]
    inj = np.atleast_2d(injections)
    theta = np.zeros_like(inj, dtype=float)
    theta[:, keep] = np.linalg.solve(Bbus[np.ix_(keep, keep)], inj[:, keep].T).T
    flows = theta @ (b[:, None] * C).T
    return flows if np.ndim(injections) == 2 else flows[0]


# ---------------------------------------------------------------------------
# Screening

def flow_bounds(case: Case, ptdf: PtdfMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Min and max flow of every line over the box-and-balance dispatch polytope.

    Decision vector is (p_g, q_w): generator outputs within their limits and
    wind injections within [0, capacity], with total injection equal to total
    demand.  No line limits are imposed.
    """
    G, W = len(case.generators), len(case.wind_farms)
    lb = [g.p_min for g in case.generators] + [0.0] * W
    ub = [g.p_max for g in case.generators] + [w.capacity for w in case.wind_farms]
    A_eq = np.ones((1, G + W))
    b_eq = [case.total_demand]
    demand = np.array([d.demand for d in case.loads])
    offset = -(ptdf.loads @ demand) if len(case.loads) else np.zeros(len(case.lines))
    lo = np.empty(len(case.lines))
    hi = np.empty(len(case.lines))
    for k in range(len(case.lines)):
        c = np.concatenate([ptdf.generators[k], ptdf.wind[k]])
        vals = []
        for sign in (1.0, -1.0):
            res = linprog(sign * c, A_eq=A_eq, b_eq=b_eq, bounds=list(zip(lb, ub)), method="highs")
            if res.status != 0:
                raise ScreeningError(
                    f"screening LP for line {case.lines[k].id!r} failed: {res.message} "
                    f"(demand {case.total_demand} MW vs generation range [{sum(lb)}, {sum(ub)}] MW)")
            vals.append(sign * res.fun)
        lo[k] = vals[0] + offset[k]
        hi[k] = vals[1] + offset[k]
    return lo, hi


def screen_inactive_lines(case: Case, ptdf: PtdfMatrix | None = None, tol: float = 1e-9) -> list[str]:
    """Ids of lines whose static rating can be reached; the rest are dropped.

    Conservative: a line is dropped only when its flow stays within the
    static rating for every balanced dispatch in the generation box, so the
    dropped limit can never bind whatever the realised rating is.
    """
    if ptdf is None:
        ptdf = compute_ptdf(case)
    lo, hi = flow_bounds(case, ptdf)
    keep = []
    for ln, a, b in zip(case.lines, lo, hi):
        r = ln.static_rating
        if b > r + tol or a < -r - tol:
            keep.append(ln.id)
        else:
            log.debug("line %s dropped: flow range [%.4g, %.4g] within +-%.4g", ln.id, a, b, r)
    return keep


def kept_positions(case: Case, kept: Iterable[str]) -> list[int]:
    kept = set(kept)
    return [i for i, ln in enumerate(case.lines) if ln.id in kept]
