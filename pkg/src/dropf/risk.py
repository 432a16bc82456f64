"""Piecewise-linear operational risk and its affine pieces.

The risk of a dispatch ``x`` under a realisation ``xi`` (wind outputs then
line ratings) is

    sum_g beta_d (alpha_g D - r_g^+)^+ + beta_w (-alpha_g D - r_g^-)^+
    + sum_l beta_l (|flow_l(xi)| - rating_l)^+,        D = sum_w (p_w - xi_w)

and every hinge is a max over affine pieces in ``xi`` whose coefficients are
themselves affine in the decision vector
``x = [p (G), r_up (G), r_dn (G), alpha (G)]``.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .case import Case, PtdfMatrix
from .uncertainty import UncertaintyIndex


class PieceLimitError(ValueError):
    """Raised when an enumeration would exceed the configured piece cap."""


@dataclass(frozen=True)
class PenaltyWeights:
    beta_d: float = 1e4  # load shedding, $/MWh
    beta_w: float = 1e3  # wind curtailment, $/MWh
    beta_l: float = 5e3  # line overload, $/MWh

    def __post_init__(self):
        if min(self.beta_d, self.beta_w, self.beta_l) < 0:
            raise ValueError("penalties must be nonnegative")

    def scaled(self, factor: float) -> "PenaltyWeights":
        return PenaltyWeights(self.beta_d * factor, self.beta_w * factor, self.beta_l * factor)


# the three settings of the penalty sensitivity study
PENALTY_CASES = {
    1: PenaltyWeights(1e4, 1e3, 5e3),
    2: PenaltyWeights(1e5, 1e4, 5e4),
    3: PenaltyWeights(1e3, 1e2, 5e2),
}


def piece_count(G: int, L: int) -> int:
    """Number of affine pieces of the joint risk function: 4^G * 3^L."""
    if G < 1 or L < 0:
        raise ValueError("need G >= 1 and L >= 0")
    return 4 ** G * 3 ** L


# ---------------------------------------------------------------------------
# decisions

@dataclass(frozen=True)
class DispatchDecision:
    generator_ids: tuple[str, ...]
    p: np.ndarray
    r_up: np.ndarray
    r_dn: np.ndarray
    alpha: np.ndarray
    provenance: dict = field(default_factory=dict)

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.r_up, self.r_dn, self.alpha])

    @classmethod
    def from_vector(cls, case: Case, x: np.ndarray, provenance: dict | None = None) -> "DispatchDecision":
        G = len(case.generators)
        x = np.asarray(x, dtype=float)
        return cls(tuple(g.id for g in case.generators), x[:G].copy(), x[G:2 * G].copy(),
                   x[2 * G:3 * G].copy(), x[3 * G:4 * G].copy(), dict(provenance or {}))

    def dispatch_cost(self, case: Case) -> float:
        """Generation plus reserve cost, $/h."""
        total = 0.0
        for i, g in enumerate(case.generators):
            total += g.cost(self.p[i]) + g.cost_up(self.r_up[i]) + g.cost_down(self.r_dn[i])
        return float(total)

    def violations(self, case: Case, tol: float = 1e-6) -> list[str]:
        out = []
        agc = set(case.agc_generators)
        for i, g in enumerate(case.generators):
            if self.p[i] < g.p_min - tol or self.p[i] > g.p_max + tol:
                out.append(f"{g.id}: output {self.p[i]:.6g} outside [{g.p_min}, {g.p_max}]")
            if self.r_up[i] < -tol or self.r_up[i] > g.p_max - self.p[i] + tol:
                out.append(f"{g.id}: upward reserve {self.r_up[i]:.6g} infeasible")
            if self.r_dn[i] < -tol or self.r_dn[i] > self.p[i] - g.p_min + tol:
                out.append(f"{g.id}: downward reserve {self.r_dn[i]:.6g} infeasible")
            if not -tol <= self.alpha[i] <= 1 + tol:
                out.append(f"{g.id}: participation {self.alpha[i]:.6g} outside [0, 1]")
            if i not in agc and (abs(self.alpha[i]) > tol or abs(self.r_up[i]) > tol or abs(self.r_dn[i]) > tol):
                out.append(f"{g.id}: non-AGC unit carries reserve or participation")
        if agc and abs(self.alpha[list(agc)].sum() - 1.0) > tol:
            out.append(f"participation factors sum to {self.alpha.sum():.9g}")
        bal = self.p.sum() + sum(w.forecast for w in case.wind_farms) - case.total_demand
        if abs(bal) > tol:
            out.append(f"power balance residual {bal:.3g} MW")
        return out

    def to_dict(self) -> dict:
        ids = self.generator_ids

        def named(v):
            return {i: float(x) for i, x in zip(ids, v)}

        return {**self.provenance, "p": named(self.p), "r_up": named(self.r_up),
                "r_dn": named(self.r_dn), "alpha": named(self.alpha)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)


# ---------------------------------------------------------------------------
# pieces

@dataclass(frozen=True)
class AffinePieces:
    """Pieces ``a_k(x) . xi + b_k(x)`` with ``a_k(x) = a0_k + a1_k @ x``, ``b_k(x) = b0_k + b1_k . x``."""

    a0: np.ndarray  # (K, d)
    a1: np.ndarray  # (K, d, nx)
    b0: np.ndarray  # (K,)
    b1: np.ndarray  # (K, nx)
    label: str = ""

    @property
    def K(self) -> int:
        return self.a0.shape[0]

    @property
    def dim(self) -> int:
        return self.a0.shape[1]

    def at(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Numeric coefficients (a: (K, d), b: (K,)) at decision ``x``."""
        return self.a0 + self.a1 @ x, self.b0 + self.b1 @ x

    def values(self, x: np.ndarray, xi: np.ndarray) -> np.ndarray:
        """Piece values, shape (..., K) for ``xi`` of shape (..., d)."""
        a, b = self.at(x)
        return np.asarray(xi) @ a.T + b

    def max(self, x: np.ndarray, xi: np.ndarray) -> np.ndarray:
        return self.values(x, xi).max(axis=-1)

    def plus(self, other: "AffinePieces", label: str = "") -> "AffinePieces":
        """Pairwise sums of pieces (cartesian index, this family varies slowest)."""
        K1, K2 = self.K, other.K
        return AffinePieces(
            (self.a0[:, None] + other.a0[None]).reshape(K1 * K2, -1),
            (self.a1[:, None] + other.a1[None]).reshape((K1 * K2,) + self.a1.shape[1:]),
            (self.b0[:, None] + other.b0[None]).reshape(-1),
            (self.b1[:, None] + other.b1[None]).reshape(K1 * K2, -1),
            label or f"{self.label}+{other.label}",
        )

    def nonzero(self) -> "AffinePieces":
        """Drop pieces that are identically zero."""
        keep = ~(
            np.all(self.a0 == 0, axis=1) & np.all(self.a1 == 0, axis=(1, 2))
            & (self.b0 == 0) & np.all(self.b1 == 0, axis=1)
        )
        return AffinePieces(self.a0[keep], self.a1[keep], self.b0[keep], self.b1[keep], self.label)


def sum_families(families: Sequence[AffinePieces], label: str = "", max_pieces: int | None = None) -> AffinePieces:
    total = int(np.prod([f.K for f in families], dtype=object))
    if max_pieces is not None and total > max_pieces:
        raise PieceLimitError(f"{label or 'family'} would have {total} pieces (cap {max_pieces})")
    out = families[0]
    for f in families[1:]:
        out = out.plus(f)
    return AffinePieces(out.a0, out.a1, out.b0, out.b1, label or out.label)


class RiskModel:
    """Risk pieces and direct evaluation for one screened case.

    ``kept_lines`` are the lines whose overload is penalised; the DLR ones
    among them carry a rating component in ``xi``, the others use their
    forecast rating as a constant.
    """

    def __init__(self, case: Case, ptdf: PtdfMatrix, kept_lines: Sequence[str],
                 index: UncertaintyIndex, penalties: PenaltyWeights):
        self.case = case
        self.index = index
        self.penalties = penalties
        kept = set(kept_lines)
        self.line_pos = [i for i, ln in enumerate(case.lines) if ln.id in kept]
        self.lines = [case.lines[i] for i in self.line_pos]
        self.agc = case.agc_generators
        G = len(case.generators)
        self.G = G
        self.nx = 4 * G
        self.d = index.dim
        wind_ids = [w.id for w in case.wind_farms]
        if index.wind_ids != wind_ids:
            raise ValueError("uncertainty index must list every wind farm in case order")
        self.wind_slots = np.arange(len(wind_ids))
        pos = {e: j for j, e in enumerate(index.entries)}
        self.rating_slot = [pos.get(("line", ln.id)) for ln in self.lines]
        for ln, slot in zip(self.lines, self.rating_slot):
            if ln.dlr_enabled and slot is None:
                raise ValueError(f"DLR line {ln.id!r} missing from the uncertainty index")
        self.wind_forecast = np.array([w.forecast for w in case.wind_farms], dtype=float)
        self.wind_total = float(self.wind_forecast.sum())
        rows = ptdf.rows(self.line_pos) if self.line_pos else None
        L = len(self.lines)
        self.pi_g = rows.generators if L else np.zeros((0, G))
        self.pi_w = rows.wind if L else np.zeros((0, len(wind_ids)))
        demand = np.array([d.demand for d in case.loads], dtype=float)
        self.load_flow = rows.loads @ demand if L and len(demand) else np.zeros(L)
        self.const_rating = np.array([ln.forecast_rating for ln in self.lines])

    # layout of the decision vector
    def p_idx(self, g):
        return g

    def rup_idx(self, g):
        return self.G + g

    def rdn_idx(self, g):
        return 2 * self.G + g

    def alpha_idx(self, g):
        return 3 * self.G + g

    @property
    def n_agc(self) -> int:
        return len(self.agc)

    @property
    def n_lines(self) -> int:
        return len(self.lines)

    def _empty(self, K: int, label: str) -> AffinePieces:
        return AffinePieces(np.zeros((K, self.d)), np.zeros((K, self.d, self.nx)),
                            np.zeros(K), np.zeros((K, self.nx)), label)

    def generator_pieces(self, g: int) -> tuple[AffinePieces, AffinePieces]:
        """(load-shed pieces, curtailment pieces) of generator position ``g``; second piece of each is zero."""
        bd, bw = self.penalties.beta_d, self.penalties.beta_w
        gid = self.case.generators[g].id
        shed = self._empty(2, f"shed:{gid}")
        shed.a1[0, self.wind_slots, self.alpha_idx(g)] = -bd
        shed.b1[0, self.rup_idx(g)] = -bd
        shed.b1[0, self.alpha_idx(g)] = bd * self.wind_total
        curt = self._empty(2, f"curtail:{gid}")
        curt.a1[0, self.wind_slots, self.alpha_idx(g)] = bw
        curt.b1[0, self.rdn_idx(g)] = -bw
        curt.b1[0, self.alpha_idx(g)] = -bw * self.wind_total
        return shed, curt

    def line_pieces(self, j: int) -> AffinePieces:
        """Overload pieces of the ``j``-th kept line: +flow - rating, -flow - rating, 0."""
        bl = self.penalties.beta_l
        ln = self.lines[j]
        # flow(xi) = fa . xi + fb with fa, fb affine in x
        fa0 = np.zeros(self.d)
        fa1 = np.zeros((self.d, self.nx))
        fb1 = np.zeros(self.nx)
        fa0[self.wind_slots] = self.pi_w[j]
        for g in range(self.G):
            fa1[self.wind_slots, self.alpha_idx(g)] = -self.pi_g[j, g]
            fb1[self.p_idx(g)] = self.pi_g[j, g]
            fb1[self.alpha_idx(g)] = self.pi_g[j, g] * self.wind_total
        fb0 = -self.load_flow[j]
        pieces = self._empty(3, f"line:{ln.id}")
        for k, sign in enumerate((1.0, -1.0)):
            pieces.a0[k] = sign * bl * fa0
            pieces.a1[k] = sign * bl * fa1
            pieces.b0[k] = sign * bl * fb0
            pieces.b1[k] = sign * bl * fb1
            slot = self.rating_slot[j]
            # the rating enters both nonzero pieces with coefficient -beta_l
            if slot is not None:
                pieces.a0[k, slot] -= bl
            else:
                pieces.b0[k] -= bl * self.const_rating[j]
        return pieces

    def atoms(self) -> dict[str, list[AffinePieces]]:
        """Per-hinge piece families grouped by risk category."""
        shed, curt = [], []
        for g in self.agc:
            s, c = self.generator_pieces(g)
            shed.append(s)
            curt.append(c)
        lines = [self.line_pieces(j) for j in range(self.n_lines)]
        return {"shed": shed, "curtail": curt, "line": lines}

    def families(self, mode: str = "exact", max_pieces: int | None = None) -> list[AffinePieces]:
        """Piece families whose maxima sum to the risk.

        exact: one family of 4^G 3^L pieces; grouped: one family per risk
        category (2^G, 2^G, 3^L); separable: one family per hinge.
        """
        atoms = self.atoms()
        if mode == "separable":
            return atoms["shed"] + atoms["curtail"] + atoms["line"]
        zero = self._empty(1, "zero")
        if mode == "grouped":
            sizes = [2 ** self.n_agc, 2 ** self.n_agc, 3 ** self.n_lines]
            if max_pieces is not None and sum(sizes) > max_pieces:
                raise PieceLimitError(f"grouped families would have {sum(sizes)} pieces (cap {max_pieces})")
            return [
                sum_families(atoms["shed"] or [zero], "shed"),
                sum_families(atoms["curtail"] or [zero], "curtail"),
                sum_families(atoms["line"] or [zero], "line"),
            ]
        if mode == "exact":
            K = piece_count(max(self.n_agc, 1), self.n_lines) if self.n_agc else 3 ** self.n_lines
            if max_pieces is not None and K > max_pieces:
                raise PieceLimitError(f"exact risk has {K} pieces (cap {max_pieces})")
            parts = atoms["shed"] + atoms["curtail"] + atoms["line"]
            return [sum_families(parts or [zero], "exact")]
        raise ValueError(f"unknown approximation mode {mode!r}")

    # direct evaluation -------------------------------------------------

    def evaluate(self, decision: DispatchDecision | np.ndarray, xi: np.ndarray,
                 breakdown: bool = False):
        """Risk in $/h for one sample (d,) or many (N, d), computed from the hinge form."""
        x = decision.vector if isinstance(decision, DispatchDecision) else np.asarray(decision, float)
        xi = np.asarray(xi, dtype=float)
        single = xi.ndim == 1
        X = np.atleast_2d(xi)
        G = self.G
        p, rup, rdn, alpha = x[:G], x[G:2 * G], x[2 * G:3 * G], x[3 * G:]
        pen = self.penalties
        wind = X[:, self.wind_slots]
        D = self.wind_total - wind.sum(axis=1)  # shortfall of wind against forecast
        agc = np.asarray(self.agc, dtype=int)
        adj = np.outer(D, alpha[agc])
        shed = pen.beta_d * np.maximum(adj - rup[agc], 0.0).sum(axis=1)
        curt = pen.beta_w * np.maximum(-adj - rdn[agc], 0.0).sum(axis=1)
        if self.n_lines:
            out = p[None, :] + np.outer(D, alpha)
            flow = out @ self.pi_g.T + wind @ self.pi_w.T - self.load_flow
            rating = np.empty_like(flow)
            for j, slot in enumerate(self.rating_slot):
                rating[:, j] = X[:, slot] if slot is not None else self.const_rating[j]
            over = pen.beta_l * np.maximum(np.abs(flow) - rating, 0.0).sum(axis=1)
        else:
            over = np.zeros(len(X))
        total = shed + curt + over
        if breakdown:
            parts = {"shed": shed, "curtail": curt, "line": over, "total": total}
            return {k: (float(v[0]) if single else v) for k, v in parts.items()}
        return float(total[0]) if single else total


def evaluate_risk(model: RiskModel, decision, xi):
    return model.evaluate(decision, xi)


def max_over_families(families: Sequence[AffinePieces], x: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """Sum over families of the max piece value."""
    return sum(f.max(x, xi) for f in families)


def enumerate_exact_indices(n_agc: int, n_lines: int):
    """Cartesian piece index (j_shed per AGC unit, j_curtail per unit, j_line per line)."""
    return itertools.product(*([range(2)] * (2 * n_agc) + [range(3)] * n_lines))
