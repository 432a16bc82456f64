"""Conic models of the dispatch problems.

Every model shares the base dispatch (output, reserves, participation factors,
balance, forecast line limits) and differs only in how the expected risk is
represented:

* ``saa``: epigraph of the empirical mean,
* ``w_dropf``: Wasserstein ball, linear epigraph plus Lipschitz bounds,
* ``m_dropf``: covariance-dominance set, one LMI per piece,
* ``wm_dropf``: both sets, one LMI and one dual-norm cone per (sample, piece).

The radius and the covariance multiple only enter the linear objective, so a
built program can be re-targeted with :func:`with_parameters`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .case import Case, PtdfMatrix, compute_ptdf, screen_inactive_lines
from .conic import (SQRT2, ConicProgram, ProgramBuilder, Solution, SolverOptions, VarBlock,
                    smat, solve, svec, svec_size)
from .risk import AffinePieces, DispatchDecision, PenaltyWeights, PieceLimitError, RiskModel
from .uncertainty import EmpiricalMoments, SampleSet, UncertaintyIndex, empirical_moments

KINDS = ("deterministic", "saa", "w_dropf", "m_dropf", "wm_dropf")
APPROX = ("exact", "grouped", "separable")
# ground norm of the transport cost -> exponent of its dual norm
DUAL_NORM = {"l2": 2.0, "l1": np.inf, "linf": 1.0}
DEFAULT_PIECE_CAP = 1_000_000


class ExtractionError(RuntimeError):
    pass


@dataclass(frozen=True)
class AmbiguitySpec:
    theta: float = 0.0  # Wasserstein radius, MW
    tau: float = 1.0  # covariance multiple
    norm: str = "l2"
    use_wasserstein: bool = True
    use_moment: bool = True
    # "components": Lipschitz bound over the individual hinge gradients (the
    # published form); "pieces": over every piece of the family (exact dual)
    lipschitz: str = "components"

    def __post_init__(self):
        if self.theta < 0:
            raise ValueError("theta must be >= 0")
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if self.norm not in DUAL_NORM:
            raise ValueError(f"norm must be one of {sorted(DUAL_NORM)}")
        if not (self.use_wasserstein or self.use_moment):
            raise ValueError("at least one ambiguity set must be active")
        if self.lipschitz not in ("components", "pieces"):
            raise ValueError("lipschitz must be 'components' or 'pieces'")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    approx: str = "separable"
    penalties: PenaltyWeights = field(default_factory=PenaltyWeights)
    ambiguity: AmbiguitySpec = field(default_factory=AmbiguitySpec)
    piece_cap: int = DEFAULT_PIECE_CAP

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.approx not in APPROX:
            raise ValueError(f"unknown approximation {self.approx!r}")


class DispatchProblem:
    """A screened case with its shift factors and uncertainty layout."""

    def __init__(self, case: Case, ptdf: PtdfMatrix | None = None,
                 kept_lines: Sequence[str] | None = None):
        self.case = case
        self.ptdf = ptdf if ptdf is not None else compute_ptdf(case)
        if kept_lines is None:
            kept_lines = screen_inactive_lines(case, self.ptdf)
        self.kept_lines = list(kept_lines)
        self.index = UncertaintyIndex.from_case(case, self.kept_lines)
        self._risk: dict[PenaltyWeights, RiskModel] = {}

    def risk_model(self, penalties: PenaltyWeights) -> RiskModel:
        if penalties not in self._risk:
            self._risk[penalties] = RiskModel(self.case, self.ptdf, self.kept_lines, self.index, penalties)
        return self._risk[penalties]

    @property
    def n_gen(self) -> int:
        return len(self.case.generators)


# ---------------------------------------------------------------------------
# row accumulation

class _Rows:
    def __init__(self):
        self.r, self.c, self.v, self.b = [], [], [], []

    def add(self, cols, vals, rhs):
        i = len(self.b)
        cols = list(np.atleast_1d(cols))
        self.r += [i] * len(cols)
        self.c += cols
        self.v += list(np.atleast_1d(vals).astype(float))
        self.b.append(float(rhs))

    def emit(self, builder: ProgramBuilder, name: str, sense: str, aux=False, count=None):
        if self.b:
            builder.linear(name, sense, np.array(self.r, dtype=np.int64), np.array(self.c, dtype=np.int64),
                           np.array(self.v), np.array(self.b), count=count, aux=aux)


def _nz_triplets(M: np.ndarray, row_of, col_of):
    """Triplets of the nonzeros of a dense array via index maps on its axes."""
    idx = np.nonzero(M)
    return row_of(idx), col_of(idx), M[idx]


# ---------------------------------------------------------------------------
# base dispatch

def _base(b: ProgramBuilder, prob: DispatchProblem, rm: RiskModel, reserves: bool = True) -> np.ndarray:
    """Declare decision variables, shared constraints and the dispatch cost; return x indices."""
    case = prob.case
    G = prob.n_gen
    p = b.variable("p", G, aux=False)
    if reserves:
        rup = b.variable("r_up", G, aux=False)
        rdn = b.variable("r_dn", G, aux=False)
        alpha = b.variable("alpha", G, aux=False)
    for i, g in enumerate(case.generators):
        b.add_quadratic([p.offset + i], [2 * g.cost.c2])
        b.add_linear_objective(p.offset + i, g.cost.c1)
        b.constant += g.cost.c0
        if reserves:
            b.add_quadratic([rup.offset + i, rdn.offset + i], [2 * g.cost_up.c2, 2 * g.cost_down.c2])
            b.add_linear_objective([rup.offset + i, rdn.offset + i], [g.cost_up.c1, g.cost_down.c1])
            b.constant += g.cost_up.c0 + g.cost_down.c0

    eq, le = _Rows(), _Rows()
    wind = sum(w.forecast for w in case.wind_farms)
    eq.add(p.index(), np.ones(G), case.total_demand - wind)
    wf = rm.wind_forecast
    for j, ln in enumerate(rm.lines):
        base = float(rm.pi_w[j] @ wf - rm.load_flow[j]) if len(wf) else -float(rm.load_flow[j])
        le.add(p.index(), rm.pi_g[j], ln.forecast_rating - base)
        le.add(p.index(), -rm.pi_g[j], ln.forecast_rating + base)
    agc = set(case.agc_generators)
    for i, g in enumerate(case.generators):
        le.add(p.offset + i, 1.0, g.p_max)
        le.add(p.offset + i, -1.0, -g.p_min)
        if not reserves:
            continue
        le.add(rup.offset + i, -1.0, 0.0)
        le.add([rup.offset + i, p.offset + i], [1.0, 1.0], g.p_max)
        le.add(rdn.offset + i, -1.0, 0.0)
        le.add([rdn.offset + i, p.offset + i], [1.0, -1.0], -g.p_min)
        le.add(alpha.offset + i, -1.0, 0.0)
        le.add(alpha.offset + i, 1.0, 1.0)
        if i not in agc:
            for blk in (rup, rdn, alpha):
                eq.add(blk.offset + i, 1.0, 0.0)
    if reserves:
        cols = [alpha.offset + i for i in sorted(agc)]
        eq.add(cols, np.ones(len(cols)), 1.0)
    eq.emit(b, "base_eq", "eq")
    le.emit(b, "base_le", "le")
    return np.arange(4 * G) if reserves else p.index()


def _as_array(samples) -> np.ndarray:
    X = samples.samples if isinstance(samples, SampleSet) else np.asarray(samples, dtype=float)
    return np.atleast_2d(X)


# ---------------------------------------------------------------------------
# risk building blocks

def _epigraph(b: ProgramBuilder, name: str, fam: AffinePieces, X: np.ndarray, y: VarBlock,
              xcols: np.ndarray, scale_rows=None):
    """y_n >= a_k(x).xi_n + b_k(x) for every (n, k)."""
    N, K = X.shape[0], fam.K
    e = X @ fam.a0.T + fam.b0[None]  # (N, K)
    if b.dry_run:
        b.linear(name, "le", None, None, None, -e.ravel(), aux=True)
        return
    C = np.einsum("nd,kdx->nkx", X, fam.a1) + fam.b1[None]  # (N, K, nx)
    r1, c1, v1 = _nz_triplets(C, lambda ix: ix[0] * K + ix[1], lambda ix: xcols[ix[2]])
    rows = np.arange(N * K)
    r2 = rows
    c2 = y.offset + rows // K
    b.linear(name, "le", np.concatenate([r1, r2]), np.concatenate([c1, c2]),
             np.concatenate([v1, -np.ones(N * K)]), -e.ravel(), aux=True)


def _norm_bounds(b: ProgramBuilder, name: str, grads: list[tuple[np.ndarray, np.ndarray]],
                 lam: VarBlock, xcols: np.ndarray, p: float):
    """||a0 + a1 x||_p <= lambda for each (a0, a1) in ``grads``."""
    m = len(grads)
    if not m:
        return
    A0 = np.stack([g[0] for g in grads])  # (m, d)
    A1 = np.stack([g[1] for g in grads])  # (m, d, nx)
    if not b.dry_run:
        # coordinates that vanish in every gradient do not change any norm;
        # dropping them avoids all-zero cone rows, which stall the solver
        live = np.any(A0 != 0, axis=0) | np.any(A1 != 0, axis=(0, 2))
        if not live.any():
            live[0] = True
        A0, A1 = A0[:, live], A1[:, live]
    d = A0.shape[1]
    u = A0.ravel()
    if b.dry_run:
        b.norm_cones(name, p, d, None, u, None, np.zeros(m))
        return
    U = _nz_triplets(A1, lambda ix: ix[0] * d + ix[1], lambda ix: xcols[ix[2]])
    T = (np.arange(m), np.full(m, lam.offset), np.ones(m))
    b.norm_cones(name, p, d, U, u, T, np.zeros(m))


def _component_grads(rm: RiskModel) -> list[tuple[np.ndarray, np.ndarray]]:
    """Gradients (in xi) of every nonzero hinge piece: 2 per AGC unit, 2 per line."""
    out = []
    atoms = rm.atoms()
    for fam in atoms["shed"] + atoms["curtail"] + atoms["line"]:
        nz = fam.nonzero()
        out += [(nz.a0[k], nz.a1[k]) for k in range(nz.K)]
    return out


def _family_grads(fam: AffinePieces) -> list[tuple[np.ndarray, np.ndarray]]:
    nz = fam.nonzero()
    a = nz.a0.reshape(nz.K, -1)
    keep = ~(np.all(a == 0, axis=1) & np.all(nz.a1 == 0, axis=(1, 2)))
    return [(nz.a0[k], nz.a1[k]) for k in np.flatnonzero(keep)]


def _lmi_block(b: ProgramBuilder, name: str, fam: AffinePieces, pieces: np.ndarray,
               gamma: VarBlock, zeta_cols: np.ndarray, s_cols: np.ndarray, xi: np.ndarray | None,
               mhat: np.ndarray | None, xcols: np.ndarray):
    """One LMI per row j of ``pieces``:

        [[Gamma,                         -a_k/2 + zeta_j/2 - Gamma m],
         [(.)',  s_j - b_k - zeta_j.xi_j + m'Gamma m              ]] >= 0

    ``zeta_cols`` is (M, d) variable columns, ``s_cols`` (M,), ``xi`` (M, d)
    or None, ``mhat`` (d,) or None.
    """
    M = len(pieces)
    d = fam.dim
    sd = svec_size(d)
    S = svec_size(d + 1)
    f = np.zeros((M, S))
    f[:, sd:sd + d] = -SQRT2 / 2 * fam.a0[pieces]
    f[:, S - 1] = -fam.b0[pieces]
    if b.dry_run:
        b.psd(name, d + 1, None, f.ravel())
        return
    base = (np.arange(M) * S)[:, None]
    R, C, V = [], [], []
    # Gamma block
    R.append((base + np.arange(sd)[None]).ravel())
    C.append(np.tile(gamma.offset + np.arange(sd), M))
    V.append(np.ones(M * sd))
    # border: x part
    r, c, v = _nz_triplets(fam.a1[pieces], lambda ix: ix[0] * S + sd + ix[1], lambda ix: xcols[ix[2]])
    R.append(r), C.append(c), V.append(-SQRT2 / 2 * v)
    # border: zeta part
    R.append((base + sd + np.arange(d)[None]).ravel())
    C.append(zeta_cols.ravel())
    V.append(np.full(M * d, SQRT2 / 2))
    if mhat is not None:
        # (Gamma m)_i as a linear map of svec(Gamma)
        Tm = np.stack([smat(e, d) @ mhat for e in np.eye(sd)], axis=1)  # (d, sd)
        ti, tp = np.nonzero(Tm)
        R.append((base + sd + ti[None]).ravel())
        C.append(np.tile(gamma.offset + tp, M))
        V.append(np.tile(-SQRT2 * Tm[ti, tp], M))
        mm = svec(np.outer(mhat, mhat))
        nzp = np.flatnonzero(mm)
        R.append((base + S - 1 + 0 * nzp[None]).ravel())
        C.append(np.tile(gamma.offset + nzp, M))
        V.append(np.tile(mm[nzp], M))
    # corner: s, b1, zeta . xi
    R.append(np.arange(M) * S + S - 1)
    C.append(np.asarray(s_cols))
    V.append(np.ones(M))
    r, c, v = _nz_triplets(fam.b1[pieces], lambda ix: ix[0] * S + S - 1, lambda ix: xcols[ix[1]])
    R.append(r), C.append(c), V.append(-v)
    if xi is not None:
        R.append(np.repeat(np.arange(M) * S + S - 1, d))
        C.append(zeta_cols.ravel())
        V.append(-np.asarray(xi).ravel())
    b.psd(name, d + 1, (np.concatenate(R), np.concatenate(C), np.concatenate(V)), f.ravel())


def _psd_var(b: ProgramBuilder, name: str, gamma: VarBlock):
    sd = gamma.size
    if b.dry_run:
        b.psd(name, gamma.order, None, np.zeros(sd))
        return
    b.psd(name, gamma.order, (np.arange(sd), gamma.offset + np.arange(sd), np.ones(sd)), np.zeros(sd))


def _scaled_risk(problem: DispatchProblem, penalties: PenaltyWeights) -> tuple[RiskModel, float]:
    """Risk model with penalties normalised to a unit maximum, and the undo factor.

    Interior-point solvers equilibrate PSD cones only uniformly, so penalty
    magnitudes of 1e4 inside the LMIs stall convergence. Scaling every piece by
    s and the auxiliary objective weights by 1/s is an exact change of units
    for the auxiliary variables.
    """
    top = max(penalties.beta_d, penalties.beta_w, penalties.beta_l)
    s = 1.0 / top if top > 0 else 1.0
    return problem.risk_model(penalties.scaled(s)), 1.0 / s


def _families(rm: RiskModel, approx: str, N: int, cap: int) -> list[AffinePieces]:
    try:
        return rm.families(approx, max_pieces=max(cap // max(N, 1), 1) if approx == "exact" else None)
    except PieceLimitError as exc:
        raise PieceLimitError(f"{exc}; use approx='grouped' or 'separable'") from None


# ---------------------------------------------------------------------------
# model builders

def _finish(b: ProgramBuilder, meta: dict, q_theta=None, q_tau=None) -> ConicProgram:
    prog = b.build(meta)
    n = prog.n
    qt = np.zeros(n) if q_theta is None else q_theta
    qs = np.zeros(n) if q_tau is None else q_tau
    theta = meta.get("theta", 0.0) or 0.0
    tau = meta.get("tau", 0.0) or 0.0
    base = prog.q - theta * qt - tau * qs
    return prog.with_objective(meta={"q_base": base, "q_theta": qt, "q_tau": qs})


def _pad(v: list, n: int) -> np.ndarray:
    out = np.zeros(n)
    for idx, coef in v:
        out[idx] += coef
    return out


def build_deterministic(problem: DispatchProblem) -> ConicProgram:
    b = ProgramBuilder()
    rm = problem.risk_model(PenaltyWeights(0.0, 0.0, 0.0))
    _base(b, problem, rm, reserves=False)
    return b.build({"kind": "deterministic", "approx": None, "count_matrix_as_one": False})


def build_saa(problem: DispatchProblem, samples, penalties: PenaltyWeights) -> ConicProgram:
    X = _as_array(samples)
    N = X.shape[0]
    rm, w = _scaled_risk(problem, penalties)
    b = ProgramBuilder()
    xcols = _base(b, problem, rm)
    for fam in rm.families("separable"):
        y = b.variable(f"y[{fam.label}]", N)
        b.add_linear_objective(y.index(), np.full(N, w / N))
        _epigraph(b, f"epi[{fam.label}]", fam, X, y, xcols)
    return b.build({"kind": "saa", "approx": None, "n_samples": N, "count_matrix_as_one": False,
                    "risk_scale": 1.0 / w})


def build_w_dropf(problem: DispatchProblem, samples, penalties: PenaltyWeights,
                  ambiguity: AmbiguitySpec, approx: str = "exact", cap: int = DEFAULT_PIECE_CAP,
                  dry_run: bool = False) -> ConicProgram:
    X = _as_array(samples)
    N = X.shape[0]
    rm, w = _scaled_risk(problem, penalties)
    fams = _families(rm, approx, N, cap)
    b = ProgramBuilder(dry_run)
    xcols = _base(b, problem, rm)
    p = DUAL_NORM[ambiguity.norm]
    comps = _component_grads(rm)
    theta_terms = []
    for fam in fams:
        y = b.variable(f"y[{fam.label}]", N)
        lam = b.variable(f"lambda[{fam.label}]", 1)
        b.add_linear_objective(y.index(), np.full(N, w / N))
        b.add_linear_objective(lam.offset, w * ambiguity.theta)
        theta_terms.append((lam.offset, w))
        _epigraph(b, f"epi[{fam.label}]", fam, X, y, xcols)
        if ambiguity.lipschitz == "pieces" or approx == "separable":
            grads = _family_grads(fam)
        else:
            grads = comps
        _norm_bounds(b, f"lip[{fam.label}]", grads, lam, xcols, p)
        if approx == "exact":
            b.linear(f"lambda_nonneg[{fam.label}]", "le", np.array([0]), np.array([lam.offset]),
                     np.array([-1.0]), np.array([0.0]), aux=True)
    b_n = b.n
    meta = {"kind": "w_dropf", "approx": approx, "theta": ambiguity.theta, "tau": None,
            "norm": ambiguity.norm, "lipschitz": ambiguity.lipschitz, "n_samples": N,
            "count_matrix_as_one": False, "risk_scale": 1.0 / w}
    return _finish(b, meta, q_theta=_pad(theta_terms, b_n))


def build_m_dropf(problem: DispatchProblem, moments: EmpiricalMoments | SampleSet, penalties: PenaltyWeights,
                  tau: float, approx: str = "exact", cap: int = DEFAULT_PIECE_CAP,
                  dry_run: bool = False) -> ConicProgram:
    if isinstance(moments, SampleSet):
        moments = empirical_moments(moments)
    if tau < 1:
        raise ValueError("tau must be >= 1")
    rm, w = _scaled_risk(problem, penalties)
    fams = _families(rm, approx, 1, cap)
    b = ProgramBuilder(dry_run)
    xcols = _base(b, problem, rm)
    d = rm.d
    m, Sig = moments.mean, moments.covariance
    sig_v = svec(Sig)
    mm_v = svec(np.outer(m, m))
    tau_terms = []
    for fam in fams:
        gamma = b.sym_variable(f"Gamma[{fam.label}]", d)
        zeta = b.variable(f"zeta[{fam.label}]", d)
        lam = b.variable(f"lambda[{fam.label}]", 1)
        b.add_linear_objective(gamma.index(), w * (tau * sig_v + mm_v))
        tau_terms.append((gamma.index(), w * sig_v))
        b.add_linear_objective(zeta.index(), w * m)
        b.add_linear_objective(lam.offset, w)
        _psd_var(b, f"Gamma_psd[{fam.label}]", gamma)
        K = fam.K
        _lmi_block(b, f"lmi[{fam.label}]", fam, np.arange(K), gamma,
                   np.tile(zeta.index(), (K, 1)), np.full(K, lam.offset), None, None, xcols)
    meta = {"kind": "m_dropf", "approx": approx, "theta": None, "tau": float(tau),
            "n_samples": moments.n, "count_matrix_as_one": False, "risk_scale": 1.0 / w}
    return _finish(b, meta, q_tau=_pad(tau_terms, b.n))


def build_wm_dropf(problem: DispatchProblem, samples, penalties: PenaltyWeights,
                   ambiguity: AmbiguitySpec, approx: str = "exact", cap: int = DEFAULT_PIECE_CAP,
                   dry_run: bool = False) -> ConicProgram:
    X = _as_array(samples)
    N = X.shape[0]
    mom = empirical_moments(X)
    rm, w = _scaled_risk(problem, penalties)
    fams = _families(rm, approx, N, cap)
    b = ProgramBuilder(dry_run)
    xcols = _base(b, problem, rm)
    d = rm.d
    p = DUAL_NORM[ambiguity.norm]
    sig_v = svec(mom.covariance)
    theta_terms, tau_terms = [], []
    for fam in fams:
        K = fam.K
        M = N * K
        lam = b.variable(f"lambda[{fam.label}]", 1)
        gamma = b.sym_variable(f"Gamma[{fam.label}]", d)
        y = b.variable(f"y[{fam.label}]", N)
        zeta = b.variable(f"zeta[{fam.label}]", M * d)
        b.add_linear_objective(lam.offset, w * ambiguity.theta)
        theta_terms.append((lam.offset, w))
        b.add_linear_objective(gamma.index(), w * ambiguity.tau * sig_v)
        tau_terms.append((gamma.index(), w * sig_v))
        b.add_linear_objective(y.index(), np.full(N, w / N))
        b.linear(f"lambda_nonneg[{fam.label}]", "le", np.array([0]), np.array([lam.offset]),
                 np.array([-1.0]), np.array([0.0]), aux=True)
        _psd_var(b, f"Gamma_psd[{fam.label}]", gamma)
        # j = n * K + k
        n_of = np.repeat(np.arange(N), K)
        k_of = np.tile(np.arange(K), N)
        zcols = zeta.offset + np.arange(M * d).reshape(M, d)
        _lmi_block(b, f"lmi[{fam.label}]", fam, k_of, gamma, zcols, y.offset + n_of,
                   X[n_of], mom.mean, xcols)
        if b.dry_run:
            b.norm_cones(f"dual[{fam.label}]", p, d, None, np.zeros(M * d), None, np.zeros(M))
        else:
            U = (np.arange(M * d), zcols.ravel(), np.ones(M * d))
            T = (np.arange(M), np.full(M, lam.offset), np.ones(M))
            b.norm_cones(f"dual[{fam.label}]", p, d, U, np.zeros(M * d), T, np.zeros(M))
    meta = {"kind": "wm_dropf", "approx": approx, "theta": ambiguity.theta, "tau": ambiguity.tau,
            "norm": ambiguity.norm, "n_samples": N, "count_matrix_as_one": True, "risk_scale": 1.0 / w}
    n = b.n
    return _finish(b, meta, q_theta=_pad(theta_terms, n), q_tau=_pad(tau_terms, n))


def build_model(problem: DispatchProblem, spec: ModelSpec, samples, dry_run: bool = False) -> ConicProgram:
    amb = spec.ambiguity
    if spec.kind == "deterministic":
        return build_deterministic(problem)
    if spec.kind == "saa":
        return build_saa(problem, samples, spec.penalties)
    if spec.kind == "w_dropf":
        return build_w_dropf(problem, samples, spec.penalties, amb, spec.approx, spec.piece_cap, dry_run)
    if spec.kind == "m_dropf":
        X = _as_array(samples)
        return build_m_dropf(problem, empirical_moments(X), spec.penalties, amb.tau, spec.approx,
                             spec.piece_cap, dry_run)
    return build_wm_dropf(problem, samples, spec.penalties, amb, spec.approx, spec.piece_cap, dry_run)


def with_parameters(program: ConicProgram, theta: float | None = None, tau: float | None = None) -> ConicProgram:
    """Same constraints, objective re-targeted to a new radius and/or covariance multiple."""
    meta = program.meta
    if "q_base" not in meta:
        raise ValueError("program carries no parameter decomposition")
    th = meta.get("theta") if theta is None else float(theta)
    ta = meta.get("tau") if tau is None else float(tau)
    if th is not None and th < 0:
        raise ValueError("theta must be >= 0")
    if ta is not None and ta < 1:
        raise ValueError("tau must be >= 1")
    q = meta["q_base"] + (th or 0.0) * meta["q_theta"] + (ta or 0.0) * meta["q_tau"]
    return program.with_objective(q=q, meta={"theta": th, "tau": ta})


# ---------------------------------------------------------------------------
# counts

def program_counts(program: ConicProgram) -> dict[str, int]:
    """Auxiliary variables, PSD constraints and linear constraints of a built model."""
    return {
        "variables": program.count_variables(aux_only=True, matrix_as_one=program.meta.get("count_matrix_as_one", False)),
        "psd": program.count_psd(),
        "linear": program.count_constraints(),
    }


def paper_counts(kind: str, approx: str, N: int, G: int, L: int, W: int) -> dict[str, int]:
    """Closed-form auxiliary counts for ``kind``/``approx`` with G AGC units, L kept lines, W farms."""
    d = L + W
    K = 4 ** G * 3 ** L
    Kg = 2 ** (G + 1) + 3 ** L
    H = 2 * G + L
    Ks = 4 * G + 3 * L
    if kind == "saa":
        return {"variables": 2 * N * G + N * L, "psd": 0, "linear": 4 * N * G + 3 * N * L}
    if kind == "wm_dropf":
        return {
            "exact": {"variables": d * N * K + N + 2, "psd": N * K + 1, "linear": N * K + 1},
            "grouped": {"variables": d * Kg * N + 3 * N + 6, "psd": Kg * N + 3, "linear": Kg * N + 3},
            "separable": {"variables": (N + 2) * H + d * Ks * N, "psd": Ks * N + H, "linear": Ks * N + H},
        }[approx]
    if kind == "w_dropf":
        return {
            "exact": {"variables": N + 1, "psd": 0, "linear": N * K + 2 * G + 2 * L + 1},
            "grouped": {"variables": 3 * N + 3, "psd": 0, "linear": Kg * N + 6 * G + 6 * L},
            "separable": {"variables": H * (N + 1), "psd": 0, "linear": Ks * N + 2 * G + 2 * L},
        }[approx]
    if kind == "m_dropf":
        per = d * d + d + 1
        return {
            "exact": {"variables": per, "psd": K + 1, "linear": 0},
            "grouped": {"variables": 3 * per, "psd": Kg + 3, "linear": 0},
            "separable": {"variables": per * H, "psd": 6 * G + 4 * L, "linear": 0},
        }[approx]
    raise ValueError(f"no closed-form counts for {kind!r}")


# ---------------------------------------------------------------------------
# solving and extraction

@dataclass
class ModelResult:
    decision: DispatchDecision
    solution: Solution
    program: ConicProgram

    @property
    def objective(self) -> float:
        return self.solution.objective

    @property
    def risk_bound(self) -> float:
        """Objective minus dispatch cost: the model's estimate of the worst-case expected risk."""
        return self.solution.objective - self.decision.dispatch_cost(self.decision_case)

    decision_case: Case | None = None


def extract_decision(problem: DispatchProblem, program: ConicProgram, solution: Solution,
                     tol: float = 1e-6) -> DispatchDecision:
    if not solution.optimal or solution.x is None:
        raise ExtractionError(f"cannot extract a decision from a {solution.status} solve")
    case = problem.case
    G = problem.n_gen
    agc = case.agc_generators
    x = solution.x
    p = program.value("p", x)
    p = np.atleast_1d(np.array(p, dtype=float))
    if "alpha" in program.variables:
        rup = np.atleast_1d(np.array(program.value("r_up", x), dtype=float))
        rdn = np.atleast_1d(np.array(program.value("r_dn", x), dtype=float))
        alpha = np.atleast_1d(np.array(program.value("alpha", x), dtype=float))
        small = 1e-7
        for v in (rup, rdn):
            v[(v < 0) & (v > -small)] = 0.0
        inside = (alpha > -small) & (alpha < 1 + small)
        alpha[inside] = np.clip(alpha[inside], 0.0, 1.0)
        # non-AGC entries are pinned to zero by equality rows; drop solver round-off
        non = np.setdiff1d(np.arange(G), agc)
        for v in (rup, rdn, alpha):
            v[non[np.abs(v[non]) <= small]] = 0.0
        s = alpha[agc].sum()
        if abs(s - 1.0) <= small and s > 0:
            alpha = alpha / s
    else:
        # no recourse in the deterministic model: report zero reserves, equal sharing
        rup = np.zeros(G)
        rdn = np.zeros(G)
        alpha = np.zeros(G)
        alpha[agc] = 1.0 / len(agc)
    meta = program.meta
    prov = {"model": meta.get("kind"), "approx": meta.get("approx"), "theta": meta.get("theta"),
            "tau": meta.get("tau"), "objective": float(solution.objective)}
    dec = DispatchDecision(tuple(g.id for g in case.generators), p, rup, rdn, alpha, prov)
    bad = dec.violations(case, tol)
    if bad:
        raise ExtractionError("decision violates constraints: " + "; ".join(bad))
    prov["dispatch_cost"] = dec.dispatch_cost(case)
    return dec


def solve_model(problem: DispatchProblem, spec: ModelSpec, samples, options: SolverOptions | None = None,
                program: ConicProgram | None = None) -> ModelResult:
    """Build (unless given), solve and extract; raises on non-optimal status."""
    prog = program if program is not None else build_model(problem, spec, samples)
    sol = solve(prog, options)
    dec = extract_decision(problem, prog, sol)
    return ModelResult(dec, sol, prog, problem.case)
