"""Solver-agnostic conic programs and the Clarabel adapter.

A program is a quadratic objective ``0.5 x'Px + q'x + c`` over a flat variable
vector plus blocks of constraints:

* linear: ``A x == b`` or ``A x <= b``
* norm cones: ``||U_i x + u_i||_p <= T_i x + t_i`` for p in {1, 2, inf}
* PSD blocks: ``smat(F_i x + f_i) >= 0``

Symmetric matrices (variables and PSD blocks alike) use the packed
lower-triangular row-major layout with off-diagonal entries scaled by sqrt(2),
so that ``svec(X) . svec(Y) == trace(XY)``.  This is also the layout Clarabel's
``PSDTriangleConeT`` expects.
"""

from __future__ import annotations

import logging
import time
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

SQRT2 = np.sqrt(2.0)


class SolverUnavailableError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# packed symmetric helpers

def svec_size(order: int) -> int:
    return order * (order + 1) // 2


def svec_indices(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Row/column index of each packed entry (lower triangle, row-major)."""
    rows, cols = np.tril_indices(order)
    return rows, cols


def svec_pos(i, j):
    """Packed position of entry (i, j); works elementwise on arrays."""
    i, j = np.maximum(i, j), np.minimum(i, j)
    return i * (i + 1) // 2 + j


def svec(M: np.ndarray) -> np.ndarray:
    """Pack symmetric matrices (last two axes) into scaled triangles."""
    M = np.asarray(M, dtype=float)
    r, c = svec_indices(M.shape[-1])
    scale = np.where(r == c, 1.0, SQRT2)
    return M[..., r, c] * scale


def smat(v: np.ndarray, order: int | None = None) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if order is None:
        order = int(round((np.sqrt(8 * v.shape[-1] + 1) - 1) / 2))
    r, c = svec_indices(order)
    scale = np.where(r == c, 1.0, 1.0 / SQRT2)
    M = np.zeros(v.shape[:-1] + (order, order))
    M[..., r, c] = v * scale
    M[..., c, r] = v * scale
    return M


# ---------------------------------------------------------------------------
# program container

@dataclass(frozen=True)
class VarBlock:
    name: str
    offset: int
    size: int
    kind: str = "vector"  # scalar | vector | sym
    order: int = 0  # matrix order for kind == "sym"
    aux: bool = True

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.offset + self.size)

    def index(self, i=None):
        if i is None:
            return np.arange(self.offset, self.offset + self.size)
        return self.offset + np.asarray(i)


@dataclass(frozen=True)
class LinearBlock:
    name: str
    sense: str  # "eq" or "le"
    A: sp.csr_matrix
    b: np.ndarray
    count: int  # constraints this block represents in the published tallies
    aux: bool = False


@dataclass(frozen=True)
class NormConeBlock:
    """``m`` cones ``||U_i x + u_i||_p <= T_i x + t_i`` of dimension ``dim``."""

    name: str
    p: float
    dim: int
    U: sp.csr_matrix  # (m*dim, n)
    u: np.ndarray
    T: sp.csr_matrix  # (m, n)
    t: np.ndarray
    count: int
    aux: bool = True

    @property
    def m(self) -> int:
        return self.T.shape[0]


@dataclass(frozen=True)
class PsdBlock:
    """``m`` PSD constraints ``smat(F_i x + f_i) >= 0`` of a common order."""

    name: str
    order: int
    F: sp.csr_matrix  # (m*svec_size(order), n)
    f: np.ndarray
    count: int
    aux: bool = True

    @property
    def m(self) -> int:
        return self.F.shape[0] // svec_size(self.order)


@dataclass(frozen=True)
class ConicProgram:
    n: int
    variables: dict[str, VarBlock]
    linear: tuple[LinearBlock, ...]
    cones: tuple[NormConeBlock, ...]
    psd: tuple[PsdBlock, ...]
    P: sp.csc_matrix
    q: np.ndarray
    constant: float = 0.0
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def classification(self) -> str:
        """'sdp' with PSD blocks, 'socp' with Euclidean cones, else 'qp'."""
        if any(b.m for b in self.psd):
            return "sdp"
        if any(c.p == 2 and c.m for c in self.cones):
            return "socp"
        return "qp"

    def var(self, name: str) -> VarBlock:
        return self.variables[name]

    def value(self, name: str, x: np.ndarray):
        blk = self.variables[name]
        v = x[blk.slice]
        if blk.kind == "sym":
            return smat(v, blk.order)
        if blk.kind == "scalar":
            return float(v[0])
        return v

    def objective_value(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.P @ x) + self.q @ x + self.constant)

    def with_objective(self, q: np.ndarray | None = None, constant: float | None = None,
                       meta: dict | None = None) -> "ConicProgram":
        """Copy sharing all constraint data but with a new linear objective."""
        return replace(
            self,
            q=self.q if q is None else np.asarray(q, dtype=float),
            constant=self.constant if constant is None else float(constant),
            meta={**self.meta, **(meta or {})},
        )

    def count_psd(self, aux_only: bool = True) -> int:
        return sum(b.count for b in self.psd if b.aux or not aux_only)

    def count_constraints(self, aux_only: bool = True) -> int:
        """Non-PSD constraints; each norm cone counts once."""
        lin = sum(b.count for b in self.linear if b.aux or not aux_only)
        return lin + sum(c.count for c in self.cones if c.aux or not aux_only)

    def count_variables(self, aux_only: bool = True, matrix_as_one: bool = False) -> int:
        total = 0
        for blk in self.variables.values():
            if aux_only and not blk.aux:
                continue
            if blk.kind == "sym":
                total += 1 if matrix_as_one else blk.order ** 2
            else:
                total += blk.size
        return total

    def dump(self, path: str | Path) -> None:
        """Write a sparse-triplet text listing of objective and constraints."""
        with open(path, "w") as fh:
            fh.write(f"# conic program n={self.n} class={self.classification}\n")
            for blk in self.variables.values():
                fh.write(f"VAR {blk.name} offset={blk.offset} size={blk.size} kind={blk.kind}"
                         f" order={blk.order} aux={int(blk.aux)}\n")
            fh.write(f"OBJ_CONST {self.constant!r}\n")
            P = sp.coo_matrix(self.P)
            for i, j, v in zip(P.row, P.col, P.data):
                fh.write(f"OBJ_P {i} {j} {v!r}\n")
            for j in np.flatnonzero(self.q):
                fh.write(f"OBJ_Q {j} {self.q[j]!r}\n")

            def mat(tag, M, rhs):
                M = sp.coo_matrix(M)
                for i, j, v in zip(M.row, M.col, M.data):
                    fh.write(f"{tag}_A {i} {j} {v!r}\n")
                for i in np.flatnonzero(rhs):
                    fh.write(f"{tag}_B {i} {rhs[i]!r}\n")

            for b in self.linear:
                fh.write(f"LINEAR {b.name} sense={b.sense} rows={b.A.shape[0]}\n")
                mat("LIN", b.A, b.b)
            for c in self.cones:
                fh.write(f"NORMCONE {c.name} p={c.p} dim={c.dim} m={c.m}\n")
                mat("CONE_U", c.U, c.u)
                mat("CONE_T", c.T, c.t)
            for b in self.psd:
                fh.write(f"PSD {b.name} order={b.order} m={b.m}\n")
                mat("PSD", b.F, b.f)


class ProgramBuilder:
    """Incrementally declares variables and constraint blocks.

    With ``dry_run`` the block shapes and tallies are recorded but coefficient
    triplets are dropped, which is enough for structural counting of
    instances too large to assemble.
    """

    _EMPTY = (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0))

    def __init__(self, dry_run: bool = False):
        self.dry_run = dry_run
        self.n = 0
        self.variables: dict[str, VarBlock] = {}
        self._linear: list[tuple] = []
        self._cones: list[tuple] = []
        self._psd: list[tuple] = []
        self._P: list[tuple] = []
        self._q: list[tuple] = []
        self.constant = 0.0

    def variable(self, name: str, size: int = 1, aux: bool = True) -> VarBlock:
        kind = "scalar" if size == 1 else "vector"
        return self._declare(VarBlock(name, self.n, int(size), kind, 0, aux))

    def sym_variable(self, name: str, order: int, aux: bool = True) -> VarBlock:
        return self._declare(VarBlock(name, self.n, svec_size(order), "sym", order, aux))

    def _declare(self, blk: VarBlock) -> VarBlock:
        if blk.name in self.variables:
            raise ValueError(f"duplicate variable {blk.name!r}")
        self.variables[blk.name] = blk
        self.n += blk.size
        return blk

    # constraint data is kept as triplets and assembled once in build()
    def linear(self, name, sense, rows, cols, vals, b, count=None, aux=False):
        b = np.asarray(b, dtype=float).ravel()
        if self.dry_run:
            rows, cols, vals = self._EMPTY
        self._linear.append((name, sense, rows, cols, vals, b, len(b) if count is None else count, aux))

    def norm_cones(self, name, p, dim, U_trip, u, T_trip, t, count=None, aux=True):
        t = np.asarray(t, dtype=float).ravel()
        if self.dry_run:
            U_trip = T_trip = self._EMPTY
        self._cones.append((name, float(p), dim, U_trip, np.asarray(u, float).ravel(), T_trip, t,
                            len(t) if count is None else count, aux))

    def psd(self, name, order, trip, f, count=None, aux=True):
        f = np.asarray(f, dtype=float).ravel()
        m = len(f) // svec_size(order)
        if self.dry_run:
            trip = self._EMPTY
        self._psd.append((name, order, trip, f, m if count is None else count, aux))

    def add_quadratic(self, idx, diag):
        """Add ``0.5 * diag * x_idx^2`` terms."""
        self._P.append((np.asarray(idx), np.asarray(diag, dtype=float)))

    def add_linear_objective(self, idx, coef):
        self._q.append((np.atleast_1d(idx), np.atleast_1d(np.asarray(coef, dtype=float))))

    def build(self, meta: dict | None = None) -> ConicProgram:
        n = self.n

        def csr(rows, cols, vals, m):
            return sp.csr_matrix((np.asarray(vals, float), (np.asarray(rows), np.asarray(cols))), shape=(m, n))

        linear = tuple(
            LinearBlock(name, sense, csr(r, c, v, len(b)), b, count, aux)
            for name, sense, r, c, v, b, count, aux in self._linear
        )
        cones = tuple(
            NormConeBlock(name, p, dim, csr(*Ut, len(u)), u, csr(*Tt, len(t)), t, count, aux)
            for name, p, dim, Ut, u, Tt, t, count, aux in self._cones
        )
        psd = tuple(
            PsdBlock(name, order, csr(*trip, len(f)), f, count, aux)
            for name, order, trip, f, count, aux in self._psd
        )
        if self._P:
            idx = np.concatenate([i for i, _ in self._P])
            val = np.concatenate([d for _, d in self._P])
            P = sp.csc_matrix((val, (idx, idx)), shape=(n, n))
        else:
            P = sp.csc_matrix((n, n))
        q = np.zeros(n)
        for idx, coef in self._q:
            np.add.at(q, idx, coef)
        meta = {**(meta or {}), "dry_run": self.dry_run}
        return ConicProgram(n, dict(self.variables), linear, cones, psd, P, q, self.constant, meta)


# ---------------------------------------------------------------------------
# residuals

@dataclass
class Residuals:
    equality: float = 0.0  # max |Ax - b|
    inequality: float = 0.0  # max (Ax - b)^+
    cone: float = 0.0  # max (||Ux+u|| - (Tx+t))^+
    psd_min_eig: float = 0.0  # most negative eigenvalue over PSD blocks (0 if none)
    relative: float = 0.0  # worst violation normalised by row magnitude

    def within(self, tol: float) -> bool:
        return self.relative <= tol


def check_solution(program: ConicProgram, x: np.ndarray) -> Residuals:
    """Recompute primal residuals of ``x`` without consulting the solver."""
    x = np.asarray(x, dtype=float)
    res = Residuals()
    rel = 0.0
    for blk in program.linear:
        Ax = blk.A @ x
        scale = 1.0 + np.abs(blk.b) + np.abs(Ax)
        if blk.sense == "eq":
            viol = np.abs(Ax - blk.b)
            res.equality = max(res.equality, float(viol.max(initial=0.0)))
        else:
            viol = np.maximum(Ax - blk.b, 0.0)
            res.inequality = max(res.inequality, float(viol.max(initial=0.0)))
        rel = max(rel, float((viol / scale).max(initial=0.0)))
    for c in program.cones:
        if not c.m:
            continue
        v = (c.U @ x + c.u).reshape(c.m, c.dim)
        lhs = np.linalg.norm(v, ord=c.p, axis=1)
        rhs = c.T @ x + c.t
        viol = np.maximum(lhs - rhs, 0.0)
        res.cone = max(res.cone, float(viol.max(initial=0.0)))
        rel = max(rel, float((viol / (1.0 + lhs + np.abs(rhs))).max(initial=0.0)))
    min_eig = 0.0
    for b in program.psd:
        if not b.m:
            continue
        vals = (b.F @ x + b.f).reshape(b.m, svec_size(b.order))
        eig = np.linalg.eigvalsh(smat(vals, b.order))
        lo = eig[:, 0]
        min_eig = min(min_eig, float(lo.min()))
        rel = max(rel, float((np.maximum(-lo, 0.0) / (1.0 + np.abs(eig).max(axis=1))).max()))
    res.psd_min_eig = min_eig
    res.relative = rel
    return res


# ---------------------------------------------------------------------------
# solving

@dataclass
class Solution:
    status: str  # optimal | infeasible | unbounded | numerical-failure
    x: np.ndarray | None
    objective: float
    residuals: Residuals | None
    solve_time: float
    info: dict[str, Any] = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


@dataclass(frozen=True)
class SolverOptions:
    feas_tol: float = 1e-7
    gap_tol: float = 1e-8
    max_iter: int = 200
    verbose: bool = False


_STATUS = {
    "Solved": "optimal",
    "PrimalInfeasible": "infeasible",
    "AlmostPrimalInfeasible": "infeasible",
    "DualInfeasible": "unbounded",
    "AlmostDualInfeasible": "unbounded",
}


def to_standard_form(program: ConicProgram):
    """Lower to ``A z + s = b, s in K`` over ``z = (x, extra)``.

    Returns (P, q, A, b, cones, n_extra) with cone descriptors
    ('zero', m) / ('nonneg', m) / ('soc', d) / ('psd', order).
    """
    n = program.n
    extra = 0
    zero_A, zero_b = [], []
    nn_A, nn_b = [], []
    soc_A, soc_b, soc_dims = [], [], []

    for blk in program.linear:
        if blk.sense == "eq":
            zero_A.append(blk.A)
            zero_b.append(blk.b)
        else:
            nn_A.append(blk.A)
            nn_b.append(blk.b)

    l1_blocks = []
    for c in program.cones:
        if not c.m:
            continue
        if c.p == 2:
            m, d = c.m, c.dim
            # interleave (t_i, u_i) rows per cone
            rows_t = np.arange(m) * (d + 1)
            rows_u = (np.arange(m)[:, None] * (d + 1) + 1 + np.arange(d)[None, :]).ravel()
            perm = sp.coo_matrix(
                (np.ones(m * (d + 1)), (np.concatenate([rows_t, rows_u]), np.arange(m * (d + 1)))),
                shape=(m * (d + 1), m * (d + 1))).tocsr()
            stacked = sp.vstack([c.T, c.U]).tocsr()
            soc_A.append(-(perm @ stacked))
            soc_b.append(perm @ np.concatenate([c.t, c.u]))
            soc_dims.extend([d + 1] * m)
        elif np.isinf(c.p):
            # |U_i x + u_i|_j <= T_i x + t_i, both signs
            Trep = c.T[np.repeat(np.arange(c.m), c.dim)]
            trep = np.repeat(c.t, c.dim)
            nn_A.append(sp.vstack([c.U - Trep, -c.U - Trep]).tocsr())
            nn_b.append(np.concatenate([trep - c.u, trep + c.u]))
        elif c.p == 1:
            l1_blocks.append((c, extra))
            extra += c.m * c.dim
        else:
            raise ValueError(f"unsupported norm p={c.p}")

    N = n + extra

    def widen(M):
        return sp.hstack([M, sp.csr_matrix((M.shape[0], extra))]).tocsr() if extra else M

    zero_A = [widen(M) for M in zero_A]
    nn_A = [widen(M) for M in nn_A]
    soc_A = [widen(M) for M in soc_A]
    for c, off in l1_blocks:
        k = c.m * c.dim
        E = sp.hstack([sp.csr_matrix((k, n + off)), sp.identity(k, format="csr"),
                       sp.csr_matrix((k, extra - off - k))]).tocsr()
        # v >= +-(Ux+u);  sum v <= Tx + t
        nn_A.append(sp.vstack([widen(c.U) - E, -widen(c.U) - E]).tocsr())
        nn_b.append(np.concatenate([-c.u, c.u]))
        S = sp.kron(sp.identity(c.m), np.ones((1, c.dim)), format="csr")
        Ssum = sp.hstack([sp.csr_matrix((c.m, n + off)), S, sp.csr_matrix((c.m, extra - off - k))]).tocsr()
        nn_A.append((Ssum - widen(c.T)).tocsr())
        nn_b.append(c.t.copy())

    psd_A, psd_b, psd_orders = [], [], []
    for b in program.psd:
        if not b.m:
            continue
        psd_A.append(widen(-b.F))
        psd_b.append(b.f)
        psd_orders.extend([b.order] * b.m)

    blocks_A = zero_A + nn_A + soc_A + psd_A
    blocks_b = zero_b + nn_b + soc_b + psd_b
    A = sp.vstack(blocks_A).tocsc() if blocks_A else sp.csc_matrix((0, N))
    bvec = np.concatenate(blocks_b) if blocks_b else np.zeros(0)
    cones = []
    mz = sum(M.shape[0] for M in zero_A)
    mn = sum(M.shape[0] for M in nn_A)
    if mz:
        cones.append(("zero", mz))
    if mn:
        cones.append(("nonneg", mn))
    cones.extend(("soc", d) for d in soc_dims)
    cones.extend(("psd", o) for o in psd_orders)
    P = program.P
    if extra:
        P = sp.block_diag([P, sp.csc_matrix((extra, extra))], format="csc")
    q = np.concatenate([program.q, np.zeros(extra)])
    return sp.triu(P, format="csc"), q, A, bvec, cones, extra


_LOWERED: "OrderedDict[tuple, tuple]" = OrderedDict()
_LOWERED_MAX = 8


def _lowered(program: ConicProgram):
    """Standard form shared by programs that differ only in their linear objective."""
    key = (id(program.linear), id(program.cones), id(program.psd), id(program.P))
    hit = _LOWERED.get(key)
    if hit is not None and hit[0] is program.linear and hit[1] is program.P:
        _LOWERED.move_to_end(key)
        return hit[2]
    out = to_standard_form(program)
    # keep the keyed objects alive so their ids cannot be recycled
    _LOWERED[key] = (program.linear, program.P, out, program.cones, program.psd)
    while len(_LOWERED) > _LOWERED_MAX:
        _LOWERED.popitem(last=False)
    return out


def solve(program: ConicProgram, options: SolverOptions | None = None) -> Solution:
    """Solve with Clarabel; the status is never upgraded past what residuals support."""
    try:
        import clarabel
    except ImportError as exc:  # pragma: no cover - dependency is declared
        raise SolverUnavailableError("clarabel is not installed") from exc
    if program.meta.get("dry_run"):
        raise ValueError("program was built in dry-run mode and carries no coefficients")
    opts = options or SolverOptions()
    t0 = time.perf_counter()
    P, _, A, b, cones, extra = _lowered(program)
    q = np.concatenate([program.q, np.zeros(extra)])
    ctypes = []
    for kind, d in cones:
        if kind == "zero":
            ctypes.append(clarabel.ZeroConeT(d))
        elif kind == "nonneg":
            ctypes.append(clarabel.NonnegativeConeT(d))
        elif kind == "soc":
            ctypes.append(clarabel.SecondOrderConeT(d))
        else:
            ctypes.append(clarabel.PSDTriangleConeT(d))
    settings = clarabel.DefaultSettings()
    settings.verbose = opts.verbose
    settings.tol_feas = min(opts.feas_tol, 1e-8)
    settings.tol_gap_rel = opts.gap_tol
    settings.tol_gap_abs = opts.gap_tol
    settings.max_iter = opts.max_iter
    raw = clarabel.DefaultSolver(P, q, A, b, ctypes, settings).solve()
    elapsed = time.perf_counter() - t0
    solver_status = str(raw.status)
    status = _STATUS.get(solver_status, "numerical-failure")
    info = {"solver": "clarabel", "solver_status": solver_status, "iterations": raw.iterations,
            "solver_time": raw.solve_time, "class": program.classification, "extra_vars": extra}
    if status in ("infeasible", "unbounded"):
        return Solution(status, None, float("nan"), None, elapsed, info)
    x = np.asarray(raw.x)[: program.n]
    resid = check_solution(program, x)
    obj = program.objective_value(x)
    info["solver_objective"] = raw.obj_val + program.constant
    info["dual_objective"] = raw.obj_val_dual + program.constant
    if solver_status == "AlmostSolved" and resid.within(opts.feas_tol):
        status = "optimal"
        info["reduced_accuracy"] = True
    if status == "optimal" and not resid.within(opts.feas_tol):
        log.warning("solver reported %s but residuals are %s", solver_status, resid)
        status = "numerical-failure"
    return Solution(status, x, obj, resid, elapsed, info)
