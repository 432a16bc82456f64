"""Hold-out selection of the Wasserstein radius and covariance multiple."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conic import SolverOptions, solve
from .formulations import (AmbiguitySpec, DispatchProblem, ExtractionError, ModelSpec, build_model,
                           extract_decision, with_parameters)
from .risk import PenaltyWeights
from .uncertainty import SampleSet

log = logging.getLogger(__name__)


class TuningError(RuntimeError):
    pass


def _steps(lo: float, hi: float, step: float) -> tuple[float, ...]:
    n = int(round((hi - lo) / step))
    return tuple(round(lo + i * step, 10) for i in range(n + 1))


@dataclass(frozen=True)
class TuneGrid:
    theta_values: tuple[float, ...] = _steps(0.0, 1.0, 0.05)
    tau_values: tuple[float, ...] = _steps(1.0, 10.0, 1.0)
    split_fraction: float = 0.7
    seed: int = 0

    def __post_init__(self):
        th, ta = list(self.theta_values), list(self.tau_values)
        if not th or not ta:
            raise ValueError("grid axes must be non-empty")
        if th != sorted(th) or ta != sorted(ta):
            raise ValueError("grid values must be sorted")
        if th[0] < 0 or ta[0] < 1:
            raise ValueError("theta values must be >= 0 and tau values >= 1")
        if not 0 < self.split_fraction < 1:
            raise ValueError("split_fraction must lie in (0, 1)")

    @classmethod
    def coarse(cls, seed: int = 0) -> "TuneGrid":
        return cls(seed=seed)

    @classmethod
    def paper(cls, seed: int = 0) -> "TuneGrid":
        """theta in [0, 1] step 0.01, tau in [1, 10] step 1."""
        return cls(_steps(0.0, 1.0, 0.01), _steps(1.0, 10.0, 1.0), seed=seed)

    def points(self, kind: str) -> list[tuple[float | None, float | None]]:
        """Grid points in tie-break order; axes a model does not use are skipped."""
        thetas = self.theta_values if kind in ("w_dropf", "wm_dropf") else (None,)
        taus = self.tau_values if kind in ("m_dropf", "wm_dropf") else (None,)
        return [(t, s) for t in thetas for s in taus]


@dataclass(frozen=True)
class TunePoint:
    theta: float | None
    tau: float | None
    train_objective: float
    validation_score: float
    status: str


@dataclass
class TuneResult:
    theta: float | None
    tau: float | None
    points: list[TunePoint] = field(default_factory=list)
    train_rows: np.ndarray | None = None
    validation_rows: np.ndarray | None = None

    def write_csv(self, path: str | Path, header: dict | None = None) -> None:
        with open(path, "w", newline="") as fh:
            for k, v in (header or {}).items():
                fh.write(f"# {k}: {v}\n")
            w = csv.writer(fh)
            w.writerow(["theta", "tau", "train_objective", "validation_score", "status"])
            for p in self.points:
                w.writerow(["" if p.theta is None else p.theta, "" if p.tau is None else p.tau,
                            repr(p.train_objective), repr(p.validation_score), p.status])


def split_indices(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Uniformly random train/validation partition with both sides non-empty."""
    if n < 2:
        raise ValueError("need at least 2 samples to split")
    n_train = min(max(int(round(fraction * n)), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def holdout_tune(problem: DispatchProblem, samples: SampleSet, penalties: PenaltyWeights, grid: TuneGrid,
                 kind: str = "wm_dropf", approx: str = "separable", score: str = "realized",
                 norm: str = "l2", options: SolverOptions | None = None, tie_rtol: float = 1e-9) -> TuneResult:
    """Pick (theta, tau) by solving on 70% of the samples and scoring on the rest.

    ``score="realized"`` uses dispatch cost plus mean validation risk of the
    decision; ``score="objective"`` uses the training optimal value.
    Scores within ``tie_rtol`` (relative) of the incumbent count as ties, so
    solver round-off cannot pull the choice away from the smallest point.
    """
    if kind not in ("w_dropf", "m_dropf", "wm_dropf"):
        raise ValueError(f"model {kind!r} has no tuning parameters")
    if score not in ("realized", "objective"):
        raise ValueError("score must be 'realized' or 'objective'")
    if samples.n < 4:
        raise ValueError("hold-out tuning needs N >= 4")
    tr, va = split_indices(samples.n, grid.split_fraction, grid.seed)
    train = samples.subset(tr)
    valid = samples.samples[va]
    pts = grid.points(kind)
    th0 = pts[0][0] if pts[0][0] is not None else 0.0
    ta0 = pts[0][1] if pts[0][1] is not None else 1.0
    spec = ModelSpec(kind, approx, penalties, AmbiguitySpec(theta=th0, tau=ta0, norm=norm,
                                                            use_wasserstein=kind != "m_dropf",
                                                            use_moment=kind != "w_dropf"))
    base = build_model(problem, spec, train)
    rm = problem.risk_model(penalties)
    best = None
    rows = []
    for theta, tau in pts:
        prog = with_parameters(base, theta=theta, tau=tau)
        sol = solve(prog, options)
        if not sol.optimal:
            rows.append(TunePoint(theta, tau, float("nan"), float("nan"), sol.status))
            continue
        try:
            dec = extract_decision(problem, prog, sol)
        except ExtractionError as exc:
            log.warning("grid point (%s, %s): %s", theta, tau, exc)
            rows.append(TunePoint(theta, tau, sol.objective, float("nan"), "extraction-failed"))
            continue
        if score == "realized":
            val = dec.dispatch_cost(problem.case) + float(np.mean(rm.evaluate(dec, valid)))
        else:
            val = sol.objective
        rows.append(TunePoint(theta, tau, sol.objective, val, "optimal"))
        # ties keep the earliest point (smallest theta, then tau)
        if best is None or val < best.validation_score - tie_rtol * abs(best.validation_score):
            best = rows[-1]
    if best is None:
        raise TuningError(f"all {len(pts)} grid points failed")
    return TuneResult(best.theta, best.tau, rows, tr, va)
