"""Out-of-sample evaluation and repeated DLR/SLR experiments."""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from .case import Case, load_bundled_case, load_case
from .conic import SolverOptions
from .formulations import AmbiguitySpec, DispatchProblem, ExtractionError, ModelSpec, solve_model
from .risk import PENALTY_CASES, DispatchDecision, PenaltyWeights, RiskModel
from .tuning import TuneGrid, TuningError, holdout_tune
from .uncertainty import SampleSet, SampleSpec, SamplingError, generate_samples

log = logging.getLogger(__name__)

# short names accepted in configs and on the command line
MODEL_ALIASES = {"wm": "wm_dropf", "w": "w_dropf", "m": "m_dropf", "saa": "saa", "det": "deterministic",
                 "A1": "wm_dropf", "A2": "w_dropf", "A3": "m_dropf", "A4": "saa"}
MODEL_LABELS = {"wm_dropf": "A1", "w_dropf": "A2", "m_dropf": "A3", "saa": "A4", "deterministic": "DET"}


class ConfigError(ValueError):
    pass


def out_of_sample_performance(decision: DispatchDecision, test_samples: SampleSet | np.ndarray,
                              risk: RiskModel, case: Case | None = None) -> float:
    """Dispatch plus reserve cost plus mean risk over the test samples, $."""
    X = test_samples.samples if isinstance(test_samples, SampleSet) else np.atleast_2d(test_samples)
    dc = decision.dispatch_cost(case if case is not None else risk.case)
    return dc + float(np.mean(risk.evaluate(decision, X)))


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class ExperimentConfig:
    case: str | None = None  # path; None -> bundled 5-bus
    models: tuple[str, ...] = ("wm_dropf", "w_dropf", "m_dropf", "saa")
    approx: str = "separable"
    n_train: int = 20
    n_test: int = 10_000
    repetitions: int = 50
    rho: tuple[float, ...] = (0.4,)
    penalties: PenaltyWeights = field(default_factory=PenaltyWeights)
    seed: int = 0
    dlr_modes: tuple[str, ...] = ("dlr", "slr")
    grid: str = "coarse"  # coarse | paper
    score: str = "realized"
    norm: str = "l2"

    def __post_init__(self):
        if self.repetitions < 1:
            raise ConfigError("repetitions: must be >= 1")
        if self.n_test < 1:
            raise ConfigError("n_test: must be >= 1")
        if self.n_train < 1:
            raise ConfigError("n_train: must be >= 1")
        for m in self.models:
            if m not in MODEL_LABELS:
                raise ConfigError(f"models: unknown model {m!r}")
        tuned = any(m in ("wm_dropf", "w_dropf", "m_dropf") for m in self.models)
        if tuned and self.n_train < 4:
            raise ConfigError("n_train: tuned models need at least 4 samples")
        for mode in self.dlr_modes:
            if mode not in ("dlr", "slr"):
                raise ConfigError(f"dlr_modes: unknown mode {mode!r}")
        if self.approx not in ("exact", "grouped", "separable"):
            raise ConfigError(f"approx: unknown approximation {self.approx!r}")
        if self.grid not in ("coarse", "paper"):
            raise ConfigError("grid: must be 'coarse' or 'paper'")
        for r in self.rho:
            if not 0 <= r < 1:
                raise ConfigError("rho: values must satisfy 0 <= rho < 1")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"{key}: unknown config field")
        kw = dict(data)
        try:
            if "models" in kw:
                kw["models"] = tuple(MODEL_ALIASES.get(m, m) for m in kw["models"])
            if "rho" in kw:
                kw["rho"] = tuple(float(r) for r in np.atleast_1d(kw["rho"]))
            if "dlr_modes" in kw:
                kw["dlr_modes"] = tuple(kw["dlr_modes"])
            if "penalties" in kw:
                pen = kw["penalties"]
                if isinstance(pen, int) or (isinstance(pen, str) and pen.isdigit()):
                    kw["penalties"] = PENALTY_CASES[int(pen)]
                else:
                    kw["penalties"] = PenaltyWeights(**pen)
            for k in ("n_train", "n_test", "repetitions", "seed"):
                if k in kw and (not isinstance(kw[k], int) or isinstance(kw[k], bool)):
                    raise ConfigError(f"{k}: must be an integer")
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            bad = next((k for k in ("penalties", "rho", "models", "dlr_modes") if k in kw), "config")
            raise ConfigError(f"{bad}: {exc}") from None
        return cls(**kw)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["penalties"] = asdict(self.penalties)
        return d

    def load_case(self) -> Case:
        return load_bundled_case() if self.case is None else load_case(self.case)

    def tune_grid(self, seed: int) -> TuneGrid:
        return TuneGrid.paper(seed) if self.grid == "paper" else TuneGrid.coarse(seed)


def repetition_seeds(master: int, rho_index: int, rep: int) -> dict[str, int]:
    """Independent integer seeds for one repetition from a fixed counter scheme."""
    names = ("train", "test", "tune")
    return {name: int(np.random.SeedSequence([master, rho_index, rep, j]).generate_state(1)[0])
            for j, name in enumerate(names)}


# ---------------------------------------------------------------------------
# report

ROW_FIELDS = ("repetition", "model", "dlr_mode", "rho", "N", "theta", "tau", "dispatch_cost", "op",
              "solve_time_s", "status")


@dataclass
class Report:
    rows: list[dict[str, Any]] = field(default_factory=list)
    failures: int = 0
    meta: dict[str, Any] = field(default_factory=dict)

    def ok_rows(self) -> list[dict]:
        """Rows of repetitions in which every model solved."""
        failed = {(r["rho"], r["repetition"]) for r in self.rows if r["status"] != "optimal"}
        return [r for r in self.rows if (r["rho"], r["repetition"]) not in failed]

    def aggregates(self) -> list[dict[str, Any]]:
        groups: dict[tuple, list[dict]] = {}
        for r in self.ok_rows():
            groups.setdefault((r["rho"], r["dlr_mode"], r["model"]), []).append(r)
        out = []
        for (rho, mode, model), rs in groups.items():
            rec: dict[str, Any] = {"rho": rho, "dlr_mode": mode, "model": model, "count": len(rs)}
            for key in ("dispatch_cost", "op", "solve_time_s"):
                v = np.array([r[key] for r in rs], dtype=float)
                rec[f"{key}_avg"] = float(v.mean())
                rec[f"{key}_max"] = float(v.max())
                rec[f"{key}_min"] = float(v.min())
            out.append(rec)
        return out

    def mean(self, model: str, key: str, dlr_mode: str = "dlr", rho: float | None = None) -> float:
        vals = [r[key] for r in self.ok_rows() if r["model"] == model and r["dlr_mode"] == dlr_mode
                and (rho is None or r["rho"] == rho)]
        return float(np.mean(vals)) if vals else float("nan")

    def write_csv(self, path: str | Path, header: dict | None = None) -> None:
        with open(path, "w", newline="") as fh:
            for k, v in (header or {}).items():
                fh.write(f"# {k}: {v}\n")
            w = csv.DictWriter(fh, fieldnames=ROW_FIELDS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: ("" if r[k] is None else r[k]) for k in ROW_FIELDS})

    def to_text(self) -> str:
        """Aligned table: DC and OP (avg/max/min) per model, DLR and SLR side by side."""
        aggs = self.aggregates()
        lines = []
        for rho in sorted({a["rho"] for a in aggs}):
            lines.append(f"rho = {rho}")
            modes = [m for m in ("dlr", "slr") if any(a["dlr_mode"] == m and a["rho"] == rho for a in aggs)]
            head = f"{'':4}{'':6}" + "".join(f"{m.upper():>36}" for m in modes)
            lines.append(head)
            sub = f"{'':4}{'':6}" + "".join(f"{'avg':>12}{'max':>12}{'min':>12}" for _ in modes)
            lines.append(sub)
            for key, tag in (("dispatch_cost", "DC"), ("op", "OP")):
                for model in sorted({a["model"] for a in aggs}, key=lambda m: MODEL_LABELS.get(m, m)):
                    cells = ""
                    for mode in modes:
                        a = next((a for a in aggs if a["rho"] == rho and a["dlr_mode"] == mode
                                  and a["model"] == model), None)
                        if a is None:
                            cells += f"{'-':>12}" * 3
                        else:
                            cells += "".join(f"{a[f'{key}_{s}']:>12.4g}" for s in ("avg", "max", "min"))
                    lines.append(f"{tag:4}{MODEL_LABELS.get(model, model):6}{cells}")
            lines.append("")
        if self.failures:
            lines.append(f"failed repetitions: {self.failures}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# experiment loop

def _ambiguity(kind: str, theta, tau, norm: str) -> AmbiguitySpec:
    return AmbiguitySpec(theta=theta if theta is not None else 0.0, tau=tau if tau is not None else 1.0,
                         norm=norm, use_wasserstein=kind != "m_dropf", use_moment=kind != "w_dropf")


def run_model(problem: DispatchProblem, kind: str, train: SampleSet, test: SampleSet, cfg: ExperimentConfig,
              tune_seed: int, options: SolverOptions | None = None) -> dict[str, Any]:
    """Tune (if the model has parameters), re-solve on all samples, evaluate out of sample."""
    t0 = time.perf_counter()
    theta = tau = None
    if kind in ("wm_dropf", "w_dropf", "m_dropf"):
        res = holdout_tune(problem, train, cfg.penalties, cfg.tune_grid(tune_seed), kind, cfg.approx,
                           cfg.score, cfg.norm, options)
        theta, tau = res.theta, res.tau
    spec = ModelSpec(kind, cfg.approx, cfg.penalties, _ambiguity(kind, theta, tau, cfg.norm))
    result = solve_model(problem, spec, train, options)
    rm = problem.risk_model(cfg.penalties)
    op = out_of_sample_performance(result.decision, test, rm)
    return {"model": kind, "theta": theta, "tau": tau, "dispatch_cost": result.decision.dispatch_cost(problem.case),
            "op": op, "solve_time_s": time.perf_counter() - t0, "status": "optimal",
            "decision": result.decision}


def run_repetition(cfg: ExperimentConfig, case: Case, rho_index: int, rep: int,
                   options: SolverOptions | None = None) -> list[dict[str, Any]]:
    rho = cfg.rho[rho_index]
    seeds = repetition_seeds(cfg.seed, rho_index, rep)
    base = DispatchProblem(case)
    spec = SampleSpec.draw(case, base.index, rho, seeds["train"])
    rows = []
    try:
        train = generate_samples(case, base.index, spec, cfg.n_train)
        test = generate_samples(case, base.index, replace(spec, seed=seeds["test"]), cfg.n_test)
    except SamplingError as exc:
        return [{"repetition": rep, "model": m, "dlr_mode": mode, "rho": rho, "N": cfg.n_train,
                 "theta": None, "tau": None, "dispatch_cost": float("nan"), "op": float("nan"),
                 "solve_time_s": 0.0, "status": f"sampling-failed: {exc}"}
                for mode in cfg.dlr_modes for m in cfg.models]
    for mode in cfg.dlr_modes:
        if mode == "dlr":
            problem, tr, te = base, train, test
        else:
            slr_case = case.with_static_ratings()
            problem = DispatchProblem(slr_case, base.ptdf, base.kept_lines)
            tr, te = train.with_lines_fixed(case), test.with_lines_fixed(case)
        for kind in cfg.models:
            row = {"repetition": rep, "dlr_mode": mode, "rho": rho, "N": cfg.n_train}
            try:
                out = run_model(problem, kind, tr, te, cfg, seeds["tune"], options)
                out.pop("decision")
                row.update(out)
            except (ExtractionError, TuningError, RuntimeError) as exc:
                log.warning("repetition %d %s %s failed: %s", rep, mode, kind, exc)
                row.update({"model": kind, "theta": None, "tau": None, "dispatch_cost": float("nan"),
                            "op": float("nan"), "solve_time_s": 0.0, "status": f"failed: {exc}"})
            rows.append(row)
    return rows


def _run_job(args):
    cfg, case, ri, rep, options = args
    return (ri, rep), run_repetition(cfg, case, ri, rep, options)


def run_experiment(cfg: ExperimentConfig, threads: int = 1, options: SolverOptions | None = None,
                   progress=None) -> Report:
    """All repetitions for every rho; results merged in (rho, repetition) order."""
    case = cfg.load_case()
    jobs = [(cfg, case, ri, rep, options) for ri in range(len(cfg.rho)) for rep in range(cfg.repetitions)]
    results: dict[tuple, list] = {}
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for key, rows in pool.map(_run_job, jobs):
                results[key] = rows
                if progress:
                    progress(key, rows)
    else:
        for job in jobs:
            key, rows = _run_job(job)
            results[key] = rows
            if progress:
                progress(key, rows)
    report = Report(meta={"config": cfg.to_dict(), "case": case.digest()})
    for key in sorted(results):
        report.rows.extend(results[key])
    failed = {(r["rho"], r["repetition"]) for r in report.rows if r["status"] != "optimal"}
    report.failures = len(failed)
    return report
