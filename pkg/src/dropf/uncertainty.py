"""Correlated sampling of wind outputs and dynamic line ratings."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .case import Case

MAX_DRAWS_PER_SAMPLE = 10_000
MIN_ACCEPTANCE = 1e-4


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class UncertaintyIndex:
    """Positions of the random vector: wind farms first, then DLR lines."""

    entries: tuple[tuple[str, str], ...]

    def __post_init__(self):
        if len(set(self.entries)) != len(self.entries):
            raise ValueError("duplicate entries in uncertainty index")
        kinds = [k for k, _ in self.entries]
        if kinds != sorted(kinds, key=lambda k: k != "wind"):
            raise ValueError("wind entries must precede line entries")

    @classmethod
    def from_case(cls, case: Case, kept_lines: Iterable[str]) -> "UncertaintyIndex":
        kept = set(kept_lines)
        entries = [("wind", w.id) for w in case.wind_farms]
        entries += [("line", ln.id) for ln in case.lines if ln.id in kept and ln.dlr_enabled]
        return cls(tuple(entries))

    @property
    def dim(self) -> int:
        return len(self.entries)

    @property
    def wind_ids(self) -> list[str]:
        return [i for k, i in self.entries if k == "wind"]

    @property
    def line_ids(self) -> list[str]:
        return [i for k, i in self.entries if k == "line"]

    @property
    def n_wind(self) -> int:
        return len(self.wind_ids)

    def header(self) -> list[str]:
        return [f"{'w' if k == 'wind' else 'l'}:{i}" for k, i in self.entries]

    @classmethod
    def from_header(cls, header: list[str]) -> "UncertaintyIndex":
        entries = []
        for h in header:
            tag, _, ident = h.partition(":")
            if tag not in ("w", "l") or not ident:
                raise ValueError(f"bad sample column {h!r}")
            entries.append(("wind" if tag == "w" else "line", ident))
        return cls(tuple(entries))

    def forecasts(self, case: Case) -> np.ndarray:
        winds = {w.id: w.forecast for w in case.wind_farms}
        lines = {ln.id: ln.forecast_rating for ln in case.lines}
        return np.array([winds[i] if k == "wind" else lines[i] for k, i in self.entries], dtype=float)

    def bounds(self, case: Case) -> tuple[np.ndarray, np.ndarray]:
        """Closed validity box: [0, capacity] for wind, [static rating, inf) for lines."""
        caps = {w.id: w.capacity for w in case.wind_farms}
        slr = {ln.id: ln.static_rating for ln in case.lines}
        lo = np.array([0.0 if k == "wind" else slr[i] for k, i in self.entries])
        hi = np.array([caps[i] if k == "wind" else np.inf for k, i in self.entries])
        return lo, hi


def correlation_matrix(dim: int, rho: float) -> np.ndarray:
    """R_ij = rho^|i-j|."""
    lag = np.abs(np.subtract.outer(np.arange(dim), np.arange(dim)))
    return np.power(float(rho), lag)


@dataclass(frozen=True)
class SampleSpec:
    mean: np.ndarray
    std_factor: np.ndarray
    rho: float
    seed: int

    def __post_init__(self):
        sf = np.asarray(self.std_factor, dtype=float)
        if sf.shape != np.shape(self.mean):
            raise ValueError("std_factor and mean dimensions differ")
        if np.any(sf < 0.5) or np.any(sf > 1.0):
            raise ValueError("std_factor entries must lie in [0.5, 1]")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must satisfy 0 <= rho < 1")

    @classmethod
    def draw(cls, case: Case, index: UncertaintyIndex, rho: float, seed: int) -> "SampleSpec":
        """Spec with forecast means and std factors drawn from U[0.5, 1].

        The factor stream is spawned from ``seed`` so it never overlaps the
        sample stream that uses ``seed`` directly.
        """
        factor_seed = np.random.SeedSequence(seed).spawn(1)[0]
        factors = np.random.default_rng(factor_seed).uniform(0.5, 1.0, size=index.dim)
        return cls(index.forecasts(case), factors, float(rho), int(seed))

    @property
    def covariance(self) -> np.ndarray:
        d = np.asarray(self.mean) * np.asarray(self.std_factor)
        return d[:, None] * correlation_matrix(len(d), self.rho) * d[None, :]

    def to_dict(self) -> dict:
        return {"mean": list(map(float, self.mean)), "std_factor": list(map(float, self.std_factor)),
                "rho": self.rho, "seed": self.seed}


@dataclass(frozen=True)
class SampleSet:
    samples: np.ndarray  # (N, dim)
    index: UncertaintyIndex
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim != 2 or s.shape[1] != self.index.dim or s.shape[0] < 1:
            raise ValueError(f"samples must be an (N>=1, {self.index.dim}) array, got {s.shape}")

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    def subset(self, rows) -> "SampleSet":
        return SampleSet(self.samples[np.asarray(rows)], self.index, dict(self.provenance))

    def with_lines_fixed(self, case: Case) -> "SampleSet":
        """Line-rating components pinned at their static rating."""
        slr = {ln.id: ln.static_rating for ln in case.lines}
        out = np.array(self.samples, dtype=float)
        for j, (k, i) in enumerate(self.index.entries):
            if k == "line":
                out[:, j] = slr[i]
        return SampleSet(out, self.index, {**self.provenance, "lines": "static"})


def validate_sample(case: Case, index: UncertaintyIndex, xi: np.ndarray) -> bool:
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (index.dim,):
        raise ValueError(f"sample has shape {xi.shape}, expected ({index.dim},)")
    lo, hi = index.bounds(case)
    return bool(np.all(xi >= lo) and np.all(xi <= hi))


def _valid_rows(xi: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    return np.all((xi >= lo) & (xi <= hi), axis=1)


def generate_samples(case: Case, index: UncertaintyIndex, spec: SampleSpec, n: int) -> SampleSet:
    """Draw ``n`` valid samples from N(mean, D R D) by whole-vector rejection.

    Draws proceed in fixed-size batches from a single generator seeded by
    ``spec.seed``, so the result depends only on (spec, n).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    mean = np.asarray(spec.mean, dtype=float)
    if mean.shape != (index.dim,):
        raise ValueError("spec dimension does not match the uncertainty index")
    lo, hi = index.bounds(case)
    cov = spec.covariance
    # eigen-factor tolerates the singular rho -> 1 limit better than Cholesky
    w, V = np.linalg.eigh(cov)
    L = V * np.sqrt(np.clip(w, 0.0, None))
    rng = np.random.default_rng(spec.seed)
    accepted: list[np.ndarray] = []
    have = drawn = 0
    cap = MAX_DRAWS_PER_SAMPLE * n
    batch = max(64, 2 * n)
    rejected_by = np.zeros(2 * index.dim, dtype=np.int64)
    while have < n:
        z = rng.standard_normal((batch, index.dim))
        xi = mean + z @ L.T
        drawn += batch
        ok = _valid_rows(xi, lo, hi)
        rejected_by[: index.dim] += (xi < lo).sum(axis=0)
        rejected_by[index.dim:] += (xi > hi).sum(axis=0)
        good = xi[ok]
        accepted.append(good)
        have += len(good)
        if drawn >= cap or (drawn >= 1_000_000 and have / drawn < MIN_ACCEPTANCE):
            if have >= n:
                break
            worst = int(np.argmax(rejected_by))
            kind, ident = index.entries[worst % index.dim]
            rule = ("0 <= wind output" if kind == "wind" else "static rating <= line rating") \
                if worst < index.dim else "wind output <= capacity"
            raise SamplingError(
                f"rejection cap exceeded: accepted {have} of {drawn} draws; "
                f"most rejections from rule '{rule}' on {kind} {ident!r}")
    samples = np.concatenate(accepted)[:n]
    prov = {"seed": spec.seed, "rho": spec.rho, "std_factor": list(map(float, spec.std_factor)),
            "case": case.digest(), "draws": drawn}
    return SampleSet(samples, index, prov)


@dataclass(frozen=True)
class EmpiricalMoments:
    mean: np.ndarray
    covariance: np.ndarray
    n: int


def empirical_moments(samples: SampleSet | np.ndarray) -> EmpiricalMoments:
    """Mean and population (1/N) covariance of the empirical distribution."""
    X = samples.samples if isinstance(samples, SampleSet) else np.asarray(samples, dtype=float)
    N = X.shape[0]
    m = X.mean(axis=0)
    C = X - m
    S = C.T @ C / N
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    if w.size and w.min() < 0:
        floor = -1e-9 * max(float(np.trace(S)), 0.0)
        if w.min() < floor:
            warnings.warn(f"covariance eigenvalue {w.min():.3e} below rounding floor; clipped")
        S = (V * np.clip(w, 0.0, None)) @ V.T
        S = 0.5 * (S + S.T)
    return EmpiricalMoments(m, S, N)


# ---------------------------------------------------------------------------
# CSV + sidecar

def write_samples(path: str | Path, samples: SampleSet, extra: dict | None = None) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(samples.index.header())
        for row in samples.samples:
            w.writerow([repr(float(v)) for v in row])
    side = path.with_suffix(path.suffix + ".json")
    side.write_text(json.dumps({**samples.provenance, **(extra or {})}, indent=2, sort_keys=True) + "\n")
    return side


def read_samples(path: str | Path) -> SampleSet:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty sample file")
    index = UncertaintyIndex.from_header(rows[0])
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None
    side = path.with_suffix(path.suffix + ".json")
    prov = json.loads(side.read_text()) if side.exists() else {}
    return SampleSet(data.reshape(-1, index.dim), index, prov)
