"""Test-problem families and a small benchmark runner.

Families:

* ``example1``: precision ``I/2 + 11^T/2`` on ``[1/2, 1]^d``
* ``example2``: banded precision ``2^-|i-j|`` (``|i-j| <= d/2``) on ``[0, 1]^d``
* ``example3`` / ``example4``: random correlation on ``[-1/2, inf)^d`` / ``[1, inf)^d``
* ``random_corr``: random correlation with user bounds (default ``[-1/2, inf)``)
* ``orthant_half``: covariance ``I/2 + 11^T/2`` on ``[0, inf)^d``, where the
  probability is exactly ``1 / (d + 1)``
* ``tail_family``: ``P(X >= gamma * l)`` for a given covariance (identity by default)
* ``custom``: explicit covariance or matrix and bounds
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import ortho_group

from .errors import NotPositiveDefinite, TiltError
from .estimator import estimate
from .problem import TruncationProblem, factorize
from .tilting import solve_tilting

log = logging.getLogger(__name__)

KINDS = ("example1", "example2", "example3", "example4", "orthant_half", "random_corr",
         "tail_family", "custom")


@dataclass
class ProblemSpec:
    kind: str
    d: int = 2
    lower: list | float | None = None
    upper: list | float | None = None
    seed: int | None = None
    gamma: float = 1.0
    sigma: list | None = None
    matrix: list | None = None
    label: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown problem kind {self.kind!r}; choose from {KINDS}")
        if self.d < 1:
            raise ValueError("d must be positive")
        if not self.label:
            self.label = f"{self.kind}-d{self.d}"

    @classmethod
    def from_dict(cls, data: dict) -> "ProblemSpec":
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


def example1_precision(d: int) -> np.ndarray:
    return 0.5 * np.eye(d) + 0.5 * np.ones((d, d))


def example1_covariance(d: int) -> np.ndarray:
    """Closed-form inverse of ``I/2 + 11^T/2``."""
    return 2.0 * np.eye(d) - (2.0 / (d + 1)) * np.ones((d, d))


def example2_precision(d: int) -> np.ndarray:
    i = np.arange(d)
    lag = np.abs(i[:, None] - i[None, :])
    return np.where(lag <= d / 2, 2.0 ** (-lag.astype(float)), 0.0)


def orthant_covariance(d: int) -> np.ndarray:
    return 0.5 * np.eye(d) + 0.5 * np.ones((d, d))


def random_correlation(d: int, seed=None) -> np.ndarray:
    """Random correlation matrix with eigenvalues uniform on ``{x >= 0 : sum x = d}``.

    A Haar rotation of ``diag(eigenvalues)`` is brought to unit diagonal by
    plane rotations, each of which fixes one diagonal entry.
    """
    if d < 2:
        raise ValueError("d must be at least 2")
    rng = np.random.default_rng(seed)
    lam = d * rng.dirichlet(np.ones(d))
    Q = ortho_group.rvs(d, random_state=rng)
    C = (Q * lam) @ Q.T
    C = 0.5 * (C + C.T)
    for _ in range(d - 1):
        diag = np.diag(C)
        small = np.flatnonzero(diag < 1.0)
        big = np.flatnonzero(diag > 1.0)
        if small.size == 0 or big.size == 0:
            break
        i, j = int(small[0]), int(big[0])
        cii, cjj, cij = C[i, i], C[j, j], C[i, j]
        disc = math.sqrt(max(cij * cij - (cii - 1.0) * (cjj - 1.0), 0.0))
        sgn = 1.0 if cij >= 0 else -1.0
        t = (cii - 1.0) / (cij + sgn * disc)
        c = 1.0 / math.sqrt(1.0 + t * t)
        s = c * t
        R = np.eye(d)
        R[i, i] = c
        R[j, i] = -s
        R[i, j] = s
        R[j, j] = c
        C = R.T @ C @ R
        C[i, i] = 1.0
        C = 0.5 * (C + C.T)
    np.fill_diagonal(C, 1.0)
    return C


def _vec(value, d, default):
    if value is None:
        value = default
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = np.full(d, float(arr))
    if arr.shape != (d,):
        raise ValueError(f"bounds must have length {d}")
    return arr


def make_problem(spec: ProblemSpec) -> TruncationProblem:
    d = spec.d
    kind = spec.kind
    inf = np.inf
    if kind == "example1":
        return TruncationProblem.from_covariance(
            example1_covariance(d), _vec(spec.lower, d, 0.5), _vec(spec.upper, d, 1.0))
    if kind == "example2":
        prec = example2_precision(d)
        try:
            np.linalg.cholesky(prec)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefinite(f"banded precision is not positive definite at d={d}") from exc
        sigma = np.linalg.inv(prec)
        sigma = 0.5 * (sigma + sigma.T)
        return TruncationProblem.from_covariance(
            sigma, _vec(spec.lower, d, 0.0), _vec(spec.upper, d, 1.0))
    if kind == "orthant_half":
        return TruncationProblem.from_covariance(
            orthant_covariance(d), _vec(spec.lower, d, 0.0), _vec(spec.upper, d, inf))
    if kind in ("example3", "example4", "random_corr"):
        default_lower = {"example3": -0.5, "example4": 1.0, "random_corr": -0.5}[kind]
        return TruncationProblem.from_covariance(
            random_correlation(d, spec.seed),
            _vec(spec.lower, d, default_lower), _vec(spec.upper, d, inf))
    if kind == "tail_family":
        sigma = np.eye(d) if spec.sigma is None else np.asarray(spec.sigma, dtype=float)
        direction = _vec(spec.lower, d, 1.0)
        return TruncationProblem.from_covariance(sigma, spec.gamma * direction,
                                                 _vec(spec.upper, d, inf))
    # custom
    if spec.matrix is not None:
        A = np.atleast_2d(np.asarray(spec.matrix, dtype=float))
        m = A.shape[0]
        return TruncationProblem.from_matrix(A, _vec(spec.lower, m, -inf), _vec(spec.upper, m, inf))
    if spec.sigma is None:
        raise ValueError("custom problems need sigma or matrix")
    return TruncationProblem.from_covariance(
        np.asarray(spec.sigma, dtype=float), _vec(spec.lower, d, -inf), _vec(spec.upper, d, inf))


@dataclass
class Cell:
    label: str
    kind: str
    d: int
    seed: int
    method: str
    log_estimate: float = math.nan
    estimate: float = math.nan
    rel_error: float = math.nan
    psi_star: float = math.nan
    accept_rate: float = math.nan
    wall_time_s: float = math.nan
    error: str = ""


def five_number(values) -> dict:
    v = np.asarray([x for x in values if np.isfinite(x)], dtype=float)
    if v.size == 0:
        return {"min": None, "q1": None, "median": None, "q3": None, "max": None, "count": 0}
    q = np.percentile(v, [0, 25, 50, 75, 100])
    return {"min": q[0], "q1": q[1], "median": q[2], "q3": q[3], "max": q[4], "count": int(v.size)}


@dataclass
class Report:
    cells: list[Cell] = field(default_factory=list)

    def summaries(self) -> dict:
        groups: dict[tuple, list[Cell]] = {}
        for c in self.cells:
            groups.setdefault((c.label, c.method), []).append(c)
        out = {}
        for (label, method), cells in groups.items():
            out[f"{label}/{method}"] = {
                "label": label,
                "method": method,
                "d": cells[0].d,
                "rel_error": five_number(c.rel_error for c in cells),
                "accept_rate": five_number(c.accept_rate for c in cells),
                "wall_time_s": five_number(c.wall_time_s for c in cells),
                "failures": sum(1 for c in cells if c.error),
            }
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = list(Cell.__dataclass_fields__)
        writer = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
        writer.writeheader()
        for c in self.cells:
            writer.writerow(asdict(c))
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"schema_version": 1, "summaries": self.summaries()},
                          indent=2, sort_keys=True, default=float)

    def to_tsv(self) -> str:
        """``d``, method, median relative error: one line per group, for plotting."""
        lines = ["# d\tmethod\tmedian_rel_error"]
        for s in self.summaries().values():
            med = s["rel_error"]["median"]
            lines.append(f"{s['d']}\t{s['method']}\t{'nan' if med is None else repr(med)}")
        return "\n".join(lines) + "\n"


def _seeded(spec: ProblemSpec, seed: int) -> ProblemSpec:
    if spec.kind in ("example3", "example4", "random_corr"):
        base = 0 if spec.seed is None else spec.seed
        return ProblemSpec(**{**spec.to_dict(), "seed": base + seed})
    return spec


def run_benchmark(specs, methods=("MET", "SOV"), n: int = 10_000, seeds=(0,)) -> Report:
    """Run every method on every spec and seed; failures are recorded per cell."""
    report = Report()
    for spec in specs:
        for seed in seeds:
            sp = _seeded(spec, seed)
            try:
                fp = factorize(make_problem(sp))
                tilt = solve_tilting(fp)
            except (TiltError, ValueError) as exc:
                for method in methods:
                    report.cells.append(Cell(sp.label, sp.kind, sp.d, seed, method.upper(),
                                             error=f"{type(exc).__name__}: {exc}"))
                continue
            for method in methods:
                cell = Cell(sp.label, sp.kind, sp.d, seed, method.upper())
                t0 = time.perf_counter()
                try:
                    r = estimate(fp, method, n, seed, tilt=tilt)
                    cell.log_estimate = r.log_mean_estimate
                    cell.estimate = r.estimate
                    cell.rel_error = r.rel_error
                    cell.psi_star = tilt.psi_star
                    # expected acceptance probability of the tilted sampler
                    cell.accept_rate = float(np.exp(min(0.0, r.log_mean_estimate - tilt.psi_star)))
                except (TiltError, ValueError, FloatingPointError) as exc:
                    cell.error = f"{type(exc).__name__}: {exc}"
                cell.wall_time_s = time.perf_counter() - t0
                report.cells.append(cell)
    return report


def time_scaling(ds, n: int = 100_000, kind: str = "orthant_half", method: str = "MET",
                 seed: int = 0) -> tuple[list[tuple[int, float]], float]:
    """Wall time of factorise + solve + estimate per ``d`` and the log-log slope."""
    rows = []
    for d in ds:
        spec = ProblemSpec(kind=kind, d=int(d), seed=seed)
        t0 = time.perf_counter()
        fp = factorize(make_problem(spec))
        estimate(fp, method, n, seed)
        rows.append((int(d), time.perf_counter() - t0))
    x = np.log([r[0] for r in rows])
    y = np.log([r[1] for r in rows])
    slope = float(np.polyfit(x, y, 1)[0]) if len(rows) > 1 else math.nan
    return rows, slope


def load_specs(path) -> list[ProblemSpec]:
    """Read a JSON list of spec objects (or ``{"specs": [...]}``)."""
    with open(path) as fh:
        data = json.load(fh)
    if isinstance(data, dict):
        data = data.get("specs", [])
    return [ProblemSpec.from_dict(item) for item in data]


FULL_SCALE = {
    "example3": [ProblemSpec(kind="example3", d=100, seed=0)],
    "example4": [ProblemSpec(kind="example4", d=100, seed=0)],
    "orthant_ds": [10, 100, 1000, 10_000],
    "seeds": list(range(100)),
    "n": 100_000,
}
DESK_SCALE = {
    "example3": [ProblemSpec(kind="example3", d=50, seed=0)],
    "example4": [ProblemSpec(kind="example4", d=50, seed=0)],
    "orthant_ds": [10, 100],
    "seeds": list(range(10)),
    "n": 10_000,
}
