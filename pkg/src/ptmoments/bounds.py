"""Variance bounds, sample-size calculators and Monte Carlo error sweeps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InsufficientDataError, InvalidArgumentError, ResourceLimitError
from .qstate import PartitionSpec, PureState, pt_moments_exact, reduced_density_matrix
from .randmeas import generate_dataset
from .shadows import estimate, snapshots_from_dataset

MAX_SWEEP_SITES = 8
MAX_SWEEP_RECORDS = 10**8
_CEIL_RTOL = 1e-12


def _ceil(x: float) -> int:
    # absorb rounding noise so exact integers do not round up
    return math.ceil(x * (1.0 - _CEIL_RTOL))


def _check_unit(name, value, closed_top=False):
    ok = 0.0 < value <= 1.0 if closed_top else 0.0 < value < 1.0
    if not ok:
        raise InvalidArgumentError(f"{name} out of range: {value}")


def variance_bound_p2(ab_size: int, p2: float, m: int) -> float:
    """``4 (2^|AB| p2 / M) + 4 (2^(1.5 |AB|) / M)^2``."""
    if ab_size < 1:
        raise InvalidArgumentError("ab_size must be >= 1")
    if m < 2:
        raise InvalidArgumentError("m must be >= 2")
    _check_unit("p2", p2, closed_top=True)
    return 4.0 * (2.0**ab_size * p2 / m) + 4.0 * (2.0 ** (1.5 * ab_size) / m) ** 2


def sample_size_p2(ab_size: int, p2: float, epsilon: float, delta: float) -> int:
    """Records sufficient for ``P[|p2_hat - p2| > epsilon] <= delta``."""
    _check_unit("p2", p2, closed_top=True)
    _check_unit("epsilon", epsilon)
    _check_unit("delta", delta)
    d = 2.0**ab_size
    return _ceil(8.0 * max(d * p2 / (epsilon**2 * delta), d**1.5 / (epsilon * math.sqrt(delta))))


def sample_size_p3(ab_size: int, p2: float, epsilon: float, delta: float) -> int:
    """Records sufficient for ``P[|p3_hat - p3| > epsilon] <= delta``."""
    _check_unit("p2", p2, closed_top=True)
    _check_unit("epsilon", epsilon)
    _check_unit("delta", delta)
    d = 2.0**ab_size
    terms = (
        d * p2**2 / (epsilon**2 * delta),
        d**1.5 * p2 / (epsilon * math.sqrt(delta)),
        d**2 / (epsilon ** (2.0 / 3.0) * delta ** (1.0 / 3.0)),
    )
    return _ceil(39.0 * max(terms))


def trial_seed(seed: int, m: int, trial: int) -> int:
    """Per-trial dataset seed derived from (master seed, M, trial index)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(m), int(trial)))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def exact_statistic(state, partition: PartitionSpec, statistic: str) -> float:
    rho = reduced_density_matrix(state, partition.ab_sites)
    if statistic == "s3":
        return float(np.sum(rho.eigenvalues() ** 3))
    n = int(statistic[1])
    return float(pt_moments_exact(rho, partition, n)[n - 1])


@dataclass(frozen=True)
class SweepPoint:
    m: int
    mean_abs_error: float
    stderr: float
    rmse: float
    trials: int


@dataclass(frozen=True)
class SweepResult:
    statistic: str
    state_label: str
    ab_size: int
    grid: tuple  # SweepPoint per M, increasing
    fitted_slopes: dict = field(default_factory=dict)  # "lower" / "upper" half of the grid
    errors: Optional[dict] = field(default=None, compare=False, repr=False)  # M -> per-trial errors

    def table(self) -> list:
        return [
            {"M": g.m, "mean_abs_err": g.mean_abs_error, "stderr": g.stderr, "trials": g.trials}
            for g in self.grid
        ]


def loglog_slope(ms: Sequence[float], errs: Sequence[float]) -> float:
    """Least-squares slope of log10(err) against log10(M)."""
    if len(ms) < 2:
        return float("nan")
    return float(np.polyfit(np.log10(ms), np.log10(errs), 1)[0])


def _split_slopes(ms, errs) -> dict:
    ms = np.asarray(ms, dtype=float)
    errs = np.asarray(errs, dtype=float)
    mid = math.sqrt(ms[0] * ms[-1])
    lower = ms <= mid * (1 + 1e-12)
    upper = ms >= mid * (1 - 1e-12)
    return {"lower": loglog_slope(ms[lower], errs[lower]), "upper": loglog_slope(ms[upper], errs[upper])}


def _trial_errors(state, partition, statistics, exacts, m, p, trials, seed, ensemble) -> np.ndarray:
    """Signed errors, shape (len(statistics), trials); one dataset per trial."""
    errs = np.empty((len(statistics), trials))
    for trial in range(trials):
        ds = generate_dataset(state, partition.ab_sites, m, p=p, ensemble=ensemble, seed=trial_seed(seed, m, trial))
        snaps = snapshots_from_dataset(ds)
        for k, (stat, exact) in enumerate(zip(statistics, exacts)):
            errs[k, trial] = estimate(snaps, partition, stat, with_error=False).value - exact
    return errs


def error_scaling_sweep(
    state: PureState,
    partition: PartitionSpec,
    statistic: str,
    m_grid: Sequence[int],
    trials: int,
    seed: int,
    ensemble: str = "clifford",
    p: int = 1,
    state_label: str = "",
) -> SweepResult:
    """Mean absolute error of a shadow estimate against the exact value, per M.

    Log-log slopes are fitted separately on the grid points below and above
    the geometric midpoint of the grid.
    """
    if statistic not in ("p2", "p3", "s3"):
        raise InvalidArgumentError(f"unsupported statistic {statistic!r}")
    if trials < 10:
        raise InvalidArgumentError("trials must be >= 10")
    grid = [int(m) for m in m_grid]
    if not grid or any(b <= a for a, b in zip(grid, grid[1:])):
        raise InvalidArgumentError("M grid must be nonempty and strictly increasing")
    order = 2 if statistic == "p2" else 3
    if grid[0] < order:
        raise InsufficientDataError(f"{statistic} needs M >= {order}")
    ab = len(partition.ab_sites)
    if ab > MAX_SWEEP_SITES:
        raise ResourceLimitError(f"sweeps are limited to |AB| <= {MAX_SWEEP_SITES}")
    if sum(grid) * trials * p > MAX_SWEEP_RECORDS:
        raise ResourceLimitError("sweep exceeds the total record budget")
    exact = exact_statistic(state, partition, statistic)
    points = []
    errors = {}
    for m in grid:
        e = _trial_errors(state, partition, [statistic], [exact], m, p, trials, seed, ensemble)[0]
        errors[m] = e
        a = np.abs(e)
        points.append(
            SweepPoint(m, float(a.mean()), float(a.std(ddof=1) / math.sqrt(trials)), float(np.sqrt(np.mean(e**2))), trials)
        )
    slopes = _split_slopes([g.m for g in points], [g.mean_abs_error for g in points])
    return SweepResult(statistic, state_label, ab, tuple(points), slopes, errors)


def budget_split_study(
    state: PureState,
    partition: PartitionSpec,
    total_budget: int,
    p_values: Sequence[int],
    seed: int,
    trials: int = 50,
    statistics: Sequence[str] = ("p2", "p3"),
    ensemble: str = "clifford",
) -> list:
    """Mean absolute error of each statistic for ``M = total_budget / P``."""
    for p in p_values:
        if p < 1 or total_budget % p:
            raise InvalidArgumentError(f"budget {total_budget} is not divisible by P={p}")
    exacts = [exact_statistic(state, partition, stat) for stat in statistics]
    rows = []
    for p in p_values:
        m = total_budget // p
        errs = np.abs(_trial_errors(state, partition, statistics, exacts, m, p, trials, seed, ensemble))
        for stat, e in zip(statistics, errs):
            rows.append(
                {
                    "P": p,
                    "M": m,
                    "statistic": stat,
                    "mean_abs_err": float(e.mean()),
                    "stderr": float(e.std(ddof=1) / math.sqrt(trials)),
                    "trials": trials,
                }
            )
    return rows
