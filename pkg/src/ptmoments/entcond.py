"""Moment-based entanglement conditions and the Werner-state suite.

All verdicts use strict inequalities with a tie tolerance of ``1e-12``: a
tie counts as "not violated", so numerical noise never certifies
entanglement.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidArgumentError, ResourceLimitError, UndefinedRatioError
from .qstate import (
    NEGATIVITY_TOL,
    DensityMatrix,
    PartitionSpec,
    negativity,
    pt_moments_exact,
    reduced_density_matrix,
)

TIE_TOL = 1e-12
MAX_GENERALIZED_ORDER = 5
MAX_WERNER_DIM = 12
ALPHA_STAR_TOL = 1e-9


@dataclass(frozen=True)
class ConditionReport:
    negativity: float
    p2: float
    p3: float
    p3_ppt_margin: float  # 1 - p3 / p2^2
    purity_gap: float  # Tr rho_AB^2 - Tr rho_A^2
    ppt_violated: bool
    p3_ppt_violated: bool
    purity_condition_met: bool

    def to_record(self, **labels) -> dict:
        rec = dict(labels)
        rec.update(asdict(self))
        return rec


def p3_ppt_test(p2: float, p3: float) -> bool:
    """True when ``p3 < p2^2``, which rules out a PPT state (hence entangled)."""
    if not p2 > 0:
        raise InvalidArgumentError(f"p2 must be positive, got {p2}")
    return bool(p3 < p2 * p2 - TIE_TOL)


def generalized_moment_test(moments: Sequence[float], p: int) -> bool:
    """Violation of ``p_{p-1}^{p-1} <= p_p^{p-2}``.

    ``moments`` lists ``p_1, p_2, ...``; for ``p = 3`` this is
    :func:`p3_ppt_test`.
    """
    if not 3 <= p <= MAX_GENERALIZED_ORDER:
        raise InvalidArgumentError(f"order p must be in [3, {MAX_GENERALIZED_ORDER}], got {p}")
    if len(moments) < p:
        raise InvalidArgumentError(f"moments up to p_{p} required, got {len(moments)}")
    if p == 3:
        return p3_ppt_test(moments[1], moments[2])
    lhs = float(moments[p - 2]) ** (p - 1)
    rhs = float(moments[p - 1]) ** (p - 2)
    return bool(lhs > rhs + TIE_TOL)


def f3_value(p1: float, p2: float, p3: float, a: float) -> float:
    """``-p3 + 2 a p2 - a^2 p1``; positive values signal a non-PPT state."""
    return -p3 + 2.0 * a * p2 - a * a * p1


def optimal_a(p1: float, p2: float) -> float:
    if p1 == 0:
        raise InvalidArgumentError("p1 must be nonzero")
    return p2 / p1


def f3(x, a: float):
    """Pointwise polynomial ``-x^3 + 2 a x^2 - a^2 x = -x (x - a)^2``."""
    x = np.asarray(x, dtype=float)
    return -x * (x - a) ** 2


def purity_condition(purity_a: float, purity_ab: float) -> bool:
    """True when ``Tr rho_A^2 < Tr rho_AB^2``, which implies A-B entanglement."""
    for name, val in (("purity_a", purity_a), ("purity_ab", purity_ab)):
        if not 0.0 < val <= 1.0 + TIE_TOL:
            raise InvalidArgumentError(f"{name} must lie in (0, 1], got {val}")
    return bool(purity_a < purity_ab - TIE_TOL)


def r3_ratio(p3: float, s3: float) -> float:
    """``R3 = -log2(p3 / s3)``, defined only for positive ``p3`` and ``s3``."""
    if not (p3 > 0 and s3 > 0):
        raise UndefinedRatioError(f"R3 undefined for p3={p3}, s3={s3}")
    return -math.log2(p3 / s3)


def schatten_norm(x: np.ndarray, p: float) -> float:
    if not p >= 1:
        raise InvalidArgumentError(f"Schatten order must be >= 1, got {p}")
    lam = np.abs(np.linalg.eigvalsh(np.asarray(x)))
    if math.isinf(p):
        return float(lam.max())
    return float(np.sum(lam**p) ** (1.0 / p))


def compare_conditions(rho: DensityMatrix, partition: PartitionSpec) -> ConditionReport:
    """Exact negativity, p3-PPT margin and purity gap for ``rho`` on ``partition``.

    ``rho`` may cover more sites than ``A u B``; it is reduced first.
    """
    if tuple(sorted(rho.sites)) != tuple(sorted(partition.ab_sites)):
        rho = reduced_density_matrix(rho, partition.ab_sites)
    moments = pt_moments_exact(rho, partition, 3)
    p2, p3 = float(moments[1]), float(moments[2])
    neg = negativity(rho, partition)
    purity_a = reduced_density_matrix(rho, partition.a_sites).purity()
    return ConditionReport(
        negativity=neg,
        p2=p2,
        p3=p3,
        p3_ppt_margin=1.0 - p3 / (p2 * p2),
        purity_gap=p2 - purity_a,
        ppt_violated=neg > NEGATIVITY_TOL,
        p3_ppt_violated=p3_ppt_test(p2, p3),
        purity_condition_met=purity_condition(purity_a, p2),
    )


# ---------------------------------------------------------------------------
# Werner states


@dataclass(frozen=True)
class WernerSpec:
    d: int
    alpha: float

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 2:
            raise InvalidArgumentError(f"local dimension must be an integer >= 2, got {self.d}")
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidArgumentError(f"alpha must lie in [0, 1], got {self.alpha}")
        object.__setattr__(self, "d", int(self.d))
        object.__setattr__(self, "alpha", float(self.alpha))


def swap_operator(d: int) -> np.ndarray:
    """``F |i j> = |j i>`` on ``d x d``."""
    f = np.zeros((d * d, d * d))
    for i in range(d):
        for j in range(d):
            f[j * d + i, i * d + j] = 1.0
    return f


def werner_eigenvalues(spec: WernerSpec):
    """``(lambda_plus, lambda_minus)`` on the symmetric and antisymmetric subspaces."""
    d = spec.d
    return spec.alpha / math.comb(d + 1, 2), (1.0 - spec.alpha) / math.comb(d, 2)


def werner_state(spec: WernerSpec) -> DensityMatrix:
    d = spec.d
    if d > MAX_WERNER_DIM:
        raise ResourceLimitError(f"Werner state with d={d} exceeds d <= {MAX_WERNER_DIM}")
    f = swap_operator(d)
    eye = np.eye(d * d)
    lam_p, lam_m = werner_eigenvalues(spec)
    rho = lam_p * 0.5 * (eye + f) + lam_m * 0.5 * (eye - f)
    return DensityMatrix((d, d), rho)


def werner_pt_eigenvalues(spec: WernerSpec):
    """``(lambda_0, lambda_1)`` of the partial transpose, multiplicities 1 and d^2 - 1."""
    d, a = spec.d, spec.alpha
    return (2.0 * a - 1.0) / d, (1.0 + d - 2.0 * a) / (d * (d * d - 1))


def werner_pt_moment(spec: WernerSpec, n: int) -> float:
    if n < 1:
        raise InvalidArgumentError("n must be >= 1")
    lam0, lam1 = werner_pt_eigenvalues(spec)
    return lam0**n + (spec.d**2 - 1) * lam1**n


def werner_moment(spec: WernerSpec, n: int) -> float:
    """``Tr rho_W^n`` from the closed-form spectrum."""
    d = spec.d
    lam_p, lam_m = werner_eigenvalues(spec)
    return math.comb(d + 1, 2) * lam_p**n + math.comb(d, 2) * lam_m**n


def werner_alpha_star(d: int, tol: float = ALPHA_STAR_TOL) -> Optional[float]:
    """Root of ``p3(alpha)`` in ``(0, 1/2)`` by bisection, or None without a sign change."""
    lo, hi = 0.0, 0.5
    f_lo = werner_pt_moment(WernerSpec(d, lo), 3)
    f_hi = werner_pt_moment(WernerSpec(d, hi), 3)
    if not (f_lo < 0 < f_hi):
        return None
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if werner_pt_moment(WernerSpec(d, mid), 3) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class WernerRow:
    alpha: float
    p2: float
    p3: float
    ppt_violated: bool
    p3_ppt_violated: bool

    @property
    def agree(self) -> bool:
        return self.ppt_violated == self.p3_ppt_violated


@dataclass(frozen=True)
class WernerSweep:
    d: int
    rows: tuple
    alpha_star: Optional[float]

    @property
    def disagreements(self) -> list:
        return [r.alpha for r in self.rows if not r.agree]

    def table(self) -> list:
        return [
            {
                "d": self.d,
                "alpha": r.alpha,
                "p2": r.p2,
                "p3": r.p3,
                "ppt_violated": r.ppt_violated,
                "p3_ppt_violated": r.p3_ppt_violated,
                "agree": r.agree,
            }
            for r in self.rows
        ]


def werner_equivalence_sweep(d: int, alpha_grid: Sequence[float]) -> WernerSweep:
    """Exact PPT verdict against the p3-PPT verdict on a grid of ``alpha``."""
    if not 2 <= d <= 8:
        raise InvalidArgumentError(f"d must lie in [2, 8], got {d}")
    rows = []
    for alpha in alpha_grid:
        spec = WernerSpec(d, float(alpha))
        lam0, _ = werner_pt_eigenvalues(spec)
        p2 = werner_pt_moment(spec, 2)
        p3 = werner_pt_moment(spec, 3)
        rows.append(WernerRow(spec.alpha, p2, p3, lam0 < -NEGATIVITY_TOL, p3_ppt_test(p2, p3)))
    return WernerSweep(d, tuple(rows), werner_alpha_star(d))


@dataclass(frozen=True)
class R3Witness:
    alpha: float
    p3: float
    s3: float
    r3: float


def werner_r3_nonmonotone_check(d: int, points: int = 100) -> Optional[R3Witness]:
    """Separable Werner state with ``0 < p3 < Tr rho^3`` (so ``R3 > 0``), if any.

    Scans ``alpha`` on ``points`` grid points of ``[1/2, 1/2 + 1/(2d))``;
    Werner states with ``alpha >= 1/2`` are separable.
    """
    for alpha in np.linspace(0.5, 0.5 + 1.0 / (2 * d), points, endpoint=False):
        spec = WernerSpec(d, float(alpha))
        p3 = werner_pt_moment(spec, 3)
        s3 = werner_moment(spec, 3)
        if 0 < p3 < s3:
            return R3Witness(spec.alpha, p3, s3, r3_ratio(p3, s3))
    return None
