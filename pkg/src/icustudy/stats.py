"""Self-contained statistical kernel.

Five-number summaries, one-way and two-way ANOVA F-ratios, chi-squared and
t tests, and the tail probabilities they need.  The two-way analysis follows
the naive unweighted cell-means decomposition (equal stratum weights,
harmonic-mean cell size) rather than a regression-based type II/III scheme;
this keeps every sum of squares non-negative and makes the identity

    S_cells = S1_A + S1_B + S1_AB

hold exactly even in heavily unbalanced layouts.  Two namings are carried
for the two-way F's: primary = treatment main effect, secondary =
treatment x subclass interaction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import (
    AllCellsEmptyForTreatment,
    EmptyInput,
    InvalidDof,
    ZeroMarginal,
    ZeroVariance,
)


@dataclass(frozen=True)
class FiveNumber:
    min: float
    q1: float
    median: float
    q3: float
    max: float

    def as_tuple(self):
        return (self.min, self.q1, self.median, self.q3, self.max)


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    dof: tuple
    flag: str | None = None


@dataclass(frozen=True)
class AnovaResult:
    """Two-way 2xK result: primary = main effect, secondary = interaction."""

    f_primary: float
    f_secondary: float
    dof_primary: tuple
    dof_secondary: tuple
    ss: dict
    warnings: tuple = field(default=())

    @property
    def dof(self):
        """(between, within) for each F, flattened to four integers."""
        return self.dof_primary + self.dof_secondary


# --- tail probabilities ------------------------------------------------------


def chi2_tail(statistic: float, df: float) -> float:
    """Upper-tail probability of a chi-squared distribution."""
    if df <= 0:
        raise InvalidDof(f"chi-squared dof must be positive, got {df}")
    if statistic <= 0:
        return 1.0
    return float(special.gammaincc(df / 2.0, statistic / 2.0))


def t_tail_two_sided(statistic: float, df: float) -> float:
    """Two-sided tail probability of Student's t."""
    if df <= 0:
        raise InvalidDof(f"t dof must be positive, got {df}")
    t2 = statistic * statistic
    return float(special.betainc(df / 2.0, 0.5, df / (df + t2)))


def f_tail(statistic: float, d1: float, d2: float) -> float:
    """Upper-tail probability of an F distribution."""
    if d1 <= 0 or d2 <= 0:
        raise InvalidDof(f"F dofs must be positive, got ({d1}, {d2})")
    if statistic <= 0:
        return 1.0
    return float(special.betainc(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * statistic)))


def normal_tail_two_sided(statistic: float) -> float:
    return float(special.erfc(abs(statistic) / np.sqrt(2.0)))


def tail_probability(dist: str, statistic: float, *, df=None, d1=None, d2=None) -> float:
    """Dispatch to the tail function for `dist` in {"chi2", "t", "f"}.

    Upper tail for chi2 and F, two-sided for t.
    """
    if not np.isfinite(statistic):
        raise InvalidDof(f"statistic must be finite, got {statistic}")
    if dist == "chi2":
        return chi2_tail(statistic, df)
    if dist == "t":
        return t_tail_two_sided(statistic, df)
    if dist == "f":
        return f_tail(statistic, d1, d2)
    raise InvalidDof(f"unknown distribution {dist!r}")


def evidence_band(p: float) -> str:
    """Qualitative evidence label for a p-value.

    >0.1 absence; (0.05,0.1] weak; (0.01,0.05] moderate; [0.001,0.01] strong;
    <0.001 very strong evidence against the null hypothesis.
    """
    if p > 0.1:
        return "absence"
    if p > 0.05:
        return "weak"
    if p > 0.01:
        return "moderate"
    if p >= 0.001:
        return "strong"
    return "very strong"


# --- summaries ---------------------------------------------------------------


def five_number_summary(xs) -> FiveNumber:
    """Min, lower quartile, median, upper quartile, max.

    Quartiles interpolate linearly at positions 1 + (n-1) * q.
    """
    xs = np.asarray(xs, dtype=float)
    if xs.size == 0:
        raise EmptyInput("five_number_summary needs at least one value")
    q = np.quantile(xs, [0.0, 0.25, 0.5, 0.75, 1.0])
    return FiveNumber(*(float(v) for v in q))


# --- ANOVA -------------------------------------------------------------------


def one_way_anova(groups) -> TestResult:
    """F test that several group means are equal.

    F = (S1 / (k-1)) / (S2 / (n-k)) with S1 the between-group and S2 the
    within-group sum of squares.  Degenerate layouts (S2 == 0) are flagged
    rather than raised: F is +inf when the groups differ, NaN when every
    value is identical.
    """
    arrays = [np.asarray(g, dtype=float) for g in groups]
    if len(arrays) < 2 or any(a.size == 0 for a in arrays):
        raise EmptyInput("one_way_anova needs at least two non-empty groups")
    n = sum(a.size for a in arrays)
    k = len(arrays)
    if n <= k:
        raise EmptyInput("one_way_anova needs more observations than groups")
    grand = sum(a.sum() for a in arrays) / n
    s1 = sum(a.size * (a.mean() - grand) ** 2 for a in arrays)
    s2 = sum(((a - a.mean()) ** 2).sum() for a in arrays)
    dof = (k - 1, n - k)
    tol = _ss_noise_floor(np.concatenate(arrays))
    if s2 <= tol:
        if s1 <= tol:
            return TestResult(float("nan"), float("nan"), dof, flag="degenerate")
        return TestResult(float("inf"), 0.0, dof, flag="degenerate")
    f = (s1 / dof[0]) / (s2 / dof[1])
    return TestResult(float(f), f_tail(f, *dof), dof)


def _ss_noise_floor(values: np.ndarray) -> float:
    """Sums of squares below this are rounding noise, not variation."""
    scale = max(1.0, float(np.max(np.abs(values))) if values.size else 1.0)
    return values.size * (1e-9 * scale) ** 2


def _safe_f(ss_num: float, dof_num: int, ss_den: float, dof_den: int, tol: float, warnings: list) -> float:
    if dof_num <= 0 or dof_den <= 0:
        warnings.append("degenerate dof")
        return float("nan")
    if ss_den <= tol:
        if ss_num <= tol:
            return 0.0
        warnings.append("zero within-cell variance")
        return float("inf")
    # tiny negative numerators are rounding noise from the decomposition
    return max(ss_num, 0.0) / dof_num / (ss_den / dof_den)


def two_way_anova_2xk(values, treatment, subclass) -> AnovaResult:
    """Two-way 2 x K analysis of variance on an unbalanced layout.

    Parameters
    ----------
    values : array of observations
    treatment : binary labels (two distinct values)
    subclass : stratum labels (K >= 2 distinct values)

    Unweighted cell-means decomposition: row/column effects are computed
    from cell means with equal stratum weight and scaled by the harmonic
    mean cell size; the error term is the pooled within-cell sum of
    squares.  Strata missing one treatment arm are dropped from the
    analysis and reported in `warnings`.
    """
    values = np.asarray(values, dtype=float)
    treatment = np.asarray(treatment)
    subclass = np.asarray(subclass)
    if not (values.shape == treatment.shape == subclass.shape):
        raise EmptyInput("values, treatment and subclass must have equal length")
    t_levels = np.unique(treatment)
    s_levels = np.unique(subclass)
    if t_levels.size != 2:
        raise EmptyInput(f"treatment must have exactly two levels, got {t_levels.size}")
    if s_levels.size < 2:
        raise EmptyInput("subclass must have at least two levels")

    warnings: list[str] = []
    cells = {}
    complete = []
    for s in s_levels:
        in_s = subclass == s
        a = values[in_s & (treatment == t_levels[0])]
        b = values[in_s & (treatment == t_levels[1])]
        if a.size == 0 or b.size == 0:
            warnings.append(f"stratum {s} has an empty treatment arm; excluded")
            continue
        cells[(0, s)] = a
        cells[(1, s)] = b
        complete.append(s)
    if not complete:
        raise AllCellsEmptyForTreatment("no stratum has observations in both arms")

    kk = len(complete)
    n_used = sum(c.size for c in cells.values())
    cell_mean = {key: c.mean() for key, c in cells.items()}
    # harmonic mean cell size over the 2*K complete cells
    n_h = (2 * kk) / sum(1.0 / c.size for c in cells.values())

    row_mean = [np.mean([cell_mean[(i, s)] for s in complete]) for i in (0, 1)]
    col_mean = {s: (cell_mean[(0, s)] + cell_mean[(1, s)]) / 2.0 for s in complete}
    grand = (row_mean[0] + row_mean[1]) / 2.0

    s1_a = n_h * kk * sum((m - grand) ** 2 for m in row_mean)
    s1_b = n_h * 2 * sum((m - grand) ** 2 for m in col_mean.values())
    s_cells = n_h * sum((m - grand) ** 2 for m in cell_mean.values())
    s1_ab = s_cells - s1_a - s1_b
    s2 = sum(((c - c.mean()) ** 2).sum() for c in cells.values())
    total = float(((values - values.mean()) ** 2).sum())

    dof_err = n_used - 2 * kk
    dof_primary = (1, dof_err)
    dof_secondary = (kk - 1, dof_err)
    tol = _ss_noise_floor(np.concatenate([c for c in cells.values()]))
    f_primary = _safe_f(s1_a, 1, s2, dof_err, tol, warnings)
    f_secondary = _safe_f(s1_ab, kk - 1, s2, dof_err, tol, warnings)

    return AnovaResult(
        f_primary=float(f_primary),
        f_secondary=float(f_secondary),
        dof_primary=dof_primary,
        dof_secondary=dof_secondary,
        ss={
            "total": total,
            "s_cells": float(s_cells),
            "s1_a": float(s1_a),
            "s1_b": float(s1_b),
            "s1_ab": float(s1_ab),
            "s2_within": float(s2),
        },
        warnings=tuple(warnings),
    )


# --- classical tests ----------------------------------------------------------


def chi_squared_2x2(counts, yates: bool = False) -> TestResult:
    """Pearson chi-squared test of homogeneity on a 2x2 count table.

    No continuity correction unless `yates` is set.
    """
    o = np.asarray(counts, dtype=float)
    if o.shape != (2, 2) or (o < 0).any():
        raise EmptyInput("chi_squared_2x2 needs a 2x2 table of non-negative counts")
    rows = o.sum(axis=1)
    cols = o.sum(axis=0)
    n = o.sum()
    if (rows <= 0).any() or (cols <= 0).any():
        raise ZeroMarginal("chi-squared table has a zero marginal")
    e = np.outer(rows, cols) / n
    diff = np.abs(o - e)
    if yates:
        diff = np.maximum(diff - 0.5, 0.0)
    stat = float((diff**2 / e).sum())
    return TestResult(stat, chi2_tail(stat, 1), (1,))


def t_test_two_sample(a, b, variant: str = "welch") -> TestResult:
    """Two-sided two-sample t test; `variant` in {"welch", "student"}."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise EmptyInput("t test needs at least two observations per group")
    va = a.var(ddof=1)
    vb = b.var(ddof=1)
    if variant == "welch":
        denom2 = va / a.size + vb / b.size
        if denom2 <= 0:
            raise ZeroVariance("both groups have zero variance")
        stat = (a.mean() - b.mean()) / np.sqrt(denom2)
        df = denom2**2 / (
            (va / a.size) ** 2 / (a.size - 1) + (vb / b.size) ** 2 / (b.size - 1)
        )
    elif variant == "student":
        pooled = ((a.size - 1) * va + (b.size - 1) * vb) / (a.size + b.size - 2)
        if pooled <= 0:
            raise ZeroVariance("pooled variance is zero")
        stat = (a.mean() - b.mean()) / np.sqrt(pooled * (1 / a.size + 1 / b.size))
        df = a.size + b.size - 2
    else:
        raise EmptyInput(f"unknown t-test variant {variant!r}")
    return TestResult(float(stat), t_tail_two_sided(stat, df), (float(df),))
