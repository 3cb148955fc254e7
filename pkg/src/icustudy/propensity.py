"""Propensity scoring, quintile stratification, covariate balance and the
iterative model-refinement loop.

Scores are fitted treatment probabilities from a logistic model.  Patients
are ranked by score and split into five contiguous blocks; balance of each
of the 55 covariates is then measured with a 2 x 5 analysis of variance
whose two F-ratios are reported as the primary (treatment main) and
secondary (treatment x subclass interaction) effects, next to the one-way
F computed prior to subclassification.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import AllCellsEmptyForTreatment, NotConverged, RankDeficient, TooFewPatients
from .group import COVARIATE_INDICES, StudyGroup
from .regress import LogitFit, ModelSpec, fit_logistic, interaction, main, square
from .stats import FiveNumber, five_number_summary, one_way_anova, two_way_anova_2xk

log = logging.getLogger(__name__)

N_STRATA = 5
SCORE_CLAMP = 1e-12


@dataclass
class Stratification:
    scores: np.ndarray          # fitted probability per patient, group order
    assignment: np.ndarray      # quintile 1..K per patient, group order
    ranges: list                # per-quintile (low, high) observed score bounds

    @property
    def n_strata(self) -> int:
        return len(self.ranges)


@dataclass
class CovariateBalance:
    index: int                  # variable index (x2..x56)
    f_pre: float                # one-way F prior to subclassification
    f_primary: float
    f_secondary: float
    warnings: tuple = ()


@dataclass
class BalanceReport:
    covariates: list
    summary_pre: FiveNumber
    summary_primary: FiveNumber
    summary_secondary: FiveNumber

    def f_primary_of(self, index: int) -> float:
        for c in self.covariates:
            if c.index == index:
                return c.f_primary
        raise KeyError(index)


@dataclass
class RefinementAttempt:
    variable: int
    form: str                   # "main" | "square" | "interaction(xJ)"
    f_before: float
    f_after: float
    accepted: bool


@dataclass
class QuintileOutcome:
    quintile: int
    score_low: float
    score_high: float
    n_treated: int
    n_untreated: int
    mortality_pct_treated: float | None
    mortality_pct_untreated: float | None
    mean_los_treated: float | None
    mean_los_untreated: float | None


def propensity_scores(fit: LogitFit, group: StudyGroup, spec: ModelSpec) -> np.ndarray:
    """Fitted treatment probabilities, clamped away from 0 and 1."""
    if not fit.converged:
        raise NotConverged("propensity fit did not converge")
    eta = fit.linear_predictor(spec.design_matrix(group))
    return np.clip(expit(eta), SCORE_CLAMP, 1.0 - SCORE_CLAMP)


def stratify_quintiles(scores: np.ndarray, keys, n_strata: int = N_STRATA) -> Stratification:
    """Rank patients by score and cut into contiguous equal blocks.

    Block sizes follow the largest-remainder rule with remainders going to
    the highest quintiles; ties in score are broken by patient key so the
    split is deterministic.
    """
    scores = np.asarray(scores, dtype=float)
    n = scores.size
    if n < n_strata:
        raise TooFewPatients(f"need at least {n_strata} patients, got {n}")
    order = sorted(range(n), key=lambda i: (scores[i], keys[i]))
    base, rem = divmod(n, n_strata)
    sizes = [base] * n_strata
    for q in range(n_strata - rem, n_strata):
        sizes[q] += 1
    assignment = np.zeros(n, dtype=int)
    ranges = []
    pos = 0
    for q, size in enumerate(sizes, start=1):
        block = order[pos : pos + size]
        assignment[block] = q
        block_scores = scores[block]
        ranges.append((float(block_scores.min()), float(block_scores.max())))
        pos += size
    return Stratification(scores=scores, assignment=assignment, ranges=ranges)


def assess_balance(group: StudyGroup, strat: Stratification) -> BalanceReport:
    """Per-covariate balance: one-way F before stratification and the
    two-way primary/secondary F's within it.  Degenerate covariates are
    carried with warnings instead of failing the report."""
    treated = group.treated
    out = []
    for idx in COVARIATE_INDICES:
        values = group.col(idx)
        pre = one_way_anova([values[treated], values[~treated]])
        f_pre = pre.statistic
        if pre.flag == "degenerate" and math.isnan(f_pre):
            f_pre = 0.0
        warnings: tuple = ()
        try:
            res = two_way_anova_2xk(values, treated.astype(int), strat.assignment)
            f_primary, f_secondary = res.f_primary, res.f_secondary
            warnings = res.warnings
        except AllCellsEmptyForTreatment as exc:
            f_primary = f_secondary = float("nan")
            warnings = (str(exc),)
        out.append(CovariateBalance(idx, float(f_pre), f_primary, f_secondary, warnings))

    def _summary(values):
        finite = [v for v in values if math.isfinite(v)]
        return five_number_summary(finite if finite else [float("nan")])

    return BalanceReport(
        covariates=out,
        summary_pre=_summary([c.f_pre for c in out]),
        summary_primary=_summary([c.f_primary for c in out]),
        summary_secondary=_summary([c.f_secondary for c in out]),
    )


def _covariate_f_primary(group: StudyGroup, strat: Stratification, index: int) -> float:
    values = group.col(index)
    try:
        res = two_way_anova_2xk(values, group.treated.astype(int), strat.assignment)
    except AllCellsEmptyForTreatment:
        return float("nan")
    return res.f_primary


def _fit_and_stratify(group: StudyGroup, spec: ModelSpec):
    y = (group.col(1) > 0).astype(float)
    fit = fit_logistic(group, spec, y)
    if not fit.converged:
        raise NotConverged(f"propensity fit for {spec.to_text()!r} did not converge")
    scores = propensity_scores(fit, group, spec)
    return fit, stratify_quintiles(scores, group.keys)


def refine_model(
    group: StudyGroup,
    spec: ModelSpec,
    strat: Stratification | None = None,
    fraction: float = 0.25,
    max_passes: int = 1,
):
    """One-pass (optionally iterated) balance-driven model refinement.

    The top `fraction` of excluded covariates ranked by current primary
    F-ratio are tried in order; for each, the main effect, then its square,
    then interactions with in-model main effects are added, keeping the
    first form that strictly lowers that covariate's own primary F under
    the re-fitted, re-stratified model.  Every attempt is logged.
    """
    if strat is None:
        _, strat = _fit_and_stratify(group, spec)
    attempts: list[RefinementAttempt] = []
    current_spec = spec
    current_strat = strat

    for _ in range(max_passes):
        in_model = set(current_spec.main_indices())
        excluded = [i for i in COVARIATE_INDICES if i not in in_model]
        if not excluded:
            break
        ranked = sorted(
            excluded,
            key=lambda i: (-_nan_low(_covariate_f_primary(group, current_strat, i)), i),
        )
        # the candidate budget is the top fraction of the excluded pool,
        # rounded down (44 excluded -> 11 candidates)
        n_candidates = max(1, math.floor(fraction * len(excluded)))
        candidates = ranked[:n_candidates]
        accepted_any = False

        for var in candidates:
            forms = [("main", main(var)), ("square", square(var))]
            for partner in sorted(current_spec.main_indices()):
                if partner != var:
                    forms.append((f"interaction(x{partner})", interaction(var, partner)))
            accepted = False
            for form_name, term in forms:
                if current_spec.has(term):
                    continue
                f_before = _covariate_f_primary(group, current_strat, var)
                try:
                    trial_spec = current_spec.with_term(term)
                    _, trial_strat = _fit_and_stratify(group, trial_spec)
                except (RankDeficient, NotConverged, np.linalg.LinAlgError) as exc:
                    log.warning("refinement: x%d %s skipped (%s)", var, form_name, exc)
                    attempts.append(
                        RefinementAttempt(var, form_name, f_before, float("nan"), False)
                    )
                    continue
                f_after = _covariate_f_primary(group, trial_strat, var)
                improved = (
                    math.isfinite(f_after)
                    and math.isfinite(f_before)
                    and f_after < f_before
                )
                attempts.append(
                    RefinementAttempt(var, form_name, f_before, f_after, improved)
                )
                if improved:
                    current_spec = trial_spec
                    current_strat = trial_strat
                    accepted = True
                    accepted_any = True
                    break
            if accepted:
                continue
        if not accepted_any:
            break

    return current_spec, current_strat, attempts


def _nan_low(value: float) -> float:
    return value if math.isfinite(value) else float("-inf")


def strata_outcome_table(group: StudyGroup, strat: Stratification) -> list:
    """Per-quintile outcome rows: counts, death percentage and mean length
    of stay for each arm; an empty arm reports n=0 with blank statistics."""
    mortality = group.col(57) > 0
    los = group.col(58)
    treated = group.treated
    rows = []
    for q in range(1, strat.n_strata + 1):
        in_q = strat.assignment == q
        low, high = strat.ranges[q - 1]
        stats_by_arm = []
        for arm_mask in (in_q & treated, in_q & ~treated):
            count = int(arm_mask.sum())
            if count == 0:
                stats_by_arm.append((0, None, None))
            else:
                stats_by_arm.append(
                    (
                        count,
                        float(100.0 * mortality[arm_mask].mean()),
                        float(los[arm_mask].mean()),
                    )
                )
        (n_t, mort_t, los_t), (n_u, mort_u, los_u) = stats_by_arm
        rows.append(
            QuintileOutcome(q, low, high, n_t, n_u, mort_t, mort_u, los_t, los_u)
        )
    return rows
