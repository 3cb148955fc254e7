"""Regression engine: logistic MLE, least-squares linear fits, Wald
p-values, and two-phase forward stepwise selection.

Model specs are term lists over the study variables: the intercept, main
effects x_i, squares x_i*x_i and pairwise interactions x_i*x_j.  Design
columns are standardized internally for conditioning and every reported
coefficient refers to the original units.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import linalg as sla
from scipy.special import expit

from .errors import DataError, NotConverged, RankDeficient
from .group import StudyGroup
from .stats import TestResult, chi2_tail, normal_tail_two_sided, t_tail_two_sided

log = logging.getLogger(__name__)

GRADIENT_TOL = 1e-10
MAX_ITER = 50
SEPARATION_BOUND = 30.0
RANK_TOL = 1e-10


# --- model terms --------------------------------------------------------------


@dataclass(frozen=True)
class ModelTerm:
    kind: str  # "intercept" | "main" | "square" | "interaction"
    i: int | None = None
    j: int | None = None

    def __post_init__(self):
        if self.kind == "intercept":
            if self.i is not None or self.j is not None:
                raise DataError("intercept takes no indices")
        elif self.kind in ("main", "square"):
            if not self.i or self.j is not None:
                raise DataError(f"{self.kind} term needs exactly one index")
        elif self.kind == "interaction":
            if not self.i or not self.j:
                raise DataError("interaction term needs two indices")
            if self.i > self.j:
                raise DataError("interaction indices must satisfy i <= j")
            if self.i == self.j:
                raise DataError("use a square term for i == j")
        else:
            raise DataError(f"unknown term kind {self.kind!r}")

    def label(self) -> str:
        if self.kind == "intercept":
            return "1"
        if self.kind == "main":
            return f"x{self.i}"
        if self.kind == "square":
            return f"x{self.i}*x{self.i}"
        return f"x{self.i}*x{self.j}"

    def indices(self) -> tuple:
        if self.kind == "intercept":
            return ()
        if self.kind in ("main", "square"):
            return (self.i,)
        return (self.i, self.j)


def intercept() -> ModelTerm:
    return ModelTerm("intercept")


def main(i: int) -> ModelTerm:
    return ModelTerm("main", i)


def square(i: int) -> ModelTerm:
    return ModelTerm("square", i)


def interaction(i: int, j: int) -> ModelTerm:
    if i == j:
        return square(i)
    return ModelTerm("interaction", min(i, j), max(i, j))


_TERM_RE = re.compile(r"^x(\d+)(?:\*x(\d+))?$")


class ModelSpec:
    """Ordered term list, always beginning with the intercept."""

    def __init__(self, terms: Sequence[ModelTerm]):
        terms = list(terms)
        if not terms or terms[0].kind != "intercept":
            terms = [intercept()] + [t for t in terms if t.kind != "intercept"]
        if len(set(terms)) != len(terms):
            raise DataError("duplicate terms in model spec")
        self.terms = tuple(terms)

    def __iter__(self):
        return iter(self.terms)

    def __len__(self):
        return len(self.terms)

    def __eq__(self, other):
        return isinstance(other, ModelSpec) and self.terms == other.terms

    def __repr__(self):
        return f"ModelSpec({self.to_text()!r})"

    def has(self, term: ModelTerm) -> bool:
        return term in self.terms

    def with_term(self, term: ModelTerm) -> "ModelSpec":
        return ModelSpec(list(self.terms) + [term])

    def main_indices(self) -> tuple:
        return tuple(t.i for t in self.terms if t.kind == "main")

    def term_names(self) -> list:
        return [t.label() for t in self.terms]

    def to_text(self) -> str:
        return " + ".join(t.label() for t in self.terms)

    @staticmethod
    def from_text(text: str) -> "ModelSpec":
        terms = []
        for token in (t.strip() for t in text.split("+")):
            if not token:
                continue
            if token == "1":
                terms.append(intercept())
                continue
            m = _TERM_RE.match(token)
            if not m:
                raise DataError(f"cannot parse model term {token!r}")
            i = int(m.group(1))
            if m.group(2) is None:
                terms.append(main(i))
            else:
                terms.append(interaction(i, int(m.group(2))))
        return ModelSpec(terms)

    def design_matrix(self, group: StudyGroup) -> np.ndarray:
        cols = []
        for term in self.terms:
            if term.kind == "intercept":
                cols.append(np.ones(group.n))
            elif term.kind == "main":
                cols.append(group.col(term.i))
            elif term.kind == "square":
                cols.append(group.col(term.i) ** 2)
            else:
                cols.append(group.col(term.i) * group.col(term.j))
        return np.column_stack(cols) if cols else np.empty((group.n, 0))


# --- fits ---------------------------------------------------------------------


@dataclass
class LogitFit:
    coefficients: np.ndarray
    standard_errors: np.ndarray
    log_likelihood: float
    iterations: int
    converged: bool
    separation: bool
    term_names: list
    n_obs: int
    gradient_tol: float = GRADIENT_TOL

    def linear_predictor(self, design: np.ndarray) -> np.ndarray:
        return design @ self.coefficients


@dataclass
class LinearFit:
    coefficients: np.ndarray
    standard_errors: np.ndarray
    residual_variance: float
    r_squared: float
    term_names: list
    n_obs: int
    log_likelihood: float = float("nan")

    @property
    def dof_resid(self) -> int:
        return self.n_obs - len(self.coefficients)


def _check_rank(design: np.ndarray, names: Sequence[str]) -> None:
    # column-pivoted QR; a tiny trailing pivot names the dependent column
    _, r, piv = sla.qr(design, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0.0:
        raise RankDeficient(names[piv[0]] if len(names) else "<empty>")
    bad = np.nonzero(diag <= RANK_TOL * diag[0])[0]
    if bad.size:
        raise RankDeficient(names[piv[bad[0]]])


def _standardize(design: np.ndarray) -> tuple:
    """Center/scale all non-intercept columns; returns (Z, mu, sigma).

    Column 0 is assumed to be the intercept and is left untouched.
    """
    mu = design.mean(axis=0)
    sigma = design.std(axis=0)
    mu[0] = 0.0
    sigma[0] = 1.0
    sigma[sigma == 0.0] = 1.0
    return (design - mu) / sigma, mu, sigma


def _unstandardize(coef_std, cov_std, mu, sigma):
    p = coef_std.size
    a = np.zeros((p, p))
    a[0, 0] = 1.0
    for j in range(1, p):
        a[j, j] = 1.0 / sigma[j]
        a[0, j] = -mu[j] / sigma[j]
    coef = a @ coef_std
    cov = a @ cov_std @ a.T if cov_std is not None else None
    return coef, cov


def _log_likelihood(y: np.ndarray, mu: np.ndarray) -> float:
    mu = np.clip(mu, 1e-12, 1.0 - 1e-12)
    return float(np.sum(y * np.log(mu) + (1.0 - y) * np.log(1.0 - mu)))


def fit_logistic_design(design: np.ndarray, y: np.ndarray, names: Sequence[str]) -> LogitFit:
    """Newton (IRLS) maximum-likelihood logistic fit on a prepared design.

    Starts at zero coefficients with step-halving on likelihood decrease.
    Standard errors come from the inverse observed information.  Separation
    is flagged once a standardized coefficient passes +-30 while the score
    has not vanished; the fit is returned unconverged rather than raised.
    """
    y = np.asarray(y, dtype=float)
    if design.shape[0] != y.size:
        raise DataError("design and outcome lengths differ")
    if not np.isin(y, (0.0, 1.0)).all():
        raise DataError("logistic outcome must be coded 0/1")
    names = list(names)
    _check_rank(design, names)
    z, mu_c, sigma_c = _standardize(design)

    beta = np.zeros(z.shape[1])
    ll = _log_likelihood(y, expit(z @ beta))
    iterations = 0
    converged = False
    separation = False
    for iterations in range(1, MAX_ITER + 1):
        p = expit(z @ beta)
        grad = z.T @ (y - p)
        if np.max(np.abs(grad)) < GRADIENT_TOL:
            converged = True
            iterations -= 1
            break
        w = np.clip(p * (1.0 - p), 1e-12, None)
        h = z.T @ (w[:, None] * z)
        try:
            step = np.linalg.solve(h, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(h, grad, rcond=None)[0]
        # step-halving keeps the likelihood monotone
        scale = 1.0
        for _ in range(40):
            candidate = beta + scale * step
            ll_new = _log_likelihood(y, expit(z @ candidate))
            if ll_new >= ll - 1e-12:
                break
            scale *= 0.5
        beta = beta + scale * step
        ll = ll_new
        if np.max(np.abs(beta)) > SEPARATION_BOUND:
            separation = True
            break
    else:
        iterations = MAX_ITER

    p = expit(z @ beta)
    grad = z.T @ (y - p)
    if not separation and np.max(np.abs(grad)) < GRADIENT_TOL:
        converged = True
    w = np.clip(p * (1.0 - p), 1e-12, None)
    h = z.T @ (w[:, None] * z)
    try:
        cov_std = np.linalg.inv(h)
    except np.linalg.LinAlgError:
        cov_std = np.linalg.pinv(h)
    coef, cov = _unstandardize(beta, cov_std, mu_c, sigma_c)
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    return LogitFit(
        coefficients=coef,
        standard_errors=se,
        log_likelihood=_log_likelihood(y, expit(design @ coef)),
        iterations=iterations,
        converged=converged and not separation,
        separation=separation,
        term_names=names,
        n_obs=y.size,
    )


def fit_linear_design(design: np.ndarray, y: np.ndarray, names: Sequence[str]) -> LinearFit:
    """Ordinary least squares on a prepared design matrix."""
    y = np.asarray(y, dtype=float)
    names = list(names)
    _check_rank(design, names)
    coef, _, _, _ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    rss = float(resid @ resid)
    n, p = design.shape
    if n <= p:
        raise DataError("linear fit needs more observations than terms")
    sigma2 = rss / (n - p)
    xtx_inv = np.linalg.inv(design.T @ design)
    se = np.sqrt(np.maximum(np.diag(xtx_inv) * sigma2, 0.0))
    tss = float(((y - y.mean()) ** 2).sum())
    r2 = 0.0 if tss == 0.0 else max(0.0, min(1.0, 1.0 - rss / tss))
    return LinearFit(
        coefficients=coef,
        standard_errors=se,
        residual_variance=sigma2,
        r_squared=r2,
        term_names=names,
        n_obs=n,
    )


def fit_logistic(group: StudyGroup, spec: ModelSpec, outcome: np.ndarray) -> LogitFit:
    """Fit `spec` on the group with a 0/1 outcome column."""
    return fit_logistic_design(spec.design_matrix(group), outcome, spec.term_names())


def fit_linear(group: StudyGroup, spec: ModelSpec, outcome: np.ndarray) -> LinearFit:
    return fit_linear_design(spec.design_matrix(group), outcome, spec.term_names())


def coefficient_p_values(fit) -> list:
    """Per-term Wald tests: normal reference for logistic, t for linear."""
    if isinstance(fit, LogitFit):
        if not fit.converged:
            raise NotConverged("logistic fit did not converge; p-values unavailable")
        results = []
        for coef, se in zip(fit.coefficients, fit.standard_errors):
            if se <= 0:
                results.append(TestResult(float("inf"), 0.0, (float("inf"),)))
                continue
            zstat = coef / se
            results.append(TestResult(float(zstat), normal_tail_two_sided(zstat), (float("inf"),)))
        return results
    if isinstance(fit, LinearFit):
        dof = fit.dof_resid
        results = []
        for coef, se in zip(fit.coefficients, fit.standard_errors):
            if se <= 0:
                results.append(TestResult(float("inf"), 0.0, (dof,)))
                continue
            tstat = coef / se
            results.append(TestResult(float(tstat), t_tail_two_sided(tstat, dof), (dof,)))
        return results
    raise DataError(f"unsupported fit type {type(fit).__name__}")


# --- stepwise selection ---------------------------------------------------------


def _candidate_order(terms):
    # deterministic: mains by index, then squares, then interactions (i, j)
    rank = {"main": 0, "square": 1, "interaction": 2}
    return sorted(terms, key=lambda t: (rank[t.kind],) + t.indices())


def _forward_pass(group, y, spec, candidates, p_enter):
    """One forward-selection phase; returns the augmented spec."""
    current = spec
    current_fit = fit_logistic(group, current, y)
    remaining = _candidate_order(candidates)
    while remaining:
        best = None
        for term in remaining:
            trial = current.with_term(term)
            try:
                fit = fit_logistic(group, trial, y)
            except RankDeficient:
                log.warning("stepwise: %s makes the design rank deficient; skipped", term.label())
                remaining = [t for t in remaining if t != term]
                continue
            if not fit.converged:
                log.warning("stepwise: fit with %s did not converge; skipped", term.label())
                continue
            gain = fit.log_likelihood - current_fit.log_likelihood
            if best is None or gain > best[0]:
                best = (gain, term, fit)
        if best is None:
            break
        gain, term, fit = best
        p = chi2_tail(2.0 * max(gain, 0.0), 1)
        if p >= p_enter or gain <= 0.0:
            break
        current = current.with_term(term)
        current_fit = fit
        remaining = [t for t in remaining if t != term]
    return current


def stepwise_select(
    group: StudyGroup,
    candidates: Sequence[int],
    outcome: np.ndarray,
    p_enter: float = 0.05,
    include_squares: bool = True,
) -> ModelSpec:
    """Two-phase forward selection for a logistic model.

    Phase 1 screens main effects of `candidates` by likelihood-ratio
    improvement at `p_enter`.  Phase 2 offers squares and pairwise
    interactions restricted to the phase-1 survivors.  Ties break toward
    the lowest variable index; a candidate that makes the design rank
    deficient is skipped with a warning.
    """
    if not candidates:
        raise DataError("stepwise_select needs a non-empty candidate list")
    spec = ModelSpec([intercept()])
    spec = _forward_pass(group, outcome, spec, [main(i) for i in candidates], p_enter)
    survivors = spec.main_indices()
    if survivors:
        phase2 = []
        if include_squares:
            phase2.extend(square(i) for i in survivors)
        phase2.extend(
            interaction(a, b)
            for idx, a in enumerate(survivors)
            for b in survivors[idx + 1 :]
        )
        spec = _forward_pass(group, outcome, spec, phase2, p_enter)
    return spec
