"""Variance estimation and confidence intervals for adjusted estimators.

``v_hat`` is always on the scale of ``sqrt(n) (tau_hat - tau)``; the
standard error of ``tau_hat`` is ``sqrt(v_hat / n)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import norm

from .adjust import AdjustedEstimate, LateEstimate, FIRST_STAGE_MIN, REGRESSION_BASED, restrict
from .core import ExperimentData, demean, group_demean, solve_least_squares
from .design import Design, GroupPairing
from .exceptions import (
    DegenerateUnion,
    DesignError,
    MissingPairing,
    NotRegressionBased,
    WeakFirstStage,
)

EXACT = "EXACT"
EHW_HC2 = "EHW_HC2"


@dataclass
class VarianceReport:
    v_hat: float
    components: tuple
    ci_low: float
    ci_high: float
    alpha: float
    method: str
    tau_hat: float
    n: int
    clamped: bool = False
    raw_v_hat: Optional[float] = None

    @property
    def se(self) -> float:
        return math.sqrt(self.v_hat / self.n)

    @property
    def ci_length(self) -> float:
        return self.ci_high - self.ci_low

    def covers(self, value: float) -> bool:
        return self.ci_low <= value <= self.ci_high

    def to_dict(self) -> dict:
        return {
            "method": self.method.lower(),
            "v_hat": self.v_hat,
            "se": self.se,
            "ci": [self.ci_low, self.ci_high],
            "alpha": self.alpha,
            "components": dict(zip(("sample_term", "v1", "v0", "v10"), map(float, self.components))),
            "clamped": self.clamped,
        }


def _check_alpha(alpha):
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")


def _report(tau, components, n, alpha, method, scale=1.0):
    sample_term, v1, v0, v10 = (c * scale for c in components)
    raw = sample_term - v1 - v0 - 2.0 * v10
    clamped = raw < 0
    v = 0.0 if clamped else raw
    half = norm.ppf(1.0 - alpha / 2.0) * math.sqrt(v / n)
    return VarianceReport(
        v_hat=v,
        components=(sample_term, v1, v0, v10),
        ci_low=tau - half,
        ci_high=tau + half,
        alpha=alpha,
        method=method,
        tau_hat=tau,
        n=n,
        clamped=clamped,
        raw_v_hat=raw,
    )


def _estimation_outcomes(estimate: AdjustedEstimate, data: ExperimentData, design: Design):
    """Augmented outcomes, treatment and labels on the design's covered units."""
    ya = estimate.augmented_outcomes
    if design.n != data.n:
        raise DesignError(f"design covers {design.n} units, data has {data.n}")
    covered = design.covered if design.leftover else None
    if covered is not None and len(ya) == data.n:
        ya = ya[covered]
    d = data.d if covered is None else data.d[covered]
    if len(ya) != len(d):
        raise DesignError("estimate and design disagree on the estimation sample")
    return ya, d.astype(float), covered


def variance_components(ya, d, group_labels, union_labels, p, k, a):
    """The four ingredients ``(sample_term, v1, v0, v10)`` of the exact variance.

    ``group_labels`` and ``union_labels`` are integer ids on the estimation
    sample.  Moments use the 1/n convention.
    """
    ya = np.asarray(ya, dtype=float)
    n = len(ya)
    sample_term = float(np.var((d - p) * ya / (p - p * p)))
    U = int(union_labels.max()) + 1
    t = d * ya
    c = (1.0 - d) * ya
    a_u = np.bincount(union_labels, weights=d, minlength=U)
    b_u = np.bincount(union_labels, minlength=U) - a_u
    if np.any(a_u <= 1) or np.any(b_u <= 1):
        raise DegenerateUnion("every group union needs at least two treated and two control units")
    s1u = np.bincount(union_labels, weights=t, minlength=U)
    q1u = np.bincount(union_labels, weights=t * t, minlength=U)
    s0u = np.bincount(union_labels, weights=c, minlength=U)
    q0u = np.bincount(union_labels, weights=c * c, minlength=U)
    v1 = float(np.sum((s1u ** 2 - q1u) / (a_u - 1))) * (1 - p) / p ** 2 / n
    v0 = float(np.sum((s0u ** 2 - q0u) / (b_u - 1))) * p / (1 - p) ** 2 / n
    G = int(group_labels.max()) + 1
    s1g = np.bincount(group_labels, weights=t, minlength=G)
    s0g = np.bincount(group_labels, weights=c, minlength=G)
    v10 = float(np.sum(s1g * s0g)) * k / (a * (k - a)) / n
    return sample_term, v1, v0, v10


def _exact_parts(estimate, data, design, pairing):
    if pairing is None:
        raise MissingPairing("exact variance needs a group pairing built on the same design")
    if len(pairing.partner) != design.n_groups:
        raise MissingPairing("pairing was built on a different design")
    ya, d, covered = _estimation_outcomes(estimate, data, design)
    prop = design.propensity
    glab = design.labels
    ulab = pairing.union_labels(design)
    if covered is not None:
        glab, ulab = glab[covered], ulab[covered]
    return variance_components(ya, d, glab, ulab, prop.p, prop.k, prop.a), len(ya)


def exact_variance(estimate: AdjustedEstimate, data: ExperimentData, design: Design,
                   pairing: Optional[GroupPairing], alpha: float = 0.05) -> VarianceReport:
    """Asymptotically exact variance under stratified randomization.

    A negative raw combination is clamped to zero and flagged in
    ``VarianceReport.clamped``.
    """
    _check_alpha(alpha)
    comps, n = _exact_parts(estimate, data, design, pairing)
    return _report(estimate.tau_hat, comps, n, alpha, EXACT)


def late_variance(estimate: LateEstimate, data: ExperimentData, design: Design,
                  pairing: Optional[GroupPairing], alpha: float = 0.05) -> VarianceReport:
    """Exact variance of an adjusted Wald estimate.

    Applies the exact combination to the modified outcomes stored on the
    estimate and divides by the squared first-stage estimate.
    """
    _check_alpha(alpha)
    first = getattr(estimate, "first_stage", None)
    if first is None:
        raise WeakFirstStage("estimate carries no first stage; build it with wald_late")
    tau_d = first.tau_hat
    if abs(tau_d) <= FIRST_STAGE_MIN:
        raise WeakFirstStage(f"first-stage estimate {tau_d:.3g} is too close to zero")
    comps, n = _exact_parts(estimate, data, design, pairing)
    return _report(estimate.tau_hat, comps, n, alpha, EXACT, scale=1.0 / tau_d ** 2)


# ---------------------------------------------------------------------------
# HC2 baseline


def defining_regression(estimate: AdjustedEstimate, data: ExperimentData, design: Optional[Design] = None):
    """Regressor matrix, response, extra leverage and treatment column of a regression-based estimate.

    For group fixed effects without strata controls the group dummies are
    partialled out: the response is within-group demeaned, the treatment
    column is ``D - p`` and every unit carries an extra leverage of ``1/k``.
    """
    key = estimate.estimator_id
    if key not in REGRESSION_BASED or estimate.branch is not None:
        raise NotRegressionBased(f"{key} has no defining regression")
    if key in ("FE", "PLIN"):
        if design is None:
            raise DesignError(f"{key} needs its design for the HC2 variance")
        sub, lab, prop, _ = restrict(data, design)
        G = design.n_groups
        n = sub.n
        d = sub.d.astype(float)
        h_check = group_demean(sub.h, lab, G)
        z = sub.z[:, :0]
        if estimate.include_z:
            varies = np.abs(group_demean(sub.z, lab, G)).max(axis=0) > 1e-10 * np.maximum(np.abs(sub.z).max(axis=0), 1.0)
            z = sub.z[:, varies]
        if key == "FE" and not estimate.include_z:
            X = np.column_stack([d - prop.p, h_check])
            extra = 1.0 / np.bincount(lab, minlength=G)[lab]
            return X, group_demean(sub.y, lab, G), extra, 0
        if key == "FE":
            X = np.column_stack([np.ones(n), d, h_check, z])
        else:
            W = np.hstack([h_check, demean(z)])
            X = np.column_stack([np.ones(n), d, W, W * d[:, None]])
        return X, sub.y, np.zeros(n), 1
    if estimate.sample is not None:
        data = data.subset(estimate.sample)
    n = data.n
    d = data.d.astype(float)
    w = data.w if estimate.include_z else data.h
    if key == "UNADJ":
        X = np.column_stack([np.ones(n), d])
    elif key == "NAIVE":
        X = np.column_stack([np.ones(n), d, w])
    else:
        W = demean(w)
        X = np.column_stack([np.ones(n), d, W, W * d[:, None]])
    return X, data.y, np.zeros(n), 1


def ehw_hc2_variance(estimate: AdjustedEstimate, data: ExperimentData, design: Optional[Design] = None,
                     alpha: float = 0.05) -> VarianceReport:
    """Heteroskedasticity-robust sandwich variance with the HC2 leverage correction."""
    _check_alpha(alpha)
    X, y, extra, col = defining_regression(estimate, data, design)
    fit = solve_least_squares(X, y)
    e = fit.residuals
    XtX_inv = np.linalg.inv(X.T @ X)
    lev = np.einsum("ij,jk,ik->i", X, XtX_inv, X) + extra
    omega = e ** 2 / np.clip(1.0 - lev, 1e-12, None)
    meat = (X * omega[:, None]).T @ X
    cov = XtX_inv @ meat @ XtX_inv
    n = X.shape[0]
    v = float(cov[col, col]) * n
    return _report(estimate.tau_hat, (v, 0.0, 0.0, 0.0), n, alpha, EHW_HC2)
