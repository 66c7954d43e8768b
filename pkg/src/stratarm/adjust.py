"""Covariate-adjusted ATE estimators.

Every estimator returns an :class:`AdjustedEstimate` in the canonical form

    tau_hat = (Ybar_1 - Ybar_0) - gamma' (wbar_1 - wbar_0) * s,   s = sqrt(p (1 - p)),

where ``w`` stacks the adjustment covariates actually used (``h``, or
``(h, z)`` for the strata-control variants).  The augmented outcomes
``Y - s * gamma' w`` feed the variance estimators in :mod:`stratarm.inference`.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import ExperimentData, Propensity, RANK_RTOL, demean, group_demean, solve_least_squares
from .design import Design, GroupPairing
from .exceptions import (
    DegeneratePropensity,
    DesignError,
    EmptyArm,
    RankDeficient,
    SingleGroup,
    StratarmError,
    WeakFirstStage,
)

ESTIMATORS = ("UNADJ", "NAIVE", "LIN", "FE", "PLIN", "GO", "TOM", "ADAPTIVE")
DESIGN_BASED = ("FE", "PLIN", "GO", "TOM", "ADAPTIVE")
REGRESSION_BASED = ("UNADJ", "NAIVE", "LIN", "FE", "PLIN")
LATE_BACKBONES = ("PLIN", "GO", "TOM")
FIRST_STAGE_MIN = 1e-6


@dataclass
class AdjustedEstimate:
    estimator_id: str
    tau_hat: float
    gamma_hat: np.ndarray
    augmented_outcomes: np.ndarray
    propensity: Propensity
    p: float
    include_z: bool = False
    sample: Optional[np.ndarray] = None
    branch: Optional[str] = None
    extras: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.augmented_outcomes)

    @property
    def s(self) -> float:
        return math.sqrt(self.p * (1.0 - self.p))

    @property
    def name(self) -> str:
        return self.estimator_id.lower() + ("+z" if self.include_z else "")

    def to_dict(self) -> dict:
        out = {
            "estimator": self.estimator_id.lower(),
            "with_z": self.include_z,
            "tau": float(self.tau_hat),
            "gamma": [float(g) for g in self.gamma_hat],
            "p": {"a": int(self.propensity.a), "k": int(self.propensity.k)},
            "n": self.n,
        }
        if self.branch is not None:
            out["branch"] = self.branch
        return out


@dataclass
class LateEstimate(AdjustedEstimate):
    """Adjusted Wald estimate; ``gamma_hat`` holds ``gamma_W - tau * gamma_D``."""

    itt: Optional[AdjustedEstimate] = None
    first_stage: Optional[AdjustedEstimate] = None

    def to_dict(self) -> dict:
        out = super().to_dict()
        out["late"] = True
        out["itt"] = float(self.itt.tau_hat)
        out["first_stage"] = float(self.first_stage.tau_hat)
        out["gamma_w"] = [float(g) for g in self.itt.gamma_hat]
        out["gamma_d"] = [float(g) for g in self.first_stage.gamma_hat]
        return out


# ---------------------------------------------------------------------------
# helpers


def _arm_split(data: ExperimentData):
    data.require_both_arms()
    d = data.d.astype(bool)
    return d, ~d


def _data_propensity(data: ExperimentData) -> Propensity:
    n1, _ = data.arm_counts()
    return Propensity.from_counts(n1, data.n)


def restrict(data: ExperimentData, design: Design):
    """Restrict data and design to the units covered by the design's groups.

    Returns ``(data, labels, propensity, sample)`` where ``labels`` index
    groups ``0..G-1`` on the restricted sample.
    """
    if design.n != data.n:
        raise DesignError(f"design covers {design.n} units, data has {data.n}")
    prop = design.propensity
    lab = design.labels
    if design.leftover:
        sample = np.flatnonzero(lab >= 0)
        data = data.subset(sample)
        lab = lab[sample]
    else:
        sample = None
    treated = np.bincount(lab, weights=data.d, minlength=design.n_groups)
    if np.any(treated != prop.a):
        raise DesignError(f"observed treatment does not put exactly {prop.a} of {prop.k} units in every group")
    return data, lab, prop, sample


def _stack(data: ExperimentData, include_z: bool):
    return data.w if include_z else data.h


def _within_varying_z(z, labels, G):
    """Columns of ``z`` that vary inside at least one group."""
    if z.shape[1] == 0:
        return np.zeros(0, dtype=bool)
    zc = group_demean(z, labels, G)
    scale = np.maximum(np.abs(z).max(axis=0), 1.0)
    keep = np.abs(zc).max(axis=0) > 1e-10 * scale
    if not keep.all():
        warnings.warn(
            f"dropping {int((~keep).sum())} strata control(s) constant within every group",
            RuntimeWarning,
            stacklevel=3,
        )
    return keep


def _expand(gamma_kept, keep_mask, total):
    out = np.zeros(total)
    out[np.flatnonzero(keep_mask)] = gamma_kept
    return out


def _canonical_from_slopes(alpha1, alpha0, p):
    return alpha1 * math.sqrt((1 - p) / p) + alpha0 * math.sqrt(p / (1 - p))


def _finish(estimator_id, data, w, tau, gamma, prop, p, include_z, sample, **kw):
    s = math.sqrt(p * (1 - p))
    ya = data.y - s * (w @ gamma) if w.shape[1] else data.y.copy()
    return AdjustedEstimate(
        estimator_id=estimator_id,
        tau_hat=float(tau),
        gamma_hat=np.asarray(gamma, dtype=float),
        augmented_outcomes=ya,
        propensity=prop,
        p=p,
        include_z=include_z,
        sample=sample,
        **kw,
    )


def _interacted_fit(y, d, W):
    """OLS of y on (1, D, W, D*W); returns (tau, within-arm slopes alpha1, alpha0, fit)."""
    n, q = W.shape
    X = np.empty((n, 2 + 2 * q))
    X[:, 0] = 1.0
    X[:, 1] = d
    X[:, 2:2 + q] = W
    X[:, 2 + q:] = W * d[:, None]
    fit = solve_least_squares(X, y)
    a0 = fit.coefficients[2:2 + q]
    a1 = fit.coefficients[2 + q:]
    return fit.coefficients[1], a0 + a1, a0, X


def reconstruction_gap(est: AdjustedEstimate, data: ExperimentData) -> float:
    """``tau_hat`` minus its canonical reconstruction from arm means."""
    if est.sample is not None:
        data = data.subset(est.sample)
    w = _stack(data, est.include_z)
    d = data.d.astype(bool)
    base = data.y[d].mean() - data.y[~d].mean()
    if w.shape[1]:
        base -= est.s * float(est.gamma_hat @ (w[d].mean(axis=0) - w[~d].mean(axis=0)))
    return est.tau_hat - base


# ---------------------------------------------------------------------------
# estimators that need no design


def diff_means(data: ExperimentData) -> AdjustedEstimate:
    d, c = _arm_split(data)
    tau = data.y[d].mean() - data.y[c].mean()
    prop = _data_propensity(data)
    return _finish("UNADJ", data, data.h, tau, np.zeros(data.d_h), prop, d.mean(), False, None)


def lin(data: ExperimentData, include_z: bool = False) -> AdjustedEstimate:
    """Fully interacted regression ``Y ~ 1 + D + w~ + D w~`` on demeaned covariates."""
    d, _ = _arm_split(data)
    w = _stack(data, include_z)
    p = d.mean()
    prop = _data_propensity(data)
    tau, alpha1, alpha0, _ = _interacted_fit(data.y, d.astype(float), demean(w))
    gamma = _canonical_from_slopes(alpha1, alpha0, p)
    return _finish("LIN", data, w, tau, gamma, prop, p, include_z, None)


def naive(data: ExperimentData, include_z: bool = False) -> AdjustedEstimate:
    """Non-interacted regression ``Y ~ 1 + D + h (+ z)``; gamma is the slope over s."""
    d, _ = _arm_split(data)
    w = _stack(data, include_z)
    p = d.mean()
    X = np.column_stack([np.ones(data.n), d.astype(float), w])
    fit = solve_least_squares(X, data.y)
    gamma = fit.coefficients[2:] / math.sqrt(p * (1 - p))
    return _finish("NAIVE", data, w, fit.coefficients[1], gamma, _data_propensity(data), p, include_z, None)


# ---------------------------------------------------------------------------
# design-based estimators


def _design_inputs(data, design, include_z):
    data, lab, prop, sample = restrict(data, design)
    d, _ = _arm_split(data)
    G = design.n_groups
    h_check = group_demean(data.h, lab, G)
    keep = _within_varying_z(data.z, lab, G) if include_z else np.zeros(data.d_z, dtype=bool)
    return data, lab, prop, sample, d, G, h_check, keep


def fixed_effects(data: ExperimentData, design: Design, include_z: bool = False) -> AdjustedEstimate:
    """Group fixed effects via the within transformation.

    Regresses ``Y`` on ``(1, D, h_check [, z])`` where ``h_check`` is ``h``
    minus its group mean; the coefficient on ``D`` equals the one from the
    explicit group-dummy regression when ``z`` is absent.
    """
    data, lab, prop, sample, d, G, h_check, keep = _design_inputs(data, design, include_z)
    p = prop.p
    zk = data.z[:, keep]
    X = np.column_stack([np.ones(data.n), d.astype(float), h_check, zk])
    fit = solve_least_squares(X, data.y)
    s = prop.s
    dh = data.d_h
    gamma_h = fit.coefficients[2:2 + dh] / s
    gamma_z = fit.coefficients[2 + dh:] / s
    w = _stack(data, include_z)
    gamma = np.concatenate([gamma_h, _expand(gamma_z, keep, data.d_z)]) if include_z else gamma_h
    return _finish("FE", data, w, fit.coefficients[1], gamma, prop, p, include_z, sample)


def _plin_parts(data, prop, d, h_check, keep, include_z):
    W = h_check
    if include_z:
        W = np.hstack([h_check, demean(data.z[:, keep])])
    tau, alpha1, alpha0, _ = _interacted_fit(data.y, d.astype(float), W)
    return tau, _canonical_from_slopes(alpha1, alpha0, prop.p)


def partialled_lin(data: ExperimentData, design: Design, include_z: bool = False) -> AdjustedEstimate:
    """Lin regression on within-group partialled covariates ``h - mean_group(h)``."""
    data, lab, prop, sample, d, G, h_check, keep = _design_inputs(data, design, include_z)
    tau, gamma_used = _plin_parts(data, prop, d, h_check, keep, include_z)
    dh = data.d_h
    gamma = gamma_used[:dh]
    if include_z:
        gamma = np.concatenate([gamma, _expand(gamma_used[dh:], keep, data.d_z)])
    return _finish("PLIN", data, _stack(data, include_z), tau, gamma, prop, prop.p, include_z, sample)


def group_contrasts(x, d, labels, G, p):
    """Within-group IPW differences ``(1/k) sum_i x_i (D_i/p - (1-D_i)/(1-p))`` per group."""
    x = np.asarray(x, dtype=float)
    wts = d / p - (1 - d) / (1 - p)
    counts = np.bincount(labels, minlength=G).astype(float)
    if x.ndim == 1:
        return np.bincount(labels, weights=x * wts, minlength=G) / counts
    out = np.empty((G, x.shape[1]))
    for j in range(x.shape[1]):
        out[:, j] = np.bincount(labels, weights=x[:, j] * wts, minlength=G) / counts
    return out


def group_ols(data: ExperimentData, design: Design, include_z: bool = False) -> AdjustedEstimate:
    """Regress group-level outcome contrasts on covariate contrasts; the intercept estimates the ATE."""
    data, lab, prop, sample, d, G, h_check, keep = _design_inputs(data, design, include_z)
    if G < 2:
        raise SingleGroup("group OLS needs at least two groups")
    p = prop.p
    df = d.astype(float)
    yg = group_contrasts(data.y, df, lab, G, p)
    hg = group_contrasts(data.h, df, lab, G, p)
    X = np.column_stack([np.ones(G), hg])
    fit = solve_least_squares(X, yg)
    tau = fit.coefficients[0]
    gamma = fit.coefficients[1:] / prop.s
    if include_z:
        _, gamma_pl = _plin_parts(data, prop, d, h_check, keep, True)
        alpha_z = _expand(gamma_pl[data.d_h:], keep, data.d_z)
        zdiff = data.z[d].mean(axis=0) - data.z[~d].mean(axis=0)
        tau = tau - prop.s * float(alpha_z @ zdiff)
        gamma = np.concatenate([gamma, alpha_z])
    return _finish("GO", data, _stack(data, include_z), tau, gamma, prop, p, include_z, sample)


def _psd_solve(V, c):
    sv = np.linalg.svd(V, compute_uv=False)
    if V.shape[0] and (sv[0] == 0 or sv[-1] <= RANK_RTOL * sv[0]):
        raise RankDeficient("covariance of partialled covariates is singular")
    return np.linalg.solve(V, c)


def tom_coefficient(w_check, y, d, p):
    """Pooled-variance adjustment coefficient (1/n moment convention throughout)."""
    V = np.cov(w_check, rowvar=False, bias=True).reshape(w_check.shape[1], w_check.shape[1])

    def arm_cov(mask):
        wc = w_check[mask] - w_check[mask].mean(axis=0)
        return wc.T @ (y[mask] - y[mask].mean()) / mask.sum()

    c = arm_cov(d) * math.sqrt((1 - p) / p) + arm_cov(~d) * math.sqrt(p / (1 - p))
    return _psd_solve(V, c)


def tom(data: ExperimentData, design: Design, include_z: bool = False) -> AdjustedEstimate:
    """Tyranny-of-the-minority adjustment: one pooled variance, arm-specific covariances."""
    data, lab, prop, sample, d, G, h_check, keep = _design_inputs(data, design, include_z)
    p = prop.p
    W = np.hstack([h_check, data.z[:, keep]]) if include_z else h_check
    w = _stack(data, include_z)
    if W.shape[1] == 0:
        gamma_used = np.zeros(0)
    else:
        gamma_used = tom_coefficient(W, data.y, d, p)
    dh = data.d_h
    gamma = gamma_used[:dh]
    if include_z:
        gamma = np.concatenate([gamma, _expand(gamma_used[dh:], keep, data.d_z)])
    tau = data.y[d].mean() - data.y[~d].mean()
    if w.shape[1]:
        tau -= prop.s * float(gamma @ (w[d].mean(axis=0) - w[~d].mean(axis=0)))
    return _finish("TOM", data, w, tau, gamma, prop, p, include_z, sample)


_DISPATCH = {
    "UNADJ": lambda data, design, z: diff_means(data if design is None else restrict(data, design)[0]),
    "NAIVE": lambda data, design, z: naive(data if design is None else restrict(data, design)[0], z),
    "LIN": lambda data, design, z: lin(data if design is None else restrict(data, design)[0], z),
    "FE": lambda data, design, z: fixed_effects(data, design, z),
    "PLIN": lambda data, design, z: partialled_lin(data, design, z),
    "GO": lambda data, design, z: group_ols(data, design, z),
    "TOM": lambda data, design, z: tom(data, design, z),
}


def estimate(estimator_id: str, data: ExperimentData, design: Optional[Design] = None,
             include_z: bool = False, pairing: Optional[GroupPairing] = None) -> AdjustedEstimate:
    """Dispatch by name (case-insensitive).

    When ``design`` is given, estimators that do not need it still run on the
    design's estimation sample so every result shares the same units.
    """
    key = estimator_id.upper()
    if key == "ADAPTIVE":
        return adaptive(data, design, pairing=pairing, include_z=include_z)
    if key not in _DISPATCH:
        raise StratarmError(f"unknown estimator {estimator_id!r}")
    if key in DESIGN_BASED and design is None:
        raise DesignError(f"{key} needs a design")
    est = _DISPATCH[key](data, design, include_z)
    if design is not None and design.leftover and est.sample is None:
        est.sample = design.covered
    return est


def choose_adaptive(lin_est, plin_est, v_lin: float, v_plin: float) -> AdjustedEstimate:
    """Pick the Lin branch when its estimated variance is no larger (ties go to Lin)."""
    chosen, branch = (lin_est, "LIN") if v_lin <= v_plin else (plin_est, "PLIN")
    return AdjustedEstimate(
        estimator_id="ADAPTIVE",
        tau_hat=chosen.tau_hat,
        gamma_hat=chosen.gamma_hat,
        augmented_outcomes=chosen.augmented_outcomes,
        propensity=chosen.propensity,
        p=chosen.p,
        include_z=chosen.include_z,
        sample=chosen.sample,
        branch=branch,
        extras={"v_lin": float(v_lin), "v_plin": float(v_plin)},
    )


def adaptive(data: ExperimentData, design: Design, pairing: Optional[GroupPairing] = None,
             include_z: bool = True) -> AdjustedEstimate:
    """Variance pre-test between Lin and partialled Lin (with strata controls by default)."""
    from .design import pair_groups
    from .inference import exact_variance

    if design is None:
        raise DesignError("ADAPTIVE needs a design")
    if pairing is None:
        pairing = pair_groups(design, data.psi if data.d_psi else np.zeros((data.n, 1)))
    lin_est = estimate("LIN", data, design, include_z)
    plin_est = partialled_lin(data, design, include_z)
    v_lin = exact_variance(lin_est, data, design, pairing).v_hat
    v_plin = exact_variance(plin_est, data, design, pairing).v_hat
    return choose_adaptive(lin_est, plin_est, v_lin, v_plin)


# ---------------------------------------------------------------------------
# noncompliance


def wald_late(data: ExperimentData, design: Design, estimator_id: str = "PLIN",
              include_z: bool = False) -> LateEstimate:
    """Adjusted Wald estimator: ITT on the outcome over ITT on treatment uptake.

    ``data.d`` is the randomized instrument and ``data.uptake`` the realised
    treatment.
    """
    key = estimator_id.upper()
    if key not in LATE_BACKBONES:
        raise StratarmError(f"LATE backbone must be one of {LATE_BACKBONES}, got {estimator_id!r}")
    if data.uptake is None:
        raise StratarmError("wald_late needs a treatment-uptake column")
    itt = estimate(key, data, design, include_z)
    first = estimate(key, data.replace(y=data.uptake.astype(float)), design, include_z)
    if abs(first.tau_hat) <= FIRST_STAGE_MIN:
        raise WeakFirstStage(f"first-stage estimate {first.tau_hat:.3g} is too close to zero")
    tau = itt.tau_hat / first.tau_hat
    gamma_q = itt.gamma_hat - tau * first.gamma_hat
    sub = data if itt.sample is None else data.subset(itt.sample)
    w = _stack(sub, include_z)
    q = sub.y - tau * sub.uptake
    qa = q - itt.s * (w @ gamma_q) if w.shape[1] else q
    return LateEstimate(
        estimator_id=key,
        tau_hat=float(tau),
        gamma_hat=gamma_q,
        augmented_outcomes=qa,
        propensity=itt.propensity,
        p=itt.p,
        include_z=include_z,
        sample=itt.sample,
        itt=itt,
        first_stage=first,
    )


# ---------------------------------------------------------------------------
# varying propensities


def _unit_propensity(design: Design, propensity=None):
    p = design.unit_propensity if propensity is None else np.asarray(propensity, dtype=float)
    return p


def varying_coefficient(data: ExperimentData, design: Design) -> tuple:
    """Estimate ``(gamma_0, gamma_1)`` for :func:`aipw_varying`.

    Uses group-partialled, propensity-weighted covariates and the weighted
    outcome ``D Y (1-p)^{1/2} p^{-3/2} + (1-D) Y p^{1/2} (1-p)^{-3/2}``, each
    unit weighted by ``k_i / (k_i - 1)``.
    """
    lab = design.labels
    sample = np.flatnonzero(lab >= 0)
    sub = data.subset(sample)
    lab = lab[sample]
    p = design.unit_propensity[sample]
    G = design.n_groups
    sizes = np.bincount(lab, minlength=G)[lab].astype(float)
    hp = np.hstack([sub.h * np.sqrt(p / (1 - p))[:, None], sub.h * np.sqrt((1 - p) / p)[:, None]])
    hp_check = group_demean(hp, lab, G)
    d = sub.d.astype(float)
    y_tm = d * sub.y * np.sqrt(1 - p) * p ** -1.5 + (1 - d) * sub.y * np.sqrt(p) * (1 - p) ** -1.5
    wt = sizes / (sizes - 1)
    A = (hp_check * wt[:, None]).T @ hp_check / sub.n
    b = (hp_check * wt[:, None]).T @ y_tm / sub.n
    g = _psd_solve(A, b)
    dh = data.d_h
    return g[:dh], g[dh:]


def aipw_varying(data: ExperimentData, design: Design, gamma_pair=None, propensity=None) -> AdjustedEstimate:
    """AIPW estimator with linear arm models ``gamma_d' h`` and per-unit propensities.

    With ``gamma_pair=None`` the coefficients come from :func:`varying_coefficient`.
    """
    lab = design.labels
    sample = np.flatnonzero(lab >= 0)
    p = _unit_propensity(design, propensity)[sample]
    if not np.all((p > 0) & (p < 1)):
        raise DegeneratePropensity("every unit needs a propensity strictly inside (0, 1)")
    sub = data.subset(sample)
    sub.require_both_arms()
    if gamma_pair is None:
        gamma_pair = varying_coefficient(data, design)
    g0 = np.asarray(gamma_pair[0], dtype=float).reshape(-1)
    g1 = np.asarray(gamma_pair[1], dtype=float).reshape(-1)
    h = sub.h
    f1 = h @ g1 if h.shape[1] else np.zeros(sub.n)
    f0 = h @ g0 if h.shape[1] else np.zeros(sub.n)
    d = sub.d.astype(float)
    tau = np.mean(f1 - f0) + np.mean(d * (sub.y - f1) / p) - np.mean((1 - d) * (sub.y - f0) / (1 - p))
    pbar = float(d.mean())
    prop = design.propensity if design.is_constant else Propensity.from_counts(int(d.sum()), sub.n)
    return AdjustedEstimate(
        estimator_id="AIPW",
        tau_hat=float(tau),
        gamma_hat=np.concatenate([g0, g1]),
        augmented_outcomes=sub.y - d * f1 - (1 - d) * f0,
        propensity=prop,
        p=pbar,
        sample=sample if design.leftover else None,
    )
