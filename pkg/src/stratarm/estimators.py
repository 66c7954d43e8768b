"""scikit-learn style front ends for designing and analysing experiments."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import adjust
from .core import ExperimentData, Propensity
from .design import Design, assign_coarse, assign_complete, assign_matched_tuples, pair_groups
from .exceptions import DataError, DesignError
from .inference import ehw_hc2_variance, exact_variance, late_variance


def check_experiment(y, d, h=None, psi=None, z=None, uptake=None) -> ExperimentData:
    """Validate array inputs and bundle them as :class:`ExperimentData`."""
    y = check_array(np.asarray(y, dtype=float).reshape(-1, 1), ensure_2d=True).ravel()
    mats = {}
    for name, m in (("h", h), ("psi", psi), ("z", z)):
        if m is not None:
            m = np.asarray(m, dtype=float)
            mats[name] = check_array(m.reshape(len(m), -1), ensure_min_features=0)
    return ExperimentData(y=y, d=d, uptake=uptake, **mats)


class MatchedTupleDesigner(BaseEstimator):
    """Assign treatment by stratified randomization.

    Parameters
    ----------
    prop : str or Propensity
        Treated share ``a/k``.
    kind : {"matched", "complete", "coarse"}
    random_state : int
    """

    def __init__(self, prop="1/2", kind="matched", random_state=0):
        self.prop = prop
        self.kind = kind
        self.random_state = random_state

    def fit(self, psi, strata=None):
        prop = self.prop if isinstance(self.prop, Propensity) else Propensity.parse(self.prop)
        psi = check_array(np.asarray(psi, dtype=float).reshape(len(psi), -1))
        if self.kind == "matched":
            design = assign_matched_tuples(psi, prop, self.random_state)
        elif self.kind == "complete":
            design = assign_complete(len(psi), prop, self.random_state)
        elif self.kind == "coarse":
            if strata is None:
                raise DesignError("coarse designs need stratum labels")
            design = assign_coarse(strata, prop, self.random_state, psi=psi)
        else:
            raise DesignError(f"unknown design kind {self.kind!r}")
        self.design_ = design
        self.pairing_ = pair_groups(design, psi) if design.n_groups >= 2 else None
        self.n_groups_ = design.n_groups
        return self

    def transform(self, psi=None):
        check_is_fitted(self, "design_")
        return self.design_.treatment.copy()

    def fit_transform(self, psi, strata=None):
        return self.fit(psi, strata).transform()


class AdjustedATE(BaseEstimator):
    """Covariate-adjusted treatment effect with exact confidence intervals.

    Parameters
    ----------
    estimator : str
        One of ``unadj, naive, lin, fe, plin, go, tom, adaptive``.
    with_z : bool
        Also adjust for the strata controls ``z``.
    alpha : float
        Miscoverage level of the interval.
    ehw : bool
        Also compute the HC2 interval when the estimator is regression based.
    late : bool
        Treat ``d`` as an instrument and ``uptake`` as the realised treatment.
    """

    def __init__(self, estimator="plin", with_z=False, alpha=0.05, ehw=False, late=False):
        self.estimator = estimator
        self.with_z = with_z
        self.alpha = alpha
        self.ehw = ehw
        self.late = late

    def fit(self, data, design: Design, pairing=None):
        if not isinstance(data, ExperimentData):
            raise DataError("fit expects ExperimentData; build one with check_experiment")
        if pairing is None:
            psi = data.psi if data.d_psi else data.h
            pairing = pair_groups(design, psi)
        key = self.estimator.upper()
        if self.late:
            est = adjust.wald_late(data, design, key, self.with_z)
            var = late_variance(est, data, design, pairing, self.alpha)
        else:
            est = adjust.estimate(key, data, design, self.with_z, pairing)
            var = exact_variance(est, data, design, pairing, self.alpha)
        self.estimate_ = est
        self.variance_ = var
        self.tau_ = est.tau_hat
        self.gamma_ = est.gamma_hat
        self.ci_ = (var.ci_low, var.ci_high)
        self.se_ = var.se
        self.ehw_ = None
        if self.ehw and not self.late and key in adjust.REGRESSION_BASED:
            self.ehw_ = ehw_hc2_variance(est, data, design, self.alpha)
        return self

    def summary(self) -> dict:
        check_is_fitted(self, "estimate_")
        out = {**self.estimate_.to_dict(), **{"exact": self.variance_.to_dict()}}
        if self.ehw_ is not None:
            out["ehw_hc2"] = self.ehw_.to_dict()
        return out
