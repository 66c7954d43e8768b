"""Simulation models, the replication engine, metric aggregation and the
imputation replay.

Replication ``r`` of a scenario with master seed ``s`` draws everything
(covariates, noise and the treatment assignment) from one generator seeded
by ``SeedSequence([s, r])``, so results do not depend on execution order or
on the number of worker processes.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from . import adjust
from .core import ExperimentData, Propensity
from .design import Design, assign_coarse, assign_complete, assign_matched_tuples, make_rng, pair_groups
from .exceptions import DataError, EmptyArm, FailureBudgetExceeded, StratarmError, UnknownModel
from .inference import EHW_HC2, ehw_hc2_variance, exact_variance

FAILURE_BUDGET = 0.01

ALL_LABELS = (
    "unadj", "naive", "lin", "fe", "plin", "go", "tom",
    "naive+z", "lin+z", "fe+z", "plin+z", "go+z", "tom+z",
    "adaptive",
)


# ---------------------------------------------------------------------------
# models


@dataclass(frozen=True)
class ModelSpec:
    """Quadratic outcome model.

    ``Y(d) = psi' Q_d psi + psi' L_d + c_d u + eps_d`` and
    ``h = psi' Q_h psi + psi' L_h + u``, where every ``Q`` is a multiple of
    the all-ones matrix with zero diagonal.  ``qh_scale=None`` means
    ``1/m^2``; ``q_scale=None`` means ``1/m``.  Linear coefficients are
    multiples of the ones vector.
    """

    c0: float
    c1: float
    prop: str = "2/3"
    qh_scale: Optional[float] = None
    q_scale: Optional[float] = None
    l0: float = 1.0
    l1: float = 2.0
    lh: float = 1.0
    noise_var: float = 0.1

    @property
    def propensity(self) -> Propensity:
        return Propensity.parse(self.prop)

    def scales(self, m: int):
        qh = 1.0 / m ** 2 if self.qh_scale is None else self.qh_scale
        q = 1.0 / m if self.q_scale is None else self.q_scale
        return qh, q

    def gamma_star(self, p: float) -> float:
        """Optimal canonical coefficient: ``var(h|psi) = 1`` and ``cov(h, Y(d)|psi) = c_d``."""
        return self.c1 * math.sqrt((1 - p) / p) + self.c0 * math.sqrt(p / (1 - p))

    def true_ate(self, m: int) -> float:
        # E[psi' Q psi] = trace(Q) = 0 for the zero-diagonal pattern; E[psi] = 0
        return 0.0


MODELS: Dict[int, ModelSpec] = {
    1: ModelSpec(c0=-3.0, c1=-3.0),
    2: ModelSpec(c0=-4.0, c1=-1.0),
    3: ModelSpec(c0=-4.0, c1=-1.0, prop="1/2"),
    4: ModelSpec(c0=2.0, c1=4.0),
    5: ModelSpec(c0=2.0, c1=4.0, prop="1/2"),
    6: ModelSpec(c0=-3.0, c1=-3.0, qh_scale=0.01),
}


def get_model(model_id, custom=None) -> ModelSpec:
    if str(model_id).upper() == "CUSTOM":
        if custom is None:
            raise UnknownModel("CUSTOM model needs its parameters")
        return custom if isinstance(custom, ModelSpec) else ModelSpec(**custom)
    try:
        return MODELS[int(model_id)]
    except (KeyError, ValueError, TypeError):
        raise UnknownModel(f"unknown model {model_id!r}") from None


def _quad_offdiag(psi):
    # psi' A psi with A = ones - I
    s = psi.sum(axis=1)
    return s * s - (psi * psi).sum(axis=1)


@dataclass
class PotentialOutcomes:
    """One draw of units with both potential outcomes.

    ``f0``/``f1`` are the conditional means ``E[Y(d) | X]`` when known.
    """

    psi: np.ndarray
    h: np.ndarray
    z: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    true_ate: float
    f0: Optional[np.ndarray] = None
    f1: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return len(self.y0)

    @property
    def sample_ate(self) -> float:
        return float(np.mean(self.y1 - self.y0))

    def observe(self, d, uptake=None) -> ExperimentData:
        d = np.asarray(d)
        return ExperimentData(
            y=np.where(d == 1, self.y1, self.y0), d=d, psi=self.psi, h=self.h, z=self.z,
            uptake=uptake, check_h=False,
        )


def draw_model(model: ModelSpec, n: int, m: int, rng) -> PotentialOutcomes:
    rng = make_rng(rng)
    psi = rng.standard_normal((n, m))
    u = rng.standard_normal(n)
    sd = math.sqrt(model.noise_var)
    e0 = rng.normal(0.0, sd, n)
    e1 = rng.normal(0.0, sd, n)
    qh, q = model.scales(m)
    quad = _quad_offdiag(psi)
    lin_part = psi.sum(axis=1)
    h = qh * quad + model.lh * lin_part + u
    f0 = q * quad + model.l0 * lin_part + model.c0 * u
    f1 = q * quad + model.l1 * lin_part + model.c1 * u
    return PotentialOutcomes(
        psi=psi, h=h.reshape(-1, 1), z=psi, y0=f0 + e0, y1=f1 + e1,
        true_ate=model.true_ate(m), f0=f0, f1=f1,
    )


# ---------------------------------------------------------------------------
# scenarios


@dataclass
class SimScenario:
    model_id: Union[int, str] = 1
    n: int = 600
    dim_psi: int = 2
    propensity: Optional[str] = None
    estimators: Sequence[str] = ALL_LABELS
    reps: int = 2000
    master_seed: int = 0
    custom: Optional[dict] = None
    ehw: bool = True

    def __post_init__(self):
        if int(self.reps) < 1:
            raise DataError("reps must be at least 1")
        if int(self.n) < 1 or int(self.dim_psi) < 1:
            raise DataError("n and dim_psi must be positive")
        self.estimators = tuple(parse_label(e)[2] for e in self.estimators)
        self.model  # validates model_id
        if self.propensity is not None:
            Propensity.parse(self.propensity)

    @property
    def model(self) -> ModelSpec:
        return get_model(self.model_id, self.custom)

    @property
    def prop(self) -> Propensity:
        return Propensity.parse(self.propensity) if self.propensity else self.model.propensity

    @property
    def gamma_star(self) -> float:
        return self.model.gamma_star(self.prop.p)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["estimators"] = list(self.estimators)
        out["propensity"] = str(self.prop)
        return out

    @classmethod
    def from_dict(cls, obj) -> "SimScenario":
        known = set(cls.__dataclass_fields__)
        bad = sorted(set(obj) - known)
        if bad:
            raise DataError(f"unknown scenario key: {bad[0]}")
        return cls(**obj)


def parse_label(label: str):
    """``'plin+z'`` -> ``('PLIN', True, 'plin+z')``."""
    text = str(label).strip().lower()
    with_z = text.endswith("+z")
    base = text[:-2] if with_z else text
    key = base.upper()
    if key not in adjust.ESTIMATORS:
        raise DataError(f"unknown estimator {label!r}")
    if key == "ADAPTIVE":
        return key, True, "adaptive"
    if key == "UNADJ" and with_z:
        raise DataError("unadj has no strata-control variant")
    return key, with_z, base + ("+z" if with_z else "")


def generate_model(scenario: SimScenario, rep_index: int) -> PotentialOutcomes:
    """Draw the units of one replication (the design is drawn afterwards from the same generator)."""
    return draw_model(scenario.model, int(scenario.n), int(scenario.dim_psi), rep_rng(scenario.master_seed, rep_index))


def rep_rng(master_seed: int, rep_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(master_seed), int(rep_index)])))


# ---------------------------------------------------------------------------
# one replication


FIELDS = ("err", "v_hat", "ci_low", "ci_high", "gamma", "hc2_low", "hc2_high")


def evaluate_estimators(labels, data: ExperimentData, design: Design, pairing, target: float,
                        ehw: bool = True, alpha: float = 0.05):
    """Estimates and intervals for every label on one realised experiment.

    Returns ``(table, branch)`` where ``table`` maps label to a tuple in
    the order of :data:`FIELDS` and ``branch`` is the adaptive choice.
    """
    need = set(labels)
    if "adaptive" in need:
        need |= {"lin+z", "plin+z"}
    cache = {}
    for label in need:
        if label == "adaptive":
            continue
        key, with_z, _ = parse_label(label)
        est = adjust.estimate(key, data, design, with_z)
        cache[label] = (est, exact_variance(est, data, design, pairing, alpha))
    branch = None
    if "adaptive" in need:
        (le, lv), (pe, pv) = cache["lin+z"], cache["plin+z"]
        est = adjust.choose_adaptive(le, pe, lv.v_hat, pv.v_hat)
        branch = est.branch
        cache["adaptive"] = (est, lv if branch == "LIN" else pv)
    table = {}
    for label in labels:
        est, rep = cache[label]
        lo = hi = np.nan
        if ehw and est.estimator_id in adjust.REGRESSION_BASED and est.branch is None:
            hc = ehw_hc2_variance(est, data, design, alpha)
            lo, hi = hc.ci_low, hc.ci_high
        g = float(est.gamma_hat[0]) if len(est.gamma_hat) else 0.0
        table[label] = (est.tau_hat - target, rep.v_hat, rep.ci_low - target, rep.ci_high - target, g, lo - target, hi - target)
    return table, branch


def _run_rep(scenario: SimScenario, rep: int):
    rng = rep_rng(scenario.master_seed, rep)
    draw = draw_model(scenario.model, int(scenario.n), int(scenario.dim_psi), rng)
    design = assign_matched_tuples(draw.psi, scenario.prop, rng_seed=rng)
    data = draw.observe(design.treatment)
    pairing = pair_groups(design, draw.psi)
    return evaluate_estimators(scenario.estimators, data, design, pairing, draw.true_ate, scenario.ehw)


def _safe(fn, *args):
    try:
        return fn(*args)
    except (StratarmError, np.linalg.LinAlgError) as exc:
        return exc


# ---------------------------------------------------------------------------
# results


def _ratio_se(num, den):
    """Delta-method standard error of ``mean(num) / mean(den)``."""
    r = len(num)
    if r < 2:
        return float("nan")
    a, b = num.mean(), den.mean()
    if b == 0:
        return float("nan")
    infl = (num - (a / b) * den) / b
    return float(infl.std(ddof=1) / math.sqrt(r))


@dataclass
class SimResult:
    """Per-replication records plus aggregated metrics.

    ``records[label]`` is a ``(reps, 7)`` array with columns :data:`FIELDS`,
    where errors and interval ends are centred at the target ATE.
    """

    labels: tuple
    records: Dict[str, np.ndarray]
    n: int
    reps_requested: int
    failed: int = 0
    branch_lin: Optional[np.ndarray] = None
    gamma_star: Optional[float] = None
    meta: dict = field(default_factory=dict)

    @property
    def reps(self) -> int:
        return 0 if not self.labels else self.records[self.labels[0]].shape[0]

    def _col(self, label, name):
        return self.records[label][:, FIELDS.index(name)]

    def mse(self, label) -> float:
        return float(np.mean(self._col(label, "err") ** 2))

    @property
    def baseline(self) -> str:
        return "unadj" if "unadj" in self.records else self.labels[0]

    def relative_mse(self, label) -> float:
        return 100.0 * self.mse(label) / self.mse(self.baseline)

    def relative_mse_se(self, label) -> float:
        e = self._col(label, "err") ** 2
        b = self._col(self.baseline, "err") ** 2
        return 0.0 if label == self.baseline else 100.0 * _ratio_se(e, b)

    def bias(self, label):
        e = self._col(label, "err")
        return float(e.mean()), float(e.std(ddof=1) / math.sqrt(len(e))) if len(e) > 1 else float("nan")

    def coverage(self, label) -> float:
        lo, hi = self._col(label, "ci_low"), self._col(label, "ci_high")
        return float(np.mean((lo <= 0) & (hi >= 0)))

    def hc2_coverage(self, label) -> float:
        lo, hi = self._col(label, "hc2_low"), self._col(label, "hc2_high")
        if np.all(np.isnan(lo)):
            return float("nan")
        return float(np.mean((lo <= 0) & (hi >= 0)))

    def ci_length(self, label) -> np.ndarray:
        return self._col(label, "ci_high") - self._col(label, "ci_low")

    def hc2_ci_length(self, label) -> np.ndarray:
        return self._col(label, "hc2_high") - self._col(label, "hc2_low")

    def ci_length_change(self, label) -> float:
        return 100.0 * (self.ci_length(label).mean() / self.ci_length(self.baseline).mean() - 1.0)

    def ci_length_change_se(self, label) -> float:
        if label == self.baseline:
            return 0.0
        return 100.0 * _ratio_se(self.ci_length(label), self.ci_length(self.baseline))

    def mean_v_hat(self, label) -> float:
        return float(self._col(label, "v_hat").mean())

    def n_var_tau(self, label) -> float:
        """``n`` times the Monte Carlo variance of ``tau_hat``."""
        return float(self.n * np.var(self._col(label, "err"), ddof=1)) if self.reps > 1 else float("nan")

    def mean_gamma(self, label):
        g = self._col(label, "gamma")
        return float(g.mean()), float(g.std(ddof=1) / math.sqrt(len(g))) if len(g) > 1 else float("nan")

    def adaptive_lin_share(self) -> float:
        return float("nan") if self.branch_lin is None else float(self.branch_lin.mean())

    def summary_rows(self) -> List[dict]:
        rows = []
        for label in self.labels:
            cov = self.coverage(label)
            b, b_se = self.bias(label)
            g, g_se = self.mean_gamma(label)
            rows.append({
                "estimator": label,
                "relative_mse": self.relative_mse(label),
                "relative_mse_se": self.relative_mse_se(label),
                "coverage": cov,
                "coverage_se": math.sqrt(cov * (1 - cov) / self.reps),
                "ci_length_change": self.ci_length_change(label),
                "ci_length_change_se": self.ci_length_change_se(label),
                "hc2_coverage": self.hc2_coverage(label),
                "bias": b,
                "bias_se": b_se,
                "mean_v_hat": self.mean_v_hat(label),
                "n_var_tau": self.n_var_tau(label),
                "mean_gamma": g,
                "mean_gamma_se": g_se,
            })
        return rows

    def to_csv(self, path=None) -> str:
        rows = self.summary_rows()
        buf = io.StringIO()
        for key, value in self.meta.items():
            buf.write(f"# {key}: {json.dumps(value, default=str)}\n")
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]) + ["reps", "failed"], lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({**{k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()},
                             "reps": self.reps, "failed": self.failed})
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def to_dict(self) -> dict:
        out = {
            "meta": self.meta,
            "n": self.n,
            "reps": self.reps,
            "failed": self.failed,
            "estimators": self.summary_rows(),
        }
        if self.branch_lin is not None:
            out["adaptive_lin_share"] = self.adaptive_lin_share()
        if self.gamma_star is not None:
            out["gamma_star"] = self.gamma_star
        return out

    def to_json(self, path=None, **kwargs) -> str:
        text = json.dumps(self.to_dict(), default=_json_default, **kwargs)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, float) and math.isnan(o):
        return None
    return str(o)


def _collect(labels, outputs, n, reps, gamma_star=None, meta=None):
    ok = [o for o in outputs if not isinstance(o, Exception)]
    failed = len(outputs) - len(ok)
    if failed > FAILURE_BUDGET * reps:
        first = next(o for o in outputs if isinstance(o, Exception))
        raise FailureBudgetExceeded(failed, reps) from first
    records = {lab: np.array([t[lab] for t, _ in ok], dtype=float).reshape(len(ok), len(FIELDS)) for lab in labels}
    branches = [b for _, b in ok]
    branch_lin = np.array([b == "LIN" for b in branches]) if "adaptive" in labels else None
    return SimResult(tuple(labels), records, n, reps, failed, branch_lin, gamma_star, dict(meta or {}))


def _map(fn, items, jobs):
    if jobs is None or jobs == 1:
        return [fn(i) for i in items]
    from joblib import Parallel, delayed

    return Parallel(n_jobs=jobs)(delayed(fn)(i) for i in items)


def run_scenario(scenario: SimScenario, jobs: Optional[int] = 1, progress: Optional[Callable[[int], None]] = None) -> SimResult:
    """Replicate a scenario: draw units, assign matched tuples, estimate, score.

    Replications that raise a package error are dropped and counted; more
    than 1% failures aborts with :class:`FailureBudgetExceeded`.
    """
    reps = int(scenario.reps)

    def one(r):
        out = _safe(_run_rep, scenario, r)
        if progress is not None:
            progress(r)
        return out

    outputs = _map(one, range(reps), jobs)
    meta = {"scenario": scenario.to_dict()}
    return _collect(scenario.estimators, outputs, int(scenario.n), reps, scenario.gamma_star, meta)


def compute_excess_risk(results) -> Dict[str, float]:
    """Average gap between each estimator's relative MSE and the per-scenario minimum.

    ``results`` is a sequence of :class:`SimResult` or of mappings from
    estimator label to relative MSE; only labels present in every scenario
    are scored.
    """
    tables = []
    for r in results:
        if isinstance(r, SimResult):
            tables.append({lab: r.relative_mse(lab) for lab in r.labels})
        else:
            tables.append(dict(r))
    if not tables:
        raise DataError("excess risk needs at least one scenario")
    common = [lab for lab in tables[0] if all(lab in t for t in tables[1:])]
    out = {lab: 0.0 for lab in common}
    for t in tables:
        best = min(t[lab] for lab in common)
        for lab in common:
            out[lab] += t[lab] - best
    return {lab: v / len(tables) for lab, v in out.items()}


# ---------------------------------------------------------------------------
# imputation replay


def nearest_in_arm(x, d):
    """Index of the nearest unit in each arm; ``(idx0, idx1)``.

    Distances are Euclidean; ties go to the lowest index.  A unit's own
    index is returned for its own arm.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    d = np.asarray(d)
    out = []
    for arm in (0, 1):
        pool = np.flatnonzero(d == arm)
        if len(pool) == 0:
            raise EmptyArm(f"arm {arm} is empty")
        best = np.empty(len(x), dtype=np.int64)
        xp = x[pool]
        sq = (xp * xp).sum(axis=1)
        step = max(1, 2_000_000 // max(len(pool), 1))
        for start in range(0, len(x), step):
            block = x[start:start + step]
            dist = sq[None, :] - 2.0 * block @ xp.T + (block * block).sum(axis=1)[:, None]
            # exact recomputation on the near-minimal candidates keeps ties deterministic
            near = dist <= dist.min(axis=1, keepdims=True) + 1e-9 * (1.0 + np.abs(dist).max(axis=1, keepdims=True))
            for r, row in enumerate(near):
                cand = np.flatnonzero(row)
                if len(cand) == 1:
                    best[start + r] = pool[cand[0]]
                else:
                    exact = ((xp[cand] - block[r]) ** 2).sum(axis=1)
                    best[start + r] = pool[cand[np.flatnonzero(exact == exact.min())[0]]]
        own = d == arm
        best[own] = np.flatnonzero(own)
        out.append(best)
    return out[0], out[1]


def impute_outcomes(raw: ExperimentData, match_on=None) -> PotentialOutcomes:
    """Fill in each unit's missing potential outcome from its nearest neighbour in the other arm.

    ``match_on`` defaults to the stacked ``(psi, h)`` columns.
    """
    raw.require_both_arms()
    x = np.hstack([raw.psi, raw.h]) if match_on is None else np.asarray(match_on, dtype=float)
    i0, i1 = nearest_in_arm(x, raw.d)
    y0, y1 = raw.y[i0], raw.y[i1]
    return PotentialOutcomes(psi=raw.psi, h=raw.h, z=raw.z, y0=y0, y1=y1, true_ate=float(np.mean(y1 - y0)))


def parse_design_spec(spec: str):
    """``'matched:1/2'``, ``'complete:2/3'`` or ``'coarse:1/2'`` -> ``(kind, Propensity)``."""
    try:
        kind, prop = str(spec).split(":")
    except ValueError:
        raise DataError(f"design spec {spec!r} must look like 'matched:a/k'") from None
    kind = kind.strip().lower()
    if kind not in ("matched", "complete", "coarse"):
        raise DataError(f"unknown design kind {kind!r}")
    return kind, Propensity.parse(prop.strip())


def draw_design(kind: str, prop: Propensity, psi, rng, strata=None) -> Design:
    if kind == "matched":
        return assign_matched_tuples(psi, prop, rng_seed=rng)
    if kind == "complete":
        return assign_complete(len(psi), prop, rng_seed=rng)
    if strata is None:
        raise DataError("a coarse design needs stratum labels")
    return assign_coarse(strata, prop, rng_seed=rng, psi=psi)


def impute_replay(raw: ExperimentData, design_spec: str, reps: int = 200, seed: int = 0,
                  estimators: Sequence[str] = ALL_LABELS, match_on=None, strata=None,
                  ehw: bool = False, jobs: Optional[int] = 1) -> SimResult:
    """Counterfactual replay of a completed experiment under a new design.

    Imputes both potential outcomes by nearest-neighbour matching, then
    repeatedly draws a design, reveals the matching outcomes and forms each
    estimator.  The target is the mean imputed effect.
    """
    kind, prop = parse_design_spec(design_spec)
    table = impute_outcomes(raw, match_on)
    labels = tuple(parse_label(e)[2] for e in estimators)
    psi = table.psi if table.psi.shape[1] else table.h

    def one(r):
        def run():
            rng = rep_rng(seed, r)
            design = draw_design(kind, prop, psi, rng, strata)
            data = table.observe(design.treatment)
            pairing = pair_groups(design, psi)
            return evaluate_estimators(labels, data, design, pairing, table.true_ate, ehw)
        return _safe(run)

    outputs = _map(one, range(int(reps)), jobs)
    meta = {"design": design_spec, "reps": int(reps), "seed": int(seed), "true_ate": table.true_ate}
    return _collect(labels, outputs, table.n, int(reps), None, meta)


# ---------------------------------------------------------------------------
# oracle


def oracle_semiparam(y, d, f1, f0, p: float) -> float:
    """AIPW estimate with known conditional means ``f_d = E[Y(d) | X]``."""
    y, d, f1, f0 = (np.asarray(v, dtype=float) for v in (y, d, f1, f0))
    return float(np.mean(f1 - f0 + d * (y - f1) / p - (1 - d) * (y - f0) / (1 - p)))


def oracle_draw(scenario: SimScenario, rep: int, nuisance: str = "true") -> float:
    """Oracle AIPW error for one replication under iid Bernoulli(p) treatment.

    ``nuisance='true'`` plugs in the exact conditional means, ``'zero'``
    plugs in zeros (plain IPW).
    """
    rng = rep_rng(scenario.master_seed, rep)
    draw = draw_model(scenario.model, int(scenario.n), int(scenario.dim_psi), rng)
    p = scenario.prop.p
    d = (rng.random(draw.n) < p).astype(float)
    y = np.where(d == 1, draw.y1, draw.y0)
    if nuisance == "zero":
        f1 = f0 = np.zeros(draw.n)
    else:
        f1, f0 = draw.f1, draw.f0
    return oracle_semiparam(y, d, f1, f0, p) - draw.true_ate


# ---------------------------------------------------------------------------
# noncompliance


@dataclass(frozen=True)
class NoncomplianceModel:
    """One-sided noncompliance around a Model-style outcome.

    Units comply with probability ``logistic(slope * psi_1 + intercept)``;
    only compliers assigned to treatment take it up.  Individual effects
    are ``late + effect_sd * v`` with ``v`` standard normal and independent
    of compliance, so the local average effect equals ``late``.
    """

    late: float = 1.0
    intercept: float = 0.5
    slope: float = 1.0
    effect_sd: float = 0.5
    base: ModelSpec = MODELS[1]


def draw_noncompliance(model: NoncomplianceModel, n: int, m: int, prop: Propensity, rng):
    """Returns ``(data, design, true_late)`` for one replication."""
    rng = make_rng(rng)
    draw = draw_model(model.base, n, m, rng)
    comply_p = 1.0 / (1.0 + np.exp(-(model.intercept + model.slope * draw.psi[:, 0])))
    complier = rng.random(n) < comply_p
    effect = model.late + model.effect_sd * rng.standard_normal(n)
    design = assign_matched_tuples(draw.psi, prop, rng_seed=rng)
    z = design.treatment
    uptake = (z == 1) & complier
    y = draw.y0 + uptake * effect
    data = ExperimentData(y=y, d=z, psi=draw.psi, h=draw.h, z=draw.z, uptake=uptake.astype(np.int8), check_h=False)
    return data, design, model.late
