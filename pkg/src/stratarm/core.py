"""Data model, least-squares kernel and CSV ingestion."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .exceptions import (
    DataError,
    EmptyArm,
    MissingColumn,
    NonBinaryTreatment,
    NonNumericCell,
    RankDeficient,
)

# relative singular-value cutoff used for every rank decision
RANK_RTOL = 1e-10


@dataclass(frozen=True)
class Propensity:
    """Treatment proportion ``a/k``: ``a`` treated units in every group of ``k``."""

    a: int
    k: int

    def __post_init__(self):
        if not (isinstance(self.a, (int, np.integer)) and isinstance(self.k, (int, np.integer))):
            raise DataError(f"propensity must be integers, got {self.a!r}/{self.k!r}")
        if not 1 <= self.a < self.k:
            raise DataError(f"propensity {self.a}/{self.k} must satisfy 1 <= a < k")
        if math.gcd(int(self.a), int(self.k)) != 1:
            raise DataError(f"propensity {self.a}/{self.k} is not in lowest terms (gcd(a, k) must be 1)")

    @property
    def p(self) -> float:
        return self.a / self.k

    @property
    def s(self) -> float:
        """Normalising constant sqrt(p (1 - p))."""
        return math.sqrt(self.p * (1.0 - self.p))

    @classmethod
    def parse(cls, text: str) -> "Propensity":
        try:
            a, k = str(text).split("/")
            return cls(int(a), int(k))
        except ValueError as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"cannot parse propensity {text!r}; expected 'a/k'") from None

    @classmethod
    def from_counts(cls, treated: int, total: int) -> "Propensity":
        frac = Fraction(int(treated), int(total))
        return cls(frac.numerator, frac.denominator)

    def __str__(self):
        return f"{self.a}/{self.k}"


def _as_matrix(x, n, name):
    if x is None:
        return np.empty((n, 0))
    m = np.asarray(x, dtype=float)
    if m.ndim == 1:
        m = m.reshape(-1, 1)
    if m.ndim != 2:
        raise DataError(f"{name} must be 1-D or 2-D")
    if m.shape[0] != n:
        raise DataError(f"{name} has {m.shape[0]} rows, expected {n}")
    if not np.all(np.isfinite(m)):
        raise DataError(f"{name} contains non-finite values")
    return m


def _as_binary(x, n, name):
    v = np.asarray(x)
    if v.shape != (n,):
        raise DataError(f"{name} must have shape ({n},)")
    bad = ~np.isin(v, (0, 1))
    if bad.any():
        raise NonBinaryTreatment(int(np.flatnonzero(bad)[0]) + 1)
    return v.astype(np.int8)


@dataclass
class ExperimentData:
    """Per-unit records of a completed (or to-be-completed) experiment.

    ``psi`` holds stratification variables, ``h`` adjustment covariates and
    ``z`` optional strata controls (functions of ``psi``).  ``uptake`` is the
    realised treatment when ``d`` is an instrument (noncompliance).
    """

    y: np.ndarray
    d: np.ndarray
    psi: Optional[np.ndarray] = None
    h: Optional[np.ndarray] = None
    z: Optional[np.ndarray] = None
    uptake: Optional[np.ndarray] = None
    check_h: bool = field(default=True, repr=False)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.ndim != 1:
            raise DataError("y must be 1-D")
        if not np.all(np.isfinite(y)):
            raise DataError("y contains non-finite values")
        n = y.shape[0]
        self.y = y
        self.d = _as_binary(self.d, n, "d")
        self.psi = _as_matrix(self.psi, n, "psi")
        self.h = _as_matrix(self.h, n, "h")
        self.z = _as_matrix(self.z, n, "z")
        if self.uptake is not None:
            self.uptake = _as_binary(self.uptake, n, "uptake")
        if self.check_h and self.h.shape[1] > 0 and n > 1:
            hc = self.h - self.h.mean(axis=0)
            sv = np.linalg.svd(hc, compute_uv=False)
            if sv[-1] <= RANK_RTOL * max(sv[0], 1e-300) or sv[0] == 0.0:
                raise DataError("sample covariance of h is singular (constant or collinear columns)")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def d_psi(self) -> int:
        return self.psi.shape[1]

    @property
    def d_h(self) -> int:
        return self.h.shape[1]

    @property
    def d_z(self) -> int:
        return self.z.shape[1]

    @property
    def w(self) -> np.ndarray:
        """Stacked adjustment covariates ``(h, z)``."""
        return np.hstack([self.h, self.z])

    def subset(self, idx) -> "ExperimentData":
        idx = np.asarray(idx)
        return ExperimentData(
            y=self.y[idx],
            d=self.d[idx],
            psi=self.psi[idx],
            h=self.h[idx],
            z=self.z[idx],
            uptake=None if self.uptake is None else self.uptake[idx],
            check_h=False,
        )

    def replace(self, **changes) -> "ExperimentData":
        fields = dict(y=self.y, d=self.d, psi=self.psi, h=self.h, z=self.z, uptake=self.uptake)
        fields.update(changes)
        return ExperimentData(check_h=False, **fields)

    def arm_counts(self):
        n1 = int(self.d.sum())
        return n1, self.n - n1

    def require_both_arms(self):
        n1, n0 = self.arm_counts()
        if n1 == 0 or n0 == 0:
            raise EmptyArm("both treatment arms must be nonempty")


@dataclass
class LeastSquaresFit:
    coefficients: np.ndarray
    residuals: np.ndarray
    rank_flag: bool
    rank: int = 0


def solve_least_squares(design, response, allow_rank_deficient=False) -> LeastSquaresFit:
    """Least-squares fit through a thin SVD.

    Raises :class:`RankDeficient` when the smallest singular value falls
    below ``1e-10`` times the largest, unless ``allow_rank_deficient`` is
    set, in which case the minimum-norm solution is returned with
    ``rank_flag=False``.
    """
    X = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    n, q = X.shape
    if y.shape != (n,):
        raise DataError(f"response has shape {y.shape}, expected ({n},)")
    if n < q:
        raise RankDeficient(f"{q} regressors but only {n} observations")
    if q == 0:
        return LeastSquaresFit(np.empty(0), y.copy(), True, 0)
    U, sv, Vt = np.linalg.svd(X, full_matrices=False)
    keep = sv > RANK_RTOL * sv[0] if sv[0] > 0 else np.zeros(q, dtype=bool)
    rank = int(keep.sum())
    full = rank == q
    if not full and not allow_rank_deficient:
        raise RankDeficient(f"design has rank {rank} < {q} columns")
    coef = Vt[keep].T @ ((U[:, keep].T @ y) / sv[keep])
    resid = y - X @ coef
    return LeastSquaresFit(coef, resid, full, rank)


def demean(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.shape[0] == 0:
        return m.copy()
    return m - m.mean(axis=0)


def group_demean(m, labels, n_groups=None) -> np.ndarray:
    """Subtract within-group means; ``labels`` are integer group ids ``0..G-1``."""
    m = np.asarray(m, dtype=float)
    labels = np.asarray(labels)
    if m.ndim == 1:
        return group_demean(m.reshape(-1, 1), labels, n_groups).ravel()
    if m.shape[1] == 0:
        return m.copy()
    G = int(labels.max()) + 1 if n_groups is None else n_groups
    counts = np.bincount(labels, minlength=G).astype(float)
    out = np.empty_like(m)
    for j in range(m.shape[1]):
        means = np.bincount(labels, weights=m[:, j], minlength=G) / counts
        out[:, j] = m[:, j] - means[labels]
    return out


# ---------------------------------------------------------------------------
# CSV ingestion


@dataclass
class CsvSchema:
    """Column binding for :func:`load_csv`.

    ``psi``/``h``/``z`` may be explicit column lists; otherwise every column
    whose name starts with the matching prefix is used, in file order.
    Set ``y`` or ``d`` to ``None`` to read a covariate-only file.
    """

    y: Optional[str] = "y"
    d: Optional[str] = "d"
    psi_prefix: str = "psi_"
    h_prefix: str = "h_"
    z_prefix: str = "z_"
    psi: Optional[Sequence[str]] = None
    h: Optional[Sequence[str]] = None
    z: Optional[Sequence[str]] = None
    uptake: Optional[str] = None
    extra: Sequence[str] = ()

    @classmethod
    def coerce(cls, schema) -> "CsvSchema":
        if schema is None:
            return cls()
        if isinstance(schema, cls):
            return schema
        if isinstance(schema, Mapping):
            return cls(**schema)
        raise TypeError(f"cannot build a CsvSchema from {type(schema).__name__}")


def _parse_real(text, row, col):
    try:
        v = float(text)
    except (TypeError, ValueError):
        raise NonNumericCell(row, col) from None
    if not math.isfinite(v):
        raise NonNumericCell(row, col)
    return v


def read_table(path: Union[str, Path]):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [c.strip() for c in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file (header row required)") from None
        rows = [r for r in reader if any(c.strip() for c in r)]
    for i, r in enumerate(rows, start=1):
        if len(r) != len(header):
            raise DataError(f"{path}: row {i} has {len(r)} cells, header has {len(header)}")
    return header, rows


def _columns(header, names, prefix):
    if names is not None:
        for c in names:
            if c not in header:
                raise MissingColumn(c)
        return list(names)
    return [c for c in header if c.startswith(prefix)]


def _real_matrix(header, rows, cols):
    out = np.empty((len(rows), len(cols)))
    for j, c in enumerate(cols):
        pos = header.index(c)
        for i, r in enumerate(rows):
            out[i, j] = _parse_real(r[pos].strip(), i + 1, c)
    return out


def _binary_column(header, rows, col):
    pos = header.index(col)
    out = np.empty(len(rows), dtype=np.int8)
    for i, r in enumerate(rows):
        cell = r[pos].strip()
        if cell not in ("0", "1"):
            raise NonBinaryTreatment(i + 1)
        out[i] = int(cell)
    return out


def load_columns(path, schema=None):
    """Parse a CSV into a dict of named arrays (``y``, ``d``, ``psi``, ``h``, ``z``, ...)."""
    schema = CsvSchema.coerce(schema)
    header, rows = read_table(path)
    for col in (schema.y, schema.d, schema.uptake, *schema.extra):
        if col is not None and col not in header:
            raise MissingColumn(col)
    out = {
        "psi": _real_matrix(header, rows, _columns(header, schema.psi, schema.psi_prefix)),
        "h": _real_matrix(header, rows, _columns(header, schema.h, schema.h_prefix)),
        "z": _real_matrix(header, rows, _columns(header, schema.z, schema.z_prefix)),
    }
    if schema.y is not None:
        out["y"] = _real_matrix(header, rows, [schema.y])[:, 0]
    if schema.d is not None:
        out["d"] = _binary_column(header, rows, schema.d)
    if schema.uptake is not None:
        out["uptake"] = _binary_column(header, rows, schema.uptake)
    for col in schema.extra:
        pos = header.index(col)
        out[col] = [r[pos].strip() for r in rows]
    out["n"] = len(rows)
    return out


def load_csv(path, schema=None) -> ExperimentData:
    """Read a completed experiment from CSV."""
    cols = load_columns(path, schema)
    if "y" not in cols or "d" not in cols:
        raise DataError("load_csv needs both an outcome and a treatment column")
    return ExperimentData(
        y=cols["y"], d=cols["d"], psi=cols["psi"], h=cols["h"], z=cols["z"], uptake=cols.get("uptake")
    )
