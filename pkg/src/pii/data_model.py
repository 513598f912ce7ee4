"""Shared containers, CSV/JSON I/O and column standardization."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class ValidationError(ValueError):
    """Input data or configuration violates a documented contract."""


class NumericalError(RuntimeError):
    """A numerical routine cannot produce a trustworthy answer."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


def _check_finite(m: np.ndarray, what: str) -> None:
    bad = np.argwhere(~np.isfinite(m))
    if bad.size:
        r, c = bad[0]
        raise ValidationError(f"{what}: non-finite entry at ({r},{c})")


@dataclass(frozen=True)
class Dataset:
    """Covariates ``x`` (n, d), outcomes ``y`` (n, p) and the control set.

    ``control_idx`` holds zero-based outcome columns assumed to carry no
    covariate effect; their complement holds the outcomes to be tested.
    """

    x: np.ndarray
    y: np.ndarray
    control_idx: tuple[int, ...]
    outcome_names: tuple[str, ...] | None = None
    covariate_names: tuple[str, ...] | None = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if y.ndim == 1:
            y = y[:, None]
        if x.ndim != 2 or y.ndim != 2:
            raise ValidationError("x and y must be matrices")
        n, d = x.shape
        p = y.shape[1]
        if y.shape[0] != n:
            raise ValidationError(f"dimension mismatch: x has {n} rows, y has {y.shape[0]}")
        if n < 2 or d < 1 or p < 1:
            raise ValidationError(f"need n>=2, d>=1, p>=1; got n={n}, d={d}, p={p}")
        _check_finite(x, "x")
        _check_finite(y, "y")
        ctrl = [int(j) for j in self.control_idx]
        if len(set(ctrl)) != len(ctrl):
            raise ValidationError("duplicate control indices")
        if any(j < 0 or j >= p for j in ctrl):
            raise ValidationError(f"control index out of range 0..{p - 1}")
        if len(ctrl) >= p:
            raise ValidationError("empty complement: every outcome is a control")
        if self.outcome_names is not None and len(self.outcome_names) != p:
            raise ValidationError("outcome_names length differs from number of outcomes")
        if self.covariate_names is not None and len(self.covariate_names) != d:
            raise ValidationError("covariate_names length differs from number of covariates")
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "control_idx", tuple(sorted(ctrl)))
        if self.outcome_names is not None:
            object.__setattr__(self, "outcome_names", tuple(self.outcome_names))
        if self.covariate_names is not None:
            object.__setattr__(self, "covariate_names", tuple(self.covariate_names))

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def p(self) -> int:
        return self.y.shape[1]

    @property
    def tested_idx(self) -> tuple[int, ...]:
        ctrl = set(self.control_idx)
        return tuple(j for j in range(self.p) if j not in ctrl)

    @property
    def y_controls(self) -> np.ndarray:
        return self.y[:, list(self.control_idx)]

    @property
    def y_tested(self) -> np.ndarray:
        return self.y[:, list(self.tested_idx)]

    def with_controls(self, control_idx: Sequence[int]) -> "Dataset":
        return Dataset(self.x, self.y, tuple(control_idx), self.outcome_names,
                       self.covariate_names)

    def subset_rows(self, rows: Sequence[int]) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.x[rows], self.y[rows], self.control_idx,
                       self.outcome_names, self.covariate_names)


@dataclass(frozen=True)
class EmbeddingResult:
    """Estimated embedding scores with the map that produced them."""

    u_hat: np.ndarray
    loadings: np.ndarray | None
    method: str
    preprocessing: tuple = ()
    fit_rows: tuple[int, ...] | None = None
    singular_values: np.ndarray | None = None

    def __post_init__(self):
        u = np.asarray(self.u_hat, dtype=np.float64)
        if u.ndim == 1:
            u = u[:, None]
        if self.method not in ("pca", "ruv", "external"):
            raise ValidationError(f"unknown embedding method {self.method!r}")
        if u.shape[1] < 1:
            raise ValidationError("embedding rank must be >= 1")
        _check_finite(u, "u_hat")
        object.__setattr__(self, "u_hat", _frozen(u))
        if self.loadings is not None:
            object.__setattr__(self, "loadings", _frozen(self.loadings))
        if self.singular_values is not None:
            object.__setattr__(self, "singular_values", _frozen(self.singular_values))

    @property
    def rank(self) -> int:
        return self.u_hat.shape[1]

    @property
    def inference_rows(self) -> np.ndarray:
        """Rows not used to fit the embedding map (all rows when unsplit)."""
        n = self.u_hat.shape[0]
        if not self.fit_rows:
            return np.arange(n)
        mask = np.ones(n, dtype=bool)
        mask[list(self.fit_rows)] = False
        return np.flatnonzero(mask)


def external_embedding(u: np.ndarray) -> EmbeddingResult:
    """Wrap a user-supplied embedding (for example the true latent matrix)."""
    return EmbeddingResult(np.asarray(u, dtype=np.float64), None, "external")


@dataclass(frozen=True)
class FitResult:
    """Per-outcome effect estimates and their sandwich covariances.

    Control columns carry ``beta_hat == 0`` and NaN in ``tstats`` and
    ``pvalues`` (the "not tested" sentinel).
    """

    beta_hat: np.ndarray
    cov_per_outcome: tuple[np.ndarray, ...]
    sigma_hat: np.ndarray
    tstats: np.ndarray
    pvalues: np.ndarray
    n_used: int
    control_idx: tuple[int, ...]
    outcome_names: tuple[str, ...] | None = None
    flags: tuple[str, ...] = ()
    internals: object = field(default=None, repr=False, compare=False)

    @property
    def tested_idx(self) -> tuple[int, ...]:
        ctrl = set(self.control_idx)
        return tuple(j for j in range(self.beta_hat.shape[1]) if j not in ctrl)

    @property
    def std_errors(self) -> np.ndarray:
        se = np.full(self.beta_hat.shape, np.nan)
        for j in self.tested_idx:
            se[:, j] = np.sqrt(np.diag(self.cov_per_outcome[j]))
        return se

    def to_json_dict(self) -> dict:
        return {
            "beta": _nan_to_none(self.beta_hat),
            "cov": [_nan_to_none(c) for c in self.cov_per_outcome],
            "tstat": _nan_to_none(self.tstats),
            "pvalue": _nan_to_none(self.pvalues),
            "controls": list(self.control_idx),
            "sigma": _nan_to_none(self.sigma_hat),
            "n_used": int(self.n_used),
            "outcome_names": list(self.outcome_names) if self.outcome_names else None,
            "flags": list(self.flags),
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "FitResult":
        beta = _none_to_nan(obj["beta"])
        d, p = beta.shape
        covs = tuple(_none_to_nan(c).reshape(d, d) for c in obj["cov"])
        names = obj.get("outcome_names")
        return cls(
            beta_hat=beta,
            cov_per_outcome=covs,
            sigma_hat=_none_to_nan(obj.get("sigma", np.full((d, d), np.nan))).reshape(d, d),
            tstats=_none_to_nan(obj["tstat"]),
            pvalues=_none_to_nan(obj["pvalue"]),
            n_used=int(obj.get("n_used", 0)),
            control_idx=tuple(obj["controls"]),
            outcome_names=tuple(names) if names else None,
            flags=tuple(obj.get("flags", ())),
        )


def _nan_to_none(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 0:
        v = float(a)
        return None if math.isnan(v) else v
    return [_nan_to_none(v) for v in a]


def _none_to_nan(obj) -> np.ndarray:
    def conv(v):
        if isinstance(v, list):
            return [conv(u) for u in v]
        return np.nan if v is None else float(v)
    return np.asarray(conv(obj), dtype=np.float64)


def dumps_json(obj) -> str:
    """Deterministic JSON text: sorted keys, shortest round-trip floats."""
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n"


# ---------------------------------------------------------------- CSV I/O

def read_matrix_csv(path: str | Path) -> tuple[np.ndarray, list[str]]:
    """Read a headered numeric CSV; returns (matrix, column names)."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        rows = []
        for r, rec in enumerate(reader):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise ValidationError(
                    f"{path}: row {r} has {len(rec)} cells, header has {len(header)}")
            vals = []
            for c, cell in enumerate(rec):
                try:
                    v = float(cell)
                except ValueError:
                    raise ValidationError(f"{path}: non-numeric cell at ({r},{c}): {cell!r}") from None
                if not math.isfinite(v):
                    raise ValidationError(f"{path}: non-finite entry at ({r},{c})")
                vals.append(v)
            rows.append(vals)
    m = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    return m, header


def write_matrix_csv(path: str | Path, m: np.ndarray, names: Sequence[str]) -> None:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 1:
        m = m[:, None]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(names))
        for row in m:
            w.writerow([repr(float(v)) for v in row])


def _resolve_controls(tokens: list[str], names: list[str]) -> list[int]:
    lookup = {nm: j for j, nm in enumerate(names)}
    out = []
    for tok in tokens:
        if tok in lookup:
            out.append(lookup[tok])
            continue
        try:
            j = int(tok)
        except ValueError:
            raise ValidationError(f"unknown control name {tok!r}") from None
        if not 0 <= j < len(names):
            raise ValidationError(f"control index {j} out of range")
        out.append(j)
    return out


def load_dataset(x_path: str | Path, y_path: str | Path,
                 controls_path: str | Path | None = None) -> Dataset:
    x, x_names = read_matrix_csv(x_path)
    y, y_names = read_matrix_csv(y_path)
    if x.shape[0] != y.shape[0]:
        raise ValidationError(
            f"dimension mismatch: {x_path} has {x.shape[0]} rows, {y_path} has {y.shape[0]}")
    controls: list[int] = []
    if controls_path is not None:
        tokens = [ln.strip() for ln in Path(controls_path).read_text().splitlines()]
        controls = _resolve_controls([t for t in tokens if t], y_names)
    return Dataset(x, y, tuple(controls), tuple(y_names), tuple(x_names))


def save_dataset(ds: Dataset, x_path: str | Path, y_path: str | Path,
                 controls_path: str | Path | None = None) -> None:
    x_names = ds.covariate_names or tuple(f"x{k}" for k in range(ds.d))
    y_names = ds.outcome_names or tuple(f"y{j}" for j in range(ds.p))
    write_matrix_csv(x_path, ds.x, x_names)
    write_matrix_csv(y_path, ds.y, y_names)
    if controls_path is not None:
        Path(controls_path).write_text("".join(f"{y_names[j]}\n" for j in ds.control_idx))


# ------------------------------------------------------- standardization

@dataclass(frozen=True)
class Standardization:
    """Per-column affine transform ``z = (m - mean) / scale``."""

    mode: str
    means: np.ndarray
    scales: np.ndarray
    degenerate: np.ndarray

    def apply(self, m: np.ndarray) -> np.ndarray:
        return (np.asarray(m, dtype=np.float64) - self.means) / self.scales

    def invert(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.scales + self.means


def column_standardize(m: np.ndarray, mode: str = "center") -> tuple[np.ndarray, Standardization]:
    """Center (and optionally scale) columns.

    Columns with zero sample standard deviation are only centered under
    ``center_scale``; they are flagged in ``Standardization.degenerate``.
    """
    m = np.asarray(m, dtype=np.float64)
    k = m.shape[1]
    if mode == "none":
        t = Standardization(mode, np.zeros(k), np.ones(k), np.zeros(k, dtype=bool))
        return m.copy(), t
    if mode not in ("center", "center_scale"):
        raise ValidationError(f"unknown standardization mode {mode!r}")
    constant = np.ptp(m, axis=0) == 0
    # the mean of a constant column can differ from its value by rounding
    means = np.where(constant, m[0], m.mean(axis=0))
    scales = np.ones(k)
    degenerate = np.zeros(k, dtype=bool)
    if mode == "center_scale":
        sd = m.std(axis=0, ddof=1) if m.shape[0] > 1 else np.zeros(k)
        degenerate = constant | ~(sd > 0)
        scales = np.where(degenerate, 1.0, sd)
    t = Standardization(mode, means, scales, degenerate)
    return t.apply(m), t
