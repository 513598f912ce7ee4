"""Nonparametric identification on finite supports.

Given the observed joint pmf of (Y_C, Y_R, X) and an admissible factor
f~(y_C, u) of the control block and the latent variable, recover
f~(x | u), f~(y_R | x, u) and the counterfactual pmf of Y(x).

Conditioning on the controls turns each unknown conditional table into an
overdetermined linear system whose coefficient matrix is built from
f~(y_C, u); full column rank of that matrix is the finite-support stand-in
for completeness.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from pii.data_model import NumericalError, ValidationError, dumps_json

_SUM_TOL = 1e-12
_MARGIN_TOL = 1e-10
_RESID_TOL = 1e-6
_NEG_TOL = 1e-8


@dataclass(frozen=True)
class PmfTables:
    """Observed pmf and admissible control/latent factor.

    ``f_obs[c, r, x]`` is f(y_C = supp_yc[c], y_R = supp_yr[r], X = supp_x[x])
    and ``f_tilde_ycu[c, u]`` is f~(y_C = supp_yc[c], U = supp_u[u]).
    """

    supp_x: tuple
    supp_u: tuple
    supp_yc: tuple
    supp_yr: tuple
    f_obs: np.ndarray
    f_tilde_ycu: np.ndarray

    def __post_init__(self):
        for name in ("supp_x", "supp_u", "supp_yc", "supp_yr"):
            object.__setattr__(self, name, tuple(_freeze(v) for v in getattr(self, name)))
        f = np.asarray(self.f_obs, dtype=np.float64)
        g = np.asarray(self.f_tilde_ycu, dtype=np.float64)
        nc, nr, nx, nu = len(self.supp_yc), len(self.supp_yr), len(self.supp_x), len(self.supp_u)
        if f.shape != (nc, nr, nx):
            raise ValidationError(f"f_obs has shape {f.shape}, expected {(nc, nr, nx)}")
        if g.shape != (nc, nu):
            raise ValidationError(f"f_tilde_ycu has shape {g.shape}, expected {(nc, nu)}")
        for arr, nm in ((f, "f_obs"), (g, "f_tilde_ycu")):
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise ValidationError(f"{nm} must be finite and nonnegative")
            if abs(arr.sum() - 1.0) > _SUM_TOL:
                raise ValidationError(f"{nm} sums to {arr.sum()!r}, not 1")
        gap = np.max(np.abs(g.sum(axis=1) - f.sum(axis=(1, 2))))
        if gap > _MARGIN_TOL:
            raise ValidationError(f"factor not admissible: control marginals differ by {gap:.3g}")
        if np.any(g.sum(axis=0) <= 0):
            raise ValidationError("every latent value needs positive mass")
        f.setflags(write=False)
        g.setflags(write=False)
        object.__setattr__(self, "f_obs", f)
        object.__setattr__(self, "f_tilde_ycu", g)

    @property
    def f_x(self) -> np.ndarray:
        return self.f_obs.sum(axis=(0, 1))

    def to_json_dict(self) -> dict:
        return {
            "supp_x": [_thaw(v) for v in self.supp_x],
            "supp_u": [_thaw(v) for v in self.supp_u],
            "supp_yc": [_thaw(v) for v in self.supp_yc],
            "supp_yr": [_thaw(v) for v in self.supp_yr],
            "index_order": {"f_obs": ["yc", "yr", "x"], "f_tilde_ycu": ["yc", "u"]},
            "f_obs": self.f_obs.ravel().tolist(),
            "f_tilde_ycu": self.f_tilde_ycu.ravel().tolist(),
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "PmfTables":
        try:
            nc, nr, nx, nu = (len(obj[k]) for k in ("supp_yc", "supp_yr", "supp_x", "supp_u"))
            f = np.asarray(obj["f_obs"], dtype=np.float64)
            g = np.asarray(obj["f_tilde_ycu"], dtype=np.float64)
        except KeyError as exc:
            raise ValidationError(f"missing key {exc.args[0]!r}") from None
        if f.size != nc * nr * nx or g.size != nc * nu:
            raise ValidationError("flat table lengths disagree with supports")
        return cls(obj["supp_x"], obj["supp_u"], obj["supp_yc"], obj["supp_yr"],
                   f.reshape(nc, nr, nx), g.reshape(nc, nu))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(dumps_json(self.to_json_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "PmfTables":
        return cls.from_json_dict(json.loads(Path(path).read_text()))


def _freeze(v):
    return tuple(_freeze(w) for w in v) if isinstance(v, (list, tuple)) else v


def _thaw(v):
    return [_thaw(w) for w in v] if isinstance(v, tuple) else v


@dataclass(frozen=True)
class Solution:
    """A recovered conditional table with solver diagnostics."""

    table: np.ndarray
    residual: float
    min_raw: float


def _full_column_rank(a: np.ndarray, what: str) -> None:
    s = np.linalg.svd(a, compute_uv=False)
    if s.size < a.shape[1] or s[-1] <= 1e-12 * max(s[0], 1e-300):
        raise NumericalError(f"{what} lacks full column rank (completeness violated)")


def _clip_normalize(raw: np.ndarray, axis: int, strict: bool) -> np.ndarray:
    if strict and raw.min() < -_NEG_TOL:
        raise NumericalError(f"negative probability {raw.min():.3g} in solution")
    t = np.clip(raw, 0.0, None)
    tot = t.sum(axis=axis, keepdims=True)
    if np.any(tot <= 0):
        raise NumericalError("solution has an all-zero conditional distribution")
    return t / tot


def solve_treatment(tables: PmfTables, *, strict: bool = False) -> Solution:
    """Recover f~(x | u) as an array indexed ``[x, u]``.

    For every x, solves sum_u f~(y_C, u) f~(x | u) = f(y_C, x) over all y_C
    by least squares, then clips at zero and renormalizes over x.

    Parameters
    ----------
    tables : PmfTables
    strict : bool
        Raise instead of clipping when an entry is below -1e-8.

    Returns
    -------
    Solution
    """
    m = tables.f_tilde_ycu
    _full_column_rank(m, "f~(y_C, u)")
    rhs = tables.f_obs.sum(axis=1)  # f(y_C, x)
    sol, *_ = np.linalg.lstsq(m, rhs, rcond=None)  # [u, x]
    resid = float(np.linalg.norm(m @ sol - rhs))
    if resid > _RESID_TOL:
        raise NumericalError(f"treatment system inconsistent: residual {resid:.3g}")
    table = _clip_normalize(sol, axis=1, strict=strict).T
    return Solution(table, resid, float(sol.min()))


def solve_outcome(tables: PmfTables, f_x_given_u: np.ndarray, *, strict: bool = False) -> Solution:
    """Recover f~(y_R | x, u) as an array indexed ``[y_R, x, u]``.

    For each x, the coefficient matrix is f~(y_C, u | x) =
    f~(y_C, u) f~(x | u) / f(x) and the right-hand side is
    f(y_C, y_R | x); rows range over y_C.

    Parameters
    ----------
    tables : PmfTables
    f_x_given_u : ndarray
        Array ``[x, u]``, typically ``solve_treatment(tables).table``.
    strict : bool
        Raise instead of clipping when an entry is below -1e-8.

    Returns
    -------
    Solution
    """
    fxu = np.asarray(f_x_given_u, dtype=np.float64)
    nx, nu = len(tables.supp_x), len(tables.supp_u)
    if fxu.shape != (nx, nu):
        raise ValidationError(f"f_x_given_u has shape {fxu.shape}, expected {(nx, nu)}")
    fx = tables.f_x
    if np.any(fx <= 0):
        raise ValidationError("every treatment value needs positive probability")
    nr = len(tables.supp_yr)
    raw = np.empty((nr, nx, nu))
    resid = 0.0
    for x in range(nx):
        a = tables.f_tilde_ycu * fxu[x][None, :] / fx[x]
        _full_column_rank(a, f"f~(y_C, u | x={tables.supp_x[x]!r})")
        rhs = tables.f_obs[:, :, x] / fx[x]  # [y_C, y_R]
        sol, *_ = np.linalg.lstsq(a, rhs, rcond=None)  # [u, y_R]
        resid = max(resid, float(np.linalg.norm(a @ sol - rhs)))
        raw[:, x, :] = sol.T
    if resid > _RESID_TOL:
        raise NumericalError(f"outcome system inconsistent: residual {resid:.3g}")
    table = _clip_normalize(raw, axis=0, strict=strict)
    return Solution(table, resid, float(raw.min()))


def counterfactual(tables: PmfTables, f_y_given_xu: np.ndarray) -> np.ndarray:
    """Counterfactual pmf of (Y_C, Y_R) under X := x, indexed ``[y_C, y_R, x]``.

    f_{Y(x)}(y_C, y_R) = sum_u f~(y_R | u, x) f~(y_C, u).
    """
    f = np.asarray(f_y_given_xu, dtype=np.float64)
    shape = (len(tables.supp_yr), len(tables.supp_x), len(tables.supp_u))
    if f.shape != shape:
        raise ValidationError(f"f_y_given_xu has shape {f.shape}, expected {shape}")
    return np.einsum("rxu,cu->crx", f, tables.f_tilde_ycu)


@dataclass(frozen=True)
class IdentificationResult:
    f_x_given_u: Solution
    f_yr_given_xu: Solution
    counterfactual: np.ndarray

    def to_json_dict(self, tables: PmfTables) -> dict:
        return {
            "index_order": {"f_x_given_u": ["x", "u"], "f_yr_given_xu": ["yr", "x", "u"],
                            "counterfactual": ["yc", "yr", "x"]},
            "f_x_given_u": self.f_x_given_u.table.tolist(),
            "f_yr_given_xu": self.f_yr_given_xu.table.tolist(),
            "counterfactual": self.counterfactual.tolist(),
            "residual_treatment": self.f_x_given_u.residual,
            "residual_outcome": self.f_yr_given_xu.residual,
            "supp_x": [_thaw(v) for v in tables.supp_x],
            "supp_u": [_thaw(v) for v in tables.supp_u],
        }


def identify(tables: PmfTables, *, strict: bool = False) -> IdentificationResult:
    """Run treatment, outcome and counterfactual steps in sequence."""
    t = solve_treatment(tables, strict=strict)
    o = solve_outcome(tables, t.table, strict=strict)
    return IdentificationResult(t, o, counterfactual(tables, o.table))


def tables_from_model(f_u, f_x_given_u, f_yc_given_u, f_yr_given_xu, *, supp_x=None,
                      supp_u=None, supp_yc=None, supp_yr=None) -> PmfTables:
    """Observed tables implied by a finite latent-variable model.

    Arrays: ``f_u[u]``, ``f_x_given_u[x, u]``, ``f_yc_given_u[c, u]`` and
    ``f_yr_given_xu[r, x, u]``; Y_C and (X, Y_R) are independent given U.
    The admissible factor is the true f(y_C, u).
    """
    f_u = np.asarray(f_u, dtype=np.float64)
    fxu = np.asarray(f_x_given_u, dtype=np.float64)
    fcu = np.asarray(f_yc_given_u, dtype=np.float64)
    fru = np.asarray(f_yr_given_xu, dtype=np.float64)
    f_obs = np.einsum("u,xu,cu,rxu->crx", f_u, fxu, fcu, fru)
    f_cu = fcu * f_u[None, :]
    nc, nr, nx = f_obs.shape
    return PmfTables(supp_x or list(range(nx)), supp_u or list(range(f_u.size)),
                     supp_yc or list(range(nc)), supp_yr or list(range(nr)),
                     f_obs / f_obs.sum(), f_cu / f_cu.sum())
