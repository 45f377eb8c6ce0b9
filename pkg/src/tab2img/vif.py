"""Variance inflation factors and the initialization schemes built on them.

The VIF of feature i is 1/(1 - R_i^2), where R_i^2 is the coefficient of
determination from an ordinary-least-squares regression of column i on all
remaining columns plus an intercept. Values are clamped to [1, VIF_MAX] so
that perfectly collinear features keep a nonzero (if tiny) initial weight.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, ShapeError

VIF_MAX = 1e6
RIDGE = 1e-8


@dataclass(frozen=True)
class VifReport:
    """Per-feature collinearity diagnostics.

    Attributes
    ----------
    vif : (N,) array
        Clamped variance inflation factors, all >= 1.
    r_squared : (N,) array
        Raw coefficients of determination of each auxiliary regression.
    clamped : (N,) bool array
        True where R^2 reached the clamp region (R^2 >= 1 - 1/vif_max).
    vif_max : float
        Clamp ceiling that was applied.
    """

    vif: np.ndarray
    r_squared: np.ndarray
    clamped: np.ndarray
    vif_max: float = field(default=VIF_MAX)

    @property
    def n_features(self) -> int:
        return self.vif.shape[0]


def compute_vif(x: np.ndarray, vif_max: float = VIF_MAX, ridge: float = RIDGE) -> VifReport:
    """Regress every column on all others (plus intercept) and report VIFs.

    Parameters
    ----------
    x : (m, N) array
        Feature matrix; computed on the training split only to avoid
        leaking test statistics into the initialization.
    vif_max : float
        Ceiling for the clamp; R^2 = 1 maps here instead of infinity.
    ridge : float
        Jitter added to the normal equations for rank-deficient designs.

    Returns
    -------
    VifReport
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-d matrix, got shape {x.shape}")
    m, n = x.shape
    if n < 2:
        raise ConfigError("VIF needs at least 2 features (it is undefined for 1)")
    if m < 3:
        raise DataError(f"need at least 3 rows to fit auxiliary regressions, got {m}")

    vif = np.empty(n)
    r2_raw = np.empty(n)
    clamped = np.zeros(n, dtype=bool)
    r2_ceiling = 1.0 - 1.0 / vif_max

    for i in range(n):
        y = x[:, i]
        a = np.concatenate([np.delete(x, i, axis=1), np.ones((m, 1))], axis=1)
        ata = a.T @ a + ridge * np.eye(n)
        beta = np.linalg.solve(ata, a.T @ y)
        resid = y - a @ beta
        ss_res = float(resid @ resid)
        ss_tot = float(((y - y.mean()) ** 2).sum())
        if ss_tot <= 1e-24:
            # constant column: nothing to inflate
            r2_raw[i] = 0.0
            vif[i] = 1.0
            continue
        r2 = 1.0 - ss_res / ss_tot
        r2_raw[i] = r2
        if r2 >= r2_ceiling:
            clamped[i] = True
            vif[i] = vif_max
        else:
            vif[i] = 1.0 / (1.0 - max(r2, 0.0))

    return VifReport(vif=vif, r_squared=r2_raw, clamped=clamped, vif_max=vif_max)


def vif_init_weights(report: VifReport, rows: int, cols: int) -> np.ndarray:
    """Weight matrix with every entry of row i equal to 1/VIF_i.

    Used for the first layer of the VIF-initialized embedding branch;
    features with strong collinearity start with proportionally smaller
    weights and are trained normally afterwards.
    """
    if rows != report.n_features:
        raise ConfigError(f"weight rows {rows} != number of features {report.n_features}")
    col = (1.0 / report.vif).astype(np.float32)
    return np.repeat(col[:, None], cols, axis=1)


def dir_init_weights(report: VifReport, rows: int, cols: int, c_dir: float = 10.0) -> np.ndarray:
    """Weight matrix with row i equal to 1/(VIF_i + c_dir).

    The additive constant keeps weights away from zero when VIFs explode,
    which otherwise stalls convergence.
    """
    if rows != report.n_features:
        raise ConfigError(f"weight rows {rows} != number of features {report.n_features}")
    col = (1.0 / (report.vif + c_dir)).astype(np.float32)
    return np.repeat(col[:, None], cols, axis=1)


def mul_scale_init(report: VifReport) -> np.ndarray:
    """Initial values for the trainable per-feature scale c_i = 1/VIF_i."""
    return (1.0 / report.vif).astype(np.float32)


def write_vif_csv(report: VifReport, path, column_names=None) -> None:
    """Dump the report as CSV: feature, r_squared, vif, clamped."""
    names = column_names or [f"x{i}" for i in range(report.n_features)]
    if len(names) != report.n_features:
        raise ShapeError(f"{len(names)} names for {report.n_features} features")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", "r_squared", "vif", "clamped"])
        for name, r2, v, c in zip(names, report.r_squared, report.vif, report.clamped):
            w.writerow([name, f"{r2:.10g}", f"{v:.10g}", int(c)])
