"""Evaluation measures: MSE, MAE, concordance index, modified r-squared.

The concordance index sums a step function over every ordered pair whose
labels differ strictly (label ties are not comparable): 1 when the
predictions are ordered the same way, 0.5 when they tie, 0 otherwise,
normalized by the number of comparable pairs.

The modified r-squared is rm2 = r^2 * (1 - sqrt(r^2 - r0^2)) with r^2 the
squared Pearson correlation and r0^2 the through-origin coefficient using
slope kappa = sum(y*yhat)/sum(yhat^2). The radicand is clipped into
[0, 1]: the lower clip guards floating-point negativity (a through-origin
fit can never beat the free affine fit, so r0^2 <= r2 mathematically),
and the upper clip caps the penalty factor so rm2 stays within [0, 1]
even when r0^2 is far below zero. Both conventions are echoed in report
metadata.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels

R0_CONVENTION = "least-squares through origin on (y_hat, y)"
RADICAND_CLIP = "min(max(r2 - r02, 0), 1)"


@dataclass(frozen=True)
class MetricsReport:
    setting: str
    n: int
    mse: float
    mae: float
    ci: float | None
    rm2: float | None

    def to_dict(self) -> dict:
        return {
            "setting": self.setting,
            "n": self.n,
            "mse": self.mse,
            "mae": self.mae,
            "ci": self.ci,
            "rm2": self.rm2,
            "definitions": {"r0_convention": R0_CONVENTION, "clip": RADICAND_CLIP},
        }


def _check(y, y_hat, min_n=1):
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape or y.ndim != 1:
        raise ValueError(f"metrics: need equal 1-D arrays, got {y.shape} and {y_hat.shape}")
    if y.size < min_n:
        raise ValueError(f"metrics: need at least {min_n} values, got {y.size}")
    return y, y_hat


def mse(y, y_hat) -> float:
    y, y_hat = _check(y, y_hat)
    return float(np.mean((y_hat - y) ** 2))


def mae(y, y_hat) -> float:
    y, y_hat = _check(y, y_hat)
    return float(np.mean(np.abs(y_hat - y)))


def concordance_index(y, y_hat) -> float:
    y, y_hat = _check(y, y_hat, min_n=2)
    wins, ties, comparable = kernels.ci_pair_stats(y, y_hat)
    if comparable == 0:
        raise ValueError("concordance_index: no comparable pairs (all labels tied)")
    return (wins + 0.5 * ties) / comparable


def rm2(y, y_hat) -> float:
    y, y_hat = _check(y, y_hat, min_n=3)
    yc = y - y.mean()
    fc = y_hat - y_hat.mean()
    ss_y = float(yc @ yc)
    ss_f = float(fc @ fc)
    if ss_y == 0.0 or ss_f == 0.0:
        raise ValueError("rm2: zero variance in labels or predictions")
    r2 = float(yc @ fc) ** 2 / (ss_y * ss_f)
    ss_fhat = float(y_hat @ y_hat)
    if ss_fhat == 0.0:
        raise ValueError("rm2: predictions are identically zero")
    kappa = float(y @ y_hat) / ss_fhat
    resid = y - kappa * y_hat
    r02 = 1.0 - float(resid @ resid) / ss_y
    radicand = min(max(r2 - r02, 0.0), 1.0)
    return r2 * (1.0 - math.sqrt(radicand))


def evaluate(y, y_hat, setting: str = "") -> MetricsReport:
    """All four measures; CI/rm2 become None where undefined (with a note)."""
    y, y_hat = _check(y, y_hat)
    try:
        ci_val = concordance_index(y, y_hat)
    except ValueError:
        ci_val = None
    try:
        rm2_val = rm2(y, y_hat)
    except ValueError:
        rm2_val = None
    return MetricsReport(setting=setting, n=int(y.size),
                         mse=mse(y, y_hat), mae=mae(y, y_hat),
                         ci=ci_val, rm2=rm2_val)
