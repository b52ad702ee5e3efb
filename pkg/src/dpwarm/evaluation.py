"""Stationarity and suboptimality measurements."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import Dataset
from .losses import LossModel
from .privacy import CandidateNet, FeasibilityError

HESSIAN_DIM_CAP = 50


@dataclass(frozen=True)
class EvalReport:
    point: np.ndarray
    grad_norm_train: float
    grad_norm_test: Optional[float] = None
    min_hessian_eig: Optional[float] = None
    gap_estimate: Optional[float] = None


def grad_norm(loss: LossModel, data: Dataset, w) -> float:
    """l2 norm of the empirical gradient; on held-out data it estimates |grad F|."""
    return float(np.linalg.norm(loss.grad(w, data)))


def fd_hessian(loss: LossModel, data: Dataset, w, h: Optional[float] = None) -> np.ndarray:
    """Symmetrised central-difference Hessian of the empirical loss (from gradients)."""
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    d = w.size
    if d > HESSIAN_DIM_CAP:
        raise FeasibilityError(f"Hessian check limited to d <= {HESSIAN_DIM_CAP}, got d={d}")
    if h is None:
        h = 1e-4 * (1.0 + float(np.linalg.norm(w)))
    H = np.empty((d, d))
    e = np.zeros(d)
    for j in range(d):
        e[j] = h
        H[:, j] = (loss.grad(w + e, data) - loss.grad(w - e, data)) / (2.0 * h)
        e[j] = 0.0
    return 0.5 * (H + H.T)


def sosp_check(loss: LossModel, data: Dataset, w, alpha: float, rho: float):
    """Return (is_fosp, is_sosp, min_eig) for the alpha-stationarity tests.

    First order: |grad| <= alpha. Second order additionally needs the smallest
    Hessian eigenvalue >= -sqrt(rho * alpha).
    """
    g = grad_norm(loss, data, w)
    min_eig = float(np.linalg.eigvalsh(fd_hessian(loss, data, w))[0])
    is_fosp = g <= alpha
    is_sosp = is_fosp and min_eig >= -math.sqrt(rho * alpha)
    return is_fosp, is_sosp, min_eig


def gap_estimate(loss: LossModel, data: Dataset, w, reference="analytic") -> float:
    """F(w) minus the best empirical loss over a reference.

    ``reference`` is ``"analytic"`` (the loss's known minimizer), a
    CandidateNet, or an array of points such as a run trace.
    """
    if isinstance(reference, str):
        if reference != "analytic":
            raise ValueError(f"unknown reference {reference!r}")
        best = loss.min_value(data)
        if best is None:
            raise ValueError(f"loss {loss.kind!r} has no analytic minimum")
    else:
        pts = reference.points if isinstance(reference, CandidateNet) else np.asarray(reference, dtype=np.float64)
        pts = np.atleast_2d(pts)
        if pts.shape[0] == 0 or pts.size == 0:
            raise ValueError("reference set is empty")
        best = float(np.min(loss.values_at(pts, data)))
    return loss.value(w, data) - best


def evaluate(loss: LossModel, train: Dataset, w, test: Optional[Dataset] = None, hessian: bool = False,
             reference=None) -> EvalReport:
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    report = EvalReport(
        point=w.copy(),
        grad_norm_train=grad_norm(loss, train, w),
        grad_norm_test=None if test is None else grad_norm(loss, test, w),
        min_hessian_eig=float(np.linalg.eigvalsh(fd_hessian(loss, train, w))[0]) if hessian else None,
        gap_estimate=None if reference is None else gap_estimate(loss, train, w, reference),
    )
    return report
