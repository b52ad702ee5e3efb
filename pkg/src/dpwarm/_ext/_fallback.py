"""Pure numpy versions of the batch-mean loss kernels.

Every function takes the parameter vector ``w``, the sample matrix ``X``
(and labels ``y`` for the GLM) plus an optional int64 row-index array
``idx``; ``idx=None`` means the full dataset. Rows may repeat in ``idx``
(sampling with replacement).
"""

import numpy as np


def _rows(X, idx):
    return X if idx is None else X[idx]


def mean_rows(X, idx=None):
    return _rows(X, idx).mean(axis=0)


def sine_bowl_mean_value(w, X, idx=None):
    s = float(w @ w)
    return 0.5 * (s + np.sin(s)) + float(mean_rows(X, idx) @ w)


def sine_bowl_mean_grad(w, X, idx=None):
    s = float(w @ w)
    return w * (1.0 + np.cos(s)) + mean_rows(X, idx)


def quadratic_mean_value(w, X, idx=None):
    diff = w - _rows(X, idx)
    return 0.5 * float(np.mean(np.sum(diff * diff, axis=1)))


def quadratic_mean_grad(w, X, idx=None):
    return w - mean_rows(X, idx)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def glm_mean_value(w, X, y, idx=None):
    Xs = _rows(X, idx)
    ys = y if idx is None else y[idx]
    r = ys - _sigmoid(Xs @ w)
    return float(np.mean(r * r))


def glm_mean_grad(w, X, y, idx=None):
    Xs = _rows(X, idx)
    ys = y if idx is None else y[idx]
    s = _sigmoid(Xs @ w)
    coef = -2.0 * (ys - s) * s * (1.0 - s)
    return coef @ Xs / Xs.shape[0]
