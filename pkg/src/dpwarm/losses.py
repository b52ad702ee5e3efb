"""Loss zoo with analytic gradients, a finite-difference oracle and sampling
certificates for the regularity conditions the optimizers rely on."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import kernels
from .core import Dataset, LossMetadata, RngStream, sample_unit_ball


class ConfigurationError(ValueError):
    """A required constant or reference point is missing."""


def _as_vec(w) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(w, dtype=np.float64).reshape(-1))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# per-sample evaluators -----------------------------------------------------


def sine_bowl_eval(w, x):
    """Value and gradient of 1/2 (|w|^2 + sin |w|^2) + <x, w>."""
    w, x = _as_vec(w), _as_vec(x)
    s = float(w @ w)
    return 0.5 * (s + math.sin(s)) + float(x @ w), w * (1.0 + math.cos(s)) + x


def quadratic_pl_eval(w, x):
    w, x = _as_vec(w), _as_vec(x)
    diff = w - x
    return 0.5 * float(diff @ diff), diff


def glm_sigmoid_sq_eval(w, x, y):
    """Squared-sigmoid GLM loss (y - s(<w, x>))^2 and its gradient."""
    w, x = _as_vec(w), _as_vec(x)
    s = float(_sigmoid(w @ x))
    r = y - s
    return r * r, (-2.0 * r * s * (1.0 - s)) * x


def _sine_bowl_rows(W, X, y):
    s = np.sum(W * W, axis=1)
    vals = 0.5 * (s + np.sin(s)) + np.sum(X * W, axis=1)
    grads = W * (1.0 + np.cos(s))[:, None] + X
    return vals, grads


def _quadratic_rows(W, X, y):
    diff = W - X
    return 0.5 * np.sum(diff * diff, axis=1), diff


def _glm_rows(W, X, y):
    s = _sigmoid(np.sum(W * X, axis=1))
    r = y - s
    return r * r, (-2.0 * r * s * (1.0 - s))[:, None] * X


@dataclass(frozen=True)
class LossModel:
    """A per-sample loss f(w, x[, y]) together with its declared constants.

    ``rows`` evaluates row-paired samples: row i of the result is
    f(W[i], X[i], y[i]) and its gradient in w. The optional ``mean_value`` and
    ``mean_grad`` are fast paths for the empirical loss at one point over a
    (possibly resampled) batch.
    """

    kind: str
    metadata: LossMetadata
    rows: Callable
    needs_labels: bool = False
    mean_value_fn: Optional[Callable] = field(default=None, repr=False)
    mean_grad_fn: Optional[Callable] = field(default=None, repr=False)
    minimizer_fn: Optional[Callable] = field(default=None, repr=False)

    # -- empirical loss ------------------------------------------------------

    def _labels(self, data: Dataset):
        if self.needs_labels:
            if data.labels is None:
                raise ValueError(f"loss {self.kind!r} needs labelled data")
            return data.labels
        return None

    def value(self, w, data: Dataset, idx=None) -> float:
        """Empirical loss F_X(w), optionally over the rows ``idx``."""
        w = _as_vec(w)
        if self.mean_value_fn is not None:
            return float(self.mean_value_fn(w, data, idx))
        X = data.samples if idx is None else data.samples[idx]
        y = self._labels(data)
        if y is not None and idx is not None:
            y = y[idx]
        W = np.broadcast_to(w, X.shape)
        return float(np.mean(self.rows(W, X, y)[0]))

    def grad(self, w, data: Dataset, idx=None) -> np.ndarray:
        """Gradient of the empirical loss, optionally over the rows ``idx``."""
        w = _as_vec(w)
        if self.mean_grad_fn is not None:
            return self.mean_grad_fn(w, data, idx)
        X = data.samples if idx is None else data.samples[idx]
        y = self._labels(data)
        if y is not None and idx is not None:
            y = y[idx]
        W = np.broadcast_to(w, X.shape)
        return np.mean(self.rows(W, X, y)[1], axis=0)

    def values_at(self, points, data: Dataset, chunk: int = 4096) -> np.ndarray:
        """Empirical loss at every row of ``points``."""
        P = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if self.kind == "sine_bowl":
            s = np.sum(P * P, axis=1)
            return 0.5 * (s + np.sin(s)) + P @ data.samples.mean(axis=0)
        if self.kind == "quadratic_pl":
            X = data.samples
            return 0.5 * (np.sum(P * P, axis=1) - 2.0 * P @ X.mean(axis=0) + np.mean(np.sum(X * X, axis=1)))
        out = np.empty(P.shape[0])
        if self.kind == "glm_sigmoid_sq":
            X, y = data.samples, self._labels(data)
            for lo in range(0, P.shape[0], chunk):
                r = y[None, :] - _sigmoid(P[lo:lo + chunk] @ X.T)
                out[lo:lo + chunk] = np.mean(r * r, axis=1)
            return out
        for i, p in enumerate(P):
            out[i] = self.value(p, data)
        return out

    def minimizer(self, data: Dataset):
        """Analytic minimizer of the empirical loss, or None when unknown."""
        return None if self.minimizer_fn is None else self.minimizer_fn(data)

    def min_value(self, data: Dataset):
        w = self.minimizer(data)
        return None if w is None else self.value(w, data)


# built-in families ---------------------------------------------------------


def _kernel_mean(fn):
    def mean(w, data, idx):
        return fn(w, data.samples, None if idx is None else np.ascontiguousarray(idx, dtype=np.int64))
    return mean


def _kernel_mean_labeled(fn):
    def mean(w, data, idx):
        if data.labels is None:
            raise ValueError("loss 'glm_sigmoid_sq' needs labelled data")
        return fn(w, data.samples, data.labels, None if idx is None else np.ascontiguousarray(idx, dtype=np.int64))
    return mean


def sine_bowl(radius: float = 2.0) -> LossModel:
    """Non-convex sine bowl on the ball of the given radius.

    With data in the unit ball the declared constants on the radius-2 ball are
    L = 5 and beta = 6.
    """
    meta = LossMetadata(L=5.0, beta=6.0, D=2.0 * radius)
    return LossModel(
        "sine_bowl", meta, _sine_bowl_rows,
        mean_value_fn=_kernel_mean(kernels.sine_bowl_mean_value),
        mean_grad_fn=_kernel_mean(kernels.sine_bowl_mean_grad),
    )


def quadratic_pl(radius: float = 2.0) -> LossModel:
    """1/2 |w - x|^2: convex, 1-smooth, and 1-PL* everywhere.

    L = radius + 1 bounds the per-sample gradient for |w| <= radius and
    data in the unit ball.
    """
    meta = LossMetadata(L=radius + 1.0, beta=1.0, D=2.0 * radius, q=1.0, gamma_k=(math.sqrt(0.5), 2.0))
    return LossModel(
        "quadratic_pl", meta, _quadratic_rows,
        mean_value_fn=_kernel_mean(kernels.quadratic_mean_value),
        mean_grad_fn=_kernel_mean(kernels.quadratic_mean_grad),
        minimizer_fn=lambda data: data.samples.mean(axis=0),
    )


def glm_sigmoid_sq(radius: float = 2.0) -> LossModel:
    """Squared-sigmoid GLM loss; constants assume |x| <= 1 and y in [0, 1].

    |phi'| <= 1/2 and |phi''| <= 1/8 + 1/(3 sqrt 3).
    """
    meta = LossMetadata(L=0.5, beta=0.125 + 1.0 / (3.0 * math.sqrt(3.0)), D=2.0 * radius)
    return LossModel(
        "glm_sigmoid_sq", meta, _glm_rows, needs_labels=True,
        mean_value_fn=_kernel_mean_labeled(kernels.glm_mean_value),
        mean_grad_fn=_kernel_mean_labeled(kernels.glm_mean_grad),
    )


LOSSES = {
    "sine_bowl": sine_bowl,
    "quadratic_pl": quadratic_pl,
    "glm_sigmoid_sq": glm_sigmoid_sq,
}


def get_loss(name: str, radius: float = 2.0) -> LossModel:
    try:
        return LOSSES[name](radius)
    except KeyError:
        raise ValueError(f"unknown loss {name!r}; choose from {sorted(LOSSES)}") from None


def custom_loss(name: str, metadata: LossMetadata, value_fn, grad_fn, needs_labels=False, minimizer_fn=None) -> LossModel:
    """Wrap per-sample ``value_fn(w, x[, y])`` / ``grad_fn`` callables."""

    def rows(W, X, y):
        m = W.shape[0]
        vals = np.empty(m)
        grads = np.empty_like(W, dtype=np.float64)
        for i in range(m):
            args = (W[i], X[i]) if y is None else (W[i], X[i], y[i])
            vals[i] = value_fn(*args)
            grads[i] = grad_fn(*args)
        return vals, grads

    return LossModel(name, metadata, rows, needs_labels=needs_labels, minimizer_fn=minimizer_fn)


def label_glm_data(data: Dataset, w_true, rng: RngStream, noise: float = 0.1) -> Dataset:
    """Attach labels y = clip(s(<w_true, x>) + noise) in [0, 1] to ``data``."""
    gen = rng.generator()
    y = _sigmoid(data.samples @ _as_vec(w_true)) + noise * gen.standard_normal(data.n)
    return Dataset(data.samples, np.clip(y, 0.0, 1.0))


# finite differences ---------------------------------------------------------


def finite_diff_grad(loss: LossModel, w, data: Dataset, h: Optional[float] = None) -> np.ndarray:
    """Central-difference gradient of the empirical loss at ``w``.

    The default step is 1e-5 * (1 + |w|).
    """
    w = _as_vec(w)
    if h is None:
        h = 1e-5 * (1.0 + float(np.linalg.norm(w)))
    if h <= 0:
        raise ValueError("step h must be positive")
    g = np.empty_like(w)
    e = np.zeros_like(w)
    for j in range(w.size):
        e[j] = h
        g[j] = (loss.value(w + e, data) - loss.value(w - e, data)) / (2.0 * h)
        e[j] = 0.0
    return g


def gradient_relative_error(loss: LossModel, w, data: Dataset, h: Optional[float] = None) -> float:
    an = loss.grad(w, data)
    fd = finite_diff_grad(loss, w, data, h)
    return float(np.linalg.norm(fd - an) / max(np.linalg.norm(an), 1e-12))


# certification ---------------------------------------------------------------


CERT_TOLERANCE = 1e-8


@dataclass(frozen=True)
class CertificationReport:
    """Outcome of a sampling check of one regularity inequality.

    ``worst_residual`` is the largest observed (lhs - rhs) of the inequality
    and ``worst_margin`` subtracts the tolerance from it, so the check passes
    exactly when the margin is nonpositive.
    """

    condition: str
    constants: dict
    n_samples: int
    worst_residual: float
    worst_margin: float
    passed: bool


def _ball_points(d, m, radius, rng):
    return sample_unit_ball(d, m, rng).samples * radius


def _sample_data(loss: LossModel, d: int, m: int, rng: RngStream):
    X = sample_unit_ball(d, m, rng.substream(0)).samples
    y = rng.substream(1).generator().random(m) if loss.needs_labels else None
    return X, y


def certify(loss: LossModel, condition: str, region_radius: float, n_samples: int, rng: RngStream,
            d: int = 2, data: Optional[Dataset] = None, minimizer=None, min_value: Optional[float] = None,
            tol: float = CERT_TOLERANCE) -> CertificationReport:
    """Check a defining inequality at random points of the radius-``region_radius`` ball.

    ``lipschitz`` and ``smooth`` test the per-sample function on random point
    pairs with a fresh unit-ball sample per pair (``lipschitz`` additionally
    checks |grad f| <= L at each point). ``quasar`` and ``kl`` test the
    empirical loss over ``data``; they need a reference minimizer (or minimum
    value) either passed in or known analytically.
    """
    meta = loss.metadata
    if data is not None:
        d = data.d
    if n_samples < 1:
        raise ValueError("n_samples must be positive")

    if condition in ("lipschitz", "smooth"):
        W1 = _ball_points(d, n_samples, region_radius, rng.substream(1))
        W2 = _ball_points(d, n_samples, region_radius, rng.substream(2))
        X, y = _sample_data(loss, d, n_samples, rng.substream(3))
        v1, g1 = loss.rows(W1, X, y)
        v2, g2 = loss.rows(W2, X, y)
        dist = np.linalg.norm(W1 - W2, axis=1)
        if condition == "lipschitz":
            constants = {"L": meta.L}
            res = np.concatenate([
                np.abs(v1 - v2) - meta.L * dist,
                np.linalg.norm(g1, axis=1) - meta.L,
                np.linalg.norm(g2, axis=1) - meta.L,
            ])
        else:
            constants = {"beta": meta.beta}
            res = np.linalg.norm(g1 - g2, axis=1) - meta.beta * dist
    elif condition in ("quasar", "kl"):
        if data is None:
            X, y = _sample_data(loss, d, 64, rng.substream(4))
            data = Dataset(X, y)
        W = _ball_points(d, n_samples, region_radius, rng.substream(5))
        vals = loss.values_at(W, data)
        grads = np.array([loss.grad(w, data) for w in W])
        if condition == "quasar":
            q = meta.q
            if q is None:
                raise ConfigurationError("quasar certification needs metadata.q")
            w_star = loss.minimizer(data) if minimizer is None else _as_vec(minimizer)
            if w_star is None:
                raise ConfigurationError("quasar certification needs a reference minimizer")
            g_star = loss.value(w_star, data)
            constants = {"q": q}
            res = vals + np.sum(grads * (w_star[None, :] - W), axis=1) / q - g_star
        else:
            if meta.gamma_k is None:
                raise ConfigurationError("kl certification needs metadata.gamma_k")
            gamma, k = meta.gamma_k
            g_star = min_value
            if g_star is None:
                w_star = loss.minimizer(data) if minimizer is None else _as_vec(minimizer)
                if w_star is None:
                    raise ConfigurationError("kl certification needs a reference minimum")
                g_star = loss.value(w_star, data)
            constants = {"gamma": gamma, "k": k}
            res = vals - g_star - gamma ** k * np.linalg.norm(grads, axis=1) ** k
    else:
        raise ValueError(f"unknown condition {condition!r}")

    worst = float(np.max(res))
    margin = worst - tol
    return CertificationReport(condition, constants, int(n_samples), worst, margin, margin <= 0)
