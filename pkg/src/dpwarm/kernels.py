"""Backend selection for the batch-mean loss kernels.

The compiled extension is used when it was built and importable; setting
``DPWARM_PURE_PYTHON=1`` forces the numpy fallback.
"""

import os

from ._ext import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("DPWARM_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from ._ext import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        _impl = _compiled
        BACKEND = "cython"

mean_rows = _impl.mean_rows
sine_bowl_mean_value = _impl.sine_bowl_mean_value
sine_bowl_mean_grad = _impl.sine_bowl_mean_grad
quadratic_mean_value = _impl.quadratic_mean_value
quadratic_mean_grad = _impl.quadratic_mean_grad
glm_mean_value = _impl.glm_mean_value
glm_mean_grad = _impl.glm_mean_grad

__all__ = [
    "BACKEND",
    "mean_rows",
    "sine_bowl_mean_value",
    "sine_bowl_mean_grad",
    "quadratic_mean_value",
    "quadratic_mean_grad",
    "glm_mean_value",
    "glm_mean_grad",
]
