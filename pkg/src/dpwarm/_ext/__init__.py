"""Numerical kernels for the minibatch gradient loops.

``_kernels`` is the compiled (Cython) implementation; ``_fallback`` is the
pure numpy one with the same signatures. :mod:`dpwarm.kernels` picks one at
import time.
"""
