"""Finite-difference oracle for gradient verification.

The numeric side never touches the tape: it only re-evaluates the forward
function, so it stays independent of the code path it is used to check.
Run checks in float64; central differences with h=1e-5 then agree with
correct analytic gradients to well below 1e-5 relative error.
"""

from __future__ import annotations

import numpy as np


def numeric_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f w.r.t. array x (mutated in place, restored)."""
    if x.dtype != np.float64:
        raise ValueError("numeric_gradient expects float64 input")
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        fp = float(f())
        flat[i] = saved - h
        fm = float(f())
        flat[i] = saved
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference, scaled by the larger gradient magnitude.

    Gradients smaller than the finite-difference noise floor (~1e-8 for
    central differences at h=1e-5 in f64) are compared absolutely, so a
    structurally zero gradient does not divide noise by noise.
    """
    num = float(np.max(np.abs(analytic - numeric)))
    den = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))))
    if den < 1e-7:
        return num
    return num / den
