"""Shared C^3 cutoff and blending profiles.

One polynomial ramp drives every cutoff in the package: the patching of
triples, the partition functions of the mode solver, and the interpolation
regions of the boundary-defining-function suite.  Keeping a single profile
makes smoothness budgets and derivative bounds uniform across modules.
"""

from __future__ import annotations

import numpy as np

Array = np.ndarray


def ramp(s):
    """C^3 monotone ramp: 0 for s <= 0, 1 for s >= 1.

    Septic polynomial with vanishing first three derivatives at both ends.
    """
    s = np.clip(s, 0.0, 1.0)
    return s ** 4 * (35.0 - 84.0 * s + 70.0 * s ** 2 - 20.0 * s ** 3)


def chi(t, lo, hi):
    """Decreasing C^3 cutoff: 1 for t <= lo, 0 for t >= hi."""
    if not lo < hi:
        raise ValueError("need lo < hi")
    return 1.0 - ramp((np.asarray(t, dtype=float) - lo) / (hi - lo))


def log_blend(t, lo, hi):
    """Increasing C^3 ramp in log t: 0 at t <= lo, 1 at t >= hi."""
    if not 0 < lo < hi:
        raise ValueError("need 0 < lo < hi")
    t = np.asarray(t, dtype=float)
    return ramp((np.log(t) - np.log(lo)) / (np.log(hi) - np.log(lo)))


def d_ramp(s):
    """Derivative of ramp (for commutator-size estimates)."""
    s = np.asarray(s, dtype=float)
    inside = (s > 0) & (s < 1)
    val = 140.0 * s ** 3 * (1.0 - s) ** 3
    out = np.where(inside, val, 0.0)
    return float(out) if out.ndim == 0 else out


def d2_ramp(s):
    """Second derivative of ramp."""
    s = np.asarray(s, dtype=float)
    inside = (s > 0) & (s < 1)
    val = 420.0 * s ** 2 * (1.0 - s) ** 2 * (1.0 - 2.0 * s)
    out = np.where(inside, val, 0.0)
    return float(out) if out.ndim == 0 else out
