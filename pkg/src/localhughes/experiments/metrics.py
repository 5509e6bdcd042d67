"""Evacuation metrics on mass histories."""
from __future__ import annotations

import math

import numpy as np

NOT_REACHED = math.inf


class HistoryError(ValueError):
    """Mass history is empty or increases."""


def evacuation_time(times, mass, threshold: float = 0.99, tol: float = 1e-12) -> float:
    """First time the remaining fraction drops to ``1 - threshold``.

    Linear interpolation between samples; :data:`NOT_REACHED` (``inf``) if the
    level is never attained. ``mass`` must be nonincreasing.
    """
    t = np.asarray(times, float)
    m = np.asarray(mass, float)
    if t.size == 0 or t.size != m.size:
        raise HistoryError("history must be nonempty with matching lengths")
    if np.any(np.diff(m) > tol * max(abs(m[0]), 1.0)):
        raise HistoryError("mass history is not monotone nonincreasing")
    if m[0] <= 0:
        return float(t[0])
    level = (1.0 - threshold) * m[0]
    hit = np.flatnonzero(m <= level)
    if hit.size == 0:
        return NOT_REACHED
    i = int(hit[0])
    if i == 0:
        return float(t[0])
    m0, m1 = m[i - 1], m[i]
    s = (m0 - level) / (m0 - m1)
    return float(t[i - 1] + s * (t[i] - t[i - 1]))


def saturation_time(times, cumulative, fraction: float = 0.99) -> float:
    """First time a cumulative series reaches ``fraction`` of its final value (interpolated)."""
    t = np.asarray(times, float)
    c = np.asarray(cumulative, float)
    final = c[-1]
    if final <= 0:
        return float(t[0])
    return evacuation_time(t, final - c, fraction)


def outflux_shares(outflux_final) -> np.ndarray:
    o = np.asarray(outflux_final, float)
    s = o.sum()
    return o / s if s > 0 else np.zeros_like(o)
