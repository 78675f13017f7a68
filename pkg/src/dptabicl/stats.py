"""Significance testing and compute-cost arithmetic for reports."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy import stats as _st


def paired_t_test(series_a: Sequence[float], series_b: Sequence[float]) -> tuple[float, float]:
    """Two-tailed paired Student t-test; returns (t statistic, p-value)."""
    a = np.asarray(series_a, dtype=float)
    b = np.asarray(series_b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("series must be one-dimensional and of equal length")
    n = len(a)
    if n < 2:
        raise ValueError("need at least two pairs")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0:
        raise ValueError("differences have zero variance; the t statistic is undefined")
    t = d.mean() / (sd / math.sqrt(n))
    p = 2.0 * _st.t.sf(abs(t), df=n - 1)
    return float(t), float(min(p, 1.0))


def energy_report(power_watts: float, hours: float, kg_per_kwh: float) -> float:
    """kg CO2eq = W * h / 1000 * (kg/kWh)."""
    if power_watts < 0 or hours < 0 or kg_per_kwh < 0:
        raise ValueError("inputs must be non-negative")
    return power_watts * hours / 1000.0 * kg_per_kwh
