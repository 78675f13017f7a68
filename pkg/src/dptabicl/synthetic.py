"""Deterministic stand-in for the blood donation table.

The real table is not bundled. This generator produces 748 rows with the
same columns, value ranges and rough correlations (monetary is 250 c.c. per
donation, recent and frequent donors are more likely to donate again), which
is enough to exercise every code path end to end.
"""

from __future__ import annotations

import csv

import numpy as np

BLOOD_COLUMNS = ["recency", "frequency", "monetary", "time", "donated"]


def synthetic_blood(n: int = 748, seed: int = 2007) -> list[list]:
    rng = np.random.default_rng(seed)
    frequency = np.clip(rng.geometric(0.18, n), 1, 50)
    recency = np.clip(np.round(rng.gamma(1.6, 6.0, n)), 0, 74).astype(int)
    span = np.round(rng.gamma(2.0, 4.5, n) * np.sqrt(frequency))
    time = np.clip(recency + span + 2, 2, 98).astype(int)
    monetary = 250 * frequency
    logit = -0.9 + 0.09 * frequency - 0.09 * recency - 0.01 * (time - recency)
    donated = (rng.random(n) < 1 / (1 + np.exp(-logit))).astype(int)
    return [[int(r), int(f), int(m), int(t), int(d)] for r, f, m, t, d in zip(recency, frequency, monetary, time, donated)]


def write_synthetic_blood(path, n: int = 748, seed: int = 2007) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BLOOD_COLUMNS)
        w.writerows(synthetic_blood(n, seed))
