"""Shared fixture builders for the test suite."""

from __future__ import annotations

import numpy as np

from icustudy.group import BINARY_INDICES, N_VARIABLES, PatientKey, StudyGroup


def make_group(rng: np.random.Generator, n: int, overrides: dict | None = None) -> StudyGroup:
    """A valid random study group; `overrides` replaces columns by index."""
    x = np.zeros((n, N_VARIABLES))
    for i in range(1, N_VARIABLES + 1):
        if i in BINARY_INDICES:
            x[:, i - 1] = rng.choice([-1.0, 1.0], size=n)
        elif i == 58:
            x[:, i - 1] = rng.gamma(2.0, 3.0, size=n)
        else:
            x[:, i - 1] = rng.normal(10.0, 3.0, size=n)
    if overrides:
        for i, col in overrides.items():
            x[:, i - 1] = np.asarray(col, dtype=float)
    keys = [PatientKey(1000 + i, 2000 + i, 3000 + i) for i in range(n)]
    return StudyGroup(keys, x)
