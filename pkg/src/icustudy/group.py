"""Core study-group data structures and their CSV form.

A study group is the central analysis table: one row per patient, 58
variables x1..x58 plus the identifying key triple.  Variable layout:

    x1   diuretics given (-1/+1)        x30-x34  fluids inputs (liters)
    x2   age (years)                    x35-x39  fluids outputs (liters)
    x3   gender (-1 male / +1 female)   x40-x44  fluids balance (in - out)
    x4   race (-1 not white / +1 white) x45      vasopressors (-1/+1)
    x5-x9    SAPS                       x46      ventilation (-1/+1)
    x10-x14  SOFA                       x47-x51  arterial blood pressure
    x15      Elixhauser overall         x52-x56  mean arterial pressure
    x16-x24  Elixhauser binaries        x57      30-day mortality (-1/+1)
    x25-x29  creatinine                 x58      ICU length of stay (days)

Each five-slot timeline block is (average day 1..T1, day 1, day T1,
day T2, day T3); fluids blocks hold daily sums rather than medians.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

N_VARIABLES = 58

#: columns restricted to {-1, +1}
BINARY_INDICES = frozenset({1, 3, 4, 16, 17, 18, 19, 20, 21, 22, 23, 24, 45, 46, 57})

#: the 55 covariates considered for propensity modeling and balance checks
COVARIATE_INDICES = tuple(range(2, 57))

#: variables whose value depends on the per-patient decision day T1
T1_DEPENDENT_INDICES = frozenset({5, 7, 10, 12, 25, 27, 30, 32, 35, 37, 40, 42, 47, 49, 52, 54})

TREATMENT_INDEX = 1
MORTALITY_INDEX = 57
LOS_INDEX = 58


@dataclass(frozen=True, order=True)
class PatientKey:
    """Identifying triple: patient, hospital admission, ICU stay."""

    subject_id: int
    hadm_id: int
    icustay_id: int

    def __post_init__(self):
        for name in ("subject_id", "hadm_id", "icustay_id"):
            value = getattr(self, name)
            if not isinstance(value, int) or value <= 0:
                raise DataError(f"PatientKey.{name} must be a positive integer, got {value!r}")

    def __str__(self):
        return f"{self.subject_id}/{self.hadm_id}/{self.icustay_id}"


@dataclass
class StudyRow:
    key: PatientKey
    x: np.ndarray  # shape (58,)

    def value(self, index: int) -> float:
        return float(self.x[index - 1])


class StudyGroup:
    """Immutable table of study rows, ordered by patient key."""

    def __init__(self, keys: Sequence[PatientKey], x: np.ndarray, validate: bool = True):
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != N_VARIABLES:
            raise DataError(f"study matrix must be (n, {N_VARIABLES}), got {x.shape}")
        if len(keys) != x.shape[0]:
            raise DataError("key count does not match row count")
        self.keys = list(keys)
        self.x = x
        if validate:
            self._validate()

    def _validate(self):
        # NaN marks a value a non-default mandatory list left optional
        if len(set(self.keys)) != len(self.keys):
            raise DataError("duplicate patient keys in study group")
        for i in sorted(BINARY_INDICES):
            col = self.col(i)
            bad = ~np.isin(col, (-1.0, 1.0)) & ~np.isnan(col)
            if bad.any():
                raise DataError(f"x{i} contains non-binary value {col[bad][0]!r}")
        if (self.col(LOS_INDEX) < 0).any():
            raise DataError("x58 (length of stay) must be non-negative")
        if np.isinf(self.x).any():
            raise DataError("study matrix contains infinite values")

    # --- access ------------------------------------------------------------

    def __len__(self):
        return len(self.keys)

    @property
    def n(self) -> int:
        return len(self.keys)

    def col(self, index: int) -> np.ndarray:
        """Column for variable x<index> (1-based)."""
        if not 1 <= index <= N_VARIABLES:
            raise DataError(f"variable index out of range: {index}")
        return self.x[:, index - 1]

    @property
    def treated(self) -> np.ndarray:
        return self.col(TREATMENT_INDEX) > 0

    @property
    def n_treated(self) -> int:
        return int(self.treated.sum())

    @property
    def n_untreated(self) -> int:
        return self.n - self.n_treated

    def rows(self) -> Iterable[StudyRow]:
        for key, row in zip(self.keys, self.x):
            yield StudyRow(key, row)

    def subset(self, mask: np.ndarray) -> "StudyGroup":
        mask = np.asarray(mask, dtype=bool)
        keys = [k for k, keep in zip(self.keys, mask) if keep]
        return StudyGroup(keys, self.x[mask], validate=False)

    @staticmethod
    def from_rows(rows: Sequence[StudyRow]) -> "StudyGroup":
        rows = sorted(rows, key=lambda r: r.key)
        keys = [r.key for r in rows]
        x = np.vstack([r.x for r in rows]) if rows else np.empty((0, N_VARIABLES))
        return StudyGroup(keys, x)


# --- CSV form ---------------------------------------------------------------

KEY_COLUMNS = ("subject_id", "hadm_id", "icustay_id")


def fnum(value: float) -> str:
    """Stable float formatting used by every report writer."""
    return format(float(value), ".12g")


def write_studygroup_csv(group: StudyGroup, path: str | Path) -> None:
    header = list(KEY_COLUMNS) + [f"x{i}" for i in range(1, N_VARIABLES + 1)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for key, row in zip(group.keys, group.x):
            writer.writerow(
                [key.subject_id, key.hadm_id, key.icustay_id] + [fnum(v) for v in row]
            )


def read_studygroup_csv(path: str | Path) -> StudyGroup:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        expected = list(KEY_COLUMNS) + [f"x{i}" for i in range(1, N_VARIABLES + 1)]
        if header != expected:
            raise DataError(f"{path}: unexpected header (want key columns plus x1..x{N_VARIABLES})")
        keys, rows = [], []
        for line in reader:
            keys.append(PatientKey(int(line[0]), int(line[1]), int(line[2])))
            rows.append([float(v) for v in line[3:]])
    x = np.array(rows, dtype=float) if rows else np.empty((0, N_VARIABLES))
    return StudyGroup(keys, x)
