"""Cohort container and CSV/JSON serialisation."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class PatientRecord:
    x: np.ndarray
    t: float
    d: int
    a: int
    z: int | None = None


@dataclass
class Cohort:
    """Column-oriented observed data (one row per patient).

    ``z`` holds true subgroup labels when known; it is never used for fitting.
    """

    x: np.ndarray
    t: np.ndarray
    d: np.ndarray
    a: np.ndarray
    z: np.ndarray | None = None
    scenario: str | None = None
    seed: int | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.t = np.asarray(self.t, dtype=float)
        self.d = np.asarray(self.d, dtype=int)
        self.a = np.asarray(self.a, dtype=int)
        if self.z is not None:
            self.z = np.asarray(self.z, dtype=int)
        n = self.x.shape[0]
        if self.x.ndim != 2 or any(col.shape != (n,) for col in (self.t, self.d, self.a)):
            raise ValueError("cohort columns have inconsistent shapes")
        if self.z is not None and self.z.shape != (n,):
            raise ValueError("label column has the wrong length")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.x.shape[1]

    def record(self, i: int) -> PatientRecord:
        z = None if self.z is None else int(self.z[i])
        return PatientRecord(self.x[i], float(self.t[i]), int(self.d[i]), int(self.a[i]), z)

    def subset(self, idx) -> Cohort:
        idx = np.asarray(idx)
        z = None if self.z is None else self.z[idx]
        return Cohort(self.x[idx], self.t[idx], self.d[idx], self.a[idx], z, self.scenario, self.seed)

    def with_x(self, x: np.ndarray) -> Cohort:
        return Cohort(x, self.t, self.d, self.a, self.z, self.scenario, self.seed)


class CohortFormatError(ValueError):
    """A cohort CSV row could not be parsed; ``line`` is 1-based."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def cohort_to_csv(cohort: Cohort, emit_labels: bool = False) -> str:
    if emit_labels and cohort.z is None:
        raise ValueError("cohort has no labels to emit")
    buf = io.StringIO()
    header = [f"x{j}" for j in range(cohort.n_covariates)] + ["a", "t", "d"]
    if emit_labels:
        header.append("z")
    buf.write(",".join(header) + "\n")
    for i in range(len(cohort)):
        row = [_fmt(v) for v in cohort.x[i]] + [str(int(cohort.a[i])), _fmt(cohort.t[i]), str(int(cohort.d[i]))]
        if emit_labels:
            row.append(str(int(cohort.z[i])))
        buf.write(",".join(row) + "\n")
    return buf.getvalue()


def write_cohort_csv(cohort: Cohort, path, emit_labels: bool = False) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(cohort_to_csv(cohort, emit_labels))
    return path


def read_cohort_csv(path) -> Cohort:
    """Parse a cohort CSV with header ``x0..x{p-1},a,t,d[,z]``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CohortFormatError("empty file", 1) from None
        for col in ("a", "t", "d"):
            if col not in header:
                raise CohortFormatError(f"missing column {col!r}", 1)
        xcols = sorted((h for h in header if h.startswith("x") and h[1:].isdigit()), key=lambda h: int(h[1:]))
        if not xcols:
            raise CohortFormatError("no covariate columns", 1)
        pos = {h: i for i, h in enumerate(header)}
        has_z = "z" in pos
        xs, ts, ds, as_, zs = [], [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CohortFormatError(f"expected {len(header)} fields, got {len(row)}", lineno)
            try:
                xs.append([float(row[pos[h]]) for h in xcols])
                t = float(row[pos["t"]])
                d = int(row[pos["d"]])
                a = int(row[pos["a"]])
                if has_z:
                    zs.append(int(row[pos["z"]]))
            except ValueError as exc:
                raise CohortFormatError(str(exc), lineno) from None
            if not np.isfinite(t) or t < 0:
                raise CohortFormatError("time must be finite and non-negative", lineno)
            if d not in (0, 1) or a not in (0, 1):
                raise CohortFormatError("event and treatment indicators must be 0 or 1", lineno)
            ts.append(t)
            ds.append(d)
            as_.append(a)
    if not ts:
        raise CohortFormatError("no data rows", 2)
    return Cohort(np.array(xs), np.array(ts), np.array(ds), np.array(as_), np.array(zs) if has_z else None)


def dump_json(obj, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n")
    return path
