"""CSV ingestion, synthetic data generation and descriptive age-class tables."""

from __future__ import annotations

import csv
import math
import warnings
from pathlib import Path

import numpy as np

from .distributions import sample_smsn_error
from .model import GrowthDataset, ModelSpec, ThetaVB, sigma_t, vb_mean

__all__ = ["DataError", "load_csv", "save_csv", "generate_synthetic", "describe", "AGE_BINS"]

# Age classes of the descriptive table: [1, 3], (3, 8], ..., (53, 58], (58, 61].
AGE_BINS = (1, 3, 8, 13, 18, 23, 28, 33, 38, 43, 48, 53, 58, 61)


class DataError(ValueError):
    pass


def load_csv(path) -> GrowthDataset:
    """Read an ``age,length`` CSV with a header row.

    Rows with a non-numeric or non-positive field are reported together with
    their line numbers.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: file is empty")
        cols = [h.strip().lower() for h in header]
        missing = [c for c in ("age", "length") if c not in cols]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
        ia, il = cols.index("age"), cols.index("length")
        ages, lengths, problems = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                a = float(row[ia])
                y = float(row[il])
            except (ValueError, IndexError):
                problems.append(f"line {lineno}: non-numeric field")
                continue
            if not (math.isfinite(a) and math.isfinite(y)):
                problems.append(f"line {lineno}: non-finite field")
            elif a <= 0:
                problems.append(f"line {lineno}: age must be positive, got {row[ia].strip()}")
            elif y <= 0:
                problems.append(f"line {lineno}: length must be positive, got {row[il].strip()}")
            else:
                ages.append(a)
                lengths.append(y)
    if problems:
        raise DataError(f"{path}: invalid rows\n  " + "\n  ".join(problems))
    if not ages:
        raise DataError(f"{path}: no data rows")
    return GrowthDataset(np.array(ages), np.array(lengths))


def save_csv(data: GrowthDataset, path) -> None:
    """Write ``age,length`` with shortest round-trip float formatting."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write("age,length\n")
        for a, y in zip(data.ages, data.lengths):
            fh.write(f"{float(a)!r},{float(y)!r}\n")


def generate_synthetic(theta: ThetaVB, spec: ModelSpec, ages, seed, floor: float | None = None) -> GrowthDataset:
    """Lengths from the mean curve plus zero-mean SMSN errors.

    Non-positive lengths trigger a warning unless ``floor`` is given, in which
    case draws are clipped from below at ``floor``.
    """
    ages = np.asarray(ages, dtype=float)
    if ages.ndim != 1 or ages.size < 1 or np.any(ages <= 0):
        raise ValueError("ages must be a non-empty vector of positive values")
    err = sample_smsn_error(ages.size, sigma_t(theta, ages), theta.lam, spec, seed)
    y = np.asarray(vb_mean(theta.beta, ages)) + err
    if floor is not None:
        if floor <= 0:
            raise ValueError("floor must be positive")
        y = np.maximum(y, floor)
    elif np.any(y <= 0):
        warnings.warn(f"{int(np.sum(y <= 0))} non-positive simulated lengths")
    return GrowthDataset(ages, y)


def describe(data: GrowthDataset, bins=AGE_BINS) -> list[dict]:
    """Length summaries per age class; the first class is closed on the left."""
    rows = []
    edges = list(bins)
    for k in range(len(edges) - 1):
        lo, hi = edges[k], edges[k + 1]
        mask = (data.ages > lo) & (data.ages <= hi)
        if k == 0:
            mask |= data.ages == lo
        y = data.lengths[mask]
        rows.append(
            {
                "ages": f"{lo}-{hi}",
                "min": float(y.min()) if y.size else None,
                "max": float(y.max()) if y.size else None,
                "mean": float(y.mean()) if y.size else None,
                "sd": float(y.std(ddof=1)) if y.size > 1 else None,
                "n": int(y.size),
                "proportion": float(y.size / data.n),
            }
        )
    y = data.lengths
    rows.append(
        {
            "ages": "total",
            "min": float(y.min()),
            "max": float(y.max()),
            "mean": float(y.mean()),
            "sd": float(y.std(ddof=1)) if y.size > 1 else None,
            "n": int(y.size),
            "proportion": 1.0,
        }
    )
    return rows
