"""23 consumption features from a four-week half-hourly power series.

Conventions (fixed so the outputs are exactly testable): window means are
arithmetic means of half-hour kW readings whose slot start falls in the
half-open local-time window; weekday/weekend comes from the calendar;
threshold comparisons are strict; zero-denominator ratios return 0; variance
is the sample variance (n-1); the day-to-day correlation is the mean Pearson
correlation of consecutive 48-reading blocks, contributing 0 for any pair
with a constant day.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import datetime, timedelta

import numpy as np

from .errors import ValidationError

READINGS_PER_DAY = 48
N_DAYS = 28
N_READINGS = READINGS_PER_DAY * N_DAYS  # 1344

POWER_FEATURE_NAMES = (
    "mean_week",
    "mean_weekday",
    "mean_weekend",
    "mean_day_6_22",
    "mean_evening_18_22",
    "mean_morning_6_10",
    "mean_noon_10_14",
    "mean_night_1_5",
    "max_week",
    "min_week",
    "ratio_mean_over_max",
    "ratio_min_over_mean",
    "ratio_morning_over_noon",
    "ratio_noon_over_day",
    "ratio_night_over_day",
    "ratio_weekday_over_weekend",
    "prop_above_0p5kw",
    "prop_above_1kw",
    "prop_above_2kw",
    "variance",
    "sum_abs_diff",
    "mean_day_correlation",
    "count_abs_diff_above_0p2kw",
)


@dataclass
class PowerSeries:
    household_id: str
    start: datetime
    readings: np.ndarray

    def __post_init__(self):
        readings = np.asarray(self.readings, dtype=float)
        if readings.shape != (N_READINGS,):
            raise ValidationError(
                f"expected exactly {N_READINGS} half-hour readings, got {readings.shape}"
            )
        if not np.all(np.isfinite(readings)):
            raise ValidationError("readings contain non-finite values")
        if np.any(readings < 0):
            raise ValidationError("power readings must be nonnegative")
        self.readings = readings


def _safe_ratio(num: float, den: float) -> float:
    return num / den if den != 0.0 else 0.0


def extract_power_features(series: PowerSeries) -> np.ndarray:
    """Compute the 23 features in the order of ``POWER_FEATURE_NAMES``."""
    r = series.readings
    slots = [series.start + timedelta(minutes=30 * j) for j in range(N_READINGS)]
    hours = np.array([t.hour + t.minute / 60.0 for t in slots])
    weekday = np.array([t.weekday() < 5 for t in slots])

    def window_mean(lo: float, hi: float) -> float:
        mask = (hours >= lo) & (hours < hi)
        return float(r[mask].mean()) if mask.any() else 0.0

    mean_week = float(r.mean())
    mean_weekday = float(r[weekday].mean()) if weekday.any() else 0.0
    mean_weekend = float(r[~weekday].mean()) if (~weekday).any() else 0.0
    mean_day = window_mean(6, 22)
    mean_evening = window_mean(18, 22)
    mean_morning = window_mean(6, 10)
    mean_noon = window_mean(10, 14)
    mean_night = window_mean(1, 5)
    max_week = float(r.max())
    min_week = float(r.min())

    diffs = np.abs(np.diff(r))
    days = r.reshape(N_DAYS, READINGS_PER_DAY)
    corr_terms = []
    for d in range(N_DAYS - 1):
        a, b = days[d], days[d + 1]
        if a.std() == 0.0 or b.std() == 0.0:
            corr_terms.append(0.0)
        else:
            corr_terms.append(float(np.corrcoef(a, b)[0, 1]))

    return np.array([
        mean_week,
        mean_weekday,
        mean_weekend,
        mean_day,
        mean_evening,
        mean_morning,
        mean_noon,
        mean_night,
        max_week,
        min_week,
        _safe_ratio(mean_week, max_week),
        _safe_ratio(min_week, mean_week),
        _safe_ratio(mean_morning, mean_noon),
        _safe_ratio(mean_noon, mean_day),
        _safe_ratio(mean_night, mean_day),
        _safe_ratio(mean_weekday, mean_weekend),
        float(np.mean(r > 0.5)),
        float(np.mean(r > 1.0)),
        float(np.mean(r > 2.0)),
        float(np.var(r, ddof=1)),
        float(diffs.sum()),
        float(np.mean(corr_terms)),
        float(np.count_nonzero(diffs > 0.2)),
    ])


def read_power_csv(path) -> list[PowerSeries]:
    """Long-format CSV ``household_id,timestamp,kw`` with 1344 rows per household."""
    groups: dict[str, list[tuple[datetime, float]]] = {}
    order: list[str] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"household_id", "timestamp", "kw"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValidationError("power CSV must have header household_id,timestamp,kw")
        for row in reader:
            hid = row["household_id"]
            if hid not in groups:
                groups[hid] = []
                order.append(hid)
            groups[hid].append((datetime.fromisoformat(row["timestamp"]), float(row["kw"])))

    out = []
    for hid in order:
        rows = sorted(groups[hid], key=lambda item: item[0])
        if len(rows) != N_READINGS:
            raise ValidationError(
                f"household {hid!r} has {len(rows)} rows, expected {N_READINGS}"
            )
        readings = np.array([kw for _, kw in rows])
        out.append(PowerSeries(household_id=hid, start=rows[0][0], readings=readings))
    return out


def featurize_households(series_list: list[PowerSeries]) -> tuple[np.ndarray, list[str]]:
    """Stack per-household feature vectors; returns (matrix, household ids)."""
    if not series_list:
        raise ValidationError("no households to featurize")
    feats = np.vstack([extract_power_features(s) for s in series_list])
    return feats, [s.household_id for s in series_list]
