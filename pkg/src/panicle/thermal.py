"""Growing degree days and the constant thermal-time input channel."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import date, timedelta

import numpy as np

from .errors import DataGapError, ParameterError
from .grid import RasterGrid

GDD_BASE_F = 50.0
THERMAL_SCALE = 2000.0


@dataclass(frozen=True)
class WeatherSeries:
    """Daily min/max temperatures (deg F), strictly consecutive dates."""

    records: tuple

    def __post_init__(self):
        recs = tuple((d, float(lo), float(hi)) for d, lo, hi in self.records)
        for d, lo, hi in recs:
            if lo > hi:
                raise ParameterError(f"t_min {lo} exceeds t_max {hi} on {d}")
        for prev, cur in zip(recs, recs[1:]):
            if cur[0] - prev[0] != timedelta(days=1):
                raise ParameterError(f"weather dates must be consecutive days, gap after {prev[0]}")
        object.__setattr__(self, "records", recs)

    def lookup(self, day: date):
        for d, lo, hi in self.records:
            if d == day:
                return lo, hi
        raise DataGapError(f"no weather record for {day}")


@dataclass(frozen=True)
class ThermalTime:
    gdd: float

    def __post_init__(self):
        if self.gdd < 0:
            raise ParameterError(f"gdd must be non-negative, got {self.gdd}")


def compute_gdd(weather: WeatherSeries, planting_date: date, image_date: date) -> ThermalTime:
    """Degree days above 50F accumulated over (planting, image], daily-mean method."""
    if planting_date > image_date:
        raise ParameterError("planting date must not be after the image date")
    total = 0.0
    day = planting_date + timedelta(days=1)
    while day <= image_date:
        lo, hi = weather.lookup(day)
        total += max(0.0, (lo + hi) / 2.0 - GDD_BASE_F)
        day += timedelta(days=1)
    return ThermalTime(total)


def thermal_channel(tt: ThermalTime, shape) -> RasterGrid:
    """Constant single-channel grid valued gdd / 2000."""
    h, w = int(shape[0]), int(shape[1])
    return RasterGrid(np.full((h, w, 1), tt.gdd / THERMAL_SCALE))


def load_weather_csv(path) -> WeatherSeries:
    """Read the `date,tmin_f,tmax_f` weather table (ISO-8601 dates)."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            records.append(
                (date.fromisoformat(row["date"]), float(row["tmin_f"]), float(row["tmax_f"]))
            )
    return WeatherSeries(tuple(records))


def save_weather_csv(path, weather: WeatherSeries) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", "tmin_f", "tmax_f"])
        for d, lo, hi in weather.records:
            writer.writerow([d.isoformat(), f"{lo:g}", f"{hi:g}"])
