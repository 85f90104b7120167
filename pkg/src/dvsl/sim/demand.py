"""Poisson demand for the three routes."""
from __future__ import annotations

import hashlib

import numpy as np

from .scenario import CLASS_TRUCK, ROUTES, ConfigError, DemandProfile

SCHEDULE_DTYPE = np.dtype([("time", "f8"), ("route", "i1"), ("cls", "i1"), ("speed_z", "f8")])


def generate_demand(profile: DemandProfile, seed: int | None = None) -> np.ndarray:
    """Draw an arrival schedule sorted by time.

    For each hour and each route (in ``ROUTES`` order) the generator draws the
    count from Poisson(rate), then uniform arrival times inside the hour, then
    the truck indicators, then a standard-normal desired-speed deviate. The
    draw order is part of the contract: the same seed always gives the same
    schedule.
    """
    for route, rates in profile.hourly_rates.items():
        if any(r < 0 for r in rates):
            raise ConfigError(f"negative rate for route {route}")
    rng = np.random.default_rng(profile.seed if seed is None else seed)
    chunks = []
    for hour in range(profile.hours):
        for r, route in enumerate(ROUTES):
            n = int(rng.poisson(profile.hourly_rates[route][hour]))
            if n == 0:
                continue
            chunk = np.empty(n, dtype=SCHEDULE_DTYPE)
            chunk["time"] = hour * 3600.0 + rng.uniform(0.0, 3600.0, n)
            chunk["route"] = r
            chunk["cls"] = np.where(rng.random(n) < profile.truck_fraction, CLASS_TRUCK, 0)
            chunk["speed_z"] = rng.standard_normal(n)
            chunks.append(chunk)
    if not chunks:
        return np.empty(0, dtype=SCHEDULE_DTYPE)
    schedule = np.concatenate(chunks)
    return schedule[np.argsort(schedule["time"], kind="stable")]


def hourly_counts(schedule: np.ndarray, hours: int) -> np.ndarray:
    """Arrivals per (hour, route)."""
    counts = np.zeros((hours, len(ROUTES)), dtype=np.int64)
    hour = np.minimum((schedule["time"] // 3600).astype(np.int64), hours - 1)
    np.add.at(counts, (hour, schedule["route"].astype(np.int64)), 1)
    return counts


def schedule_checksum(schedule: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(schedule).tobytes()).hexdigest()
