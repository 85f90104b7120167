"""Scenario description for the freeway microsimulation.

Everything that shapes an episode lives here: the network geometry, the two
vehicle classes, lane-change behaviour, emission coefficients and the hourly
demand. All of it round-trips through plain dicts so a scenario can be kept in
a YAML file next to the run settings.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ..errors import ConfigError

MPH = 0.44704

#: Posted limits available to the controller, 50..75 mph in 5 mph steps (m/s).
SPEED_TABLE = (22.45, 24.695, 26.94, 29.185, 31.43, 33.679)
#: 65 mph, the mainline limit without control.
MAIN_DEFAULT_LIMIT = SPEED_TABLE[3]
#: 50 mph, the ramp limit.
RAMP_DEFAULT_LIMIT = SPEED_TABLE[0]

ROUTES = ("main_main", "main_off", "on_main")
ROUTE_MAIN_MAIN, ROUTE_MAIN_OFF, ROUTE_ON_MAIN = 0, 1, 2
CLASSES = ("passenger", "truck")
CLASS_PASSENGER, CLASS_TRUCK = 0, 1
POLLUTANTS = ("co", "hc", "nox", "pmx")

PAPER_EPISODE_HOURS = 18


@dataclass
class NetworkLayout:
    """Geometry of the 5-lane section with one on-ramp and one off-ramp.

    Coordinates run downstream from the mainline origin (x = 0)::

        origin | upstream | controlled (780.35 m) | merge | weave | off-ramp | downstream | end

    The acceleration lane of the on-ramp runs alongside the merge area; the
    ramp itself starts ``ramp_length`` metres before the merge area.
    """

    upstream_length: float = 600.0
    controlled_length: float = 780.35
    merge_length: float = 26.87
    weave_length: float = 250.0
    downstream_length: float = 300.0
    ramp_length: float = 300.0
    n_main_lanes: int = 5
    ramp_lanes: int = 1
    default_main_limit: float = MAIN_DEFAULT_LIMIT
    default_ramp_limit: float = RAMP_DEFAULT_LIMIT
    upstream_detector_offset: float = 100.0
    ramp_detector_offset: float = 100.0

    def __post_init__(self):
        for name in ("upstream_length", "controlled_length", "merge_length",
                     "weave_length", "downstream_length", "ramp_length"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.n_main_lanes < 1:
            raise ConfigError("n_main_lanes must be >= 1")
        if self.ramp_lanes != 1:
            raise ConfigError("only a single ramp lane is modelled")
        if not 0 < self.upstream_detector_offset <= self.upstream_length:
            raise ConfigError("upstream detector must sit inside the upstream section")
        if not 0 < self.ramp_detector_offset <= self.ramp_length:
            raise ConfigError("ramp detector must sit on the ramp")
        if self.default_main_limit <= 0 or self.default_ramp_limit <= 0:
            raise ConfigError("default limits must be positive")

    @property
    def controlled_start(self) -> float:
        return self.upstream_length

    @property
    def controlled_end(self) -> float:
        return self.upstream_length + self.controlled_length

    @property
    def merge_start(self) -> float:
        return self.controlled_end

    @property
    def merge_end(self) -> float:
        return self.merge_start + self.merge_length

    @property
    def offramp_position(self) -> float:
        return self.merge_end + self.weave_length

    @property
    def network_end(self) -> float:
        return self.offramp_position + self.downstream_length

    @property
    def ramp_start(self) -> float:
        return self.merge_start - self.ramp_length

    @property
    def ramp_lane(self) -> int:
        return self.n_main_lanes

    @property
    def upstream_detector(self) -> float:
        return self.controlled_start - self.upstream_detector_offset

    @property
    def merge_detector(self) -> float:
        return self.merge_start + 0.5 * self.merge_length

    @property
    def ramp_detector(self) -> float:
        return self.merge_start - self.ramp_detector_offset


@dataclass
class VehicleSpec:
    """Physical and car-following parameters of one vehicle class."""

    cls: str = "passenger"
    length: float = 3.5
    max_accel: float = 1.5
    comfortable_decel: float = 2.0
    desired_speed: float = 33.5
    desired_speed_factor: float = 1.0
    speed_factor_std: float = 0.08
    time_headway: float = 1.2
    min_gap: float = 2.0

    def __post_init__(self):
        if self.cls not in CLASSES:
            raise ConfigError(f"unknown vehicle class {self.cls!r}")
        if self.length <= 0 or self.max_accel <= 0 or self.comfortable_decel <= 0:
            raise ConfigError(f"{self.cls}: length, max_accel and comfortable_decel must be > 0")
        if self.desired_speed <= 0 or self.desired_speed_factor <= 0:
            raise ConfigError(f"{self.cls}: desired speed must be > 0")
        if self.speed_factor_std < 0 or self.time_headway <= 0 or self.min_gap < 0:
            raise ConfigError(f"{self.cls}: invalid headway parameters")


def default_vehicle_specs() -> dict[str, VehicleSpec]:
    return {
        "passenger": VehicleSpec(),
        "truck": VehicleSpec(cls="truck", length=8.0, max_accel=0.8, comfortable_decel=1.5,
                             desired_speed=27.0, speed_factor_std=0.05,
                             time_headway=1.6, min_gap=2.5),
    }


@dataclass
class DriverParams:
    """Lane-changing (incentive/safety) and merging behaviour."""

    politeness: float = 0.2
    change_threshold: float = 0.2
    safe_decel: float = 4.0
    keep_right_bias: float = 0.1
    exit_bias: float = 0.6
    mandatory_distance: float = 500.0
    change_cooldown: float = 3.0
    merge_wait_threshold: float = 6.0
    forced_merge_decel: float = 9.0
    max_decel: float = 9.0
    min_change_gap: float = 0.5
    insertion_min_speed: float = 2.0
    lookahead_decel: float = 2.0

    def __post_init__(self):
        if self.safe_decel <= 0 or self.max_decel <= 0 or self.forced_merge_decel <= 0:
            raise ConfigError("deceleration bounds must be > 0")
        if self.min_change_gap < 0 or self.change_cooldown < 0 or self.lookahead_decel <= 0:
            raise ConfigError("invalid lane-change parameters")


def _default_emission_coefficients() -> dict[str, dict[str, list[float]]]:
    # [idle g/s, g/s per unit of positive specific power (m^2/s^3)]
    return {
        "passenger": {"co": [0.0045, 0.0024], "hc": [0.0006, 0.00022],
                      "nox": [0.0003, 0.00018], "pmx": [0.00002, 0.000012]},
        "truck": {"co": [0.0090, 0.0050], "hc": [0.0012, 0.00045],
                  "nox": [0.0030, 0.0020], "pmx": [0.00020, 0.00012]},
    }


@dataclass
class EmissionModel:
    """Per-class rate model: ``idle + k * max(0, v * (a + rolling + aero * v**2))``.

    Rates are in g/s; the bracketed term is the tractive power per unit mass.
    """

    coefficients: dict[str, dict[str, list[float]]] = field(
        default_factory=_default_emission_coefficients)
    rolling: float = 0.1
    aero: float = 0.0003
    region: str = "network"

    def __post_init__(self):
        if self.region not in ("network", "controlled"):
            raise ConfigError(f"emission region must be 'network' or 'controlled', got {self.region!r}")
        for cls in CLASSES:
            if cls not in self.coefficients:
                raise ConfigError(f"missing emission coefficients for {cls}")
            for pol in POLLUTANTS:
                idle, k = self.coefficients[cls][pol]
                if idle < 0 or k < 0:
                    raise ConfigError("emission coefficients must be >= 0")

    def as_array(self) -> np.ndarray:
        """Coefficient tensor of shape (class, pollutant, 2)."""
        return np.array([[self.coefficients[c][p] for p in POLLUTANTS] for c in CLASSES],
                        dtype=np.float64)

    def rate(self, cls: str, speed: float, accel: float) -> np.ndarray:
        """Instantaneous g/s for the four pollutants."""
        coef = self.as_array()[CLASSES.index(cls)]
        power = max(0.0, speed * (accel + self.rolling + self.aero * speed * speed))
        return coef[:, 0] + coef[:, 1] * power


def paper_hourly_profile() -> dict[str, list[float]]:
    """18-hour demand (06:00-24:00) with a recurrent merge bottleneck in hours 2-5."""
    return {
        "main_main": [4200, 5000, 5000, 5000, 5000, 4000, 3800, 3800, 3900, 4000,
                      4200, 4200, 3900, 3500, 3000, 2500, 2000, 1500],
        "main_off": [450, 600, 600, 600, 600, 450, 400, 400, 400, 450,
                     500, 500, 450, 400, 300, 250, 200, 150],
        "on_main": [600, 950, 950, 950, 950, 600, 500, 500, 550, 600,
                    650, 650, 550, 450, 400, 300, 250, 200],
    }


def desk_hourly_profile() -> dict[str, list[float]]:
    """Two hours: a congested peak hour followed by a shoulder hour."""
    return {
        "main_main": [5000, 4000],
        "main_off": [600, 450],
        "on_main": [950, 600],
    }


@dataclass
class DemandProfile:
    """Hourly Poisson arrival rates (veh/h) for the three routes."""

    hourly_rates: dict[str, list[float]] = field(default_factory=paper_hourly_profile)
    truck_fraction: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if set(self.hourly_rates) != set(ROUTES):
            raise ConfigError(f"hourly_rates needs exactly the routes {ROUTES}")
        lengths = {len(v) for v in self.hourly_rates.values()}
        if len(lengths) != 1 or 0 in lengths:
            raise ConfigError("every route needs the same, non-zero number of hourly entries")
        for route, rates in self.hourly_rates.items():
            if any(not np.isfinite(r) or r < 0 for r in rates):
                raise ConfigError(f"negative or non-finite rate for route {route}")
        if not 0.0 <= self.truck_fraction <= 1.0:
            raise ConfigError("truck_fraction must lie in [0, 1]")

    @property
    def hours(self) -> int:
        return len(self.hourly_rates[ROUTES[0]])


@dataclass
class Scenario:
    layout: NetworkLayout = field(default_factory=NetworkLayout)
    demand: DemandProfile = field(default_factory=DemandProfile)
    vehicles: dict[str, VehicleSpec] = field(default_factory=default_vehicle_specs)
    driver: DriverParams = field(default_factory=DriverParams)
    emissions: EmissionModel = field(default_factory=EmissionModel)
    dt: float = 1.0
    control_interval: float = 60.0
    compliance_tolerance: float = 0.0
    emergency_threshold: float = 4.5

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError("dt must be > 0")
        steps = self.control_interval / self.dt
        if self.control_interval <= 0 or abs(steps - round(steps)) > 1e-9:
            raise ConfigError("control_interval must be a positive multiple of dt")
        if set(self.vehicles) != set(CLASSES):
            raise ConfigError(f"vehicles needs specs for {CLASSES}")
        if self.compliance_tolerance < 0:
            raise ConfigError("compliance_tolerance must be >= 0")

    @property
    def steps_per_interval(self) -> int:
        return int(round(self.control_interval / self.dt))

    @property
    def episode_seconds(self) -> float:
        return self.demand.hours * 3600.0

    @property
    def control_steps(self) -> int:
        return int(round(self.episode_seconds / self.control_interval))

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any] | None) -> "Scenario":
        data = dict(data or {})
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        kwargs: dict[str, Any] = {}
        if "layout" in data:
            kwargs["layout"] = _build(NetworkLayout, data["layout"])
        if "demand" in data:
            kwargs["demand"] = _build(DemandProfile, data["demand"])
        if "vehicles" in data:
            specs = default_vehicle_specs()
            for name, vt in data["vehicles"].items():
                base = dataclasses.asdict(specs.get(name, VehicleSpec(cls=name)))
                base.update(vt or {})
                specs[name] = _build(VehicleSpec, base)
            kwargs["vehicles"] = specs
        if "driver" in data:
            kwargs["driver"] = _build(DriverParams, data["driver"])
        if "emissions" in data:
            kwargs["emissions"] = _build(EmissionModel, data["emissions"])
        for key in ("dt", "control_interval", "compliance_tolerance", "emergency_threshold"):
            if key in data:
                kwargs[key] = float(data[key])
        return cls(**kwargs)


def _build(kind, values):
    values = dict(values or {})
    names = {f.name for f in dataclasses.fields(kind)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {kind.__name__} keys: {sorted(unknown)}")
    return kind(**values)


def desk_scenario(seed: int = 0) -> Scenario:
    """Congested two-hour scenario used for the desk-scale preset."""
    return Scenario(demand=DemandProfile(hourly_rates=desk_hourly_profile(), seed=seed))


def paper_scenario(seed: int = 0) -> Scenario:
    """18-hour scenario following the reference experiment's episode length."""
    return Scenario(demand=DemandProfile(hourly_rates=paper_hourly_profile(), seed=seed))
