"""Freeway microsimulation: one on-ramp, one off-ramp, per-lane speed limits."""
from .demand import generate_demand, hourly_counts, schedule_checksum
from .scenario import (
    CLASSES, MAIN_DEFAULT_LIMIT, POLLUTANTS, RAMP_DEFAULT_LIMIT, ROUTES, SPEED_TABLE,
    ConfigError, DemandProfile, DriverParams, EmissionModel, NetworkLayout, Scenario,
    VehicleSpec, desk_scenario, paper_scenario,
)
from .world import (
    DetectorReading, EmissionTotals, TTSReport, VehicleState, World, accumulate_emissions,
    count_emergency_brakes, flow_counts, flow_reconstruction, read_detectors, sim_step,
)
