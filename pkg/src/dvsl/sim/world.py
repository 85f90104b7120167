"""Lane-level microsimulation of the freeway section.

A :class:`World` owns one episode: the arrival schedule, the vehicles on the
road, the detector stations and the running interval accumulators. It is
plain single-threaded state; independent worlds can run in separate
processes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernel as K
from .demand import generate_demand
from .scenario import CLASSES, ROUTE_ON_MAIN, ROUTES, Scenario

STATIONS = ("upstream", "merge", "ramp", "outflow_boundaries")


@dataclass(frozen=True)
class VehicleState:
    id: int
    cls: str
    route: str
    lane: int
    position: float
    speed: float
    acceleration: float
    length: float
    entry_time: float
    exit_time: float | None = None


@dataclass
class DetectorReading:
    occupancy: np.ndarray
    mean_speed: np.ndarray
    flow_count: np.ndarray


@dataclass
class EmissionTotals:
    """Pollutant masses in kg."""

    co: float = 0.0
    hc: float = 0.0
    nox: float = 0.0
    pmx: float = 0.0

    def __add__(self, other: "EmissionTotals") -> "EmissionTotals":
        return EmissionTotals(self.co + other.co, self.hc + other.hc,
                              self.nox + other.nox, self.pmx + other.pmx)

    def as_array(self) -> np.ndarray:
        return np.array([self.co, self.hc, self.nox, self.pmx])


@dataclass
class TTSReport:
    """Total time spent, accounted three ways.

    ``direct`` sums vehicle-seconds step by step; ``per_vehicle`` sums
    (exit - entry) over retired vehicles and ``residual`` adds the time of
    those still inside. ``reconstruction`` rebuilds TTS from control-interval
    flow counts only and is meant as a diagnostic.
    """

    direct: float
    per_vehicle: float
    residual: float
    reconstruction: float
    completed: int
    remaining: int

    @property
    def att(self) -> float:
        """Average travel time of vehicles that finished their route (0 if none)."""
        return self.per_vehicle / self.completed if self.completed else 0.0


class World:
    def __init__(self, scenario: Scenario, schedule: np.ndarray | None = None,
                 seed: int | None = None):
        self.scenario = scenario
        lay = scenario.layout
        self.dt = scenario.dt
        self.n_main = lay.n_main_lanes
        if schedule is None:
            schedule = generate_demand(scenario.demand, seed)
        self.schedule = schedule
        self.step_index = 0
        self.episode_steps = int(round(scenario.episode_seconds / self.dt))

        lane_metres = lay.network_end * self.n_main + lay.ramp_length + lay.merge_length
        min_len = min(vt.length for vt in scenario.vehicles.values())
        self.capacity = int(math.ceil(lane_metres / min_len)) + 16
        self.vf = np.zeros((self.capacity, K.NF))
        self.vi = np.zeros((self.capacity, K.NI), dtype=np.int64)
        self.free = np.arange(self.capacity - 1, -1, -1, dtype=np.int64)
        self.counters = np.zeros(K.NC, dtype=np.int64)
        self.counters[K.C_FREE_TOP] = self.capacity
        self.mem = np.zeros((self.n_main + 1, self.capacity), dtype=np.int64)
        self.cnt = np.zeros(self.n_main + 1, dtype=np.int64)

        self.P = self._params()
        self.cls_par = np.array([[s.length, s.max_accel, s.comfortable_decel, s.desired_speed,
                                  s.desired_speed_factor, s.speed_factor_std, s.time_headway,
                                  s.min_gap] for s in (scenario.vehicles[c] for c in CLASSES)])
        self.limits = np.full(self.n_main, lay.default_main_limit)

        step = np.ceil(schedule["time"] / self.dt - 1e-9).astype(np.int64)
        self.s_step = np.maximum(step, 0)
        self.s_route = schedule["route"].astype(np.int64)
        self.s_cls = schedule["cls"].astype(np.int64)
        self.s_z = schedule["speed_z"].astype(np.float64)
        ramp = self.s_route == ROUTE_ON_MAIN
        per_origin = [np.flatnonzero(~ramp), np.flatnonzero(ramp)]
        width = max(1, max(len(p) for p in per_origin))
        self.origin_idx = np.zeros((2, width), dtype=np.int64)
        self.origin_cnt = np.zeros(2, dtype=np.int64)
        for o, idx in enumerate(per_origin):
            self.origin_idx[o, :len(idx)] = idx
            self.origin_cnt[o] = len(idx)
        self.ptr_arrived = np.zeros(2, dtype=np.int64)
        self.ptr_inserted = np.zeros(2, dtype=np.int64)

        n = self.n_main
        self.det_x = np.array([lay.upstream_detector] * n + [lay.merge_detector] * n + [lay.ramp_detector])
        self.det_lane = np.array(list(range(n)) + list(range(n)) + [n], dtype=np.int64)
        self.det_acc = np.zeros((len(self.det_x), 3))
        self._station_start = {s: 0 for s in STATIONS}
        self.em_coef = scenario.emissions.as_array()
        self.em_acc = np.zeros(4)
        self.exitlog = np.zeros((len(schedule) + 1024, 5))
        self.steplog: list[np.ndarray] = []
        self._exited_mark = 0

    def _params(self) -> np.ndarray:
        sc, lay, drv = self.scenario, self.scenario.layout, self.scenario.driver
        P = np.zeros(K.NP)
        P[K.P_DT] = sc.dt
        P[K.P_CS], P[K.P_CE] = lay.controlled_start, lay.controlled_end
        P[K.P_MS], P[K.P_ME] = lay.merge_start, lay.merge_end
        P[K.P_OFF], P[K.P_END], P[K.P_RS] = lay.offramp_position, lay.network_end, lay.ramp_start
        P[K.P_MAIN_LIM], P[K.P_RAMP_LIM] = lay.default_main_limit, lay.default_ramp_limit
        P[K.P_TOL] = sc.compliance_tolerance
        P[K.P_POL], P[K.P_THR] = drv.politeness, drv.change_threshold
        P[K.P_BSAFE], P[K.P_BIAS], P[K.P_EXIT_BIAS] = drv.safe_decel, drv.keep_right_bias, drv.exit_bias
        P[K.P_MAND], P[K.P_COOL], P[K.P_WAIT] = drv.mandatory_distance, drv.change_cooldown, drv.merge_wait_threshold
        P[K.P_FORCED], P[K.P_BMAX] = drv.forced_merge_decel, drv.max_decel
        P[K.P_MINGAP], P[K.P_INS_MIN], P[K.P_LOOK_B] = drv.min_change_gap, drv.insertion_min_speed, drv.lookahead_decel
        P[K.P_EMERG] = sc.emergency_threshold
        if sc.emissions.region == "controlled":
            P[K.P_REG_X0], P[K.P_REG_X1], P[K.P_REG_RAMP] = lay.controlled_start, lay.controlled_end, 0.0
        else:
            P[K.P_REG_X0], P[K.P_REG_X1], P[K.P_REG_RAMP] = -K.INF, K.INF, 1.0
        P[K.P_ROLL], P[K.P_AERO] = sc.emissions.rolling, sc.emissions.aero
        return P

    # ------------------------------------------------------------------ stepping
    @property
    def time(self) -> float:
        return self.step_index * self.dt

    @property
    def done(self) -> bool:
        return self.step_index >= self.episode_steps

    def set_limits(self, limits: Sequence[float]) -> None:
        arr = np.asarray(limits, dtype=np.float64).reshape(-1)
        if arr.shape != (self.n_main,):
            raise ValueError(f"expected {self.n_main} lane limits, got {arr.shape[0]}")
        if not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise ValueError(f"lane limits must be finite and >= 0, got {arr}")
        self.limits = arr.copy()

    def step(self, limits: Sequence[float] | None = None, n_steps: int = 1) -> "World":
        if limits is not None:
            self.set_limits(limits)
        log = np.zeros((n_steps, 3), dtype=np.int64)
        K.run_steps(self.step_index, n_steps, self.vf, self.vi, self.free, self.counters,
                    self.mem, self.cnt, self.P, self.n_main, self.limits, self.cls_par,
                    self.s_step, self.s_route, self.s_cls, self.s_z, self.origin_idx,
                    self.origin_cnt, self.ptr_arrived, self.ptr_inserted, self.det_x,
                    self.det_lane, self.det_acc, self.em_coef, self.em_acc, self.exitlog, log)
        self.step_index += n_steps
        self.steplog.append(log)
        return self

    def add_vehicle(self, lane: int, position: float, speed: float, cls: str = "passenger",
                    route: str = "main_main", desired_speed: float | None = None) -> int:
        """Place a vehicle directly on the road (used for scripted scenarios).

        It counts as an arrival of the current interval. Returns the vehicle id.
        """
        if not 0 <= lane <= self.n_main:
            raise ValueError(f"lane {lane} out of range")
        if speed < 0:
            raise ValueError("speed must be >= 0")
        c = CLASSES.index(cls)
        i = K._spawn(self.vf, self.vi, self.free, self.counters, self.cls_par, c,
                     ROUTES.index(route), 0.0, lane, float(position), float(speed), self.time)
        if i < 0:
            raise RuntimeError("vehicle capacity exhausted")
        if desired_speed is not None:
            self.vf[i, K.F_VMAX] = desired_speed
        self.counters[K.C_IN] += 1
        self.counters[K.C_ENTERED] += 1
        if self.exitlog.shape[0] < self.counters[K.C_ENTERED] + 1:
            self.exitlog = np.concatenate([self.exitlog, np.zeros_like(self.exitlog)])
        return int(self.vi[i, K.I_VID])

    # ------------------------------------------------------------------ inspection
    def _active(self) -> np.ndarray:
        return np.flatnonzero(self.vi[:, K.I_ACTIVE] == 1)

    @property
    def n_on_road(self) -> int:
        return int(np.sum(self.vi[:, K.I_ACTIVE] == 1))

    @property
    def n_queued(self) -> int:
        return int(np.sum(self.ptr_arrived - self.ptr_inserted))

    @property
    def n_in_system(self) -> int:
        return self.n_on_road + self.n_queued

    def snapshot(self) -> dict[str, np.ndarray]:
        """Column arrays of the vehicles on the road, ordered by vehicle id."""
        idx = self._active()
        idx = idx[np.argsort(self.vi[idx, K.I_VID])]
        return {
            "id": self.vi[idx, K.I_VID].copy(),
            "lane": self.vi[idx, K.I_LANE].copy(),
            "cls": self.vi[idx, K.I_CLS].copy(),
            "route": self.vi[idx, K.I_ROUTE].copy(),
            "position": self.vf[idx, K.F_X].copy(),
            "speed": self.vf[idx, K.F_V].copy(),
            "acceleration": self.vf[idx, K.F_ACC].copy(),
            "length": self.vf[idx, K.F_LEN].copy(),
            "entry_time": self.vf[idx, K.F_ENTRY].copy(),
        }

    def vehicles(self) -> list[VehicleState]:
        snap = self.snapshot()
        return [VehicleState(int(snap["id"][k]), CLASSES[snap["cls"][k]], ROUTES[snap["route"][k]],
                             int(snap["lane"][k]), float(snap["position"][k]), float(snap["speed"][k]),
                             float(snap["acceleration"][k]), float(snap["length"][k]),
                             float(snap["entry_time"][k]))
                for k in range(len(snap["id"]))]

    def retired(self) -> np.ndarray:
        """Rows of (id, entry_time, exit_time, route, cls) for every vehicle that left."""
        return self.exitlog[: self.counters[K.C_EXITLOG]].copy()

    def step_log(self) -> np.ndarray:
        """Per-step (vehicles in system after the step, arrivals, departures)."""
        if not self.steplog:
            return np.zeros((0, 3), dtype=np.int64)
        return np.concatenate(self.steplog)

    def lane_limit(self, lane: int, x: float) -> float:
        return float(K.lane_limit(lane, x, self.n_main, self.limits, self.P))

    def station_limits(self, station: str) -> np.ndarray:
        lay = self.scenario.layout
        if station == "upstream":
            return np.array([self.lane_limit(l, lay.upstream_detector) for l in range(self.n_main)])
        if station == "merge":
            return np.array([self.lane_limit(l, lay.merge_detector) for l in range(self.n_main)])
        return np.array([lay.default_ramp_limit])

    # ------------------------------------------------------------------ interval accounting
    def reset_interval(self) -> None:
        for station in STATIONS:
            self._read_station(station)
        self._take_brakes()
        self._take_emissions()
        flow_counts(self)

    def _station_slice(self, station: str) -> slice:
        n = self.n_main
        return {"upstream": slice(0, n), "merge": slice(n, 2 * n), "ramp": slice(2 * n, 2 * n + 1)}[station]

    def _read_station(self, station: str) -> DetectorReading:
        if station not in STATIONS:
            raise ValueError(f"unknown detector station {station!r}; expected one of {STATIONS}")
        start = self._station_start[station]
        self._station_start[station] = self.step_index
        if station == "outflow_boundaries":
            flow = np.array([self.counters[K.C_OUT_END], self.counters[K.C_OUT_OFF]], dtype=np.int64)
            self.counters[K.C_OUT_END] = 0
            self.counters[K.C_OUT_OFF] = 0
            return DetectorReading(np.zeros(0), np.zeros(0), flow)
        sl = self._station_slice(station)
        acc = self.det_acc[sl]
        span = (self.step_index - start) * self.dt
        occ = np.clip(acc[:, 0] / span, 0.0, 1.0) if span > 0 else np.zeros(len(acc))
        count = acc[:, 1].astype(np.int64)
        fallback = self.station_limits(station)
        with np.errstate(invalid="ignore", divide="ignore"):
            speed = np.where(count > 0, acc[:, 2] / np.maximum(count, 1), fallback)
        self.det_acc[sl] = 0.0
        return DetectorReading(occ, speed, count)

    def _take_brakes(self) -> int:
        n = int(self.counters[K.C_BRAKES])
        self.counters[K.C_BRAKES] = 0
        self.vi[:, K.I_BRAKED] = 0
        return n

    def _take_emissions(self) -> EmissionTotals:
        kg = self.em_acc / 1000.0
        self.em_acc[:] = 0.0
        return EmissionTotals(*[float(v) for v in kg])

    # ------------------------------------------------------------------ travel time
    def tts(self, interval_flows: np.ndarray | None = None, interval: float | None = None) -> TTSReport:
        """Travel-time accounting at the current time.

        ``interval_flows`` (rows of f_in, f_out per control interval) feeds the
        flow-based reconstruction; without it the reconstruction uses the
        per-step log.
        """
        direct = float(self.counters[K.C_VEH_STEPS]) * self.dt
        ret = self.retired()
        per_vehicle = float(np.sum(ret[:, 2] - ret[:, 1])) if len(ret) else 0.0
        now = self.time
        idx = self._active()
        residual = float(np.sum(now - self.vf[idx, K.F_ENTRY]))
        for o in range(2):
            q = self.origin_idx[o, self.ptr_inserted[o]: self.ptr_arrived[o]]
            residual += float(np.sum(now - self.s_step[q] * self.dt))
        if interval_flows is None:
            log = self.step_log()
            flows = log[:, 1:3] if len(log) else np.zeros((0, 2))
            period = self.dt
        else:
            flows = np.asarray(interval_flows, dtype=np.float64).reshape(-1, 2)
            period = interval if interval is not None else self.scenario.control_interval
        return TTSReport(direct, per_vehicle, residual, flow_reconstruction(flows, period),
                         len(ret), self.n_in_system)


def flow_reconstruction(flows: np.ndarray, period: float, n0: float = 0.0) -> float:
    """Vehicle-seconds implied by per-period (inflow, outflow) counts.

    Arrivals and departures inside a period are placed at its midpoint, so for
    single-step periods the result is exact up to half a step per vehicle.
    """
    flows = np.asarray(flows, dtype=np.float64).reshape(-1, 2)
    k = len(flows)
    if k == 0:
        return 0.0
    net = flows[:, 0] - flows[:, 1]
    remaining = k - np.arange(k) - 0.5
    return float(k * period * n0 + period * np.sum(remaining * net))


# ---------------------------------------------------------------------- functional surface
def sim_step(world: World, per_lane_limits: Sequence[float] | None = None,
             dt: float | None = None) -> World:
    """Advance the world by one simulation step under the given controlled-lane limits."""
    if dt is not None:
        if not dt > 0:
            raise ValueError("dt must be > 0")
        if abs(dt - world.dt) > 1e-12:
            raise ValueError(f"world was built for dt={world.dt}, got {dt}")
    return world.step(per_lane_limits)


def read_detectors(world: World, station: str) -> DetectorReading:
    """Occupancy, mean crossing speed and counts since the station's last read."""
    return world._read_station(station)


def count_emergency_brakes(world: World) -> int:
    """Distinct vehicles that decelerated harder than the threshold since the last call."""
    return world._take_brakes()


def accumulate_emissions(world: World) -> EmissionTotals:
    """Pollutant totals since the last call."""
    return world._take_emissions()


def flow_counts(world: World) -> tuple[int, int]:
    """(f_in, f_out) since the last call: arrivals into the system and boundary exits.

    Reads the boundary counts without consuming the ``outflow_boundaries``
    station, which keeps its own per-boundary split.
    """
    f_in = int(world.counters[K.C_IN])
    world.counters[K.C_IN] = 0
    f_out = int(world.counters[K.C_EXITED]) - world._exited_mark
    world._exited_mark = int(world.counters[K.C_EXITED])
    return f_in, f_out

