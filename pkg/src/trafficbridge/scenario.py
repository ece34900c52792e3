"""Scripted scenarios driving the mock traffic server.

A scenario is a YAML document, hand-writable and diffable:

    step_length: 0.1
    vehicles:
      - id: veh0
        type: car            # optional, default "car"
        depart: 0.0
        route: [[0.0, 0.0], [100.0, 0.0]]
        speed: 10.0          # constant, or piecewise [[t_rel, m/s], ...]
    lights:
      - id: J1
        program: [["GrGr", 5.0], ["rGrG", 5.0]]

Vehicles follow their polyline route at the piecewise-constant speed profile
(times relative to departure). All state is evaluated in closed form from the
current simulation time, so identical command sequences always produce
identical answers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class ScenarioError(Exception):
    pass


@dataclass(frozen=True)
class SpeedPhase:
    start: float  # seconds since departure
    speed: float  # m/s


@dataclass(frozen=True)
class ScenarioVehicle:
    id: str
    vtype: str
    depart: float
    route: tuple[tuple[float, float], ...]
    speed_phases: tuple[SpeedPhase, ...]

    def __post_init__(self):
        if len(self.route) < 2:
            raise ScenarioError(f"vehicle {self.id}: route needs at least 2 waypoints")
        if self.depart < 0:
            raise ScenarioError(f"vehicle {self.id}: negative departure time")
        if not self.speed_phases or self.speed_phases[0].start > 0:
            raise ScenarioError(f"vehicle {self.id}: speed profile must start at t=0")

    @property
    def route_length(self) -> float:
        return sum(
            math.dist(a, b) for a, b in zip(self.route, self.route[1:])
        )

    def speed_at(self, travel_time: float) -> float:
        if travel_time < 0:
            return self.speed_phases[0].speed
        current = self.speed_phases[0].speed
        for phase in self.speed_phases:
            if phase.start <= travel_time:
                current = phase.speed
            else:
                break
        return current

    def distance_at(self, travel_time: float) -> float:
        """Closed-form distance covered after travel_time seconds on the route."""
        if travel_time <= 0:
            return 0.0
        total = 0.0
        for i, phase in enumerate(self.speed_phases):
            end = (
                self.speed_phases[i + 1].start
                if i + 1 < len(self.speed_phases)
                else math.inf
            )
            if travel_time <= phase.start:
                break
            span = min(travel_time, end) - phase.start
            total += phase.speed * span
        return total

    def arrival_travel_time(self) -> float:
        """Travel time at which the route length is covered (inf if never)."""
        target = self.route_length
        covered = 0.0
        for i, phase in enumerate(self.speed_phases):
            end = (
                self.speed_phases[i + 1].start
                if i + 1 < len(self.speed_phases)
                else math.inf
            )
            span = end - phase.start
            gained = phase.speed * span
            if covered + gained >= target and phase.speed > 0:
                return phase.start + (target - covered) / phase.speed
            covered += gained
        return math.inf

    def position_at(self, travel_time: float) -> tuple[float, float]:
        return self._point_along(min(self.distance_at(travel_time), self.route_length))

    def heading_at(self, travel_time: float) -> float:
        """Heading in degrees clockwise from north (the TraCI convention)."""
        d = min(self.distance_at(travel_time), self.route_length)
        dx, dy = self._segment_direction(d)
        return math.degrees(math.atan2(dx, dy)) % 360.0

    def _point_along(self, distance: float) -> tuple[float, float]:
        remaining = distance
        for a, b in zip(self.route, self.route[1:]):
            seg = math.dist(a, b)
            if remaining <= seg:
                f = remaining / seg
                return (a[0] + (b[0] - a[0]) * f, a[1] + (b[1] - a[1]) * f)
            remaining -= seg
        return self.route[-1]

    def _segment_direction(self, distance: float) -> tuple[float, float]:
        remaining = distance
        last = None
        for a, b in zip(self.route, self.route[1:]):
            seg = math.dist(a, b)
            last = (b[0] - a[0], b[1] - a[1])
            if remaining < seg:
                break
            remaining -= seg
        assert last is not None
        return last


@dataclass(frozen=True)
class LightProgram:
    junction_id: str
    phases: tuple[tuple[str, float], ...]

    def __post_init__(self):
        if not self.phases:
            raise ScenarioError(f"light {self.junction_id}: empty program")
        if any(duration <= 0 for _, duration in self.phases):
            raise ScenarioError(f"light {self.junction_id}: phase durations must be positive")

    @property
    def cycle(self) -> float:
        return sum(duration for _, duration in self.phases)

    def state_at(self, sim_time: float) -> str:
        t = sim_time % self.cycle
        for state, duration in self.phases:
            if t < duration:
                return state
            t -= duration
        return self.phases[-1][0]  # t == cycle boundary after float roundoff


@dataclass(frozen=True)
class Scenario:
    step_length: float
    vehicles: tuple[ScenarioVehicle, ...] = ()
    lights: tuple[LightProgram, ...] = ()

    def __post_init__(self):
        if self.step_length <= 0:
            raise ScenarioError("step_length must be positive")
        ids = [v.id for v in self.vehicles]
        if len(ids) != len(set(ids)):
            raise ScenarioError("duplicate vehicle ids in scenario")


def _parse_speed(raw, vehicle_id: str) -> tuple[SpeedPhase, ...]:
    if isinstance(raw, (int, float)):
        return (SpeedPhase(0.0, float(raw)),)
    if isinstance(raw, list):
        phases = []
        for entry in raw:
            if not isinstance(entry, list) or len(entry) != 2:
                raise ScenarioError(f"vehicle {vehicle_id}: speed entries must be [time, speed] pairs")
            phases.append(SpeedPhase(float(entry[0]), float(entry[1])))
        phases.sort(key=lambda p: p.start)
        return tuple(phases)
    raise ScenarioError(f"vehicle {vehicle_id}: speed must be a number or a list of pairs")


def scenario_from_dict(doc: dict) -> Scenario:
    if not isinstance(doc, dict):
        raise ScenarioError("scenario document must be a mapping")
    try:
        step_length = float(doc["step_length"])
    except KeyError:
        raise ScenarioError("scenario is missing step_length") from None

    vehicles = []
    for raw in doc.get("vehicles", []) or []:
        try:
            vehicles.append(
                ScenarioVehicle(
                    id=str(raw["id"]),
                    vtype=str(raw.get("type", "car")),
                    depart=float(raw.get("depart", 0.0)),
                    route=tuple((float(p[0]), float(p[1])) for p in raw["route"]),
                    speed_phases=_parse_speed(raw.get("speed", 0.0), str(raw.get("id", "?"))),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError(f"bad vehicle entry {raw!r}: {exc}") from None

    lights = []
    for raw in doc.get("lights", []) or []:
        try:
            lights.append(
                LightProgram(
                    junction_id=str(raw["id"]),
                    phases=tuple((str(s), float(d)) for s, d in raw["program"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError(f"bad light entry {raw!r}: {exc}") from None

    return Scenario(step_length, tuple(vehicles), tuple(lights))


def load_scenario(path: str | Path) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ScenarioError(f"cannot parse scenario {path}: {exc}") from None
    return scenario_from_dict(doc)


@dataclass
class VehicleSample:
    """One vehicle's state at a simulation step, in TraCI conventions."""

    id: str
    position: tuple[float, float]
    angle: float  # degrees clockwise from north
    speed: float
    acceleration: float
    vtype: str


class SimulationState:
    """Mutable stepper over a scenario; positions always come from the closed form."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.step_count = 0
        self._departed: set[str] = set()
        self._arrived: set[str] = set()
        self._active: dict[str, ScenarioVehicle] = {}
        self._samples: dict[str, VehicleSample] = {}

    @property
    def sim_time(self) -> float:
        return self.step_count * self.scenario.step_length

    @property
    def active_ids(self) -> tuple[str, ...]:
        return tuple(self._active)

    def advance(self) -> tuple[float, tuple[str, ...], tuple[str, ...]]:
        """Advance one step; returns (sim_time, departed ids, arrived ids)."""
        self.step_count += 1
        now = self.sim_time
        departed = []
        for vehicle in self.scenario.vehicles:
            if vehicle.id not in self._departed and vehicle.depart <= now:
                self._departed.add(vehicle.id)
                self._active[vehicle.id] = vehicle
                departed.append(vehicle.id)
        arrived = []
        for vid, vehicle in list(self._active.items()):
            if vehicle.depart + vehicle.arrival_travel_time() <= now:
                self._arrived.add(vid)
                del self._active[vid]
                arrived.append(vid)
        self._samples.clear()
        return now, tuple(departed), tuple(arrived)

    def vehicle_sample(self, vehicle_id: str) -> VehicleSample | None:
        """Current state of an active vehicle, None if not in the simulation."""
        vehicle = self._active.get(vehicle_id)
        if vehicle is None:
            return None
        cached = self._samples.get(vehicle_id)
        if cached is not None:
            return cached
        travel = self.sim_time - vehicle.depart
        speed_now = vehicle.speed_at(travel)
        speed_before = vehicle.speed_at(travel - self.scenario.step_length)
        sample = VehicleSample(
            id=vehicle_id,
            position=vehicle.position_at(travel),
            angle=vehicle.heading_at(travel),
            speed=speed_now,
            acceleration=(speed_now - speed_before) / self.scenario.step_length,
            vtype=vehicle.vtype,
        )
        self._samples[vehicle_id] = sample
        return sample

    def light_state(self, junction_id: str) -> str | None:
        for program in self.scenario.lights:
            if program.junction_id == junction_id:
                return program.state_at(self.sim_time)
        return None
