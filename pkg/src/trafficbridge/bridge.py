"""Core of the coupling bridge: producer loop, interpolated entities, culling,
object pooling and scene snapshots.

Two roles cooperate. The producer owns the TraCI session: each iteration it
advances the simulation one step, polls every active vehicle and traffic
light, and publishes one atomic batch into SharedTrafficState, pacing itself
to rate_n on a monotonic clock. The consumer owns the entity table and pool:
each tick it drains pending batches, advances interpolation by the elapsed
frame time, re-evaluates culling on its schedule and emits a SceneSnapshot.

Interpolation keeps the previous and target state per vehicle and blends
with alpha accumulated as dt / t_step, so visual motion is smooth and the
position at every batch boundary is the simulation's own state no matter how
ticks and batches interleave.
"""

from __future__ import annotations

import logging
import math
import threading
import time
from collections import deque
from dataclasses import dataclass, field

from .geo import CoordinateMapper, HeightField, lerp_angle
from .netparse import SignalState, TrafficLightPlan, apply_signal_string
from .traci_client import TraciSession, TraciSessionError, VehicleState

log = logging.getLogger(__name__)


@dataclass
class BridgeConfig:
    rate_n: float = 10.0            # producer request rate, Hz; server step = 1/rate_n
    culling_radius: float = 300.0   # meters around the listener
    cull_check_period: int = 5      # distance checks every this many ticks
    height_check_period: int = 10   # terrain snaps every this many ticks
    pool_sizes: dict[str, int] = field(default_factory=dict)
    default_pool_size: int = 32     # initial capacity for vtypes not listed
    hysteresis: float | None = None  # despawn band beyond the radius; None = 5% of radius
    pool_growth: float = 2.0
    compute_pitch: bool = True      # two terrain probes per vehicle instead of one
    wheelbase: float = 3.0          # probe separation for pitch, meters

    def __post_init__(self):
        if self.rate_n <= 0:
            raise ValueError("rate_n must be positive")
        if self.cull_check_period < 1 or self.height_check_period < 1:
            raise ValueError("check periods must be >= 1")
        if self.hysteresis is not None and self.hysteresis < 0:
            raise ValueError("hysteresis must be >= 0")
        if self.pool_growth <= 1.0:
            raise ValueError("pool_growth must exceed 1")

    @property
    def step_length(self) -> float:
        return 1.0 / self.rate_n

    @property
    def effective_hysteresis(self) -> float:
        return 0.05 * self.culling_radius if self.hysteresis is None else self.hysteresis


@dataclass(frozen=True)
class UpdateBatch:
    """One producer publication: the full refresh of a simulation step."""

    sim_time: float
    vehicles: dict[str, VehicleState]
    lights: dict[str, str]
    departed: tuple[str, ...]
    arrived: tuple[str, ...]
    step_lag: float = 0.0


class SharedTrafficState:
    """Thread-safe hand-off between the producer and the consumer.

    Holds the latest per-vehicle state map plus a bounded queue of pending
    batches. Publications are atomic: readers see either all of a batch or
    none of it. The generation counter increases by exactly one per publish.
    """

    def __init__(self, max_pending: int = 4096):
        self._lock = threading.Lock()
        self._pending: deque[tuple[int, UpdateBatch]] = deque()
        self._max_pending = max_pending
        self._vehicles: dict[str, VehicleState] = {}
        self._lights: dict[str, str] = {}
        self._sim_time = 0.0
        self._generation = 0
        self._dropped = 0
        self._error: Exception | None = None

    def publish(self, batch: UpdateBatch) -> int:
        with self._lock:
            self._generation += 1
            self._vehicles = dict(batch.vehicles)
            self._lights.update(batch.lights)
            self._sim_time = batch.sim_time
            self._pending.append((self._generation, batch))
            if len(self._pending) > self._max_pending:
                self._pending.popleft()
                self._dropped += 1
            return self._generation

    def drain(self) -> list[tuple[int, UpdateBatch]]:
        with self._lock:
            items = list(self._pending)
            self._pending.clear()
        return items

    def latest(self) -> tuple[int, float, dict[str, VehicleState], dict[str, str]]:
        with self._lock:
            return self._generation, self._sim_time, dict(self._vehicles), dict(self._lights)

    @property
    def generation(self) -> int:
        with self._lock:
            return self._generation

    @property
    def dropped(self) -> int:
        with self._lock:
            return self._dropped

    def set_error(self, exc: Exception) -> None:
        with self._lock:
            self._error = exc

    @property
    def error(self) -> Exception | None:
        with self._lock:
            return self._error


@dataclass(eq=False)
class PoolSlot:
    vtype: str
    index: int
    active: bool = False


class VehiclePool:
    """Per-vehicle-type free lists of reusable entity slots.

    Acquiring from an empty free list grows that type's pool by the growth
    factor (never less than one extra slot), so exhaustion is absorbed
    rather than surfaced.
    """

    def __init__(self, sizes: dict[str, int] | None = None, default_size: int = 32, growth: float = 2.0):
        self._sizes = dict(sizes or {})
        self._default_size = default_size
        self._growth = growth
        self._free: dict[str, list[PoolSlot]] = {}
        self._capacity: dict[str, int] = {}
        self._active: dict[str, int] = {}
        self.high_water: dict[str, int] = {}
        self.resize_count = 0

    def _ensure_type(self, vtype: str) -> None:
        if vtype in self._capacity:
            return
        size = max(1, self._sizes.get(vtype, self._default_size))
        self._free[vtype] = [PoolSlot(vtype, i) for i in reversed(range(size))]
        self._capacity[vtype] = size
        self._active[vtype] = 0
        self.high_water[vtype] = 0

    def _resize(self, vtype: str) -> None:
        old = self._capacity[vtype]
        new = max(old + 1, math.ceil(old * self._growth))
        self._free[vtype].extend(PoolSlot(vtype, i) for i in reversed(range(old, new)))
        self._capacity[vtype] = new
        self.resize_count += 1
        log.info("pool for %s resized %d -> %d", vtype, old, new)

    def acquire(self, vtype: str) -> PoolSlot:
        self._ensure_type(vtype)
        if not self._free[vtype]:
            self._resize(vtype)
        slot = self._free[vtype].pop()
        slot.active = True
        self._active[vtype] += 1
        self.high_water[vtype] = max(self.high_water[vtype], self._active[vtype])
        return slot

    def release(self, slot: PoolSlot) -> None:
        if not slot.active:
            raise ValueError(f"slot {slot.vtype}#{slot.index} released twice")
        slot.active = False
        self._active[slot.vtype] -= 1
        self._free[slot.vtype].append(slot)

    def capacity(self, vtype: str) -> int:
        return self._capacity.get(vtype, 0)

    def free_count(self, vtype: str | None = None) -> int:
        if vtype is not None:
            return len(self._free.get(vtype, []))
        return sum(len(slots) for slots in self._free.values())

    def active_count(self, vtype: str | None = None) -> int:
        if vtype is not None:
            return self._active.get(vtype, 0)
        return sum(self._active.values())

    def total_capacity(self) -> int:
        return sum(self._capacity.values())


@dataclass
class InterpolatedEntity:
    """Previous/target state pair plus the blend driving smooth visuals."""

    id: str
    vtype: str
    previous: VehicleState
    target: VehicleState
    alpha: float = 0.0
    slot: PoolSlot | None = None
    plane_pos: tuple[float, float] = (0.0, 0.0)
    engine_pos: tuple[float, float, float] = (0.0, 0.0, 0.0)
    engine_yaw: float = 0.0
    pitch: float = 0.0
    speed: float = 0.0
    acceleration: float = 0.0
    arrived: bool = False
    distance: float | None = None    # cached engine-plane distance to the listener
    ground_z: float | None = None    # cached terrain elevation under the vehicle
    height_ok: bool = True


def on_network_update(table: dict[str, InterpolatedEntity], batch: UpdateBatch) -> None:
    """Fold one publication into the entity table.

    Updated vehicles shift target -> previous, adopt the new target and
    reset alpha. A vehicle's first update starts with previous == target so
    it never interpolates in from nowhere. Vehicles absent from the batch
    are left untouched; arrived ones are flagged for the cull pass.
    """
    for vid, state in batch.vehicles.items():
        entity = table.get(vid)
        if entity is None:
            table[vid] = InterpolatedEntity(
                id=vid,
                vtype=state.vtype,
                previous=state,
                target=state,
                plane_pos=state.position,
                speed=state.speed,
                acceleration=state.acceleration,
            )
        else:
            entity.previous = entity.target
            entity.target = state
            entity.alpha = 0.0
    for vid in batch.arrived:
        entity = table.get(vid)
        if entity is not None:
            entity.arrived = True


def tick_visuals(
    table: dict[str, InterpolatedEntity],
    dt: float,
    t_step: float,
    mapper: CoordinateMapper,
    heightfield: HeightField,
    update_heights: bool = True,
    compute_pitch: bool = True,
    wheelbase: float = 3.0,
) -> None:
    """Advance every entity's blend by dt and refresh engine transforms.

    alpha grows by dt / t_step and clamps to [0, 1]; the plane position is
    the lerp of the state pair, the yaw a shortest-arc lerp of the mapped
    headings. Terrain is re-probed only when update_heights is set (or on an
    entity's first tick); cached elevations are reused otherwise.
    """
    if dt < 0:
        raise ValueError("dt must be >= 0")
    if t_step <= 0:
        raise ValueError("t_step must be positive")
    for entity in table.values():
        if entity.arrived:
            continue
        alpha = entity.alpha + dt / t_step
        entity.alpha = 0.0 if alpha < 0.0 else (1.0 if alpha > 1.0 else alpha)
        a = entity.alpha
        prev, target = entity.previous, entity.target
        px = prev.position[0] * (1.0 - a) + target.position[0] * a
        py = prev.position[1] * (1.0 - a) + target.position[1] * a
        entity.plane_pos = (px, py)
        entity.speed = prev.speed * (1.0 - a) + target.speed * a
        entity.acceleration = prev.acceleration * (1.0 - a) + target.acceleration * a
        ex, ey = mapper.to_engine(px, py)
        yaw = lerp_angle(mapper.to_engine_yaw(prev.angle), mapper.to_engine_yaw(target.angle), a)
        if update_heights or entity.ground_z is None:
            entity.ground_z, entity.height_ok = heightfield.snap_height(ex, ey)
            if compute_pitch:
                entity.pitch, _ = heightfield.snap_pitch(ex, ey, yaw, wheelbase)
            else:
                entity.pitch = 0.0
        entity.engine_pos = (ex, ey, entity.ground_z)
        entity.engine_yaw = yaw


@dataclass(frozen=True)
class CullResult:
    spawned: tuple[str, ...]
    despawned: tuple[str, ...]
    removed: tuple[str, ...]  # arrived vehicles dropped from the table


def cull_and_schedule(
    table: dict[str, InterpolatedEntity],
    listener: tuple[float, float, float],
    config: BridgeConfig,
    pool: VehiclePool,
    mapper: CoordinateMapper,
    tick_index: int,
) -> CullResult:
    """Spawn, update or despawn entities by proximity to the listener.

    Distance checks run only on ticks where tick_index is a multiple of
    cull_check_period (and on an entity's first sighting); cached distances
    are used in between. Entities crossing into the radius acquire a pool
    slot; they release it only beyond radius + hysteresis, which keeps a
    vehicle oscillating around the boundary from churning its slot. Arrived
    vehicles release their slot and leave the table the same tick.
    """
    radius = config.culling_radius * mapper.units_per_meter
    outer = radius + config.effective_hysteresis * mapper.units_per_meter
    check = tick_index % config.cull_check_period == 0
    spawned: list[str] = []
    despawned: list[str] = []
    removed: list[str] = []
    for vid, entity in list(table.items()):
        if entity.arrived:
            if entity.slot is not None:
                pool.release(entity.slot)
                entity.slot = None
                despawned.append(vid)
            del table[vid]
            removed.append(vid)
            continue
        if check or entity.distance is None:
            entity.distance = math.hypot(
                entity.engine_pos[0] - listener[0], entity.engine_pos[1] - listener[1]
            )
        if entity.slot is None:
            if entity.distance <= radius:
                entity.slot = pool.acquire(entity.vtype)
                spawned.append(vid)
        elif entity.distance > outer:
            pool.release(entity.slot)
            entity.slot = None
            despawned.append(vid)
    return CullResult(tuple(spawned), tuple(despawned), tuple(removed))


def pool_acquire(pool: VehiclePool, vtype: str) -> PoolSlot:
    return pool.acquire(vtype)


@dataclass(frozen=True)
class SnapshotVehicle:
    id: str
    position: tuple[float, float, float]
    yaw: float
    pitch: float
    vtype: str
    speed: float
    acceleration: float = 0.0


@dataclass(frozen=True)
class SnapshotLight:
    tl_id: str
    link_index: int
    state: SignalState
    position: tuple[float, float, float]
    yaw: float


@dataclass(frozen=True)
class SnapshotStats:
    active: int
    pooled_free: int
    culled: int
    sim_time: float
    step_lag: float
    generation: int = 0
    applied: int = 0
    dropped: int = 0


@dataclass(frozen=True)
class SceneSnapshot:
    tick_time: float
    vehicles: tuple[SnapshotVehicle, ...]
    lights: tuple[SnapshotLight, ...]
    listener: tuple[float, float, float]
    culling_radius: float  # engine units
    stats: SnapshotStats


def build_snapshot(
    table: dict[str, InterpolatedEntity],
    plan: TrafficLightPlan,
    light_states: dict[str, str],
    listener: tuple[float, float, float],
    stats: SnapshotStats,
    tick_time: float,
    culling_radius: float,
) -> SceneSnapshot:
    """Assemble the consumer-side world state: active entities plus every
    planned light paired with its current signal."""
    vehicles = tuple(
        SnapshotVehicle(
            id=entity.id,
            position=entity.engine_pos,
            yaw=entity.engine_yaw,
            pitch=entity.pitch,
            vtype=entity.vtype,
            speed=entity.speed,
            acceleration=entity.acceleration,
        )
        for entity in table.values()
        if entity.slot is not None
    )
    signal_by_handle: dict[int, SignalState] = {}
    for tl_id in plan.index:
        state = light_states.get(tl_id, "")
        for handle, signal in apply_signal_string(plan, tl_id, state):
            signal_by_handle[handle] = signal
    lights = tuple(
        SnapshotLight(
            tl_id=spawn.tl_id,
            link_index=spawn.link_index,
            state=signal_by_handle.get(handle, SignalState.UNKNOWN),
            position=spawn.position,
            yaw=spawn.yaw,
        )
        for handle, spawn in enumerate(plan.spawns)
    )
    return SceneSnapshot(
        tick_time=tick_time,
        vehicles=vehicles,
        lights=lights,
        listener=listener,
        culling_radius=culling_radius,
        stats=stats,
    )


def producer_loop(
    session: TraciSession,
    shared: SharedTrafficState,
    config: BridgeConfig,
    stop: threading.Event,
    tl_ids: tuple[str, ...] = (),
    clock=time.monotonic,
) -> None:
    """Drive the session at rate_n until stopped, publishing one batch per step.

    Iterations are paced against a monotonic deadline. An overrun is never
    compensated by bursting extra steps; the deadline is rebased and the
    delay reported as the batch's step_lag instead, so the simulation's
    timescale stretches rather than distorts when the server cannot keep up.
    On a lost connection the error lands in shared state and the loop ends.
    """
    period = 1.0 / config.rate_n
    active: set[str] = set()
    next_time = clock()
    while not stop.is_set():
        lag = max(0.0, clock() - next_time)
        try:
            result = session.step()
            active.update(result.departed_ids)
            active.difference_update(result.arrived_ids)
            vehicles = session.get_vehicle_states(sorted(active))
            lights = session.get_traffic_light_states(tl_ids)
        except TraciSessionError as exc:
            log.error("producer stopping: %s", exc)
            shared.set_error(exc)
            return
        missing = active.difference(vehicles)
        if missing:
            # Skipped by the server this step (see get_vehicle_states); a
            # vehicle it no longer knows will never come back.
            active.difference_update(missing)
        shared.publish(
            UpdateBatch(
                sim_time=result.sim_time,
                vehicles=vehicles,
                lights=lights,
                departed=result.departed_ids,
                arrived=result.arrived_ids,
                step_lag=lag,
            )
        )
        next_time += period
        now = clock()
        if next_time <= now:
            next_time = now
        else:
            stop.wait(next_time - now)


class BridgeConsumer:
    """Consumer-side orchestration: entity table, pool and snapshot assembly.

    tick() is the per-frame entry point; it drains pending publications,
    advances interpolation by the elapsed dt and returns the snapshot for
    this frame. Not thread-safe; call from one thread.
    """

    def __init__(
        self,
        shared: SharedTrafficState,
        config: BridgeConfig,
        mapper: CoordinateMapper,
        heightfield: HeightField,
        plan: TrafficLightPlan,
        t_step: float | None = None,
        listener: tuple[float, float, float] = (0.0, 0.0, 0.0),
    ):
        self.shared = shared
        self.config = config
        self.mapper = mapper
        self.heightfield = heightfield
        self.plan = plan
        self.t_step = t_step if t_step is not None else config.step_length
        self.listener = listener
        self.table: dict[str, InterpolatedEntity] = {}
        self.pool = VehiclePool(config.pool_sizes, config.default_pool_size, config.pool_growth)
        self.lights: dict[str, str] = {}
        self.tick_index = 0
        self.sim_time = 0.0
        self.step_lag = 0.0
        self.generation = 0
        self.applied = 0
        self._removed_pending: list[str] = []

    def tick(self, dt: float, tick_time: float) -> SceneSnapshot:
        for generation, batch in self.shared.drain():
            on_network_update(self.table, batch)
            self.lights.update(batch.lights)
            self.sim_time = batch.sim_time
            self.step_lag = batch.step_lag
            self.generation = generation
            self.applied += 1
        tick_visuals(
            self.table,
            dt,
            self.t_step,
            self.mapper,
            self.heightfield,
            update_heights=self.tick_index % self.config.height_check_period == 0,
            compute_pitch=self.config.compute_pitch,
            wheelbase=self.config.wheelbase,
        )
        result = cull_and_schedule(
            self.table, self.listener, self.config, self.pool, self.mapper, self.tick_index
        )
        self._removed_pending.extend(result.removed)
        stats = SnapshotStats(
            active=self.pool.active_count(),
            pooled_free=self.pool.free_count(),
            culled=len(self.table) - self.pool.active_count(),
            sim_time=self.sim_time,
            step_lag=self.step_lag,
            generation=self.generation,
            applied=self.applied,
            dropped=self.shared.dropped,
        )
        snapshot = build_snapshot(
            self.table,
            self.plan,
            self.lights,
            self.listener,
            stats,
            tick_time=tick_time,
            culling_radius=self.config.culling_radius * self.mapper.units_per_meter,
        )
        self.tick_index += 1
        return snapshot

    def take_removed(self) -> list[str]:
        """Vehicle ids dropped since the last call (for removal notices)."""
        removed = self._removed_pending
        self._removed_pending = []
        return removed

    def release_all(self) -> None:
        for entity in self.table.values():
            if entity.slot is not None:
                self.pool.release(entity.slot)
                entity.slot = None
