"""Process wiring: producer, consumer, broadcaster and OSC lifecycles.

run() owns thread startup and orderly shutdown for a live session against a
traffic server; capture_run() records a session to a replay file; and
replay_run() drives the whole consumer side from such a file, no server
needed. All loops stop through one shared Event, so an interrupt, an elapsed
duration or a producer failure wind the process down the same way: stop
producer and consumer, flush final OSC removal notices, release the pool,
close the session and the sockets, then print one final stats line.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from pathlib import Path

from .bridge import BridgeConsumer, SceneSnapshot, SharedTrafficState, producer_loop
from .capture import CaptureWriter, read_capture, replay_publisher
from .config import AppConfig, AppConfigError
from .geo import HeightField
from .netparse import NetworkParseError, parse_network, plan_traffic_lights
from .osc import OscEmitter, build_remove_messages
from .traci_client import RetryPolicy, TraciSessionError, connect
from .wsserver import LatestValue, SceneBroadcaster, serialize_snapshot

log = logging.getLogger(__name__)


def _percentile(values, q):
    if not values:
        return 0.0
    ordered = sorted(values)
    k = min(len(ordered) - 1, max(0, round(q * (len(ordered) - 1))))
    return ordered[k]


class StatsRecorder:
    """Aggregates tick stats into line-delimited JSON at a fixed interval."""

    def __init__(self, path=None, interval: float = 1.0, clients_fn=None, emitter=None):
        self._fh = open(path, "w", encoding="utf-8") if path else None
        self._interval = interval
        self._clients_fn = clients_fn or (lambda: 0)
        self._emitter = emitter
        self._window_lags: list[float] = []
        self._window_ticks = 0
        self._last_flush = time.monotonic()
        self._last: SceneSnapshot | None = None
        self.total_ticks = 0
        self.started = time.monotonic()

    def on_tick(self, snapshot: SceneSnapshot) -> None:
        self._window_lags.append(snapshot.stats.step_lag)
        self._window_ticks += 1
        self.total_ticks += 1
        self._last = snapshot

    def maybe_flush(self, now: float) -> None:
        if now - self._last_flush < self._interval or self._last is None:
            return
        row = self._row(now)
        if self._fh is not None:
            self._fh.write(json.dumps(row, separators=(",", ":")) + "\n")
            self._fh.flush()
        log.debug("stats: %s", row)
        self._window_lags = []
        self._window_ticks = 0
        self._last_flush = now

    def _row(self, now: float) -> dict:
        stats = self._last.stats
        elapsed = max(1e-9, now - self._last_flush)
        return {
            "t": round(time.time(), 3),
            "sim_time": stats.sim_time,
            "tick_rate": round(self._window_ticks / elapsed, 2),
            "active": stats.active,
            "culled": stats.culled,
            "pool_free": stats.pooled_free,
            "step_lag_p50": _percentile(self._window_lags, 0.50),
            "step_lag_p99": _percentile(self._window_lags, 0.99),
            "step_lag_max": max(self._window_lags, default=0.0),
            "generation": stats.generation,
            "applied": stats.applied,
            "dropped": stats.dropped,
            "clients": self._clients_fn(),
            "osc_bundles": self._emitter.bundles_sent if self._emitter else 0,
        }

    def final_summary(self) -> dict:
        stats = self._last.stats if self._last else None
        return {
            "event": "final",
            "runtime_s": round(time.monotonic() - self.started, 3),
            "ticks": self.total_ticks,
            "sim_time": stats.sim_time if stats else 0.0,
            "generation": stats.generation if stats else 0,
            "applied": stats.applied if stats else 0,
            "dropped": stats.dropped if stats else 0,
            "osc_bundles": self._emitter.bundles_sent if self._emitter else 0,
            "osc_vehicles": self._emitter.vehicles_sent if self._emitter else 0,
        }

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def build_world(config: AppConfig):
    """Parse the network, compute the light plan and load terrain."""
    config.validate_files()
    try:
        network = parse_network(Path(config.net_file).read_bytes())
    except NetworkParseError as exc:
        raise AppConfigError(f"cannot parse network {config.net_file}: {exc}") from None
    plan = plan_traffic_lights(
        network,
        config.mapper,
        h_offset=config.traffic_lights.h_offset,
        flip_facing=config.traffic_lights.flip_facing,
    )
    if config.heightfield_file:
        heightfield = HeightField.load(config.heightfield_file)
    else:
        heightfield = HeightField.flat(0.0)
    return network, plan, heightfield


def consumer_ticker(
    consumer: BridgeConsumer,
    stop: threading.Event,
    tick_rate: float,
    listener_cell: LatestValue,
    snapshot_cell: LatestValue,
    emitter: OscEmitter | None = None,
    recorder: StatsRecorder | None = None,
    clock=time.monotonic,
) -> None:
    """Paced consumer loop: listener intake, tick, snapshot hand-off, OSC."""
    period = 1.0 / tick_rate
    last = clock()
    next_time = last
    while not stop.is_set():
        now = clock()
        dt = max(0.0, now - last)
        last = now
        update = listener_cell.get()
        if update is not None:
            consumer.listener = update.position
        snapshot = consumer.tick(dt, now)
        snapshot_cell.set(snapshot)
        if emitter is not None:
            emitter.maybe_emit(snapshot, consumer.take_removed(), now)
        if recorder is not None:
            recorder.on_tick(snapshot)
            recorder.maybe_flush(now)
        next_time += period
        now = clock()
        if next_time <= now:
            next_time = now
        else:
            stop.wait(next_time - now)


def broadcast_ticker(
    broadcaster: SceneBroadcaster,
    snapshot_cell: LatestValue,
    stop: threading.Event,
    rate: float,
    clock=time.monotonic,
) -> None:
    """Fan the latest snapshot out to viewers at the broadcast rate."""
    period = 1.0 / rate
    next_time = clock()
    last_tick_time = None
    while not stop.is_set():
        snapshot = snapshot_cell.get()
        if snapshot is not None and snapshot.tick_time != last_tick_time:
            broadcaster.publish(serialize_snapshot(snapshot))
            last_tick_time = snapshot.tick_time
        next_time += period
        now = clock()
        if next_time <= now:
            next_time = now
        else:
            stop.wait(next_time - now)


def _open_session(config: AppConfig):
    session = connect(
        config.traci_host,
        config.traci_port,
        retry_policy=RetryPolicy(retries=3, delay=0.5),
    )
    t_step = config.bridge.step_length
    try:
        t_step = session.get_step_length()
    except TraciSessionError as exc:
        log.warning("server did not report its step length (%s); using 1/N", exc)
    if abs(t_step - config.bridge.step_length) > 1e-9:
        log.warning(
            "server step length %.4f s differs from 1/N = %.4f s; interpolation follows the server",
            t_step,
            config.bridge.step_length,
        )
    return session, t_step


def run(
    config: AppConfig,
    duration: float | None = None,
    stop_event: threading.Event | None = None,
) -> int:
    """Live run against a traffic server. Returns the process exit status."""
    stop = stop_event or threading.Event()
    network, plan, heightfield = build_world(config)
    log.info(
        "network: %d lanes, %d signal-controlled connections, %d junctions planned",
        len(network.lanes),
        len(network.tl_connections),
        len(plan.index),
    )
    session, t_step = _open_session(config)

    shared = SharedTrafficState()
    consumer = BridgeConsumer(
        shared,
        config.bridge,
        config.mapper,
        heightfield,
        plan,
        t_step=t_step,
        listener=config.listener,
    )
    emitter = (
        OscEmitter(config.osc, units_per_meter=config.mapper.units_per_meter)
        if config.osc_enabled
        else None
    )
    listener_cell: LatestValue = LatestValue()
    snapshot_cell: LatestValue = LatestValue()
    broadcaster = None
    if config.websocket.enabled:
        broadcaster = SceneBroadcaster(
            config.websocket.host,
            config.websocket.port,
            listener_cell,
            max_queue=config.websocket.max_queue,
        ).start()
        log.info("snapshot endpoint: ws://%s:%d/scene", config.websocket.host, broadcaster.port)
    recorder = StatsRecorder(
        config.stats.file,
        config.stats.interval,
        clients_fn=broadcaster.client_count if broadcaster else None,
        emitter=emitter,
    )

    threads = [
        threading.Thread(
            target=producer_loop,
            args=(session, shared, config.bridge, stop, tuple(plan.index)),
            name="producer",
            daemon=True,
        ),
        threading.Thread(
            target=consumer_ticker,
            args=(consumer, stop, config.tick_rate, listener_cell, snapshot_cell, emitter, recorder),
            name="consumer",
            daemon=True,
        ),
    ]
    if broadcaster is not None:
        threads.append(
            threading.Thread(
                target=broadcast_ticker,
                args=(broadcaster, snapshot_cell, stop, config.websocket.broadcast_rate),
                name="broadcast",
                daemon=True,
            )
        )
    for thread in threads:
        thread.start()

    deadline = time.monotonic() + duration if duration is not None else None
    try:
        while not stop.is_set():
            if shared.error is not None:
                log.error("producer failed: %s", shared.error)
                break
            if deadline is not None and time.monotonic() >= deadline:
                log.info("configured duration elapsed")
                break
            time.sleep(0.05)
    except KeyboardInterrupt:
        log.info("interrupted")
    finally:
        stop.set()
        for thread in threads:
            thread.join(timeout=5.0)
        if emitter is not None:
            for message in build_remove_messages(sorted(emitter.records)):
                emitter.sender.send(message)
            emitter.close()
        consumer.release_all()
        session.close()
        if broadcaster is not None:
            broadcaster.stop()
        recorder.close()
        print(json.dumps(recorder.final_summary()))
    return 1 if shared.error is not None else 0


def capture_run(
    config: AppConfig,
    out_path: str | Path,
    duration: float,
    stop_event: threading.Event | None = None,
) -> int:
    """Record producer publications to a replay file."""
    stop = stop_event or threading.Event()
    network, plan, _ = build_world(config)
    session, t_step = _open_session(config)
    shared = SharedTrafficState()
    producer = threading.Thread(
        target=producer_loop,
        args=(session, shared, config.bridge, stop, tuple(plan.index)),
        name="producer",
        daemon=True,
    )
    producer.start()
    deadline = time.monotonic() + duration
    with CaptureWriter(out_path, t_step, tl_ids=tuple(plan.index)) as writer:
        try:
            while not stop.is_set() and time.monotonic() < deadline:
                for _, batch in shared.drain():
                    writer.write(batch)
                if shared.error is not None:
                    break
                time.sleep(0.02)
            for _, batch in shared.drain():
                writer.write(batch)
        except KeyboardInterrupt:
            pass
        finally:
            stop.set()
            producer.join(timeout=5.0)
            session.close()
        print(json.dumps({"event": "capture", "file": str(out_path), "batches": writer.batches}))
    return 1 if shared.error is not None else 0


def replay_run(
    config: AppConfig,
    capture_path: str | Path,
    speed: float = 1.0,
    duration: float | None = None,
    stop_event: threading.Event | None = None,
) -> int:
    """Drive the consumer side from a capture file; no server involved."""
    stop = stop_event or threading.Event()
    network, plan, heightfield = build_world(config)
    header, batches = read_capture(capture_path)
    log.info("replaying %d batches at %.2gx", len(batches), speed)

    shared = SharedTrafficState()
    consumer = BridgeConsumer(
        shared,
        config.bridge,
        config.mapper,
        heightfield,
        plan,
        t_step=float(header.get("step_length", config.bridge.step_length)),
        listener=config.listener,
    )
    emitter = (
        OscEmitter(config.osc, units_per_meter=config.mapper.units_per_meter)
        if config.osc_enabled
        else None
    )
    listener_cell: LatestValue = LatestValue()
    snapshot_cell: LatestValue = LatestValue()
    broadcaster = None
    if config.websocket.enabled:
        broadcaster = SceneBroadcaster(
            config.websocket.host,
            config.websocket.port,
            listener_cell,
            max_queue=config.websocket.max_queue,
        ).start()
        log.info("snapshot endpoint: ws://%s:%d/scene", config.websocket.host, broadcaster.port)
    recorder = StatsRecorder(
        config.stats.file,
        config.stats.interval,
        clients_fn=broadcaster.client_count if broadcaster else None,
        emitter=emitter,
    )

    def feed_then_stop():
        replay_publisher(
            batches,
            shared,
            float(header.get("step_length", 0.1)),
            stop,
            speed=speed,
        )
        time.sleep(0.2)  # let the consumer drain the tail
        stop.set()

    threads = [
        threading.Thread(target=feed_then_stop, name="replay", daemon=True),
        threading.Thread(
            target=consumer_ticker,
            args=(consumer, stop, config.tick_rate, listener_cell, snapshot_cell, emitter, recorder),
            name="consumer",
            daemon=True,
        ),
    ]
    if broadcaster is not None:
        threads.append(
            threading.Thread(
                target=broadcast_ticker,
                args=(broadcaster, snapshot_cell, stop, config.websocket.broadcast_rate),
                name="broadcast",
                daemon=True,
            )
        )
    for thread in threads:
        thread.start()
    deadline = time.monotonic() + duration if duration is not None else None
    try:
        while not stop.is_set():
            if deadline is not None and time.monotonic() >= deadline:
                break
            time.sleep(0.05)
    except KeyboardInterrupt:
        pass
    finally:
        stop.set()
        for thread in threads:
            thread.join(timeout=5.0)
        if emitter is not None:
            emitter.close()
        consumer.release_all()
        if broadcaster is not None:
            broadcaster.stop()
        recorder.close()
        print(json.dumps(recorder.final_summary()))
    return 0
