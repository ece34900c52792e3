"""WebSocket fan-out of scene snapshots and listener-position ingestion.

Serves the `/scene` endpoint. Server to client: one JSON document per
snapshot at the broadcast rate. Client to server: listener updates that
steer the culling center and the OSC header. Slow clients are dropped once
their send queue fills; the tick loop never waits on a socket.

Snapshot document:

    {"type": "snapshot", "tick_time": s, "sim_time": s,
     "listener": {"x":..,"y":..,"z":..}, "culling_radius": units,
     "vehicles": [{"id","x","y","z","yaw","pitch","vtype","speed","accel"}],
     "lights": [{"tl_id","link_index","state","x","y","z","yaw"}],
     "stats": {"active","pooled_free","culled","sim_time","step_lag",
               "generation","applied","dropped"}}

Listener document (client to server):

    {"type": "listener", "x":.., "y":.., "z":.., "yaw":..}

Positions are engine units, angles degrees.
"""

from __future__ import annotations

import json
import logging
import math
import queue
import threading
from dataclasses import dataclass
from http import HTTPStatus
from typing import Generic, TypeVar

from websockets.sync.server import serve

from .bridge import SceneSnapshot

log = logging.getLogger(__name__)

T = TypeVar("T")


class LatestValue(Generic[T]):
    """Thread-safe single-value cell; writers overwrite, readers get newest."""

    def __init__(self, initial: T | None = None):
        self._lock = threading.Lock()
        self._value = initial

    def set(self, value: T) -> None:
        with self._lock:
            self._value = value

    def get(self) -> T | None:
        with self._lock:
            return self._value


@dataclass(frozen=True)
class ListenerUpdate:
    position: tuple[float, float, float]
    yaw: float = 0.0
    source: str = ""


def serialize_snapshot(snapshot: SceneSnapshot) -> str:
    lx, ly, lz = snapshot.listener
    return json.dumps(
        {
            "type": "snapshot",
            "tick_time": snapshot.tick_time,
            "sim_time": snapshot.stats.sim_time,
            "listener": {"x": lx, "y": ly, "z": lz},
            "culling_radius": snapshot.culling_radius,
            "vehicles": [
                {
                    "id": v.id,
                    "x": v.position[0],
                    "y": v.position[1],
                    "z": v.position[2],
                    "yaw": v.yaw,
                    "pitch": v.pitch,
                    "vtype": v.vtype,
                    "speed": v.speed,
                    "accel": v.acceleration,
                }
                for v in snapshot.vehicles
            ],
            "lights": [
                {
                    "tl_id": l.tl_id,
                    "link_index": l.link_index,
                    "state": l.state.name,
                    "x": l.position[0],
                    "y": l.position[1],
                    "z": l.position[2],
                    "yaw": l.yaw,
                }
                for l in snapshot.lights
            ],
            "stats": {
                "active": snapshot.stats.active,
                "pooled_free": snapshot.stats.pooled_free,
                "culled": snapshot.stats.culled,
                "sim_time": snapshot.stats.sim_time,
                "step_lag": snapshot.stats.step_lag,
                "generation": snapshot.stats.generation,
                "applied": snapshot.stats.applied,
                "dropped": snapshot.stats.dropped,
            },
        },
        separators=(",", ":"),
    )


def parse_listener_update(text: str, source: str = "") -> ListenerUpdate | None:
    """Validate a client message; None for anything that is not a good update."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError:
        return None
    if not isinstance(doc, dict) or doc.get("type") != "listener":
        return None
    try:
        position = (float(doc["x"]), float(doc["y"]), float(doc.get("z", 0.0)))
        yaw = float(doc.get("yaw", 0.0))
    except (KeyError, TypeError, ValueError):
        return None
    if not all(math.isfinite(v) for v in (*position, yaw)):
        return None
    return ListenerUpdate(position=position, yaw=yaw, source=source)


class SceneBroadcaster:
    """Threaded WebSocket server pushing snapshots and collecting listeners."""

    def __init__(
        self,
        host: str,
        port: int,
        listener_cell: LatestValue[ListenerUpdate],
        max_queue: int = 16,
    ):
        self._host = host
        self._port = port
        self._listener_cell = listener_cell
        self._max_queue = max_queue
        self._clients: dict[object, queue.Queue[str]] = {}
        self._clients_lock = threading.Lock()
        self._server = None
        self._thread: threading.Thread | None = None
        self.dropped_clients = 0

    # -- lifecycle ------------------------------------------------------

    def start(self) -> "SceneBroadcaster":
        def reject_unknown_paths(connection, request):
            if request.path != "/scene":
                return connection.respond(HTTPStatus.NOT_FOUND, "only /scene is served\n")
            return None

        self._server = serve(
            self._handle_client,
            self._host,
            self._port,
            process_request=reject_unknown_paths,
        )
        self._thread = threading.Thread(
            target=self._server.serve_forever, name="scene-ws", daemon=True
        )
        self._thread.start()
        return self

    @property
    def port(self) -> int:
        if self._server is None:
            raise RuntimeError("broadcaster not started")
        return self._server.socket.getsockname()[1]

    def stop(self) -> None:
        if self._server is not None:
            self._server.shutdown()
        if self._thread is not None:
            self._thread.join(timeout=5.0)
        with self._clients_lock:
            self._clients.clear()

    # -- fan-out ----------------------------------------------------------

    def client_count(self) -> int:
        with self._clients_lock:
            return len(self._clients)

    def publish(self, payload: str) -> None:
        """Queue a snapshot for every client; never blocks the caller."""
        with self._clients_lock:
            clients = list(self._clients.items())
        for conn, q in clients:
            try:
                q.put_nowait(payload)
            except queue.Full:
                log.warning("dropping slow snapshot client")
                self.dropped_clients += 1
                self._forget(conn)
                try:
                    conn.close(code=1013, reason="too slow")
                except Exception:
                    pass

    def _forget(self, conn) -> None:
        with self._clients_lock:
            self._clients.pop(conn, None)

    def _handle_client(self, conn) -> None:
        q: queue.Queue[str] = queue.Queue(maxsize=self._max_queue)
        with self._clients_lock:
            self._clients[conn] = q
        source = str(conn.remote_address)
        log.info("viewer connected: %s", source)

        def pump_outgoing():
            while True:
                payload = q.get()
                if payload is None:  # sentinel from the recv loop
                    return
                try:
                    conn.send(payload)
                except Exception:
                    return

        sender = threading.Thread(target=pump_outgoing, daemon=True)
        sender.start()
        try:
            for message in conn:
                update = parse_listener_update(message, source)
                if update is not None:
                    self._listener_cell.set(update)
        except Exception as exc:
            log.debug("viewer %s gone: %s", source, exc)
        finally:
            self._forget(conn)
            try:
                q.put_nowait(None)
            except queue.Full:
                try:
                    q.get_nowait()
                    q.put_nowait(None)
                except (queue.Empty, queue.Full):
                    pass
            try:
                conn.close()
            except Exception:
                pass
            sender.join(timeout=1.0)
            log.info("viewer disconnected: %s", source)
