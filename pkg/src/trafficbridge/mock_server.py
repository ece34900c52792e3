"""Deterministic TraCI server backed by a scripted scenario.

Stands in for a real traffic server in tests and demos: it listens on TCP,
answers the command subset in traci_constants, and only advances simulation
time when commanded. One client session is served at a time; identical
scenarios driven by identical command sequences produce byte-identical
response streams.
"""

from __future__ import annotations

import logging
import socket
import struct
import threading

from . import traci_codec as codec
from . import traci_constants as tc
from .scenario import Scenario, SimulationState

log = logging.getLogger(__name__)


def read_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(n - got)
        if not chunk:
            raise ConnectionError("peer closed the connection")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_message(sock: socket.socket) -> codec.TraciMessage:
    header = read_exact(sock, 4)
    (total,) = struct.unpack(">I", header)
    if total < 4:
        raise codec.Truncated(f"declared length {total} below minimum 4")
    body = read_exact(sock, total - 4) if total > 4 else b""
    return codec.decode_message(header + body)


class MockTraciServer:
    """TCP server answering the TraCI subset from a scripted scenario."""

    def __init__(self, scenario: Scenario, host: str = "127.0.0.1", port: int = 0):
        self.scenario = scenario
        self.host = host
        self._requested_port = port
        self._listener: socket.socket | None = None
        self._thread: threading.Thread | None = None
        self._stop = threading.Event()
        self.state = SimulationState(scenario)
        self._last_departed: tuple[str, ...] = ()
        self._last_arrived: tuple[str, ...] = ()

    @property
    def port(self) -> int:
        if self._listener is None:
            raise RuntimeError("server not started")
        return self._listener.getsockname()[1]

    @property
    def address(self) -> tuple[str, int]:
        return (self.host, self.port)

    def start(self) -> "MockTraciServer":
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((self.host, self._requested_port))
        listener.listen(1)
        listener.settimeout(0.2)
        self._listener = listener
        self._thread = threading.Thread(target=self._serve, name="mock-traci", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5.0)
        if self._listener is not None:
            self._listener.close()
            self._listener = None

    def __enter__(self) -> "MockTraciServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def _serve(self) -> None:
        assert self._listener is not None
        while not self._stop.is_set():
            try:
                conn, peer = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            log.debug("mock server: client %s connected", peer)
            try:
                self._serve_client(conn)
            except (ConnectionError, OSError) as exc:
                log.debug("mock server: client gone: %s", exc)
            finally:
                conn.close()

    def _serve_client(self, conn: socket.socket) -> None:
        conn.settimeout(0.2)
        while not self._stop.is_set():
            try:
                request = read_message(conn)
            except socket.timeout:
                continue
            except codec.TraciCodecError as exc:
                # Framing consumed what the length prefix declared, so we can
                # answer with an error status and keep the connection open.
                reply = codec.TraciMessage(
                    (codec.build_status(0x00, codec.Result.ERR, f"malformed message: {exc}"),)
                )
                conn.sendall(codec.encode_message(reply))
                continue
            closing = False
            out: list[codec.TraciCommand] = []
            for command in request.commands:
                out.extend(self._handle(command))
                if command.command_id == tc.CMD_CLOSE:
                    closing = True
            conn.sendall(codec.encode_message(codec.TraciMessage(tuple(out))))
            if closing:
                return

    def _handle(self, command: codec.TraciCommand) -> list[codec.TraciCommand]:
        handlers = {
            tc.CMD_GET_VERSION: self._on_get_version,
            tc.CMD_SIM_STEP: self._on_sim_step,
            tc.CMD_GET_SIM_VARIABLE: self._on_get_sim,
            tc.CMD_GET_VEHICLE_VARIABLE: self._on_get_vehicle,
            tc.CMD_GET_TL_VARIABLE: self._on_get_tl,
            tc.CMD_CLOSE: self._on_close,
        }
        handler = handlers.get(command.command_id)
        if handler is None:
            return [
                codec.build_status(
                    command.command_id,
                    codec.Result.NOT_IMPLEMENTED,
                    f"command 0x{command.command_id:02x} not implemented by the mock server",
                )
            ]
        try:
            return handler(command)
        except codec.TraciCodecError as exc:
            return [codec.build_status(command.command_id, codec.Result.ERR, str(exc))]

    def _on_get_version(self, command: codec.TraciCommand) -> list[codec.TraciCommand]:
        payload = struct.pack(">i", tc.API_VERSION) + codec.encode_string("MockTraffic/1.0")
        return [
            codec.build_status(tc.CMD_GET_VERSION, codec.Result.OK),
            codec.TraciCommand(tc.CMD_GET_VERSION, payload),
        ]

    def _on_close(self, command: codec.TraciCommand) -> list[codec.TraciCommand]:
        return [codec.build_status(tc.CMD_CLOSE, codec.Result.OK)]

    def _on_sim_step(self, command: codec.TraciCommand) -> list[codec.TraciCommand]:
        reader = codec.PayloadReader(command.payload)
        target = reader.read_double()
        reader.expect_end()
        departed: list[str] = []
        arrived: list[str] = []
        # Target 0 means "one step"; otherwise advance until sim_time >= target,
        # accumulating departures/arrivals across the advance.
        steps = 1
        if target > 0:
            gap = target - self.state.sim_time
            steps = max(1, round(gap / self.scenario.step_length))
        for _ in range(steps):
            _, dep, arr = self.state.advance()
            departed.extend(dep)
            arrived.extend(arr)
        status = codec.build_status(tc.CMD_SIM_STEP, codec.Result.OK)
        # Real servers append the subscription result block; empty here.
        data = codec.TraciCommand(tc.CMD_SIM_STEP, struct.pack(">i", 0))
        self._last_departed = tuple(departed)
        self._last_arrived = tuple(arrived)
        return [status, data]

    def _on_get_sim(self, command: codec.TraciCommand) -> list[codec.TraciCommand]:
        reader = codec.PayloadReader(command.payload)
        variable = reader.read_ubyte()
        object_id = reader.read_string()
        reader.expect_end()
        if variable == tc.VAR_TIME:
            value = codec.Double(self.state.sim_time)
        elif variable == tc.VAR_DELTA_T:
            value = codec.Double(self.scenario.step_length)
        elif variable == tc.VAR_DEPARTED_VEHICLES_IDS:
            value = codec.TextList(self._last_departed)
        elif variable == tc.VAR_ARRIVED_VEHICLES_IDS:
            value = codec.TextList(self._last_arrived)
        else:
            return [
                codec.build_status(
                    command.command_id,
                    codec.Result.ERR,
                    f"unsupported simulation variable 0x{variable:02x}",
                )
            ]
        return self._data_response(command.command_id, variable, object_id, value)

    def _on_get_vehicle(self, command: codec.TraciCommand) -> list[codec.TraciCommand]:
        reader = codec.PayloadReader(command.payload)
        variable = reader.read_ubyte()
        vehicle_id = reader.read_string()
        reader.expect_end()
        sample = self.state.vehicle_sample(vehicle_id)
        if sample is None:
            return [
                codec.build_status(
                    command.command_id,
                    codec.Result.ERR,
                    f"vehicle '{vehicle_id}' is not known",
                )
            ]
        if variable == tc.VAR_POSITION:
            value = codec.Position2D(*sample.position)
        elif variable == tc.VAR_ANGLE:
            value = codec.Double(sample.angle)
        elif variable == tc.VAR_SPEED:
            value = codec.Double(sample.speed)
        elif variable == tc.VAR_ACCELERATION:
            value = codec.Double(sample.acceleration)
        elif variable == tc.VAR_TYPE:
            value = codec.Text(sample.vtype)
        else:
            return [
                codec.build_status(
                    command.command_id,
                    codec.Result.ERR,
                    f"unsupported vehicle variable 0x{variable:02x}",
                )
            ]
        return self._data_response(command.command_id, variable, vehicle_id, value)

    def _on_get_tl(self, command: codec.TraciCommand) -> list[codec.TraciCommand]:
        reader = codec.PayloadReader(command.payload)
        variable = reader.read_ubyte()
        junction_id = reader.read_string()
        reader.expect_end()
        if variable != tc.TL_RED_YELLOW_GREEN_STATE:
            return [
                codec.build_status(
                    command.command_id,
                    codec.Result.ERR,
                    f"unsupported traffic light variable 0x{variable:02x}",
                )
            ]
        state = self.state.light_state(junction_id)
        if state is None:
            return [
                codec.build_status(
                    command.command_id,
                    codec.Result.ERR,
                    f"traffic light '{junction_id}' is not known",
                )
            ]
        return self._data_response(command.command_id, variable, junction_id, codec.Text(state))

    def _data_response(
        self, command_id: int, variable: int, object_id: str, value: codec.TraciValue
    ) -> list[codec.TraciCommand]:
        payload = bytes([variable]) + codec.encode_string(object_id) + codec.encode_value(value)
        return [
            codec.build_status(command_id, codec.Result.OK),
            codec.TraciCommand(tc.response_id(command_id), payload),
        ]
