"""TCP client session for the TraCI protocol subset used by the bridge.

A session advances the remote simulation and polls vehicle/traffic-light
state with plain get commands each step. Queries for many objects are packed
into one multi-command message, so a step costs a fixed number of round
trips no matter how many vehicles are active.

A session is owned by one thread at a time; it may be handed between threads
but concurrent calls are not supported.
"""

from __future__ import annotations

import logging
import socket
import struct
import time
from dataclasses import dataclass

from . import traci_codec as codec
from . import traci_constants as tc

log = logging.getLogger(__name__)


class TraciSessionError(Exception):
    """Base class for session-level failures."""


class ConnectionRefused(TraciSessionError):
    pass


class HandshakeMismatch(TraciSessionError):
    pass


class ConnectionLost(TraciSessionError):
    pass


class ServerError(TraciSessionError):
    def __init__(self, for_command: int, description: str):
        super().__init__(f"server error for command 0x{for_command:02x}: {description}")
        self.for_command = for_command
        self.description = description


class UnknownVehicle(ServerError):
    pass


class UnknownJunction(ServerError):
    pass


@dataclass(frozen=True)
class RetryPolicy:
    retries: int = 3         # additional attempts after the first
    delay: float = 0.5       # seconds between attempts


@dataclass(frozen=True)
class VehicleState:
    """One vehicle's kinematic sample at a simulation timestep."""

    id: str
    position: tuple[float, float]  # meters, simulation plane
    angle: float                   # degrees clockwise from north (TraCI convention)
    speed: float                   # m/s
    acceleration: float            # m/s^2
    vtype: str
    sim_time: float                # seconds


@dataclass(frozen=True)
class StepResult:
    sim_time: float
    departed_ids: tuple[str, ...]
    arrived_ids: tuple[str, ...]


_VEHICLE_VARIABLES = (tc.VAR_POSITION, tc.VAR_ANGLE, tc.VAR_SPEED, tc.VAR_ACCELERATION, tc.VAR_TYPE)


class TraciSession:
    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._closed = False
        self.api_version: int | None = None
        self.server_version: str | None = None
        self.sim_time = 0.0

    # -- transport -----------------------------------------------------

    def _send(self, data: bytes) -> None:
        try:
            self._sock.sendall(data)
        except OSError as exc:
            self._closed = True
            raise ConnectionLost(f"send failed: {exc}") from None

    def _recv_exact(self, n: int) -> bytes:
        chunks = []
        got = 0
        while got < n:
            try:
                chunk = self._sock.recv(n - got)
            except socket.timeout:
                self._closed = True
                raise ConnectionLost("timed out waiting for a response") from None
            except OSError as exc:
                self._closed = True
                raise ConnectionLost(f"receive failed: {exc}") from None
            if not chunk:
                self._closed = True
                raise ConnectionLost("server closed the connection")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def request(self, commands: list[codec.TraciCommand]) -> codec.TraciMessage:
        """Send one message and read its response message.

        Requests are strictly serialized: the response read here always
        belongs to the message just sent.
        """
        if self._closed:
            raise ConnectionLost("session is closed")
        self._send(codec.encode_message(codec.TraciMessage(tuple(commands))))
        header = self._recv_exact(4)
        (total,) = struct.unpack(">I", header)
        if total < 4:
            raise ConnectionLost(f"server sent an invalid length prefix {total}")
        body = self._recv_exact(total - 4) if total > 4 else b""
        return codec.decode_message(header + body)

    def close(self) -> None:
        if self._closed:
            return
        try:
            self.request([codec.TraciCommand(tc.CMD_CLOSE, b"")])
        except TraciSessionError:
            pass
        finally:
            self._closed = True
            self._sock.close()

    # -- handshake -----------------------------------------------------

    def handshake(self) -> None:
        response = _ResponseWalker(self.request([codec.TraciCommand(tc.CMD_GET_VERSION, b"")]))
        status = response.next_status(tc.CMD_GET_VERSION)
        if status.result is not codec.Result.OK:
            log.warning("server declined version handshake: %s", status.description)
            return
        data = response.next_data(tc.CMD_GET_VERSION)
        reader = codec.PayloadReader(data.payload)
        self.api_version = reader.read_int()
        self.server_version = reader.read_string()
        log.info("connected: API version %d, server %s", self.api_version, self.server_version)
        if self.api_version < tc.MIN_API_VERSION:
            raise HandshakeMismatch(
                f"server API version {self.api_version} below supported minimum {tc.MIN_API_VERSION}"
            )

    # -- protocol operations --------------------------------------------

    def step(self, target_time: float = 0.0) -> StepResult:
        """Advance the simulation one step (or to target_time) and report it."""
        commands = [
            codec.TraciCommand(tc.CMD_SIM_STEP, struct.pack(">d", target_time)),
            _get_sim_command(tc.VAR_TIME),
            _get_sim_command(tc.VAR_DEPARTED_VEHICLES_IDS),
            _get_sim_command(tc.VAR_ARRIVED_VEHICLES_IDS),
        ]
        response = _ResponseWalker(self.request(commands))
        self._expect_ok(response.next_status(tc.CMD_SIM_STEP))
        response.skip_optional_data(tc.CMD_SIM_STEP)  # empty subscription block

        sim_time = self._read_sim_value(response, tc.VAR_TIME)
        departed = self._read_sim_value(response, tc.VAR_DEPARTED_VEHICLES_IDS)
        arrived = self._read_sim_value(response, tc.VAR_ARRIVED_VEHICLES_IDS)
        self.sim_time = _as_double(sim_time)
        return StepResult(
            sim_time=self.sim_time,
            departed_ids=_as_string_list(departed),
            arrived_ids=_as_string_list(arrived),
        )

    def get_step_length(self) -> float:
        response = _ResponseWalker(self.request([_get_sim_command(tc.VAR_DELTA_T)]))
        return _as_double(self._read_sim_value(response, tc.VAR_DELTA_T))

    def get_vehicle_state(self, vehicle_id: str) -> VehicleState:
        states = self.get_vehicle_states([vehicle_id], strict=True)
        return states[vehicle_id]

    def get_vehicle_states(self, vehicle_ids, strict: bool = False) -> dict[str, VehicleState]:
        """Query kinematics for many vehicles in one message.

        Vehicles the server reports errors for are skipped (and logged)
        unless strict is set, in which case UnknownVehicle is raised.
        """
        ids = list(vehicle_ids)
        if not ids:
            return {}
        commands = [
            _get_command(tc.CMD_GET_VEHICLE_VARIABLE, var, vid)
            for vid in ids
            for var in _VEHICLE_VARIABLES
        ]
        response = _ResponseWalker(self.request(commands))
        states: dict[str, VehicleState] = {}
        for vid in ids:
            values = {}
            failure: str | None = None
            for var in _VEHICLE_VARIABLES:
                status = response.next_status(tc.CMD_GET_VEHICLE_VARIABLE)
                if status.result is not codec.Result.OK:
                    failure = status.description
                    continue
                data = response.next_data(tc.response_id(tc.CMD_GET_VEHICLE_VARIABLE))
                got_var, got_id, value = _parse_data_payload(data)
                if got_var != var or got_id != vid:
                    raise codec.MalformedCommand(
                        f"response for variable 0x{got_var:02x}/{got_id} "
                        f"does not match query 0x{var:02x}/{vid}"
                    )
                values[var] = value
            if failure is not None:
                if strict:
                    raise UnknownVehicle(tc.CMD_GET_VEHICLE_VARIABLE, failure)
                log.warning("skipping vehicle %s this step: %s", vid, failure)
                continue
            position = values[tc.VAR_POSITION]
            states[vid] = VehicleState(
                id=vid,
                position=(position.x, position.y),
                angle=_as_double(values[tc.VAR_ANGLE]),
                speed=_as_double(values[tc.VAR_SPEED]),
                acceleration=_as_double(values[tc.VAR_ACCELERATION]),
                vtype=_as_text(values[tc.VAR_TYPE]),
                sim_time=self.sim_time,
            )
        return states

    def get_traffic_light_state(self, junction_id: str) -> str:
        states = self.get_traffic_light_states([junction_id], strict=True)
        return states[junction_id]

    def get_traffic_light_states(self, junction_ids, strict: bool = False) -> dict[str, str]:
        ids = list(junction_ids)
        if not ids:
            return {}
        commands = [
            _get_command(tc.CMD_GET_TL_VARIABLE, tc.TL_RED_YELLOW_GREEN_STATE, jid)
            for jid in ids
        ]
        response = _ResponseWalker(self.request(commands))
        states: dict[str, str] = {}
        for jid in ids:
            status = response.next_status(tc.CMD_GET_TL_VARIABLE)
            if status.result is not codec.Result.OK:
                if strict:
                    raise UnknownJunction(tc.CMD_GET_TL_VARIABLE, status.description)
                log.warning("skipping traffic light %s: %s", jid, status.description)
                continue
            data = response.next_data(tc.response_id(tc.CMD_GET_TL_VARIABLE))
            _, got_id, value = _parse_data_payload(data)
            states[got_id] = _as_text(value)
        return states

    @staticmethod
    def _expect_ok(status: codec.StatusResponse) -> None:
        if status.result is not codec.Result.OK:
            raise ServerError(status.for_command, status.description)

    def _read_sim_value(self, response: "_ResponseWalker", variable: int) -> codec.TraciValue:
        self._expect_ok(response.next_status(tc.CMD_GET_SIM_VARIABLE))
        data = response.next_data(tc.response_id(tc.CMD_GET_SIM_VARIABLE))
        got_var, _, value = _parse_data_payload(data)
        if got_var != variable:
            raise codec.MalformedCommand(
                f"expected simulation variable 0x{variable:02x}, got 0x{got_var:02x}"
            )
        return value


class _ResponseWalker:
    """Cursor over the commands of a response message."""

    def __init__(self, message: codec.TraciMessage):
        self.commands = message.commands
        self.pos = 0

    def _next(self) -> codec.TraciCommand:
        if self.pos >= len(self.commands):
            raise codec.MalformedCommand("response message ended early")
        cmd = self.commands[self.pos]
        self.pos += 1
        return cmd

    def next_status(self, for_command: int) -> codec.StatusResponse:
        cmd = self._next()
        if cmd.command_id != for_command:
            raise codec.MalformedCommand(
                f"expected status for 0x{for_command:02x}, got command 0x{cmd.command_id:02x}"
            )
        return codec.parse_status(cmd)

    def next_data(self, command_id: int) -> codec.TraciCommand:
        cmd = self._next()
        if cmd.command_id != command_id:
            raise codec.MalformedCommand(
                f"expected data command 0x{command_id:02x}, got 0x{cmd.command_id:02x}"
            )
        return cmd

    def skip_optional_data(self, command_id: int) -> None:
        if self.pos < len(self.commands) and self.commands[self.pos].command_id == command_id:
            self.pos += 1


def _get_sim_command(variable: int) -> codec.TraciCommand:
    return _get_command(tc.CMD_GET_SIM_VARIABLE, variable, "")


def _get_command(command_id: int, variable: int, object_id: str) -> codec.TraciCommand:
    return codec.TraciCommand(command_id, bytes([variable]) + codec.encode_string(object_id))


def _parse_data_payload(cmd: codec.TraciCommand) -> tuple[int, str, codec.TraciValue]:
    reader = codec.PayloadReader(cmd.payload)
    variable = reader.read_ubyte()
    object_id = reader.read_string()
    value = reader.read_value()
    return variable, object_id, value


def _as_double(value: codec.TraciValue) -> float:
    if not isinstance(value, codec.Double):
        raise codec.MalformedCommand(f"expected a double, got {type(value).__name__}")
    return value.value


def _as_text(value: codec.TraciValue) -> str:
    if not isinstance(value, codec.Text):
        raise codec.MalformedCommand(f"expected a string, got {type(value).__name__}")
    return value.value


def _as_string_list(value: codec.TraciValue) -> tuple[str, ...]:
    if not isinstance(value, codec.TextList):
        raise codec.MalformedCommand(f"expected a string list, got {type(value).__name__}")
    return value.values


def connect(
    host: str,
    port: int,
    retry_policy: RetryPolicy = RetryPolicy(),
    timeout: float = 30.0,
) -> TraciSession:
    """Open a TraCI session, retrying refused connections per the policy."""
    attempts = 1 + max(0, retry_policy.retries)
    last_error: Exception | None = None
    for attempt in range(attempts):
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
            break
        except OSError as exc:
            last_error = exc
            if attempt + 1 < attempts:
                time.sleep(retry_policy.delay)
    else:
        raise ConnectionRefused(
            f"cannot connect to {host}:{port} after {attempts} attempts: {last_error}"
        )
    sock.settimeout(timeout)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    session = TraciSession(sock)
    session.handshake()
    return session
