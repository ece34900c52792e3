"""Open Sound Control output: gated vehicle kinematics for auralization.

At a fixed interval the bridge sends one aggregated OSC 1.0 bundle over UDP.
The bundle opens with a header message carrying the simulation timestamp and
the listener position; a vehicle message follows for every active vehicle
that passes one of three gates: first transmission, position/velocity moved
beyond the configured thresholds, or keep-alive expiry. Arrived vehicles get
a single removal notice so stateful audio engines can retire their voices.

Addresses and argument layout (all scalars big-endian):

    /traffic/header          d sim_time, f listener_x, f listener_y, f listener_z
    /traffic/vehicle         s id, f x, f y, f z, f velocity, f acceleration
                             (velocity expands to f vx, f vy, f vz when
                             velocity_as_vector is set)
    /traffic/vehicle/remove  s id
"""

from __future__ import annotations

import logging
import math
import socket
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Union

log = logging.getLogger(__name__)

HEADER_ADDRESS = "/traffic/header"
VEHICLE_ADDRESS = "/traffic/vehicle"
REMOVE_ADDRESS = "/traffic/vehicle/remove"

IMMEDIATELY = 1  # OSC timetag: execute on receipt


class OscEncodeError(Exception):
    pass


class InvalidAddress(OscEncodeError):
    pass


class UnsupportedArgumentType(OscEncodeError):
    pass


class DatagramTooLarge(Exception):
    pass


@dataclass(frozen=True)
class Float32:
    """A float argument pinned to the 32-bit 'f' typetag (bare floats encode as doubles)."""

    value: float


OscArgument = Union[int, float, Float32, str, bytes]


@dataclass(frozen=True)
class OscMessage:
    address: str
    args: tuple[OscArgument, ...] = ()


@dataclass(frozen=True)
class OscBundle:
    elements: tuple[Union[OscMessage, "OscBundle"], ...] = ()
    timetag: int = IMMEDIATELY


OscPacket = Union[OscMessage, OscBundle]


def _pad_string(raw: bytes) -> bytes:
    raw += b"\x00"
    return raw + b"\x00" * (-len(raw) % 4)


def _pad_blob(raw: bytes) -> bytes:
    return struct.pack(">i", len(raw)) + raw + b"\x00" * (-len(raw) % 4)


def _encode_message(msg: OscMessage) -> bytes:
    if not msg.address.startswith("/"):
        raise InvalidAddress(f"OSC address must start with '/': {msg.address!r}")
    typetags = ","
    body = b""
    for arg in msg.args:
        if isinstance(arg, bool):
            raise UnsupportedArgumentType("bool arguments are not part of OSC 1.0 core")
        if isinstance(arg, int):
            typetags += "i"
            body += struct.pack(">i", arg)
        elif isinstance(arg, Float32):
            typetags += "f"
            body += struct.pack(">f", arg.value)
        elif isinstance(arg, float):
            typetags += "d"
            body += struct.pack(">d", arg)
        elif isinstance(arg, str):
            typetags += "s"
            body += _pad_string(arg.encode("utf-8"))
        elif isinstance(arg, bytes):
            typetags += "b"
            body += _pad_blob(arg)
        else:
            raise UnsupportedArgumentType(f"cannot encode argument of type {type(arg).__name__}")
    return _pad_string(msg.address.encode("ascii")) + _pad_string(typetags.encode("ascii")) + body


def encode_osc(packet: OscPacket) -> bytes:
    """Encode a message or bundle to OSC 1.0 bytes."""
    if isinstance(packet, OscMessage):
        return _encode_message(packet)
    out = _pad_string(b"#bundle") + struct.pack(">Q", packet.timetag)
    for element in packet.elements:
        encoded = encode_osc(element)
        out += struct.pack(">i", len(encoded)) + encoded
    return out


class SendReason(Enum):
    FIRST_TRANSMISSION = "first"
    THRESHOLD = "threshold"
    KEEP_ALIVE = "keep-alive"


@dataclass
class LastSent:
    position: tuple[float, float, float]
    velocity: float
    time: float


@dataclass
class OscVehicleRecord:
    """Last-transmitted kinematics for one vehicle."""

    last_sent: LastSent | None = None

    @property
    def ever_sent(self) -> bool:
        return self.last_sent is not None


@dataclass(frozen=True)
class OscConfig:
    send_interval: float = 0.05   # seconds between bundles
    delta_pos: float = 0.5        # meters
    delta_vel: float = 0.5        # m/s
    keep_alive: float = 2.0       # seconds
    host: str = "127.0.0.1"
    port: int = 9000
    datagram_limit: int = 1472    # bytes per UDP payload
    velocity_as_vector: bool = False

    def __post_init__(self):
        for name in ("send_interval", "delta_pos", "delta_vel", "keep_alive"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def should_send(
    record: OscVehicleRecord | None,
    position: tuple[float, float, float],
    velocity: float,
    now: float,
    config: OscConfig,
    units_per_meter: float = 1.0,
) -> tuple[bool, SendReason | None]:
    """Evaluate the three transmission gates for one vehicle."""
    if record is None or not record.ever_sent:
        return True, SendReason.FIRST_TRANSMISSION
    last = record.last_sent
    moved = math.dist(position, last.position)
    if moved > config.delta_pos * units_per_meter or abs(velocity - last.velocity) > config.delta_vel:
        return True, SendReason.THRESHOLD
    if now - last.time >= config.keep_alive:
        return True, SendReason.KEEP_ALIVE
    return False, None


def build_bundle(
    snapshot,
    records: dict[str, OscVehicleRecord],
    now: float,
    config: OscConfig,
    units_per_meter: float = 1.0,
) -> tuple[OscBundle, tuple[str, ...]]:
    """Assemble the aggregated bundle for one send interval.

    The first message is the header (simulation timestamp + listener
    position); one vehicle message follows per snapshot vehicle that passes
    its gate. Records are updated for transmitted vehicles only. Returns the
    bundle and the ids that were included.
    """
    lx, ly, lz = snapshot.listener
    elements: list[OscMessage] = [
        OscMessage(
            HEADER_ADDRESS,
            (snapshot.stats.sim_time, Float32(lx), Float32(ly), Float32(lz)),
        )
    ]
    sent: list[str] = []
    for vehicle in snapshot.vehicles:
        record = records.get(vehicle.id)
        ok, _reason = should_send(record, vehicle.position, vehicle.speed, now, config, units_per_meter)
        if not ok:
            continue
        x, y, z = vehicle.position
        if config.velocity_as_vector:
            rad = math.radians(vehicle.yaw)
            velocity_args = (
                Float32(vehicle.speed * math.cos(rad)),
                Float32(vehicle.speed * math.sin(rad)),
                Float32(0.0),
            )
        else:
            velocity_args = (Float32(vehicle.speed),)
        elements.append(
            OscMessage(
                VEHICLE_ADDRESS,
                (vehicle.id, Float32(x), Float32(y), Float32(z))
                + velocity_args
                + (Float32(vehicle.acceleration),),
            )
        )
        records.setdefault(vehicle.id, OscVehicleRecord()).last_sent = LastSent(
            position=vehicle.position, velocity=vehicle.speed, time=now
        )
        sent.append(vehicle.id)
    return OscBundle(tuple(elements)), tuple(sent)


def build_remove_messages(vehicle_ids) -> list[OscMessage]:
    return [OscMessage(REMOVE_ADDRESS, (str(vid),)) for vid in vehicle_ids]


def split_bundle(bundle: OscBundle, limit: int) -> list[OscBundle]:
    """Split an oversized bundle into several, each repeating the first
    (header) element and each encoding within the datagram limit."""
    if not bundle.elements:
        return [bundle]
    if len(encode_osc(bundle)) <= limit:
        return [bundle]
    header, rest = bundle.elements[0], bundle.elements[1:]
    base = len(encode_osc(OscBundle((header,), bundle.timetag)))
    if base > limit:
        raise DatagramTooLarge(f"bundle header alone exceeds the {limit}-byte datagram limit")
    bundles: list[OscBundle] = []
    current: list[OscMessage] = []
    size = base
    for element in rest:
        cost = 4 + len(encode_osc(element))
        if base + cost > limit:
            raise DatagramTooLarge(
                f"single element of {cost} bytes cannot fit the {limit}-byte datagram limit"
            )
        if size + cost > limit:
            bundles.append(OscBundle((header, *current), bundle.timetag))
            current = []
            size = base
        current.append(element)
        size += cost
    bundles.append(OscBundle((header, *current), bundle.timetag))
    return bundles


class OscSender:
    """Fire-and-forget UDP transport; socket errors are logged, never raised."""

    def __init__(self, config: OscConfig):
        self.config = config
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.datagrams_sent = 0

    def send(self, packet: OscPacket) -> None:
        if isinstance(packet, OscBundle):
            bundles = split_bundle(packet, self.config.datagram_limit)
        else:
            bundles = [packet]
        for bundle in bundles:
            data = encode_osc(bundle)
            try:
                self._sock.sendto(data, (self.config.host, self.config.port))
                self.datagrams_sent += 1
            except OSError as exc:
                log.warning("OSC datagram to %s:%d dropped: %s", self.config.host, self.config.port, exc)

    def close(self) -> None:
        self._sock.close()


class OscEmitter:
    """Consumer-side OSC timeline: bundles at send_interval, removal notices,
    and the per-vehicle gating records."""

    def __init__(self, config: OscConfig, units_per_meter: float = 1.0, sender: OscSender | None = None):
        self.config = config
        self.units_per_meter = units_per_meter
        self.sender = sender or OscSender(config)
        self.records: dict[str, OscVehicleRecord] = {}
        self.last_send: float | None = None
        self.bundles_sent = 0
        self.vehicles_sent = 0

    def maybe_emit(self, snapshot, removed_ids, now: float) -> bool:
        """Send removal notices plus, when the interval elapsed, the bundle."""
        for message in build_remove_messages(removed_ids):
            self.sender.send(message)
        for vid in removed_ids:
            self.records.pop(vid, None)
        interval = self.config.send_interval
        # Epsilon keeps 1-ulp clock noise from postponing a bundle a full tick.
        if self.last_send is not None and now - self.last_send < interval * (1.0 - 1e-9):
            return False
        bundle, sent = build_bundle(snapshot, self.records, now, self.config, self.units_per_meter)
        self.sender.send(bundle)
        self.last_send = now
        self.bundles_sent += 1
        self.vehicles_sent += len(sent)
        return True

    def close(self) -> None:
        self.sender.close()
