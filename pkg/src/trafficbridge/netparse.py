"""SUMO road-network XML parsing and the traffic-light spawn plan.

Reads only the elements the bridge needs from a .net.xml document: the root
net node, junctions, edge/lane shapes and lane-to-lane connections. A
connection carrying both tl and linkIndex belongs to a signal-controlled
junction; one simplified traffic-light actor is planned per such connection,
placed at the end of its incoming lane and indexed by
junction id -> link index so per-link signal characters can be fanned out to
actors at simulation time.
"""

from __future__ import annotations

import logging
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from enum import Enum

from .geo import CoordinateMapper

log = logging.getLogger(__name__)

DEFAULT_HEIGHT_OFFSET = 3.0  # meters above the lane end


class NetworkParseError(Exception):
    pass


class MalformedXml(NetworkParseError):
    pass


class MissingShape(NetworkParseError):
    pass


class BadLinkIndex(NetworkParseError):
    pass


class DanglingLane(NetworkParseError):
    pass


@dataclass(frozen=True)
class Lane:
    id: str
    shape: tuple[tuple[float, float], ...]  # >= 2 points, consecutive points distinct


@dataclass(frozen=True)
class TlConnection:
    lane_in: str
    lane_out: str
    tl_id: str
    link_index: int


@dataclass(frozen=True)
class ParsedNetwork:
    lanes: dict[str, Lane]
    tl_connections: tuple[TlConnection, ...]
    junctions: dict[str, str]  # id -> junction type attribute


class SignalState(Enum):
    GREEN = "G"
    GREEN_MINOR = "g"
    YELLOW = "y"
    RED = "r"
    OFF = "o"
    OFF_BLINKING = "O"
    RED_YELLOW = "u"
    STOP = "s"
    UNKNOWN = "?"


_SIGNAL_BY_CHAR = {state.value: state for state in SignalState if state is not SignalState.UNKNOWN}


def signal_from_char(char: str) -> SignalState:
    return _SIGNAL_BY_CHAR.get(char, SignalState.UNKNOWN)


@dataclass(frozen=True)
class TlSpawn:
    tl_id: str
    link_index: int
    position: tuple[float, float, float]  # engine space
    yaw: float                            # engine degrees


@dataclass
class TrafficLightPlan:
    spawns: list[TlSpawn] = field(default_factory=list)
    # junction id -> link index -> spawn handles (indices into spawns).
    # A link index may drive several signal heads, hence the list leaf.
    index: dict[str, dict[int, list[int]]] = field(default_factory=dict)

    def handles(self, tl_id: str) -> list[int]:
        out: list[int] = []
        for handle_list in self.index.get(tl_id, {}).values():
            out.extend(handle_list)
        return out


def _parse_shape(text: str, lane_id: str) -> tuple[tuple[float, float], ...]:
    points: list[tuple[float, float]] = []
    for token in text.split():
        parts = token.split(",")
        if len(parts) < 2:
            raise MissingShape(f"lane {lane_id}: bad shape token {token!r}")
        try:
            point = (float(parts[0]), float(parts[1]))
        except ValueError:
            raise MissingShape(f"lane {lane_id}: bad shape token {token!r}") from None
        if not points or point != points[-1]:
            points.append(point)
    if len(points) < 2:
        raise MissingShape(f"lane {lane_id}: shape has fewer than 2 distinct points")
    return tuple(points)


def parse_network(data: bytes) -> ParsedNetwork:
    """Parse lanes, junctions and signal-controlled connections from net XML."""
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        raise MalformedXml(f"cannot parse network XML: {exc}") from None
    if root.tag != "net":
        raise MalformedXml(f"expected a root 'net' element, found '{root.tag}'")

    lanes: dict[str, Lane] = {}
    for edge in root.iter("edge"):
        for lane in edge.iter("lane"):
            lane_id = lane.get("id")
            shape = lane.get("shape")
            if lane_id is None or shape is None:
                continue
            lanes[lane_id] = Lane(lane_id, _parse_shape(shape, lane_id))

    junctions = {
        j.get("id"): j.get("type", "")
        for j in root.iter("junction")
        if j.get("id") is not None
    }

    connections: list[TlConnection] = []
    for conn in root.iter("connection"):
        tl_id = conn.get("tl")
        link_index = conn.get("linkIndex")
        if tl_id is None or link_index is None:
            continue
        try:
            index = int(link_index)
        except ValueError:
            raise BadLinkIndex(
                f"connection {conn.get('from')}->{conn.get('to')}: linkIndex {link_index!r} is not an integer"
            ) from None
        if index < 0:
            raise BadLinkIndex(
                f"connection {conn.get('from')}->{conn.get('to')}: negative linkIndex {index}"
            )
        connections.append(
            TlConnection(
                lane_in=f"{conn.get('from')}_{conn.get('fromLane', '0')}",
                lane_out=f"{conn.get('to')}_{conn.get('toLane', '0')}",
                tl_id=tl_id,
                link_index=index,
            )
        )

    return ParsedNetwork(lanes=lanes, tl_connections=tuple(connections), junctions=junctions)


def plan_traffic_lights(
    network: ParsedNetwork,
    mapper: CoordinateMapper,
    h_offset: float = DEFAULT_HEIGHT_OFFSET,
    flip_facing: bool = False,
) -> TrafficLightPlan:
    """Compute one spawn per signal-controlled connection.

    The actor is placed at the mapped last point of the incoming lane's
    shape, raised by h_offset, and yawed along the lane's final segment
    (second-to-last point toward last point). flip_facing turns it 180 so it
    faces back up the approach instead.
    """
    plan = TrafficLightPlan()
    for conn in network.tl_connections:
        lane = network.lanes.get(conn.lane_in)
        if lane is None:
            raise DanglingLane(
                f"connection for {conn.tl_id}#{conn.link_index} references missing lane {conn.lane_in}"
            )
        p_prev, p_last = lane.shape[-2], lane.shape[-1]
        ex, ey = mapper.to_engine(*p_last)
        px, py = mapper.to_engine(*p_prev)
        yaw = math.degrees(math.atan2(ey - py, ex - px)) % 360.0
        if flip_facing:
            yaw = (yaw + 180.0) % 360.0
        handle = len(plan.spawns)
        plan.spawns.append(
            TlSpawn(
                tl_id=conn.tl_id,
                link_index=conn.link_index,
                position=(ex, ey, h_offset * mapper.units_per_meter),
                yaw=yaw,
            )
        )
        plan.index.setdefault(conn.tl_id, {}).setdefault(conn.link_index, []).append(handle)
    return plan


def apply_signal_string(
    plan: TrafficLightPlan, tl_id: str, state: str
) -> list[tuple[int, SignalState]]:
    """Pair each planned link of a junction with its signal character.

    Character i of the state string is the signal for link index i; links
    beyond the string's length map to UNKNOWN. Unknown junction ids yield an
    empty list.
    """
    links = plan.index.get(tl_id)
    if links is None:
        log.warning("signal state for unplanned junction %s ignored", tl_id)
        return []
    out: list[tuple[int, SignalState]] = []
    for link_index, handles in links.items():
        if link_index < len(state):
            signal = signal_from_char(state[link_index])
        else:
            signal = SignalState.UNKNOWN
        for handle in handles:
            out.append((handle, signal))
    return out
