"""Binary codec for the TraCI wire format.

Framing:
  message  = [total length: u32 BE, includes its own 4 bytes] [command]*
  command  = [length: u8] [command id: u8] [payload]
             if the whole command would exceed 255 bytes:
             [0x00] [length: u32 BE, includes these 5 bytes] [command id] [payload]

Scalars are big-endian. Strings are [length: u32 BE][utf-8 bytes], string
lists are [count: u32 BE][string]*. These functions are pure; decoding never
raises anything other than the typed errors below.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from typing import Union

from . import traci_constants as tc

MESSAGE_HEADER_SIZE = 4
# Largest single command the extended 4-byte length field can describe.
MAX_COMMAND_LENGTH = 0xFFFFFFFF


class TraciCodecError(Exception):
    """Base class for wire-format errors."""


class CommandTooLarge(TraciCodecError):
    pass


class Truncated(TraciCodecError):
    pass


class MalformedCommand(TraciCodecError):
    pass


@dataclass(frozen=True)
class TraciCommand:
    command_id: int
    payload: bytes = b""

    def encoded_length(self) -> int:
        short = 2 + len(self.payload)
        return short if short <= 0xFF else short + 4


@dataclass(frozen=True)
class TraciMessage:
    commands: tuple[TraciCommand, ...] = ()

    @property
    def total_length(self) -> int:
        return MESSAGE_HEADER_SIZE + sum(c.encoded_length() for c in self.commands)


class Result(Enum):
    OK = tc.RTYPE_OK
    ERR = tc.RTYPE_ERR
    NOT_IMPLEMENTED = tc.RTYPE_NOTIMPLEMENTED


@dataclass(frozen=True)
class StatusResponse:
    for_command: int
    result: Result
    description: str


# Tagged value union. Each variant encodes as its 1-byte type tag followed
# by the canonical big-endian payload.

@dataclass(frozen=True)
class Double:
    value: float


@dataclass(frozen=True)
class Integer:
    value: int


@dataclass(frozen=True)
class Text:
    value: str


@dataclass(frozen=True)
class TextList:
    values: tuple[str, ...]


@dataclass(frozen=True)
class Position2D:
    x: float
    y: float


@dataclass(frozen=True)
class Color:
    r: int
    g: int
    b: int
    a: int


TraciValue = Union[Double, Integer, Text, TextList, Position2D, Color]


def encode_command(cmd: TraciCommand) -> bytes:
    if not 0 <= cmd.command_id <= 0xFF:
        raise MalformedCommand(f"command id {cmd.command_id} out of range")
    short = 2 + len(cmd.payload)
    if short <= 0xFF:
        return bytes([short, cmd.command_id]) + cmd.payload
    extended = short + 4
    if extended > MAX_COMMAND_LENGTH:
        raise CommandTooLarge(f"command of {extended} bytes exceeds 4-byte length field")
    return b"\x00" + struct.pack(">I", extended) + bytes([cmd.command_id]) + cmd.payload


def encode_message(msg: TraciMessage) -> bytes:
    body = b"".join(encode_command(c) for c in msg.commands)
    return struct.pack(">I", MESSAGE_HEADER_SIZE + len(body)) + body


def decode_message(data: bytes) -> TraciMessage:
    if len(data) < MESSAGE_HEADER_SIZE:
        raise Truncated(f"message shorter than the {MESSAGE_HEADER_SIZE}-byte header")
    (total,) = struct.unpack_from(">I", data, 0)
    if total < MESSAGE_HEADER_SIZE:
        raise Truncated(f"declared length {total} below minimum {MESSAGE_HEADER_SIZE}")
    if total > len(data):
        raise Truncated(f"declared length {total} exceeds available {len(data)} bytes")

    commands: list[TraciCommand] = []
    pos = MESSAGE_HEADER_SIZE
    while pos < total:
        length = data[pos]
        if length == 0:
            if pos + 5 > total:
                raise MalformedCommand("extended length field truncated")
            (length,) = struct.unpack_from(">I", data, pos + 1)
            header = 5
            if length < 6:
                raise MalformedCommand(f"extended command length {length} below minimum 6")
        else:
            header = 1
            if length < 2:
                raise MalformedCommand(f"command length {length} below minimum 2")
        end = pos + length
        if end > total:
            raise MalformedCommand(f"command length {length} overruns message at offset {pos}")
        command_id = data[pos + header]
        commands.append(TraciCommand(command_id, bytes(data[pos + header + 1:end])))
        pos = end
    return TraciMessage(tuple(commands))


def encode_value(value: TraciValue) -> bytes:
    if isinstance(value, Double):
        return bytes([tc.TYPE_DOUBLE]) + struct.pack(">d", value.value)
    if isinstance(value, Integer):
        return bytes([tc.TYPE_INTEGER]) + struct.pack(">i", value.value)
    if isinstance(value, Text):
        return bytes([tc.TYPE_STRING]) + encode_string(value.value)
    if isinstance(value, TextList):
        out = struct.pack(">I", len(value.values))
        for s in value.values:
            out += encode_string(s)
        return bytes([tc.TYPE_STRINGLIST]) + out
    if isinstance(value, Position2D):
        return bytes([tc.POSITION_2D]) + struct.pack(">dd", value.x, value.y)
    if isinstance(value, Color):
        return bytes([tc.TYPE_COLOR, value.r & 0xFF, value.g & 0xFF, value.b & 0xFF, value.a & 0xFF])
    raise MalformedCommand(f"cannot encode value of type {type(value).__name__}")


def encode_string(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack(">I", len(raw)) + raw


class PayloadReader:
    """Sequential reader over a command payload; raises MalformedCommand on underrun."""

    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def remaining(self) -> int:
        return len(self.data) - self.pos

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise MalformedCommand(
                f"payload underrun: need {n} bytes at offset {self.pos}, have {self.remaining()}"
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def read_ubyte(self) -> int:
        return self._take(1)[0]

    def read_byte(self) -> int:
        return struct.unpack(">b", self._take(1))[0]

    def read_int(self) -> int:
        return struct.unpack(">i", self._take(4))[0]

    def read_uint(self) -> int:
        return struct.unpack(">I", self._take(4))[0]

    def read_double(self) -> float:
        return struct.unpack(">d", self._take(8))[0]

    def read_string(self) -> str:
        n = self.read_uint()
        if n > self.remaining():
            raise MalformedCommand(f"string length {n} exceeds remaining payload")
        try:
            return self._take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedCommand(f"string is not valid utf-8: {exc}") from None

    def read_string_list(self) -> tuple[str, ...]:
        n = self.read_uint()
        if n > self.remaining():  # each entry needs at least its 4-byte length
            raise MalformedCommand(f"string list count {n} exceeds remaining payload")
        return tuple(self.read_string() for _ in range(n))

    def read_value(self) -> TraciValue:
        tag = self.read_ubyte()
        if tag == tc.TYPE_DOUBLE:
            return Double(self.read_double())
        if tag == tc.TYPE_INTEGER:
            return Integer(self.read_int())
        if tag == tc.TYPE_STRING:
            return Text(self.read_string())
        if tag == tc.TYPE_STRINGLIST:
            return TextList(self.read_string_list())
        if tag == tc.POSITION_2D:
            return Position2D(self.read_double(), self.read_double())
        if tag == tc.TYPE_COLOR:
            return Color(self.read_ubyte(), self.read_ubyte(), self.read_ubyte(), self.read_ubyte())
        raise MalformedCommand(f"unknown value type tag 0x{tag:02x}")

    def expect_end(self) -> None:
        if self.remaining():
            raise MalformedCommand(f"{self.remaining()} trailing bytes in payload")


def decode_value(data: bytes, pos: int = 0) -> tuple[TraciValue, int]:
    reader = PayloadReader(data, pos)
    value = reader.read_value()
    return value, reader.pos


def build_status(for_command: int, result: Result, description: str = "") -> TraciCommand:
    payload = bytes([result.value]) + encode_string(description)
    return TraciCommand(for_command, payload)


def parse_status(cmd: TraciCommand) -> StatusResponse:
    reader = PayloadReader(cmd.payload)
    code = reader.read_ubyte()
    description = reader.read_string()
    try:
        result = Result(code)
    except ValueError:
        raise MalformedCommand(f"unknown status result code 0x{code:02x}") from None
    if result is not Result.OK and not description:
        description = "(no description from server)"
    return StatusResponse(cmd.command_id, result, description)
