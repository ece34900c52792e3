"""Wire-format tests for the TraCI codec.

The frozen byte strings below are the framing ground truth: they were worked
out octet by octet from the published wire rules (1-byte or escaped 4-byte
command lengths, big-endian scalars) and match what a stock traffic server
exchanges for these commands.
"""

import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trafficbridge import traci_codec as codec
from trafficbridge import traci_constants as tc

# CMD_SIM_STEP at target time 0.0: length 0x0A = 1 + 1 + 8, message total 0x0E.
SIM_STEP_T0_WIRE = bytes.fromhex("0000000e" "0a" "02" "0000000000000000")

# Status OK for CMD_GET_VERSION with an empty description, as a server sends it.
STATUS_OK_WIRE = bytes.fromhex("07" "00" "00" "00000000")


def test_empty_message_is_four_length_bytes():
    assert codec.encode_message(codec.TraciMessage()) == bytes.fromhex("00000004")


def test_single_command_length_prefix():
    # One command encoding to 10 bytes: payload of 8 plus length and id.
    msg = codec.TraciMessage((codec.TraciCommand(0x02, b"\x00" * 8),))
    wire = codec.encode_message(msg)
    assert wire[:4] == bytes.fromhex("0000000e")
    assert len(wire) == 14


def test_sim_step_reference_capture():
    msg = codec.TraciMessage(
        (codec.TraciCommand(tc.CMD_SIM_STEP, struct.pack(">d", 0.0)),)
    )
    assert codec.encode_message(msg) == SIM_STEP_T0_WIRE
    assert codec.decode_message(SIM_STEP_T0_WIRE) == msg


def test_status_response_capture_parses_ok():
    message = codec.decode_message(struct.pack(">I", 4 + len(STATUS_OK_WIRE)) + STATUS_OK_WIRE)
    status = codec.parse_status(message.commands[0])
    assert status.for_command == tc.CMD_GET_VERSION
    assert status.result is codec.Result.OK


def test_declared_length_below_minimum_is_truncated():
    with pytest.raises(codec.Truncated):
        codec.decode_message(bytes.fromhex("00000003"))


def test_declared_length_beyond_buffer_is_truncated():
    with pytest.raises(codec.Truncated):
        codec.decode_message(bytes.fromhex("00000010" "0a02"))


def test_inner_length_overrun_is_malformed():
    # Message claims 6 bytes total but the command claims 5 of payload space.
    wire = bytes.fromhex("00000006" "05" "02")
    with pytest.raises(codec.MalformedCommand):
        codec.decode_message(wire)


def test_extended_length_framing():
    payload = bytes(range(256)) * 2  # 512 bytes forces the escaped length
    cmd = codec.TraciCommand(0xAB, payload)
    wire = codec.encode_command(cmd)
    assert wire[0] == 0x00
    assert struct.unpack(">I", wire[1:5])[0] == len(wire) == 5 + 1 + len(payload)
    assert wire[5] == 0xAB
    message = codec.decode_message(codec.encode_message(codec.TraciMessage((cmd,))))
    assert message.commands == (cmd,)


def test_total_length_matches_encoding():
    msg = codec.TraciMessage(
        (codec.TraciCommand(0x01, b"abc"), codec.TraciCommand(0x02, b"x" * 300))
    )
    assert msg.total_length == len(codec.encode_message(msg))


commands_strategy = st.builds(
    codec.TraciCommand,
    command_id=st.integers(min_value=0, max_value=0xFF),
    payload=st.binary(max_size=600),
)
messages_strategy = st.builds(
    codec.TraciMessage, commands=st.tuples() | st.lists(commands_strategy, max_size=5).map(tuple)
)


@given(messages_strategy)
@settings(max_examples=300)
def test_message_round_trip(msg):
    assert codec.decode_message(codec.encode_message(msg)) == msg


@given(messages_strategy)
@settings(max_examples=300)
def test_encoding_round_trip_is_byte_identical(msg):
    wire = codec.encode_message(msg)
    assert codec.encode_message(codec.decode_message(wire)) == wire


values_strategy = st.one_of(
    st.builds(codec.Double, st.floats(allow_nan=False, allow_infinity=False)),
    st.builds(codec.Integer, st.integers(min_value=-(2**31), max_value=2**31 - 1)),
    st.builds(codec.Text, st.text(max_size=50)),
    st.builds(codec.TextList, st.lists(st.text(max_size=20), max_size=8).map(tuple)),
    st.builds(
        codec.Position2D,
        st.floats(allow_nan=False, allow_infinity=False),
        st.floats(allow_nan=False, allow_infinity=False),
    ),
    st.builds(
        codec.Color,
        *[st.integers(min_value=0, max_value=255)] * 4,
    ),
)


@given(values_strategy)
@settings(max_examples=300)
def test_value_round_trip(value):
    wire = codec.encode_value(value)
    decoded, consumed = codec.decode_value(wire)
    assert decoded == value
    assert consumed == len(wire)


def test_int32_argument_encoding():
    assert codec.encode_value(codec.Integer(1)) == bytes([tc.TYPE_INTEGER]) + bytes.fromhex("00000001")


@given(st.binary(max_size=400))
@settings(max_examples=500)
def test_decoder_totality_on_fuzz(data):
    try:
        codec.decode_message(data)
    except codec.TraciCodecError:
        pass


def test_status_with_error_backfills_description():
    cmd = codec.build_status(0xA4, codec.Result.ERR, "")
    status = codec.parse_status(cmd)
    assert status.result is codec.Result.ERR
    assert status.description


def test_status_round_trip_with_description():
    cmd = codec.build_status(0xA4, codec.Result.ERR, "vehicle 'x' is not known")
    status = codec.parse_status(cmd)
    assert status == codec.StatusResponse(0xA4, codec.Result.ERR, "vehicle 'x' is not known")
