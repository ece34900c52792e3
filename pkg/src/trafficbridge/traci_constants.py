"""Identifier table for the TraCI command subset spoken by this bridge.

All command, variable and data-type identifiers are collected here so the
wire-level meaning of every byte lives in one place; the codec, the client
session and the mock server all import from this table.
"""

# Commands (client -> server)
CMD_GET_VERSION = 0x00
CMD_SIM_STEP = 0x02
CMD_GET_SIM_VARIABLE = 0xAB
CMD_GET_VEHICLE_VARIABLE = 0xA4
CMD_GET_TL_VARIABLE = 0xA2
CMD_CLOSE = 0x7F

# A get command with id c is answered by a data command with id c | 0x10.
RESPONSE_OFFSET = 0x10

def response_id(command_id: int) -> int:
    return command_id | RESPONSE_OFFSET

# Simulation variables (domain: CMD_GET_SIM_VARIABLE)
VAR_TIME = 0x66
VAR_DELTA_T = 0x7B
VAR_DEPARTED_VEHICLES_IDS = 0x74
VAR_ARRIVED_VEHICLES_IDS = 0x7A

# Vehicle variables (domain: CMD_GET_VEHICLE_VARIABLE)
VAR_SPEED = 0x40
VAR_POSITION = 0x42
VAR_ANGLE = 0x43
VAR_TYPE = 0x4F
VAR_ACCELERATION = 0x72

# Traffic-light variables (domain: CMD_GET_TL_VARIABLE)
TL_RED_YELLOW_GREEN_STATE = 0x20

# Value type tags
TYPE_UBYTE = 0x07
TYPE_BYTE = 0x08
TYPE_INTEGER = 0x09
TYPE_DOUBLE = 0x0B
TYPE_STRING = 0x0C
TYPE_STRINGLIST = 0x0E
TYPE_COMPOUND = 0x0F
POSITION_2D = 0x01
TYPE_COLOR = 0x11

# Status results
RTYPE_OK = 0x00
RTYPE_NOTIMPLEMENTED = 0x01
RTYPE_ERR = 0xFF

# Protocol version negotiated by CMD_GET_VERSION. The mock server reports
# the current stable API level; the client accepts anything >= MIN_API_VERSION
# because every identifier above has been stable since well before that.
API_VERSION = 21
MIN_API_VERSION = 18
