"""Wire format of the debug-probe link.

Request:  opcode u8, then for READ: base u64 LE, length u32 LE.
Response: status u8, payload length u32 LE, payload.
"""

import struct
from collections.abc import Callable
from enum import IntEnum

from .errors import ProtocolError

MAX_PAYLOAD = 1 << 24


class Opcode(IntEnum):
    HALT = 1
    RESUME = 2
    READ = 3
    STATUS = 4


class Status(IntEnum):
    OK = 0
    ERR = 1
    NOT_HALTED = 2
    UNMAPPED = 3


class WireState(IntEnum):
    RUNNING = 0
    HALTED = 1


_READ_ARGS = struct.Struct("<QI")
_RESPONSE_HEAD = struct.Struct("<BI")
_STATUS_PAYLOAD = struct.Struct("<BI")
_ADDRESS = struct.Struct("<Q")

RecvExact = Callable[[int], bytes]


def encode_request(opcode: Opcode, base: int = 0, length: int = 0) -> bytes:
    frame = bytes([opcode])
    if opcode == Opcode.READ:
        frame += _READ_ARGS.pack(base, length)
    return frame


def read_request(recv_exact: RecvExact) -> tuple[int, int, int]:
    """Read one request; unknown opcodes are returned for the caller to reject."""
    opcode = recv_exact(1)[0]
    if opcode == Opcode.READ:
        base, length = _READ_ARGS.unpack(recv_exact(_READ_ARGS.size))
        return opcode, base, length
    return opcode, 0, 0


def encode_response(status: Status, payload: bytes = b"") -> bytes:
    return _RESPONSE_HEAD.pack(status, len(payload)) + payload


def read_response(recv_exact: RecvExact) -> tuple[Status, bytes]:
    raw_status, length = _RESPONSE_HEAD.unpack(recv_exact(_RESPONSE_HEAD.size))
    try:
        status = Status(raw_status)
    except ValueError:
        raise ProtocolError(f"unknown response status {raw_status}") from None
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"response payload of {length} bytes exceeds {MAX_PAYLOAD}")
    return status, recv_exact(length) if length else b""


def pack_status(state: WireState, max_read_chunk: int) -> bytes:
    return _STATUS_PAYLOAD.pack(state, max_read_chunk)


def unpack_status(payload: bytes) -> tuple[WireState, int]:
    if len(payload) != _STATUS_PAYLOAD.size:
        raise ProtocolError(f"STATUS payload has {len(payload)} bytes")
    state, chunk = _STATUS_PAYLOAD.unpack(payload)
    return WireState(state), chunk


def pack_address(address: int) -> bytes:
    return _ADDRESS.pack(address)


def unpack_address(payload: bytes) -> int | None:
    if len(payload) != _ADDRESS.size:
        return None
    return _ADDRESS.unpack(payload)[0]
