"""Binary wire format.

Frame: ``u32 length`` (little-endian, counts the bytes after it), ``u8 tag``,
then fixed-width little-endian fields in declared order.

=====  ======  ==========================================================
tag    name    fields
=====  ======  ==========================================================
0x01   HELLO   worker_id u32, proto_version u32, table_seed u64,
               table_len u64, d u64
0x02   ASSIGN  generation u32, n_pairs u32, rng_stream_id u64 (first slot)
0x03   RESULT  generation u32, offset u64, sign i8, return f64, steps u64,
               truncated u8
0x04   COMMIT  generation u32, result_count u32, update_checksum u64, then
               result_count bundle entries (offset u64, sign i8, return f64,
               steps u64, truncated u8)
0x05   BYE     (empty)
0x06   SYNC    generation u32, run_seed u64, state_len u32, state bytes
0x07   ERROR   code u32, generation u32, text_len u32, utf-8 text
=====  ======  ==========================================================

A RESULT frame is 35 bytes whatever the parameter dimension.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

PROTO_VERSION = 1

_LEN = struct.Struct("<I")
_HELLO = struct.Struct("<IIQQQ")
_ASSIGN = struct.Struct("<IIQ")
_RESULT = struct.Struct("<IQbdQB")
_COMMIT = struct.Struct("<IIQ")
_ENTRY = struct.Struct("<QbdQB")
_SYNC = struct.Struct("<IQI")
_ERROR = struct.Struct("<III")

MAX_FRAME = 1 << 30

ERR_REJECTED = 1
ERR_CHECKSUM = 2
ERR_PROTOCOL = 3


class ProtocolError(ValueError):
    """Malformed, unexpected or inconsistent message."""


@dataclass(frozen=True)
class Hello:
    worker_id: int
    proto_version: int
    table_seed: int
    table_len: int
    d: int
    TAG = 0x01


@dataclass(frozen=True)
class Assign:
    generation: int
    n_pairs: int
    rng_stream_id: int
    TAG = 0x02


@dataclass(frozen=True)
class Result:
    generation: int
    offset: int
    sign: int
    ret: float
    steps: int
    truncated: bool
    TAG = 0x03


@dataclass(frozen=True)
class BundleEntry:
    offset: int
    sign: int
    ret: float
    steps: int
    truncated: bool


@dataclass(frozen=True)
class Commit:
    generation: int
    result_count: int
    update_checksum: int
    results: tuple = field(default=())
    TAG = 0x04


@dataclass(frozen=True)
class Bye:
    TAG = 0x05


@dataclass(frozen=True)
class Sync:
    generation: int
    run_seed: int
    state: bytes
    TAG = 0x06


@dataclass(frozen=True)
class Error:
    code: int
    generation: int
    text: str = ""
    TAG = 0x07


Message = Hello | Assign | Result | Commit | Bye | Sync | Error


def _body(msg) -> bytes:
    if isinstance(msg, Hello):
        return _HELLO.pack(msg.worker_id, msg.proto_version, msg.table_seed, msg.table_len,
                           msg.d)
    if isinstance(msg, Assign):
        return _ASSIGN.pack(msg.generation, msg.n_pairs, msg.rng_stream_id)
    if isinstance(msg, Result):
        return _RESULT.pack(msg.generation, msg.offset, msg.sign, msg.ret, msg.steps,
                            int(msg.truncated))
    if isinstance(msg, Commit):
        if msg.result_count != len(msg.results):
            raise ProtocolError("result_count does not match the bundle")
        parts = [_COMMIT.pack(msg.generation, msg.result_count, msg.update_checksum)]
        parts += [_ENTRY.pack(e.offset, e.sign, e.ret, e.steps, int(e.truncated))
                  for e in msg.results]
        return b"".join(parts)
    if isinstance(msg, Bye):
        return b""
    if isinstance(msg, Sync):
        return _SYNC.pack(msg.generation, msg.run_seed, len(msg.state)) + msg.state
    if isinstance(msg, Error):
        text = msg.text.encode("utf-8")
        return _ERROR.pack(msg.code, msg.generation, len(text)) + text
    raise ProtocolError(f"cannot encode {type(msg).__name__}")


def encode(msg) -> bytes:
    try:
        body = bytes([msg.TAG]) + _body(msg)
    except struct.error as exc:
        raise ProtocolError(f"field out of range in {msg!r}: {exc}") from None
    return _LEN.pack(len(body)) + body


def _exact(struct_, payload: bytes, name: str):
    if len(payload) != struct_.size:
        raise ProtocolError(f"{name} payload is {len(payload)} bytes, expected {struct_.size}")
    return struct_.unpack(payload)


def decode_body(body: bytes):
    """Decode ``tag + fields`` (a frame without its length prefix)."""
    if not body:
        raise ProtocolError("empty frame")
    tag, payload = body[0], body[1:]
    if tag == Hello.TAG:
        return Hello(*_exact(_HELLO, payload, "HELLO"))
    if tag == Assign.TAG:
        return Assign(*_exact(_ASSIGN, payload, "ASSIGN"))
    if tag == Result.TAG:
        gen, off, sign, ret, steps, trunc = _exact(_RESULT, payload, "RESULT")
        if sign not in (1, -1) or trunc not in (0, 1):
            raise ProtocolError("bad sign or truncation flag in RESULT")
        return Result(gen, off, sign, ret, steps, bool(trunc))
    if tag == Commit.TAG:
        if len(payload) < _COMMIT.size:
            raise ProtocolError("short COMMIT frame")
        gen, count, checksum = _COMMIT.unpack_from(payload)
        rest = payload[_COMMIT.size:]
        if len(rest) != count * _ENTRY.size:
            raise ProtocolError("COMMIT bundle length does not match result_count")
        entries = []
        for i in range(count):
            off, sign, ret, steps, trunc = _ENTRY.unpack_from(rest, i * _ENTRY.size)
            if sign not in (1, -1) or trunc not in (0, 1):
                raise ProtocolError("bad sign or truncation flag in COMMIT bundle")
            entries.append(BundleEntry(off, sign, ret, steps, bool(trunc)))
        return Commit(gen, count, checksum, tuple(entries))
    if tag == Bye.TAG:
        if payload:
            raise ProtocolError("BYE carries no fields")
        return Bye()
    if tag == Sync.TAG:
        if len(payload) < _SYNC.size:
            raise ProtocolError("short SYNC frame")
        gen, run_seed, n = _SYNC.unpack_from(payload)
        state = payload[_SYNC.size:]
        if len(state) != n:
            raise ProtocolError("SYNC state length mismatch")
        return Sync(gen, run_seed, bytes(state))
    if tag == Error.TAG:
        if len(payload) < _ERROR.size:
            raise ProtocolError("short ERROR frame")
        code, gen, n = _ERROR.unpack_from(payload)
        text = payload[_ERROR.size:]
        if len(text) != n:
            raise ProtocolError("ERROR text length mismatch")
        return Error(code, gen, text.decode("utf-8", errors="replace"))
    raise ProtocolError(f"unknown tag 0x{tag:02x}")


def decode(frame: bytes):
    """Decode one complete frame, length prefix included."""
    if len(frame) < _LEN.size:
        raise ProtocolError("frame shorter than its length prefix")
    (n,) = _LEN.unpack_from(frame)
    if n != len(frame) - _LEN.size:
        raise ProtocolError(f"declared length {n} but {len(frame) - _LEN.size} bytes follow")
    return decode_body(frame[_LEN.size:])


def read_length(prefix: bytes) -> int:
    (n,) = _LEN.unpack(prefix)
    if n < 1 or n > MAX_FRAME:
        raise ProtocolError(f"implausible frame length {n}")
    return n
