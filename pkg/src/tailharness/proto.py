"""Fixed-width little-endian framing shared by clients, servers and the balancer.

Header layout (24 bytes)::

    magic[2] = b"TB" | version[1] = 1 | kind[1] | request_id[8] | client_id[8] | payload_len[4]

followed by ``payload_len`` payload bytes.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

MAGIC = b"TB"
VERSION = 1

HEADER = struct.Struct("<2sBBQQI")
HEADER_SIZE = HEADER.size  # 24
MAX_PAYLOAD = (1 << 32) - 1


class Kind(enum.IntEnum):
    REQUEST = 1
    RESPONSE = 2
    CLIENT_HELLO = 3
    CLIENT_BYE = 4


class ProtocolError(ValueError):
    """Bytes on the wire do not form a valid frame."""


class EncodingError(ValueError):
    pass


class IncompleteFrame(Exception):
    """Not enough bytes buffered yet; retry once more arrive."""

    def __init__(self, needed: int):
        super().__init__(f"need {needed} bytes")
        self.needed = needed


@dataclass(frozen=True)
class Frame:
    kind: Kind
    request_id: int = 0
    client_id: int = 0
    payload: bytes = b""

    @property
    def payload_len(self) -> int:
        return len(self.payload)


RESPONSE_PAYLOAD = struct.Struct("<QQQI")


@dataclass(frozen=True)
class ResponsePayload:
    server_recv_ns: int
    service_start_ns: int
    service_end_ns: int
    server_id: int

    def pack(self) -> bytes:
        return RESPONSE_PAYLOAD.pack(
            self.server_recv_ns, self.service_start_ns, self.service_end_ns, self.server_id
        )

    @classmethod
    def unpack(cls, data: bytes) -> "ResponsePayload":
        if len(data) != RESPONSE_PAYLOAD.size:
            raise ProtocolError(f"response payload must be {RESPONSE_PAYLOAD.size} bytes, got {len(data)}")
        return cls(*RESPONSE_PAYLOAD.unpack(data))


def encode(frame: Frame) -> bytes:
    if len(frame.payload) > MAX_PAYLOAD:
        raise EncodingError(f"payload of {len(frame.payload)} bytes exceeds 2^32-1")
    payload = bytes(frame.payload)
    try:
        header = HEADER.pack(MAGIC, VERSION, int(frame.kind), frame.request_id, frame.client_id, len(payload))
    except struct.error as exc:
        raise EncodingError(str(exc)) from exc
    return header + payload


def decode(data: bytes | bytearray | memoryview) -> tuple[Frame, int]:
    """Decode one frame from the front of ``data``.

    Returns the frame and the number of bytes consumed. Raises
    :class:`IncompleteFrame` when ``data`` holds only part of a frame and
    :class:`ProtocolError` on a bad magic, version or kind.
    """
    if len(data) < HEADER_SIZE:
        # reject garbage as early as the magic bytes allow
        if len(data) >= 2 and bytes(data[:2]) != MAGIC:
            raise ProtocolError(f"bad magic {bytes(data[:2])!r}")
        raise IncompleteFrame(HEADER_SIZE - len(data))
    magic, version, kind, request_id, client_id, payload_len = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    try:
        kind = Kind(kind)
    except ValueError:
        raise ProtocolError(f"unknown frame kind {kind}") from None
    end = HEADER_SIZE + payload_len
    if len(data) < end:
        raise IncompleteFrame(end - len(data))
    payload = bytes(data[HEADER_SIZE:end])
    return Frame(kind, request_id, client_id, payload), end


class FrameBuffer:
    """Accumulates stream bytes and yields complete frames in order."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Frame]:
        self._buf += data
        frames = []
        while True:
            try:
                frame, used = decode(self._buf)
            except IncompleteFrame:
                break
            del self._buf[:used]
            frames.append(frame)
        return frames

    @property
    def pending(self) -> int:
        """Bytes of a partial frame still held."""
        return len(self._buf)


def request(client_id: int, request_id: int, payload: bytes = b"") -> bytes:
    return encode(Frame(Kind.REQUEST, request_id, client_id, payload))


def hello(client_id: int) -> bytes:
    return encode(Frame(Kind.CLIENT_HELLO, 0, client_id))


def bye(client_id: int) -> bytes:
    return encode(Frame(Kind.CLIENT_BYE, 0, client_id))


def response(req: Frame, timings: ResponsePayload) -> bytes:
    return encode(Frame(Kind.RESPONSE, req.request_id, req.client_id, timings.pack()))
