"""Endpoints, sessions, peer ids and the control-message wire codec.

All control traffic between clients, the rendezvous server and peers is one
compact JSON object per message, tagged by a ``"t"`` field.  On datagram
transports the object is the whole payload; on streams each object is
terminated by a newline.
"""
from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass
from typing import Union

__all__ = [
    "Transport", "Endpoint", "SessionKey", "PeerId", "CandidatePair",
    "Register", "RegisterOk", "Connect", "Forward", "Hello", "HelloAck",
    "Relay", "RelayDeliver", "Error", "ControlMessage",
    "ParseError", "DecodeError",
    "format_address", "parse_address", "parse_endpoint", "obfuscate_address",
    "encode_message", "decode_message", "LineBuffer", "NONCE_BYTES",
]

NONCE_BYTES = 16


class ParseError(ValueError):
    """Raised for malformed endpoint text."""


class DecodeError(ValueError):
    """Raised for a payload that is not a well-formed control message."""

    def __init__(self, message: str, tag: str | None = None, field: str | None = None):
        super().__init__(message)
        self.tag = tag
        self.field = field


class Transport(enum.Enum):
    UDP = "udp"
    TCP = "tcp"


def format_address(addr: int) -> str:
    return ".".join(str((addr >> shift) & 0xFF) for shift in (24, 16, 8, 0))


_OCTET = re.compile(r"[0-9]{1,3}\Z")


def parse_address(text: str) -> int:
    parts = text.split(".")
    if len(parts) != 4:
        raise ParseError(f"address {text!r}: expected 4 dotted octets, got {len(parts)}")
    value = 0
    for i, part in enumerate(parts):
        if not _OCTET.match(part):
            raise ParseError(f"address {text!r}: octet {i} ({part!r}) is not a decimal number")
        octet = int(part)
        if octet > 255:
            raise ParseError(f"address {text!r}: octet {i} ({octet}) out of range 0-255")
        value = (value << 8) | octet
    return value


@dataclass(frozen=True)
class Endpoint:
    """An (address, port) pair qualified by transport.

    ``address`` is a 32-bit integer meaningful only within one realm.
    """

    address: int
    port: int
    transport: Transport = Transport.UDP

    def __post_init__(self):
        if not 0 <= self.address <= 0xFFFFFFFF:
            raise ValueError(f"address {self.address} out of 32-bit range")
        if not 0 <= self.port <= 0xFFFF:
            raise ValueError(f"port {self.port} out of 16-bit range")

    def __str__(self) -> str:
        return f"{format_address(self.address)}:{self.port}"

    def __lt__(self, other):  # enums are not orderable; compare on the wire form
        return (self.address, self.port, self.transport.value) < (
            other.address, other.port, other.transport.value)

    @property
    def host(self) -> str:
        return format_address(self.address)

    def with_transport(self, transport: Transport) -> "Endpoint":
        return Endpoint(self.address, self.port, transport)


def parse_endpoint(text: str, transport: Transport = Transport.UDP) -> Endpoint:
    """Parse ``"a.b.c.d:port"``.  Port 0 is rejected."""
    addr_text, sep, port_text = text.strip().rpartition(":")
    if not sep:
        raise ParseError(f"endpoint {text!r}: missing ':port'")
    address = parse_address(addr_text)
    if not port_text.isdigit():
        raise ParseError(f"endpoint {text!r}: port {port_text!r} is not a decimal number")
    port = int(port_text)
    if not 0 < port <= 0xFFFF:
        raise ParseError(f"endpoint {text!r}: port {port} out of range 1-65535")
    return Endpoint(address, port, transport)


def obfuscate_address(addr: int) -> int:
    """One's complement of a 32-bit address; its own inverse."""
    return ~addr & 0xFFFFFFFF


@dataclass(frozen=True)
class SessionKey:
    local: Endpoint
    remote: Endpoint

    def reversed(self) -> "SessionKey":
        return SessionKey(self.remote, self.local)

    def __str__(self):
        return f"{self.local}->{self.remote}"


_PRINTABLE = re.compile(r"[\x21-\x7e]{1,64}\Z")


class PeerId(str):
    """Opaque printable token of 1-64 bytes (no whitespace)."""

    def __new__(cls, value: str):
        if not isinstance(value, str) or not _PRINTABLE.match(value):
            raise ValueError(f"invalid peer id {value!r}")
        return super().__new__(cls, value)


@dataclass(frozen=True)
class CandidatePair:
    public_ep: Endpoint
    private_ep: Endpoint
    nonce: bytes

    def __post_init__(self):
        if self.public_ep.transport is not self.private_ep.transport:
            raise ValueError("candidate endpoints must share a transport")
        if len(self.nonce) != NONCE_BYTES:
            raise ValueError("nonce must be 16 bytes")


# -- control messages -------------------------------------------------------

@dataclass(frozen=True)
class Register:
    id: str
    private_ep: Endpoint


@dataclass(frozen=True)
class RegisterOk:
    public_ep: Endpoint


@dataclass(frozen=True)
class Connect:
    id: str
    peer: str
    nonce: bytes


@dataclass(frozen=True)
class Forward:
    peer: str
    public_ep: Endpoint
    private_ep: Endpoint
    nonce: bytes
    # predicted public endpoints of ``peer``; only filled when the server
    # has a consistent allocation stride for it
    predicted: tuple[Endpoint, ...] = ()


@dataclass(frozen=True)
class Hello:
    sender: str
    nonce: bytes


@dataclass(frozen=True)
class HelloAck:
    sender: str
    nonce: bytes


@dataclass(frozen=True)
class Relay:
    to: str
    payload: bytes


@dataclass(frozen=True)
class RelayDeliver:
    sender: str
    payload: bytes


@dataclass(frozen=True)
class Error:
    code: str
    detail: str = ""


ControlMessage = Union[Register, RegisterOk, Connect, Forward, Hello, HelloAck,
                       Relay, RelayDeliver, Error]


def _nonce_hex(nonce: bytes) -> str:
    if len(nonce) != NONCE_BYTES:
        raise ValueError("nonce must be 16 bytes")
    return nonce.hex()


def _priv(ep: Endpoint) -> str:
    return f"{format_address(obfuscate_address(ep.address))}:{ep.port}"


def encode_message(msg: ControlMessage, stream: bool = False) -> bytes:
    """Serialize ``msg``; ``stream=True`` appends the newline frame terminator."""
    if isinstance(msg, Register):
        obj = {"t": "reg", "id": msg.id, "priv": _priv(msg.private_ep)}
    elif isinstance(msg, RegisterOk):
        obj = {"t": "reg_ok", "pub": str(msg.public_ep)}
    elif isinstance(msg, Connect):
        obj = {"t": "connect", "id": msg.id, "peer": msg.peer, "nonce": _nonce_hex(msg.nonce)}
    elif isinstance(msg, Forward):
        obj = {"t": "forward", "peer": msg.peer, "pub": str(msg.public_ep),
               "priv": _priv(msg.private_ep), "nonce": _nonce_hex(msg.nonce)}
        if msg.predicted:
            obj["pred"] = [str(ep) for ep in msg.predicted]
    elif isinstance(msg, Hello):
        obj = {"t": "hello", "from": msg.sender, "nonce": _nonce_hex(msg.nonce)}
    elif isinstance(msg, HelloAck):
        obj = {"t": "hello_ack", "from": msg.sender, "nonce": _nonce_hex(msg.nonce)}
    elif isinstance(msg, Relay):
        obj = {"t": "relay", "to": msg.to, "payload": msg.payload.hex()}
    elif isinstance(msg, RelayDeliver):
        obj = {"t": "relay_deliver", "from": msg.sender, "payload": msg.payload.hex()}
    elif isinstance(msg, Error):
        obj = {"t": "error", "code": msg.code, "detail": msg.detail}
    else:
        raise TypeError(f"not a control message: {msg!r}")
    data = json.dumps(obj, separators=(",", ":"), ensure_ascii=True).encode()
    return data + b"\n" if stream else data


def _field(obj: dict, tag: str, name: str, kind=str):
    if name not in obj:
        raise DecodeError(f"{tag}: missing field {name!r}", tag, name)
    value = obj[name]
    if not isinstance(value, kind):
        raise DecodeError(f"{tag}: field {name!r} has wrong type", tag, name)
    return value


def _ep_field(obj, tag, name, transport, obfuscated=False) -> Endpoint:
    text = _field(obj, tag, name)
    try:
        ep = parse_endpoint(text, transport)
    except ParseError as exc:
        raise DecodeError(f"{tag}: field {name!r}: {exc}", tag, name) from None
    if obfuscated:
        ep = Endpoint(obfuscate_address(ep.address), ep.port, transport)
    return ep


def _hex_field(obj, tag, name, size=None) -> bytes:
    text = _field(obj, tag, name)
    try:
        value = bytes.fromhex(text)
    except ValueError:
        raise DecodeError(f"{tag}: field {name!r} is not hex", tag, name) from None
    if size is not None and len(value) != size:
        raise DecodeError(f"{tag}: field {name!r} must be {size} bytes", tag, name)
    return value


def decode_message(data: bytes, transport: Transport = Transport.UDP) -> ControlMessage:
    """Inverse of :func:`encode_message`.

    Endpoints in the result carry ``transport``; a single trailing newline is
    accepted.
    """
    try:
        obj = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DecodeError(f"invalid JSON payload: {exc}") from None
    if not isinstance(obj, dict):
        raise DecodeError("payload is not a JSON object")
    if "t" not in obj:
        raise DecodeError("missing tag field 't'", None, "t")
    tag = obj["t"]
    if tag == "reg":
        return Register(_field(obj, tag, "id"), _ep_field(obj, tag, "priv", transport, True))
    if tag == "reg_ok":
        return RegisterOk(_ep_field(obj, tag, "pub", transport))
    if tag == "connect":
        return Connect(_field(obj, tag, "id"), _field(obj, tag, "peer"),
                       _hex_field(obj, tag, "nonce", NONCE_BYTES))
    if tag == "forward":
        pred = obj.get("pred", [])
        if not isinstance(pred, list):
            raise DecodeError(f"{tag}: field 'pred' has wrong type", tag, "pred")
        predicted = []
        for i, _ in enumerate(pred):
            predicted.append(_ep_field({"pred": pred[i]}, tag, "pred", transport))
        return Forward(_field(obj, tag, "peer"), _ep_field(obj, tag, "pub", transport),
                       _ep_field(obj, tag, "priv", transport, True),
                       _hex_field(obj, tag, "nonce", NONCE_BYTES), tuple(predicted))
    if tag == "hello":
        return Hello(_field(obj, tag, "from"), _hex_field(obj, tag, "nonce", NONCE_BYTES))
    if tag == "hello_ack":
        return HelloAck(_field(obj, tag, "from"), _hex_field(obj, tag, "nonce", NONCE_BYTES))
    if tag == "relay":
        return Relay(_field(obj, tag, "to"), _hex_field(obj, tag, "payload"))
    if tag == "relay_deliver":
        return RelayDeliver(_field(obj, tag, "from"), _hex_field(obj, tag, "payload"))
    if tag == "error":
        return Error(_field(obj, tag, "code"), obj.get("detail", ""))
    raise DecodeError(f"unknown message tag {tag!r}", tag)


class LineBuffer:
    """Reassembles newline-framed messages from stream segments.

    Only complete lines are returned; a trailing partial line stays buffered.
    """

    def __init__(self):
        self._buf = b""

    def feed(self, data: bytes) -> list[bytes]:
        self._buf += data
        *lines, self._buf = self._buf.split(b"\n")
        return [line for line in lines if line]

    @property
    def pending(self) -> bytes:
        return self._buf
