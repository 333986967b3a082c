"""Wire-level types and the canonical byte encoding.

Everything that crosses the simulated network is defined here: hierarchical
names, the six group-message kinds, client command structures, sync
announcements, and file segmentation. The byte layout is a length-prefixed
TLV format documented in docs/wire.md and pinned by golden fixtures under
tests/fixtures/. Encoding is canonical: equal values always produce
identical bytes.

All types are immutable and the encode/decode functions are pure, so they
are safe to call from anywhere.
"""
from __future__ import annotations

import hashlib
import struct
import urllib.parse
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import ClassVar, Union

DEFAULT_SEGMENT_SIZE = 8000
DIGEST_SIZE = 32  # sha256


class WireError(Exception):
    pass


class MalformedName(WireError):
    pass


class EncodeError(WireError):
    pass


class DecodeError(WireError):
    pass


class EmptyFile(WireError):
    pass


@dataclass(frozen=True, order=True)
class Name:
    """Hierarchical name: a non-empty tuple of non-empty components.

    Canonical text form is "/" + components joined by "/"; parse() and
    render() are exact inverses.
    """

    components: tuple[str, ...]

    def __post_init__(self):
        if not isinstance(self.components, tuple):
            object.__setattr__(self, "components", tuple(self.components))
        if not self.components:
            raise MalformedName("a name needs at least one component")
        for comp in self.components:
            if not comp:
                raise MalformedName("empty name component")
            if "/" in comp:
                raise MalformedName(f"component contains '/': {comp!r}")

    @classmethod
    def parse(cls, text: str) -> "Name":
        if not text or not text.startswith("/"):
            raise MalformedName(f"a name must start with '/': {text!r}")
        return cls(tuple(text[1:].split("/")))

    def render(self) -> str:
        return "/" + "/".join(self.components)

    def __str__(self) -> str:
        return self.render()

    def startswith(self, prefix: "Name") -> bool:
        n = len(prefix.components)
        return self.components[:n] == prefix.components

    def extend(self, *parts: str) -> "Name":
        return Name(self.components + tuple(parts))

    def join(self, other: "Name") -> "Name":
        return Name(self.components + other.components)

    def __len__(self) -> int:
        return len(self.components)


def escape_name(name: Name) -> str:
    """Render a whole name as a single safe component (percent-encoded)."""
    return urllib.parse.quote(name.render(), safe="")


def unescape_name(component: str) -> Name:
    return Name.parse(urllib.parse.unquote(component))


class StatusCode(IntEnum):
    """Command status codes; this enumeration is closed."""

    STAND_BY = 100
    FETCHING = 101
    OK = 200
    BAD_NAME = 400
    BAD_REQUEST = 401
    UNAUTHENTICATED = 402
    UNAUTHORIZED = 403
    NOT_FOUND = 404
    NO_COMMAND = 405
    RESOURCE_LIMIT = 500
    TRAFFIC_OVERLOAD = 501
    NODE_DISCONNECT = 502
    UNKNOWN_ERROR = 503


class ClaimKind(Enum):
    FETCHING = 0
    FAILED = 1


class LeavePhase(Enum):
    ANNOUNCE = 0
    COMPLETE = 1


@dataclass(frozen=True)
class FavorParams:
    """Per-node announced storage figures; favor is computed locally from these."""

    capacity_bytes: int
    used_bytes: int

    def validate(self) -> None:
        if self.capacity_bytes <= 0:
            raise EncodeError(f"capacity must be positive, got {self.capacity_bytes}")
        if not 0 <= self.used_bytes <= self.capacity_bytes:
            raise EncodeError(
                f"used must be within [0, capacity], got {self.used_bytes}/{self.capacity_bytes}"
            )


@dataclass(frozen=True)
class FileMetadata:
    name: Name
    size: int
    contact: Name
    copies: int
    segment_count: int
    digest: bytes

    def validate(self) -> None:
        if self.size <= 0:
            raise EncodeError(f"file size must be positive, got {self.size}")
        if self.copies < 1:
            raise EncodeError(f"copies must be >= 1, got {self.copies}")
        if self.segment_count < 1:
            raise EncodeError(f"segment_count must be >= 1, got {self.segment_count}")
        if len(self.digest) != DIGEST_SIZE:
            raise EncodeError(f"digest must be {DIGEST_SIZE} bytes, got {len(self.digest)}")

    def replace_contact(self, contact: Name) -> "FileMetadata":
        return FileMetadata(self.name, self.size, contact, self.copies,
                            self.segment_count, self.digest)


@dataclass(frozen=True)
class Insert:
    kind: ClassVar[str] = "insert"
    sender: Name
    favor_params: FavorParams
    file: FileMetadata

    def validate(self) -> None:
        self.favor_params.validate()
        self.file.validate()


@dataclass(frozen=True)
class Delete:
    kind: ClassVar[str] = "delete"
    sender: Name
    favor_params: FavorParams
    file_name: Name

    def validate(self) -> None:
        self.favor_params.validate()


@dataclass(frozen=True)
class Claim:
    kind: ClassVar[str] = "claim"
    sender: Name
    favor_params: FavorParams
    file_name: Name
    claim_kind: ClaimKind

    def validate(self) -> None:
        self.favor_params.validate()


@dataclass(frozen=True)
class Store:
    kind: ClassVar[str] = "store"
    sender: Name
    favor_params: FavorParams
    file_name: Name

    def validate(self) -> None:
        self.favor_params.validate()


@dataclass(frozen=True)
class Heartbeat:
    kind: ClassVar[str] = "heartbeat"
    sender: Name
    favor_params: FavorParams

    def validate(self) -> None:
        self.favor_params.validate()


@dataclass(frozen=True)
class Leave:
    kind: ClassVar[str] = "leave"
    sender: Name
    favor_params: FavorParams
    phase: LeavePhase
    files_needing_replication: tuple[Name, ...]

    def validate(self) -> None:
        self.favor_params.validate()
        if self.phase is LeavePhase.COMPLETE and self.files_needing_replication:
            raise EncodeError("a completed leave carries no file list")


GroupMessage = Union[Insert, Delete, Claim, Store, Heartbeat, Leave]
GM_KINDS = ("insert", "delete", "claim", "store", "heartbeat", "leave")


@dataclass(frozen=True)
class FirstContact:
    prefix: Name
    curi: str

    def validate(self) -> None:
        if not self.curi:
            raise EncodeError("curi must be non-empty")


@dataclass(frozen=True)
class InsertCommand:
    first_contact: FirstContact
    file: FileMetadata
    fetch_path: Name

    def validate(self) -> None:
        self.first_contact.validate()
        self.file.validate()


@dataclass(frozen=True)
class DeleteCommand:
    first_contact: FirstContact
    file_name: Name

    def validate(self) -> None:
        self.first_contact.validate()


@dataclass(frozen=True)
class CommandStatus:
    curi: str
    code: StatusCode

    def validate(self) -> None:
        if not self.curi:
            raise EncodeError("curi must be non-empty")
        if not isinstance(self.code, StatusCode):
            raise EncodeError(f"not a known status code: {self.code!r}")


@dataclass(frozen=True)
class SegmentData:
    """One file segment plus the index of the file's final segment."""

    final_idx: int
    payload: bytes

    def validate(self) -> None:
        if self.final_idx < 0:
            raise EncodeError("final_idx must be >= 0")


@dataclass(frozen=True)
class SyncAnnouncement:
    sender: Name
    vector: dict[Name, int]

    def validate(self) -> None:
        for name, seq in self.vector.items():
            if seq < 1:
                raise EncodeError(f"sequence numbers are positive, got {name}:{seq}")
        if self.sender not in self.vector:
            raise EncodeError("announcement must include the sender's own entry")


@dataclass(frozen=True)
class QueryResponse:
    code: StatusCode
    body: bytes

    def validate(self) -> None:
        if not isinstance(self.code, StatusCode):
            raise EncodeError(f"not a known status code: {self.code!r}")


# ---------------------------------------------------------------------------
# TLV encoding. Layout: 1-byte tag, 4-byte big-endian length, value.
# Tag numbers are fixed in docs/wire.md; changing them breaks the golden
# fixtures on purpose.
# ---------------------------------------------------------------------------

T_NAME = 0x01
T_COMPONENT = 0x02
T_U64 = 0x03
T_BYTES = 0x04
T_STRING = 0x05
T_FAVOR_PARAMS = 0x06
T_VECTOR = 0x07
T_VECTOR_ENTRY = 0x08
T_NAME_LIST = 0x09

T_GM_INSERT = 0x10
T_GM_DELETE = 0x11
T_GM_CLAIM = 0x12
T_GM_STORE = 0x13
T_GM_HEARTBEAT = 0x14
T_GM_LEAVE = 0x15

T_FILE_METADATA = 0x20
T_FIRST_CONTACT = 0x21
T_INSERT_COMMAND = 0x22
T_DELETE_COMMAND = 0x23
T_COMMAND_STATUS = 0x24
T_SEGMENT_DATA = 0x25
T_SYNC_ANNOUNCEMENT = 0x26
T_QUERY_RESPONSE = 0x27

_HEADER = struct.Struct(">BI")


def _tlv(tag: int, value: bytes) -> bytes:
    return _HEADER.pack(tag, len(value)) + value


class _Reader:
    """Sequential TLV reader over one buffer."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def at_end(self) -> bool:
        return self.pos >= len(self.data)

    def peek_tag(self) -> int:
        if self.pos + _HEADER.size > len(self.data):
            raise DecodeError("truncated TLV header")
        return self.data[self.pos]

    def take(self, expected_tag: int) -> bytes:
        tag = self.peek_tag()
        if tag != expected_tag:
            raise DecodeError(f"expected tag 0x{expected_tag:02x}, found 0x{tag:02x}")
        _, length = _HEADER.unpack_from(self.data, self.pos)
        start = self.pos + _HEADER.size
        end = start + length
        if end > len(self.data):
            raise DecodeError("truncated TLV value")
        self.pos = end
        return self.data[start:end]

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise DecodeError(f"{len(self.data) - self.pos} trailing bytes")


def _enc_name(name: Name) -> bytes:
    return _tlv(T_NAME, b"".join(_tlv(T_COMPONENT, c.encode()) for c in name.components))


def _dec_name(value: bytes) -> Name:
    reader = _Reader(value)
    comps = []
    while not reader.at_end():
        comps.append(reader.take(T_COMPONENT).decode())
    reader.finish()
    try:
        return Name(tuple(comps))
    except MalformedName as exc:
        raise DecodeError(str(exc)) from exc


def _enc_u64(value: int) -> bytes:
    if value < 0 or value > 0xFFFFFFFFFFFFFFFF:
        raise EncodeError(f"integer out of u64 range: {value}")
    return _tlv(T_U64, struct.pack(">Q", value))


def _dec_u64(value: bytes) -> int:
    if len(value) != 8:
        raise DecodeError(f"u64 must be 8 bytes, got {len(value)}")
    return struct.unpack(">Q", value)[0]


def _enc_str(value: str) -> bytes:
    return _tlv(T_STRING, value.encode())


def _enc_favor(params: FavorParams) -> bytes:
    return _tlv(T_FAVOR_PARAMS, _enc_u64(params.capacity_bytes) + _enc_u64(params.used_bytes))


def _dec_favor(value: bytes) -> FavorParams:
    reader = _Reader(value)
    cap = _dec_u64(reader.take(T_U64))
    used = _dec_u64(reader.take(T_U64))
    reader.finish()
    return FavorParams(cap, used)


def encode_vector(vector: dict[Name, int]) -> bytes:
    entries = b"".join(
        _tlv(T_VECTOR_ENTRY, _enc_name(name) + _enc_u64(seq))
        for name, seq in sorted(vector.items())
    )
    return _tlv(T_VECTOR, entries)


def decode_vector(value: bytes) -> dict[Name, int]:
    reader = _Reader(value)
    vector: dict[Name, int] = {}
    while not reader.at_end():
        entry = _Reader(reader.take(T_VECTOR_ENTRY))
        name = _dec_name(entry.take(T_NAME))
        seq = _dec_u64(entry.take(T_U64))
        entry.finish()
        if name in vector:
            raise DecodeError(f"duplicate vector entry for {name}")
        vector[name] = seq
    reader.finish()
    return vector


def _enc_name_list(names: tuple[Name, ...]) -> bytes:
    return _tlv(T_NAME_LIST, b"".join(_enc_name(n) for n in names))


def _dec_name_list(value: bytes) -> tuple[Name, ...]:
    reader = _Reader(value)
    names = []
    while not reader.at_end():
        names.append(_dec_name(reader.take(T_NAME)))
    reader.finish()
    return tuple(names)


def _enc_metadata(meta: FileMetadata) -> bytes:
    body = (
        _enc_name(meta.name)
        + _enc_u64(meta.size)
        + _enc_name(meta.contact)
        + _enc_u64(meta.copies)
        + _enc_u64(meta.segment_count)
        + _tlv(T_BYTES, meta.digest)
    )
    return _tlv(T_FILE_METADATA, body)


def _dec_metadata(value: bytes) -> FileMetadata:
    reader = _Reader(value)
    name = _dec_name(reader.take(T_NAME))
    size = _dec_u64(reader.take(T_U64))
    contact = _dec_name(reader.take(T_NAME))
    copies = _dec_u64(reader.take(T_U64))
    segment_count = _dec_u64(reader.take(T_U64))
    digest = reader.take(T_BYTES)
    reader.finish()
    meta = FileMetadata(name, size, contact, copies, segment_count, digest)
    try:
        meta.validate()
    except EncodeError as exc:
        raise DecodeError(str(exc)) from exc
    return meta


def _enc_first_contact(fc: FirstContact) -> bytes:
    return _tlv(T_FIRST_CONTACT, _enc_name(fc.prefix) + _enc_str(fc.curi))


def _dec_first_contact(value: bytes) -> FirstContact:
    reader = _Reader(value)
    prefix = _dec_name(reader.take(T_NAME))
    curi = reader.take(T_STRING).decode()
    reader.finish()
    if not curi:
        raise DecodeError("curi must be non-empty")
    return FirstContact(prefix, curi)


def _gm_head(msg) -> bytes:
    return _enc_name(msg.sender) + _enc_favor(msg.favor_params)


def _encode_body(msg) -> tuple[int, bytes]:
    if isinstance(msg, Insert):
        return T_GM_INSERT, _gm_head(msg) + _enc_metadata(msg.file)
    if isinstance(msg, Delete):
        return T_GM_DELETE, _gm_head(msg) + _enc_name(msg.file_name)
    if isinstance(msg, Claim):
        return T_GM_CLAIM, _gm_head(msg) + _enc_name(msg.file_name) + _enc_u64(msg.claim_kind.value)
    if isinstance(msg, Store):
        return T_GM_STORE, _gm_head(msg) + _enc_name(msg.file_name)
    if isinstance(msg, Heartbeat):
        return T_GM_HEARTBEAT, _gm_head(msg)
    if isinstance(msg, Leave):
        return T_GM_LEAVE, (
            _gm_head(msg)
            + _enc_u64(msg.phase.value)
            + _enc_name_list(msg.files_needing_replication)
        )
    if isinstance(msg, FirstContact):
        return T_FIRST_CONTACT, _enc_name(msg.prefix) + _enc_str(msg.curi)
    if isinstance(msg, InsertCommand):
        return T_INSERT_COMMAND, (
            _enc_first_contact(msg.first_contact)
            + _enc_metadata(msg.file)
            + _enc_name(msg.fetch_path)
        )
    if isinstance(msg, DeleteCommand):
        return T_DELETE_COMMAND, _enc_first_contact(msg.first_contact) + _enc_name(msg.file_name)
    if isinstance(msg, CommandStatus):
        return T_COMMAND_STATUS, _enc_str(msg.curi) + _enc_u64(int(msg.code))
    if isinstance(msg, SegmentData):
        return T_SEGMENT_DATA, _enc_u64(msg.final_idx) + _tlv(T_BYTES, msg.payload)
    if isinstance(msg, SyncAnnouncement):
        return T_SYNC_ANNOUNCEMENT, _enc_name(msg.sender) + encode_vector(msg.vector)
    if isinstance(msg, QueryResponse):
        return T_QUERY_RESPONSE, _enc_u64(int(msg.code)) + _tlv(T_BYTES, msg.body)
    raise EncodeError(f"unencodable message type: {type(msg).__name__}")


def encode(msg) -> bytes:
    """Encode a message to its canonical bytes; raises EncodeError on invalid input."""
    msg.validate()
    tag, body = _encode_body(msg)
    return _tlv(tag, body)


def _dec_status_code(raw: int) -> StatusCode:
    try:
        return StatusCode(raw)
    except ValueError:
        raise DecodeError(f"unknown status code {raw}") from None


def _decode_gm_head(reader: _Reader) -> tuple[Name, FavorParams]:
    sender = _dec_name(reader.take(T_NAME))
    favor = _dec_favor(reader.take(T_FAVOR_PARAMS))
    return sender, favor


def decode(data: bytes):
    """Decode canonical bytes back to a message; raises DecodeError on malformed input."""
    outer = _Reader(data)
    tag = outer.peek_tag()
    value = outer.take(tag)
    outer.finish()
    reader = _Reader(value)
    try:
        if tag == T_GM_INSERT:
            sender, favor = _decode_gm_head(reader)
            file = _dec_metadata(reader.take(T_FILE_METADATA))
            reader.finish()
            return Insert(sender, favor, file)
        if tag == T_GM_DELETE:
            sender, favor = _decode_gm_head(reader)
            file_name = _dec_name(reader.take(T_NAME))
            reader.finish()
            return Delete(sender, favor, file_name)
        if tag == T_GM_CLAIM:
            sender, favor = _decode_gm_head(reader)
            file_name = _dec_name(reader.take(T_NAME))
            raw_kind = _dec_u64(reader.take(T_U64))
            reader.finish()
            try:
                claim_kind = ClaimKind(raw_kind)
            except ValueError:
                raise DecodeError(f"unknown claim kind {raw_kind}") from None
            return Claim(sender, favor, file_name, claim_kind)
        if tag == T_GM_STORE:
            sender, favor = _decode_gm_head(reader)
            file_name = _dec_name(reader.take(T_NAME))
            reader.finish()
            return Store(sender, favor, file_name)
        if tag == T_GM_HEARTBEAT:
            sender, favor = _decode_gm_head(reader)
            reader.finish()
            return Heartbeat(sender, favor)
        if tag == T_GM_LEAVE:
            sender, favor = _decode_gm_head(reader)
            raw_phase = _dec_u64(reader.take(T_U64))
            names = _dec_name_list(reader.take(T_NAME_LIST))
            reader.finish()
            try:
                phase = LeavePhase(raw_phase)
            except ValueError:
                raise DecodeError(f"unknown leave phase {raw_phase}") from None
            if phase is LeavePhase.COMPLETE and names:
                raise DecodeError("a completed leave carries no file list")
            return Leave(sender, favor, phase, names)
        if tag == T_FIRST_CONTACT:
            fc = _dec_first_contact(value)
            return fc
        if tag == T_INSERT_COMMAND:
            fc = _dec_first_contact(reader.take(T_FIRST_CONTACT))
            file = _dec_metadata(reader.take(T_FILE_METADATA))
            fetch_path = _dec_name(reader.take(T_NAME))
            reader.finish()
            return InsertCommand(fc, file, fetch_path)
        if tag == T_DELETE_COMMAND:
            fc = _dec_first_contact(reader.take(T_FIRST_CONTACT))
            file_name = _dec_name(reader.take(T_NAME))
            reader.finish()
            return DeleteCommand(fc, file_name)
        if tag == T_COMMAND_STATUS:
            curi = reader.take(T_STRING).decode()
            code = _dec_status_code(_dec_u64(reader.take(T_U64)))
            reader.finish()
            if not curi:
                raise DecodeError("curi must be non-empty")
            return CommandStatus(curi, code)
        if tag == T_SEGMENT_DATA:
            final_idx = _dec_u64(reader.take(T_U64))
            payload = reader.take(T_BYTES)
            reader.finish()
            return SegmentData(final_idx, payload)
        if tag == T_SYNC_ANNOUNCEMENT:
            sender = _dec_name(reader.take(T_NAME))
            vector = decode_vector(reader.take(T_VECTOR))
            reader.finish()
            ann = SyncAnnouncement(sender, vector)
            try:
                ann.validate()
            except EncodeError as exc:
                raise DecodeError(str(exc)) from exc
            return ann
        if tag == T_QUERY_RESPONSE:
            code = _dec_status_code(_dec_u64(reader.take(T_U64)))
            body = reader.take(T_BYTES)
            reader.finish()
            return QueryResponse(code, body)
    except DecodeError:
        raise
    except (UnicodeDecodeError, struct.error) as exc:
        raise DecodeError(str(exc)) from exc
    raise DecodeError(f"unknown top-level tag 0x{tag:02x}")


# ---------------------------------------------------------------------------
# Segmentation
# ---------------------------------------------------------------------------

def digest_bytes(content: bytes) -> bytes:
    return hashlib.sha256(content).digest()


def segment_file(content: bytes, segment_size: int = DEFAULT_SEGMENT_SIZE) -> tuple[list[bytes], bytes]:
    """Split content into fixed-size segments; returns (segments, digest).

    Every segment except possibly the last has exactly segment_size bytes.
    """
    if not content:
        raise EmptyFile("cannot segment empty content")
    if segment_size <= 0:
        raise ValueError(f"segment_size must be positive, got {segment_size}")
    segments = [content[i:i + segment_size] for i in range(0, len(content), segment_size)]
    return segments, digest_bytes(content)


def make_metadata(name: Name, content: bytes, contact: Name, copies: int = 3,
                  segment_size: int = DEFAULT_SEGMENT_SIZE) -> FileMetadata:
    """Build file metadata for content, computing segment count and digest."""
    segments, digest = segment_file(content, segment_size)
    return FileMetadata(
        name=name,
        size=len(content),
        contact=contact,
        copies=copies,
        segment_count=len(segments),
        digest=digest,
    )
