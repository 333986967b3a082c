"""Each node's local database of federation state, built by applying group messages.

Application must be insensitive to cross-publisher ordering (per-publisher
order is guaranteed by sync). Every transition is therefore a join-like
update over grow-only event sets:

  * inserts and deletes are kept as (publisher, seq)-identified events; a
    file is visible when its newest insert outranks every delete tombstone;
  * per-member holding state is written only by that member's own
    publications, so per-publisher FIFO gives it a total order;
  * a member's stale store for a deleted epoch is discarded because its
    event id does not outrank the tombstone (delete wins).

Two caveats are deliberate: among concurrent same-name inserts that survive
the tombstones, the (publisher, seq)-lexicographically smallest wins and the
rest are counted as conflicts; and event ids are ranked by (seq, publisher),
so a re-insert racing a delete across publishers may deterministically lose.
Both resolutions are convergent because they depend only on the applied set.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Iterator, Optional

from . import wire
from .svs import StateVector
from .wire import (
    Claim,
    ClaimKind,
    Delete,
    FavorParams,
    FileMetadata,
    GroupMessage,
    Heartbeat,
    Insert,
    Leave,
    LeavePhase,
    Name,
    StatusCode,
    Store,
)

QUERY_TYPES = ("/files", "/nodes", "/prefix", "/file")

EventId = tuple[int, str]  # (seq, publisher); ranks events across publishers


def event_id(publisher: Name, seq: int) -> EventId:
    return (seq, str(publisher))


@dataclass
class NodeRecord:
    name: Name
    favor_params: FavorParams
    last_heard: float = 0.0
    suspended: bool = False
    departed: bool = False

    @property
    def alive(self) -> bool:
        return not self.suspended and not self.departed


@dataclass
class _Member:
    holding: bool = False
    positive_id: Optional[EventId] = None
    removed_at: Optional[float] = None


@dataclass
class _FileState:
    inserts: dict[EventId, FileMetadata] = field(default_factory=dict)
    deletes: set[EventId] = field(default_factory=set)
    members: dict[Name, _Member] = field(default_factory=dict)
    claims: dict[Name, EventId] = field(default_factory=dict)

    def _max_delete(self) -> Optional[EventId]:
        return max(self.deletes) if self.deletes else None

    def live_insert(self) -> Optional[tuple[EventId, FileMetadata]]:
        cutoff = self._max_delete()
        survivors = [
            (eid, meta) for eid, meta in self.inserts.items()
            if cutoff is None or eid > cutoff
        ]
        if not survivors:
            return None
        # smallest (publisher, seq) wins among surviving concurrent inserts
        return min(survivors, key=lambda pair: (pair[0][1], pair[0][0]))

    def on_list(self, contact: Name) -> list[Name]:
        cutoff = self._max_delete()
        holders = [
            member for member, st in self.members.items()
            if st.holding and (cutoff is None or st.positive_id > cutoff)
        ]
        holders.sort(key=str)
        if contact in holders:
            holders.remove(contact)
            holders.insert(0, contact)
        return holders

    def history(self) -> list[tuple[Name, float]]:
        out = [
            (member, st.removed_at) for member, st in self.members.items()
            if not st.holding and st.removed_at is not None
        ]
        out.sort(key=lambda pair: str(pair[0]))
        return out

    def fetching_claims(self) -> list[Name]:
        cutoff = self._max_delete()
        return sorted(
            (m for m, eid in self.claims.items() if cutoff is None or eid > cutoff),
            key=str,
        )


@dataclass
class FileRecord:
    """Visible projection of one live file."""

    metadata: FileMetadata
    on: list[Name]
    on_history: list[tuple[Name, float]]
    claims: dict[Name, str]


class GlobalViewDB:
    """Tabular view of nodes, files, and placements for one node."""

    def __init__(self):
        self.nodes: dict[Name, NodeRecord] = {}
        self._files: dict[Name, _FileState] = {}
        self.state_vector = StateVector({})
        self.conflicts = 0
        self.stale_applies = 0

    # -- applying group messages -------------------------------------------------

    def apply_gm(self, gm: GroupMessage, publisher: Name, seq: int, now: float) -> bool:
        """Apply one publication; returns False for a stale duplicate."""
        frontier = self.state_vector.get(publisher)
        if seq <= frontier:
            self.stale_applies += 1
            return False
        if seq != frontier + 1:
            raise ValueError(
                f"out-of-order apply for {publisher}: have {frontier}, got {seq}")
        eid = event_id(publisher, seq)

        record = self.nodes.get(publisher)
        if record is None:
            record = NodeRecord(publisher, gm.favor_params)
            self.nodes[publisher] = record
        record.favor_params = gm.favor_params
        record.last_heard = now
        record.suspended = False
        record.departed = isinstance(gm, Leave) and gm.phase is LeavePhase.COMPLETE

        if isinstance(gm, Insert):
            state = self._files.setdefault(gm.file.name, _FileState())
            if state.live_insert() is not None:
                self.conflicts += 1
            state.inserts[eid] = gm.file
            member = state.members.setdefault(gm.file.contact, _Member())
            member.holding = True
            member.positive_id = eid
            member.removed_at = None
        elif isinstance(gm, Delete):
            state = self._files.setdefault(gm.file_name, _FileState())
            state.deletes.add(eid)
        elif isinstance(gm, Claim):
            state = self._files.setdefault(gm.file_name, _FileState())
            if gm.claim_kind is ClaimKind.FETCHING:
                state.claims[publisher] = eid
            else:
                state.claims.pop(publisher, None)
        elif isinstance(gm, Store):
            state = self._files.setdefault(gm.file_name, _FileState())
            member = state.members.setdefault(publisher, _Member())
            member.holding = True
            member.positive_id = eid
            member.removed_at = None
            state.claims.pop(publisher, None)
        elif isinstance(gm, Leave) and gm.phase is LeavePhase.ANNOUNCE:
            for state in self._files.values():
                member = state.members.get(publisher)
                if member is not None and member.holding:
                    member.holding = False
                    member.removed_at = now
                state.claims.pop(publisher, None)
        # Heartbeat and Leave(Complete) touch only the node record.

        self.state_vector.set(publisher, seq)
        return True

    # -- visible projection --------------------------------------------------------

    def _record(self, state: _FileState) -> Optional[FileRecord]:
        live = state.live_insert()
        if live is None:
            return None
        _, meta = live
        on = state.on_list(meta.contact)
        claims = {m: "fetching" for m in state.fetching_claims() if m not in on}
        return FileRecord(meta, on, state.history(), claims)

    def get_file(self, name: Name) -> Optional[FileRecord]:
        state = self._files.get(name)
        return self._record(state) if state else None

    def files(self) -> Iterator[tuple[Name, FileRecord]]:
        for name in sorted(self._files, key=str):
            record = self._record(self._files[name])
            if record is not None:
                yield name, record

    def file_names(self) -> list[Name]:
        return [name for name, _ in self.files()]

    def alive_nodes(self) -> list[Name]:
        return sorted((n for n, r in self.nodes.items() if r.alive), key=str)

    def is_alive(self, name: Name) -> bool:
        record = self.nodes.get(name)
        return record is not None and record.alive

    # -- replication bookkeeping ----------------------------------------------------

    def under_replicated(self) -> list[tuple[Name, FileRecord, int]]:
        """Files short of their replication degree, with the deficit.

        Counts alive on-list members plus alive nodes currently fetching;
        suspended and departed nodes do not count.
        """
        out = []
        for name, record in self.files():
            alive_on = sum(1 for m in record.on if self.is_alive(m))
            alive_fetching = sum(1 for m in record.claims if self.is_alive(m))
            deficit = record.metadata.copies - alive_on - alive_fetching
            if deficit > 0:
                out.append((name, record, deficit))
        return out

    # -- maintenance ------------------------------------------------------------------

    def purge_history(self, now: float, history_ttl: float) -> list[tuple[Name, Name]]:
        """Drop on-history entries older than the retention window."""
        purged = []
        for fname in sorted(self._files, key=str):
            state = self._files[fname]
            for member in sorted(state.members, key=str):
                st = state.members[member]
                if (not st.holding and st.removed_at is not None
                        and now - st.removed_at > history_ttl):
                    del state.members[member]
                    purged.append((fname, member))
        return purged

    # -- queries -------------------------------------------------------------------

    def query(self, q: str, enabled: Optional[tuple[str, ...]] = None
              ) -> tuple[StatusCode, Optional[object]]:
        enabled = QUERY_TYPES if enabled is None else enabled
        if q == "/files":
            if "/files" not in enabled:
                return StatusCode.NO_COMMAND, None
            return StatusCode.OK, [str(n) for n in self.file_names()]
        if q == "/nodes":
            if "/nodes" not in enabled:
                return StatusCode.NO_COMMAND, None
            return StatusCode.OK, [
                {"name": str(n), "alive": rec.alive}
                for n, rec in sorted(self.nodes.items(), key=lambda kv: str(kv[0]))
            ]
        if q.startswith("/prefix/"):
            if "/prefix" not in enabled:
                return StatusCode.NO_COMMAND, None
            try:
                prefix = Name.parse(_query_arg(q, "/prefix"))
            except wire.MalformedName:
                return StatusCode.NO_COMMAND, None
            return StatusCode.OK, [
                str(n) for n in self.file_names() if n.startswith(prefix)
            ]
        if q.startswith("/file/"):
            if "/file" not in enabled:
                return StatusCode.NO_COMMAND, None
            try:
                fname = Name.parse(_query_arg(q, "/file"))
            except wire.MalformedName:
                return StatusCode.NO_COMMAND, None
            record = self.get_file(fname)
            if record is None:
                return StatusCode.NOT_FOUND, None
            return StatusCode.OK, _record_as_dict(record)
        return StatusCode.NO_COMMAND, None

    # -- convergence checks -----------------------------------------------------------

    def comparable(self) -> dict:
        """Canonical projection for cross-node equality.

        Locally assessed fields (last_heard, suspension, history timestamps)
        are excluded; they depend on each observer's clock.
        """
        nodes = {
            str(name): {
                "capacity": rec.favor_params.capacity_bytes,
                "used": rec.favor_params.used_bytes,
                "departed": rec.departed,
            }
            for name, rec in self.nodes.items()
        }
        files = {}
        for name, record in self.files():
            files[str(name)] = {
                "size": record.metadata.size,
                "contact": str(record.metadata.contact),
                "copies": record.metadata.copies,
                "segment_count": record.metadata.segment_count,
                "digest": record.metadata.digest.hex(),
                "on": [str(m) for m in record.on],
                "history": sorted(str(m) for m, _ in record.on_history),
                "claims": {str(m): kind for m, kind in record.claims.items()},
            }
        return {"nodes": nodes, "files": files}

    def vector(self) -> dict[Name, int]:
        return self.state_vector.as_dict()


def _query_arg(q: str, qtype: str) -> str:
    # "/prefix//genomics" and "/prefix/genomics" both mean the name "/genomics"
    rest = q[len(qtype):]
    return rest[1:] if rest.startswith("//") else rest


def _record_as_dict(record: FileRecord) -> dict:
    return {
        "name": str(record.metadata.name),
        "size": record.metadata.size,
        "contact": str(record.metadata.contact),
        "copies": record.metadata.copies,
        "segment_count": record.metadata.segment_count,
        "digest": record.metadata.digest.hex(),
        "on": [str(m) for m in record.on],
        "on_history": [str(m) for m, _ in record.on_history],
        "claims": {str(m): kind for m, kind in record.claims.items()},
    }


# ---------------------------------------------------------------------------
# Snapshot encoding (recovery file payload); layout in docs/recovery.md.
# ---------------------------------------------------------------------------

SNAPSHOT_VERSION = 1

T_SNAPSHOT = 0x30
T_F64 = 0x31
T_NODE_RECORD = 0x32
T_FILE_STATE = 0x33
T_INSERT_EVENT = 0x34
T_MEMBER_STATE = 0x35
T_CLAIM_EVENT = 0x36
T_DELETE_EVENT = 0x37
T_RECOVERY = 0x38
T_HELD_FILE = 0x39


class CorruptSnapshot(Exception):
    pass


def _enc_f64(value: float) -> bytes:
    return wire._tlv(T_F64, struct.pack(">d", value))


def _dec_f64(value: bytes) -> float:
    if len(value) != 8:
        raise wire.DecodeError("f64 must be 8 bytes")
    return struct.unpack(">d", value)[0]


def _enc_event_id(eid: EventId) -> bytes:
    seq, pub = eid
    return wire._enc_u64(seq) + wire._enc_name(Name.parse(pub))


def _dec_event_id(reader: wire._Reader) -> EventId:
    seq = wire._dec_u64(reader.take(wire.T_U64))
    pub = wire._dec_name(reader.take(wire.T_NAME))
    return (seq, str(pub))


def snapshot_db(db: GlobalViewDB) -> bytes:
    body = [wire._enc_u64(SNAPSHOT_VERSION), wire.encode_vector(db.state_vector.as_dict())]
    for name in sorted(db.nodes, key=str):
        rec = db.nodes[name]
        body.append(wire._tlv(T_NODE_RECORD, b"".join([
            wire._enc_name(name),
            wire._enc_favor(rec.favor_params),
            _enc_f64(rec.last_heard),
            wire._enc_u64(1 if rec.departed else 0),
        ])))
    for fname in sorted(db._files, key=str):
        state = db._files[fname]
        parts = [wire._enc_name(fname)]
        for eid in sorted(state.inserts):
            parts.append(wire._tlv(T_INSERT_EVENT,
                                   _enc_event_id(eid) + wire._enc_metadata(state.inserts[eid])))
        for eid in sorted(state.deletes):
            parts.append(wire._tlv(T_DELETE_EVENT, _enc_event_id(eid)))
        for member in sorted(state.members, key=str):
            st = state.members[member]
            parts.append(wire._tlv(T_MEMBER_STATE, b"".join([
                wire._enc_name(member),
                wire._enc_u64(1 if st.holding else 0),
                wire._enc_u64(1 if st.positive_id is not None else 0),
                _enc_event_id(st.positive_id) if st.positive_id else b"",
                wire._enc_u64(1 if st.removed_at is not None else 0),
                _enc_f64(st.removed_at) if st.removed_at is not None else b"",
            ])))
        for member in sorted(state.claims, key=str):
            parts.append(wire._tlv(T_CLAIM_EVENT,
                                   wire._enc_name(member) + _enc_event_id(state.claims[member])))
        body.append(wire._tlv(T_FILE_STATE, b"".join(parts)))
    return wire._tlv(T_SNAPSHOT, b"".join(body))


def restore_db(data: bytes) -> GlobalViewDB:
    try:
        outer = wire._Reader(data)
        reader = wire._Reader(outer.take(T_SNAPSHOT))
        outer.finish()
        version = wire._dec_u64(reader.take(wire.T_U64))
        if version != SNAPSHOT_VERSION:
            raise wire.DecodeError(f"unsupported snapshot version {version}")
        db = GlobalViewDB()
        db.state_vector = StateVector(wire.decode_vector(reader.take(wire.T_VECTOR)))
        while not reader.at_end():
            tag = reader.peek_tag()
            if tag == T_NODE_RECORD:
                sub = wire._Reader(reader.take(T_NODE_RECORD))
                name = wire._dec_name(sub.take(wire.T_NAME))
                favor = wire._dec_favor(sub.take(wire.T_FAVOR_PARAMS))
                last_heard = _dec_f64(sub.take(T_F64))
                departed = bool(wire._dec_u64(sub.take(wire.T_U64)))
                sub.finish()
                db.nodes[name] = NodeRecord(name, favor, last_heard, False, departed)
            elif tag == T_FILE_STATE:
                sub = wire._Reader(reader.take(T_FILE_STATE))
                fname = wire._dec_name(sub.take(wire.T_NAME))
                state = _FileState()
                while not sub.at_end():
                    inner_tag = sub.peek_tag()
                    inner = wire._Reader(sub.take(inner_tag))
                    if inner_tag == T_INSERT_EVENT:
                        eid = _dec_event_id(inner)
                        meta = wire._dec_metadata(inner.take(wire.T_FILE_METADATA))
                        state.inserts[eid] = meta
                    elif inner_tag == T_DELETE_EVENT:
                        state.deletes.add(_dec_event_id(inner))
                    elif inner_tag == T_MEMBER_STATE:
                        member = wire._dec_name(inner.take(wire.T_NAME))
                        holding = bool(wire._dec_u64(inner.take(wire.T_U64)))
                        st = _Member(holding=holding)
                        if wire._dec_u64(inner.take(wire.T_U64)):
                            st.positive_id = _dec_event_id(inner)
                        if wire._dec_u64(inner.take(wire.T_U64)):
                            st.removed_at = _dec_f64(inner.take(T_F64))
                        state.members[member] = st
                    elif inner_tag == T_CLAIM_EVENT:
                        member = wire._dec_name(inner.take(wire.T_NAME))
                        state.claims[member] = _dec_event_id(inner)
                    else:
                        raise wire.DecodeError(f"unknown file-state tag 0x{inner_tag:02x}")
                    inner.finish()
                db._files[fname] = state
            else:
                raise wire.DecodeError(f"unknown snapshot tag 0x{tag:02x}")
        return db
    except (wire.DecodeError, wire.MalformedName) as exc:
        raise CorruptSnapshot(str(exc)) from exc


def comparable_digest(db: GlobalViewDB) -> str:
    return json.dumps(db.comparable(), sort_keys=True)
