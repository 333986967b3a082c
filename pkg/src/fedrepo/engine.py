"""Per-node orchestrator: sync wiring, heartbeats, failure detection, the
view-checker loop, replication execution, and the join/leave/reinstatement
lifecycle.

Each engine is a single-threaded event handler driven by the simulator; all
inter-node effects go through the network. Suspicion of another node is a
purely local judgement and is never serialized to the wire.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import commands, favor, wire
from .global_view import (
    CorruptSnapshot,
    GlobalViewDB,
    restore_db,
    snapshot_db,
    T_RECOVERY,
    T_HELD_FILE,
)
from .netsim import Data, Hint, Interest, Nack, Simulator
from .storage import LocalStore, ResourceLimit
from .svs import SvsNode
from .wire import (
    Claim,
    ClaimKind,
    Delete,
    GroupMessage,
    Heartbeat,
    Insert,
    Leave,
    LeavePhase,
    Name,
    SegmentData,
    Store,
    SyncAnnouncement,
    escape_name,
    unescape_name,
)

DAY = 86400.0


@dataclass
class EngineConfig:
    name: Name
    repo_prefix: Name
    capacity_bytes: int = 100 * 10**9
    reserved_bytes: Optional[int] = None  # default: 10% of capacity
    copies: int = 3
    heartbeat_interval: float = 30.0
    miss_threshold: int = 3
    history_ttl: float = 30 * DAY
    gc_ttl: float = 30 * DAY
    tick: float = 1.0
    announce_interval: float = 5.0
    leave_timeout: float = 600.0
    command_queue_depth: int = 64
    segment_size: int = wire.DEFAULT_SEGMENT_SIZE
    allowlist: Optional[frozenset] = None  # client prefix strings; None allows all
    acl: dict = field(default_factory=dict)  # file prefix str -> tuple of client strs
    query_policy: Optional[tuple] = None  # enabled query types; None enables all
    min_favor_to_replicate: float = 0.0
    register_file_prefixes: bool = True
    snapshot_interval: float = 60.0  # 0 disables periodic recovery snapshots
    snapshot_dir: Optional[str] = None
    segment_retries: int = 2  # extra attempts per source per segment
    claim_backoff: float = 10.0  # wait before re-claiming a failed file


@dataclass
class RecoveryFile:
    node_name: Name
    own_seq: int
    db_snapshot: bytes
    held_files: list  # of (Name, digest bytes)


def encode_recovery(rec: RecoveryFile) -> bytes:
    body = [
        wire._enc_name(rec.node_name),
        wire._enc_u64(rec.own_seq),
        wire._tlv(wire.T_BYTES, rec.db_snapshot),
    ]
    for name, digest in rec.held_files:
        body.append(wire._tlv(T_HELD_FILE, wire._enc_name(name) + wire._tlv(wire.T_BYTES, digest)))
    return wire._tlv(T_RECOVERY, b"".join(body))


def decode_recovery(data: bytes) -> RecoveryFile:
    try:
        outer = wire._Reader(data)
        reader = wire._Reader(outer.take(T_RECOVERY))
        outer.finish()
        node_name = wire._dec_name(reader.take(wire.T_NAME))
        own_seq = wire._dec_u64(reader.take(wire.T_U64))
        snapshot = reader.take(wire.T_BYTES)
        held = []
        while not reader.at_end():
            inner = wire._Reader(reader.take(T_HELD_FILE))
            name = wire._dec_name(inner.take(wire.T_NAME))
            digest = inner.take(wire.T_BYTES)
            inner.finish()
            held.append((name, digest))
        return RecoveryFile(node_name, own_seq, snapshot, held)
    except (wire.DecodeError, wire.MalformedName, struct.error) as exc:
        raise CorruptSnapshot(str(exc)) from exc


class _Job:
    """One replication fetch in progress."""

    __slots__ = ("file_name", "metadata", "sources", "source_idx", "seg_idx",
                 "segments", "retries_left", "claimed")

    def __init__(self, file_name, metadata, sources, retries, claimed):
        self.file_name = file_name
        self.metadata = metadata
        self.sources = sources
        self.source_idx = 0
        self.seg_idx = 0
        self.segments = []
        self.retries_left = retries
        self.claimed = claimed


@dataclass
class _LeaveState:
    pending: set
    deadline: float


class NodeEngine:
    def __init__(self, sim: Simulator, config: EngineConfig):
        self.sim = sim
        self.config = config
        self.name = config.name
        self.key = str(config.name)
        self.db = GlobalViewDB()
        self.store = LocalStore(config.capacity_bytes, config.reserved_bytes)
        self.ep = sim.register(config.name)
        self.ep.handler = self._on_interest
        self.ep.on_broadcast = self._on_broadcast
        sim.register_prefix(self.ep, config.name)
        self.group_prefix = config.repo_prefix.extend("group")
        sim.register_prefix(self.ep, self.group_prefix)
        sim.register_default_route(self.ep)
        self.svs = SvsNode(
            config.name,
            send_announcement=self._send_announcement,
            fetch=self._svs_fetch,
            schedule=lambda d, fn: sim.call_later(d, fn),
            now=lambda: sim.now,
            deliver=self._on_publication,
            announce_interval=config.announce_interval,
        )
        self.commands = commands.CommandProcessor(self)
        self.crashed = False
        self.halted = False
        self.leaving: Optional[_LeaveState] = None
        self.jobs: dict[Name, _Job] = {}
        self._claim_backoff_until: dict[Name, float] = {}
        self._registered_files: set[Name] = set()
        self.last_publish = -config.heartbeat_interval  # first tick heartbeats
        self.last_recovery: Optional[bytes] = None
        self._last_snapshot_at = 0.0
        self.fail_next_commands = 0
        self.decode_errors = 0
        self.space_exhausted = 0
        sim.add_busy_check(self.is_busy)

    # -- lifecycle -----------------------------------------------------------------

    def start(self) -> None:
        self.svs.start()
        self.sim.call_later(self.config.tick, self._tick)

    def is_busy(self) -> bool:
        if self.crashed or self.halted:
            return False
        if self.jobs or self.leaving is not None:
            return True
        if self.commands.pending_count() > 0:
            return True
        return self.svs.is_busy()

    def crash(self) -> None:
        self.crashed = True
        self.jobs.clear()
        self.svs.stop()
        self.commands.drop_all()
        self.sim.crash(self.name)

    def restart(self, mode: str = "resume") -> None:
        """Bring a crashed node back: resume RAM state, reinstate from the
        recovery file, or join fresh under the same name."""
        if not self.crashed:
            raise RuntimeError(f"{self.key} is not crashed")
        if mode == "reinstate":
            self._reinstate()
        elif mode == "fresh":
            self._fresh_state()
        elif mode != "resume":
            raise ValueError(f"unknown restart mode {mode!r}")
        self.crashed = False
        self.sim.restart(self.name)
        self.svs.resume()
        self.last_publish = self.sim.now - self.config.heartbeat_interval
        self.sim.call_later(self.config.tick, self._tick)

    def _halt(self, why: str) -> None:
        self.halted = True
        self.jobs.clear()
        self.svs.stop()
        self.commands.drop_all()
        self.ep.active = False
        self.sim.trace("halt", self.key, self.key, outcome=why)
        self.sim.mark_activity()

    # -- reinstatement ----------------------------------------------------------------

    def snapshot_recovery(self) -> bytes:
        rec = RecoveryFile(
            node_name=self.name,
            own_seq=self.svs.vector.get(self.name),
            db_snapshot=snapshot_db(self.db),
            held_files=self.store.held_files(),
        )
        blob = encode_recovery(rec)
        self.last_recovery = blob
        if self.config.snapshot_dir:
            path = Path(self.config.snapshot_dir)
            path.mkdir(parents=True, exist_ok=True)
            (path / (escape_name(self.name) + ".recovery")).write_bytes(blob)
        self.sim.trace("snapshot", self.key, self.key, size=len(blob))
        return blob

    def _load_recovery(self) -> Optional[bytes]:
        if self.config.snapshot_dir:
            path = Path(self.config.snapshot_dir) / (escape_name(self.name) + ".recovery")
            if path.exists():
                return path.read_bytes()
        return self.last_recovery

    def _fresh_state(self) -> None:
        self.db = GlobalViewDB()
        self.store = LocalStore(self.config.capacity_bytes, self.config.reserved_bytes)
        for fname in list(self._registered_files):
            self._unregister_file(fname)
        self.svs.vector.entries.clear()
        self.svs.applied.clear()
        self.svs.store.clear()
        self.sim.trace("rejoin_fresh", self.key, self.key)

    def _reinstate(self) -> None:
        blob = self._load_recovery()
        if blob is None:
            self._fresh_state()
            return
        try:
            rec = decode_recovery(blob)
            if rec.node_name != self.name:
                raise CorruptSnapshot(
                    f"recovery file names {rec.node_name}, this node is {self.name}")
            db = restore_db(rec.db_snapshot)
        except CorruptSnapshot as exc:
            self.sim.trace("corrupt_snapshot", self.key, self.key, outcome=str(exc)[:40])
            self._fresh_state()
            return
        self.db = db
        own_seq = max(rec.own_seq, db.state_vector.get(self.name))
        self.svs.vector.entries = db.state_vector.as_dict()
        self.svs.vector.entries[self.name] = own_seq
        self.svs.applied = db.state_vector.as_dict()
        self.svs.applied[self.name] = own_seq
        self.svs.store.clear()
        # verify held files against their recorded digests
        verified = []
        for name, digest in rec.held_files:
            if self.store.digest_of(name) == digest:
                verified.append(name)
            else:
                self.store.remove_file(name)
                self.sim.trace("held_file_lost", self.key, self.key, str(name))
        # anything deleted federation-wide during the lapse goes away locally
        for name in self.store.file_names():
            if self.db.get_file(name) is None:
                self._evict_local(name, "deleted_while_down")
        for name in self.store.file_names():
            self._register_file(name)
        self.sim.trace("reinstate", self.key, self.key,
                       outcome=f"own_seq={own_seq} held={len(verified)}")
        self.sim.call_later(0.0, self._post_reinstate, timer=False)

    def _post_reinstate(self) -> None:
        if self.crashed or self.halted:
            return
        # corrective stores: still-held files absent from their on-list view
        for name in self.store.file_names():
            record = self.db.get_file(name)
            if record is not None and self.name not in record.on:
                self.publish_gm(self._make_gm(Store, file_name=name))
        # self-repair: on-list claims this node holds files it lost
        for name, record in list(self.db.files()):
            if self.name in record.on and not self.store.has_file(name):
                self._start_job(name, record, claim=True)

    # -- publications -------------------------------------------------------------------

    def _make_gm(self, kind, **kw) -> GroupMessage:
        return kind(sender=self.name, favor_params=self.store.favor_params(), **kw)

    def publish_gm(self, gm: GroupMessage) -> int:
        payload = wire.encode(gm)
        seq = self.svs.publish(payload)
        self.db.apply_gm(gm, self.name, seq, self.sim.now)
        self.last_publish = self.sim.now
        self.sim.trace("publish", self.key, self.key, str(self.name),
                       len(payload), f"gm={gm.kind} seq={seq}")
        if not isinstance(gm, Heartbeat):
            self.sim.mark_activity()
        self._post_apply(gm, self.name)
        return seq

    def _send_announcement(self, vector: dict) -> None:
        if self.crashed or self.halted:
            return
        ann = SyncAnnouncement(self.name, vector)
        self.sim.broadcast(self.name, self.group_prefix.extend("sync"), wire.encode(ann))

    def _svs_fetch(self, publisher: Name, seq: int, target: Name, cb) -> None:
        if self.crashed or self.halted:
            return
        name = target.join(self.config.repo_prefix).extend(
            "svs", escape_name(publisher), str(seq))
        self.sim.express_interest(
            self.name, name,
            cb=lambda out: cb(out.payload if isinstance(out, Data) else None))

    def _on_broadcast(self, name: Name, payload: bytes) -> None:
        if self.crashed or self.halted:
            return
        try:
            msg = wire.decode(payload)
        except wire.DecodeError:
            self.decode_errors += 1
            return
        if isinstance(msg, SyncAnnouncement):
            self.svs.on_announcement(msg)

    def _on_publication(self, publisher: Name, seq: int, payload: bytes) -> None:
        try:
            gm = wire.decode(payload)
        except wire.DecodeError:
            self.decode_errors += 1
            return
        if publisher == self.name and seq <= self.db.state_vector.get(self.name):
            return  # own publication echoed back
        was_suspended = (publisher in self.db.nodes
                         and self.db.nodes[publisher].suspended)
        self.db.apply_gm(gm, publisher, seq, self.sim.now)
        if was_suspended:
            self.sim.trace("unsuspend", self.key, self.key, str(publisher))
        self._post_apply(gm, publisher)

    def _post_apply(self, gm: GroupMessage, publisher: Name) -> None:
        if isinstance(gm, Delete):
            self._evict_local(gm.file_name, "delete_gm")
            self.jobs.pop(gm.file_name, None)
            if self.leaving:
                self.leaving.pending.discard(gm.file_name)
        if isinstance(gm, Insert) and self.config.register_file_prefixes:
            # holders answer fetch interests for the file by prefix
            if publisher == self.name:
                self._register_file(gm.file.name)
        if self.leaving and isinstance(gm, Store):
            self._leave_check()
        if not isinstance(gm, Heartbeat) and publisher != self.name:
            self._replication_check()

    # -- the view-checker tick -------------------------------------------------------------

    def _tick(self) -> None:
        if self.crashed or self.halted:
            return
        now = self.sim.now
        cfg = self.config
        if (self.svs.ready_to_publish() and self.leaving is None
                and now - self.last_publish >= cfg.heartbeat_interval):
            self.publish_gm(self._make_gm(Heartbeat))
        self._suspicion_sweep(now)
        self._replication_check()
        self._gc_sweep(now)
        for fname, member in self.db.purge_history(now, cfg.history_ttl):
            self.sim.trace("purge_history", self.key, self.key, str(fname),
                           outcome=f"member={member}")
        if self.leaving is not None:
            if now >= self.leaving.deadline:
                self._halt("leave_timeout")
                return
            self._leave_check()
        if cfg.snapshot_interval and now - self._last_snapshot_at >= cfg.snapshot_interval:
            self._last_snapshot_at = now
            self.snapshot_recovery()
        self.sim.call_later(cfg.tick, self._tick)

    def _suspicion_sweep(self, now: float) -> None:
        window = self.config.miss_threshold * self.config.heartbeat_interval
        for name in sorted(self.db.nodes, key=str):
            if name == self.name:
                continue
            rec = self.db.nodes[name]
            if rec.departed or rec.suspended:
                continue
            if now - rec.last_heard > window:
                rec.suspended = True
                self.sim.trace("suspend", self.key, self.key, str(name),
                               outcome=f"silent={now - rec.last_heard:.1f}")
                self.sim.mark_activity()

    # -- replication ---------------------------------------------------------------------

    def _replication_check(self) -> None:
        if self.crashed or self.halted or self.leaving is not None:
            return
        now = self.sim.now
        for fname, record, deficit in self.db.under_replicated():
            if fname in self.jobs or self.store.has_file(fname):
                continue
            if now < self._claim_backoff_until.get(fname, -1.0):
                continue
            if not favor.should_replicate(self.db, record, self.name, deficit,
                                          self.config.min_favor_to_replicate):
                continue
            if self.store.free_bytes < record.metadata.size:
                self.space_exhausted += 1
                self._claim_backoff_until[fname] = now + self.config.claim_backoff
                continue
            self._start_job(fname, record, claim=True)

    def _fetch_sources(self, record) -> list[Name]:
        sources = [n for n in favor.rank_holders(self.db, record) if n != self.name]
        recent_history = sorted(record.on_history, key=lambda p: (-p[1], str(p[0])))
        for member, _ in recent_history:
            if member != self.name and self.db.is_alive(member) and member not in sources:
                sources.append(member)
        return sources

    def _start_job(self, fname: Name, record, claim: bool) -> None:
        sources = self._fetch_sources(record)
        if not sources:
            self._claim_backoff_until[fname] = self.sim.now + self.config.claim_backoff
            return
        if claim:
            self.publish_gm(self._make_gm(Claim, file_name=fname,
                                          claim_kind=ClaimKind.FETCHING))
        job = _Job(fname, record.metadata, sources, self.config.segment_retries,
                   claimed=claim)
        self.jobs[fname] = job
        self.sim.mark_activity()
        self._job_fetch(job)

    def _job_fetch(self, job: _Job) -> None:
        if self.crashed or self.halted or self.jobs.get(job.file_name) is not job:
            return
        source = job.sources[job.source_idx]
        name = source.join(self.config.repo_prefix).extend("fetch")
        name = name.join(job.file_name).extend(str(job.seg_idx))
        self.sim.express_interest(self.name, name,
                                  cb=lambda out: self._job_response(job, out))

    def _job_response(self, job: _Job, out) -> None:
        if self.crashed or self.halted or self.jobs.get(job.file_name) is not job:
            return
        segment = None
        if isinstance(out, Data):
            try:
                msg = wire.decode(out.payload)
                if isinstance(msg, SegmentData):
                    segment = msg
            except wire.DecodeError:
                self.decode_errors += 1
        if segment is None:
            self._job_failure(job)
            return
        job.segments.append(segment.payload)
        job.seg_idx += 1
        if job.seg_idx < job.metadata.segment_count:
            self._job_fetch(job)
            return
        content = b"".join(job.segments)
        if wire.digest_bytes(content) != job.metadata.digest:
            job.segments = []
            job.seg_idx = 0
            self._job_failure(job, corrupt=True)
            return
        self._job_complete(job, content)

    def _job_failure(self, job: _Job, corrupt: bool = False) -> None:
        if job.retries_left > 0 and not corrupt:
            job.retries_left -= 1
            self._job_fetch(job)
            return
        job.source_idx += 1
        job.retries_left = self.config.segment_retries
        job.segments = []
        job.seg_idx = 0
        if job.source_idx < len(job.sources):
            self._job_fetch(job)
            return
        # out of sources: give up and withdraw the claim
        del self.jobs[job.file_name]
        self._claim_backoff_until[job.file_name] = self.sim.now + self.config.claim_backoff
        if job.claimed and self.db.get_file(job.file_name) is not None:
            self.publish_gm(self._make_gm(Claim, file_name=job.file_name,
                                          claim_kind=ClaimKind.FAILED))
        self.sim.trace("fetch_exhausted", self.key, self.key, str(job.file_name))
        self.sim.mark_activity()

    def _job_complete(self, job: _Job, content: bytes) -> None:
        del self.jobs[job.file_name]
        if self.db.get_file(job.file_name) is None:
            return  # deleted while fetching; discard quietly
        segments, _ = wire.segment_file(content, self.config.segment_size)
        try:
            self.store.put_file(job.metadata, segments, self.sim.now)
        except ResourceLimit:
            self.space_exhausted += 1
            if job.claimed:
                self.publish_gm(self._make_gm(Claim, file_name=job.file_name,
                                              claim_kind=ClaimKind.FAILED))
            return
        self._register_file(job.file_name)
        self.publish_gm(self._make_gm(Store, file_name=job.file_name))

    # -- storage upkeep ---------------------------------------------------------------------

    def _register_file(self, fname: Name) -> None:
        if self.config.register_file_prefixes and fname not in self._registered_files:
            self.sim.register_prefix(self.ep, fname)
            self._registered_files.add(fname)

    def _unregister_file(self, fname: Name) -> None:
        if fname in self._registered_files:
            self.sim.unregister_prefix(self.ep, fname)
            self._registered_files.discard(fname)

    def _evict_local(self, fname: Name, why: str) -> None:
        if self.store.remove_file(fname):
            self._unregister_file(fname)
            self.sim.trace("evict", self.key, self.key, str(fname), outcome=why)

    def _gc_sweep(self, now: float) -> None:
        for fname in self.store.expired(now, self.config.gc_ttl):
            record = self.db.get_file(fname)
            if record is None:
                self._evict_local(fname, "gc_orphan")
            elif record.metadata.contact == self.name:
                # the contact drives federation-wide expiry
                self._evict_local(fname, "gc_expired")
                self.publish_gm(self._make_gm(Delete, file_name=fname))
            else:
                alive_on = sum(1 for m in record.on if self.db.is_alive(m))
                if alive_on > record.metadata.copies:
                    self._evict_local(fname, "gc_over_replicated")

    # -- leaving -----------------------------------------------------------------------------

    def initiate_leave(self) -> None:
        if self.leaving is not None or self.crashed or self.halted:
            return
        needing = []
        for fname in self.store.file_names():
            record = self.db.get_file(fname)
            if record is None:
                continue
            alive_without_me = sum(
                1 for m in record.on if m != self.name and self.db.is_alive(m))
            if alive_without_me < record.metadata.copies:
                needing.append(fname)
        self.publish_gm(self._make_gm(Leave, phase=LeavePhase.ANNOUNCE,
                                      files_needing_replication=tuple(needing)))
        self.leaving = _LeaveState(set(needing), self.sim.now + self.config.leave_timeout)
        self.jobs.clear()
        self._leave_check()

    def _leave_check(self) -> None:
        if self.leaving is None:
            return
        others_alive = sum(1 for n in self.db.alive_nodes() if n != self.name)
        covered = set()
        for fname in self.leaving.pending:
            record = self.db.get_file(fname)
            if record is None:
                covered.add(fname)
                continue
            alive_on = sum(1 for m in record.on if m != self.name and self.db.is_alive(m))
            if alive_on >= min(record.metadata.copies, others_alive):
                covered.add(fname)
        self.leaving.pending -= covered
        if not self.leaving.pending:
            self.publish_gm(self._make_gm(Leave, phase=LeavePhase.COMPLETE,
                                          files_needing_replication=()))
            self.leaving = None
            self._halt("leave_complete")

    # -- interest dispatch ---------------------------------------------------------------------

    def _on_interest(self, interest: Interest):
        if self.crashed or self.halted:
            return None
        comps = interest.name.components
        own = self.name.components
        repo = self.config.repo_prefix.components
        if comps[:len(own)] == own and len(comps) > len(own):
            return self._on_own_prefix(interest, comps[len(own):])
        if comps[:len(repo)] == repo and len(comps) > len(repo):
            handled = self._on_repo_prefix(interest, comps[len(repo):])
            if handled is not None:
                return handled
        return self._handle_fetch(interest.name)

    def _on_own_prefix(self, interest: Interest, rest: tuple):
        repo = self.config.repo_prefix.components
        if rest[:len(repo)] == repo:
            sub = rest[len(repo):]
            if len(sub) == 3 and sub[0] == "svs":
                try:
                    publisher = unescape_name(sub[1])
                    seq = int(sub[2])
                except (wire.MalformedName, ValueError):
                    return Nack()
                payload = self.svs.on_fetch_request(publisher, seq)
                return Data(payload) if payload is not None else Nack()
            if len(sub) >= 3 and sub[0] == "fetch":
                try:
                    fname = Name(sub[1:-1])
                    seg = int(sub[-1])
                except (wire.MalformedName, ValueError):
                    return Nack()
                got = self.store.get_segment(fname, seg, self.sim.now)
                if got is None:
                    return Nack()
                payload, final_idx = got
                return Data(wire.encode(SegmentData(final_idx, payload)))
        if len(rest) >= 2 and rest[0] == "msg":
            if len(rest) == 3 and rest[2] == "status":
                return self.commands.status_response(rest[1])
        return Nack()

    def _on_repo_prefix(self, interest: Interest, rest: tuple):
        if rest == ("insert",):
            return self.commands.on_notify("insert", interest.payload)
        if rest == ("delete",):
            return self.commands.on_notify("delete", interest.payload)
        if rest and rest[0] == "query":
            return self.commands.on_query(rest[1:])
        if rest and rest[0] == "group":
            return Nack()
        return None  # fall through to content fetch

    def _handle_fetch(self, name: Name):
        comps = name.components
        if len(comps) < 2 or not comps[-1].isdigit():
            return Nack()
        fname = Name(comps[:-1])
        seg = int(comps[-1])
        record = self.db.get_file(fname)
        if record is None:
            return Nack()
        got = self.store.get_segment(fname, seg, self.sim.now)
        if got is not None:
            payload, final_idx = got
            return Data(wire.encode(SegmentData(final_idx, payload)))
        targets = [m for m in record.on if m != self.name and self.db.is_alive(m)]
        if not targets:
            return Nack()
        pick = self.sim.node_rng(self.key).choice(sorted(targets, key=str))
        return Hint(pick)
