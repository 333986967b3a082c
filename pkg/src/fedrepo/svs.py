"""State-vector sync: per-publisher sequence numbers with eventual delivery.

Each node announces a vector mapping publisher names to the highest sequence
it knows of. Receivers merge vectors, fetch missing publications, and hand
them to the application strictly in per-publisher order. Every fetched
publication is kept in a local message store so any node can serve any fetch.

Transport is injected as plain callables, so this state machine is testable
without a network.
"""
from __future__ import annotations

from typing import Callable, Optional

from .wire import Name, SyncAnnouncement

ANNOUNCE_INTERVAL = 5.0
RETRY_BACKOFF = (1.0, 2.0, 4.0, 8.0)  # four retries per holder after the first try


class StateVector:
    """Map from publisher name to highest known sequence; merge is pointwise max."""

    __slots__ = ("entries",)

    def __init__(self, entries: Optional[dict[Name, int]] = None):
        self.entries = dict(entries) if entries else {}

    def get(self, name: Name) -> int:
        return self.entries.get(name, 0)

    def set(self, name: Name, seq: int) -> None:
        if seq < 1:
            raise ValueError(f"sequence numbers are positive, got {seq}")
        if seq < self.entries.get(name, 0):
            raise ValueError(f"vector entry for {name} may not decrease")
        self.entries[name] = seq

    def merge(self, other: dict[Name, int]) -> bool:
        changed = False
        for name, seq in other.items():
            if seq > self.entries.get(name, 0):
                self.entries[name] = seq
                changed = True
        return changed

    def dominates(self, other: dict[Name, int]) -> bool:
        """True when this vector knows strictly more than other somewhere and no less anywhere."""
        if any(self.entries.get(n, 0) < s for n, s in other.items()):
            return False
        return any(s > other.get(n, 0) for n, s in self.entries.items())

    def as_dict(self) -> dict[Name, int]:
        return dict(self.entries)

    def __eq__(self, other) -> bool:
        if isinstance(other, StateVector):
            return self.entries == other.entries
        return NotImplemented

    def __repr__(self) -> str:
        inner = ", ".join(f"{n}:{s}" for n, s in sorted(self.entries.items()))
        return f"StateVector({inner})"


def missing_range(known: dict[Name, int], announced: dict[Name, int],
                  own: Optional[Name] = None) -> list[tuple[Name, int]]:
    """All (publisher, seq) pairs the announcement covers beyond local knowledge."""
    out = []
    for name, upto in sorted(announced.items()):
        if name == own:
            continue
        for seq in range(known.get(name, 0) + 1, upto + 1):
            out.append((name, seq))
    return out


class _Campaign:
    __slots__ = ("targets", "target_idx", "attempt")

    def __init__(self, targets: list[Name]):
        self.targets = targets
        self.target_idx = 0
        self.attempt = 0  # 0 = first try, then RETRY_BACKOFF retries


class SvsNode:
    """Sync state machine for one node.

    Callbacks:
      send_announcement(vector_dict)        -- broadcast our vector
      fetch(publisher, seq, target, cb)     -- one fetch attempt; cb(payload or None)
      schedule(delay, fn)                   -- timer
      now()                                 -- current sim-time
      deliver(publisher, seq, payload)      -- in-order application hook
    """

    def __init__(self, name: Name, send_announcement, fetch, schedule, now,
                 deliver, announce_interval: float = ANNOUNCE_INTERVAL):
        self.name = name
        self._send = send_announcement
        self._fetch = fetch
        self._schedule = schedule
        self._now = now
        self._deliver = deliver
        self.announce_interval = announce_interval
        self.vector = StateVector({})
        self.applied: dict[Name, int] = {}
        self.store: dict[tuple[Name, int], bytes] = {}
        self._campaigns: dict[tuple[Name, int], _Campaign] = {}
        self._last_identical_heard = -1e18
        self._announce_pending = False
        self.dropped_announcements = 0
        self.stopped = False

    # -- publishing -------------------------------------------------------------

    def ready_to_publish(self) -> bool:
        # A node that learned of its own prior sequences (same name, fresh
        # state) must apply them before producing new ones.
        return self.applied.get(self.name, 0) == self.vector.get(self.name)

    def publish(self, payload: bytes) -> int:
        seq = self.vector.get(self.name) + 1
        self.vector.set(self.name, seq)
        self.applied[self.name] = seq
        self.store[(self.name, seq)] = payload
        self.announce()
        return seq

    # -- announcements ----------------------------------------------------------

    def start(self) -> None:
        self._schedule(self.announce_interval, self._periodic)

    def _periodic(self) -> None:
        if self.stopped:
            return
        if self._now() - self._last_identical_heard >= self.announce_interval:
            self.announce()
        self._schedule(self.announce_interval, self._periodic)

    def announce(self) -> None:
        if self.vector.entries:
            self._send(self.vector.as_dict())

    def _announce_soon(self) -> None:
        if self._announce_pending:
            return
        self._announce_pending = True

        def fire():
            self._announce_pending = False
            if not self.stopped:
                self.announce()

        self._schedule(0.1, fire)

    def on_announcement(self, ann: SyncAnnouncement) -> list[tuple[Name, int]]:
        """Merge a received vector; returns the fetch set it triggered.

        Missing pairs are computed against the applied frontier rather than
        the merged knowledge vector, so a campaign that gave up is restarted
        by any later announcement covering the gap.
        """
        if self.stopped:
            return []
        if ann.vector == self.vector.entries:
            self._last_identical_heard = self._now()
            return []
        we_dominate = StateVector(self.vector.as_dict()).dominates(ann.vector)
        self.vector.merge(ann.vector)
        started = []
        for publisher, upto in sorted(ann.vector.items()):
            for seq in range(self.applied.get(publisher, 0) + 1, upto + 1):
                if (publisher, seq) in self.store or (publisher, seq) in self._campaigns:
                    continue
                targets = [ann.sender]
                if publisher != ann.sender and publisher != self.name:
                    targets.append(publisher)
                self._campaigns[(publisher, seq)] = _Campaign(targets)
                self._attempt(publisher, seq)
                started.append((publisher, seq))
        if we_dominate:
            # The sender lags behind us; a fresh announcement updates it.
            self._announce_soon()
        return started

    # -- fetching ---------------------------------------------------------------

    def _attempt(self, publisher: Name, seq: int) -> None:
        campaign = self._campaigns.get((publisher, seq))
        if campaign is None or self.stopped:
            return
        target = campaign.targets[campaign.target_idx]

        def done(payload: Optional[bytes]) -> None:
            if (publisher, seq) not in self._campaigns:
                return
            if payload is not None:
                del self._campaigns[(publisher, seq)]
                self._ingest(publisher, seq, payload)
                return
            if campaign.attempt < len(RETRY_BACKOFF):
                delay = RETRY_BACKOFF[campaign.attempt]
                campaign.attempt += 1
                self._schedule(delay, lambda: self._attempt(publisher, seq))
            elif campaign.target_idx + 1 < len(campaign.targets):
                campaign.target_idx += 1
                campaign.attempt = 0
                self._attempt(publisher, seq)
            else:
                # Give up for now; a later announcement restarts the fetch.
                del self._campaigns[(publisher, seq)]

        self._fetch(publisher, seq, target, done)

    def _ingest(self, publisher: Name, seq: int, payload: bytes) -> None:
        if (publisher, seq) in self.store:
            return  # duplicate delivery, applied at most once
        self.store[(publisher, seq)] = payload
        self.vector.merge({publisher: seq})
        frontier = self.applied.get(publisher, 0)
        while (publisher, frontier + 1) in self.store:
            frontier += 1
            self.applied[publisher] = frontier
            self._deliver(publisher, frontier, self.store[(publisher, frontier)])

    def on_fetch_request(self, publisher: Name, seq: int) -> Optional[bytes]:
        """Serve a stored publication, or None when this node lacks it."""
        return self.store.get((publisher, seq))

    # -- bookkeeping -------------------------------------------------------------

    def is_busy(self) -> bool:
        if self._campaigns:
            return True
        return any(self.applied.get(n, 0) < s for n, s in self.vector.entries.items())

    def stop(self) -> None:
        self.stopped = True
        self._campaigns.clear()

    def resume(self) -> None:
        """Restart after stop(); the periodic announcement loop is re-armed."""
        if not self.stopped:
            return
        self.stopped = False
        self.start()
