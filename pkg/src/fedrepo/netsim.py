"""Deterministic discrete-event simulator of a named-data network.

Endpoints exchange interest/data packets routed by longest-prefix match with
anycast tie-breaking (lowest mean link latency, then endpoint name). Links
carry a latency range and a loss probability; partitions, crashes, and global
loss overrides are first-class controls. A single event queue ordered by
(time, insertion index) makes every run a pure function of (scenario, seed).

The trace format (one line per event) is documented in docs/trace.md.
"""
from __future__ import annotations

import hashlib
import heapq
import random
from dataclasses import dataclass, field
from typing import Callable, Optional

from .wire import Name

DEFAULT_INTEREST_TIMEOUT = 4.0
DEFAULT_LATENCY = (0.005, 0.020)


class UnknownNode(Exception):
    pass


@dataclass(frozen=True)
class Interest:
    name: Name
    payload: bytes = b""
    hint: Optional[Name] = None


class Data:
    __slots__ = ("payload",)

    def __init__(self, payload: bytes):
        self.payload = payload


class Nack:
    __slots__ = ()


class Hint:
    __slots__ = ("node",)

    def __init__(self, node: Name):
        self.node = node


class Timeout:
    __slots__ = ()


@dataclass(frozen=True)
class Link:
    latency_lo: float = DEFAULT_LATENCY[0]
    latency_hi: float = DEFAULT_LATENCY[1]
    loss: float = 0.0

    @property
    def mean_latency(self) -> float:
        return (self.latency_lo + self.latency_hi) / 2.0


class Endpoint:
    """One attachment point on the network; owned by a node engine or client."""

    def __init__(self, name: Name):
        self.name = name
        self.key = str(name)
        self.active = True
        self.handler: Optional[Callable[[Interest], object]] = None
        self.on_broadcast: Optional[Callable[[Name, bytes], None]] = None


@dataclass
class RunResult:
    quiescent: bool
    max_time_exceeded: bool
    ended_at: float


class Simulator:
    """Global event clock, routing table, and fault controls for one run."""

    def __init__(self, seed: int = 0, default_link: Link = Link(), trace: bool = True):
        self.seed = seed
        self.now = 0.0
        self.default_link = default_link
        self._heap: list[tuple[float, int, Callable[[], None], bool]] = []
        self._seq = 0
        self._endpoints: dict[str, Endpoint] = {}
        self._fib: dict[tuple[str, ...], set[str]] = {}
        self._default_routes: set[str] = set()
        self._link_overrides: dict[frozenset, Link] = {}
        self._groups: dict[str, int] = {}
        self._loss_override: Optional[float] = None
        self._rngs: dict[str, random.Random] = {}
        self._next_token = 1
        self._unresolved: set[int] = set()
        self._busy_checks: list[Callable[[], bool]] = []
        self._last_activity = 0.0
        self.events_executed = 0
        self.bytes_transferred = 0
        self.drops: dict[str, int] = {"loss": 0, "partition": 0, "crash": 0, "unroutable": 0}
        self.trace_enabled = trace
        self.trace_lines: list[str] = []

    # -- endpoints and routing ------------------------------------------------

    def register(self, name: Name) -> Endpoint:
        ep = Endpoint(name)
        if ep.key in self._endpoints:
            raise ValueError(f"endpoint already registered: {ep.key}")
        self._endpoints[ep.key] = ep
        return ep

    def endpoint(self, name: Name | str) -> Endpoint:
        key = name if isinstance(name, str) else str(name)
        try:
            return self._endpoints[key]
        except KeyError:
            raise UnknownNode(key) from None

    def register_prefix(self, ep: Endpoint, prefix: Name) -> None:
        self._fib.setdefault(prefix.components, set()).add(ep.key)

    def unregister_prefix(self, ep: Endpoint, prefix: Name) -> None:
        entry = self._fib.get(prefix.components)
        if entry:
            entry.discard(ep.key)
            if not entry:
                del self._fib[prefix.components]

    def register_default_route(self, ep: Endpoint) -> None:
        self._default_routes.add(ep.key)

    def unregister_default_route(self, ep: Endpoint) -> None:
        self._default_routes.discard(ep.key)

    def set_link(self, a: Name | str, b: Name | str, link: Link) -> None:
        self._link_overrides[frozenset((str(a), str(b)))] = link

    def node_rng(self, key: str) -> random.Random:
        # Sub-stream per endpoint so adding a node never perturbs others' draws.
        rng = self._rngs.get(key)
        if rng is None:
            digest = hashlib.sha256(f"{self.seed}|{key}".encode()).digest()
            rng = random.Random(int.from_bytes(digest[:8], "big"))
            self._rngs[key] = rng
        return rng

    def _link(self, a: str, b: str) -> Link:
        return self._link_overrides.get(frozenset((a, b)), self.default_link)

    def _loss(self, a: str, b: str) -> float:
        if self._loss_override is not None:
            return self._loss_override
        return self._link(a, b).loss

    def _reachable(self, a: str, b: str) -> bool:
        ga, gb = self._groups.get(a), self._groups.get(b)
        if ga is not None and gb is not None and ga != gb:
            return False
        return True

    def _route(self, src: str, name: Name, hint: Optional[Name]) -> Optional[str]:
        key = hint if hint is not None else name
        comps = key.components
        for plen in range(len(comps), 0, -1):
            entry = self._fib.get(comps[:plen])
            if not entry:
                continue
            cands = [
                k for k in entry
                if k != src and self._endpoints[k].active and self._reachable(src, k)
            ]
            if cands:
                return min(cands, key=lambda k: (self._link(src, k).mean_latency, k))
        cands = [
            k for k in self._default_routes
            if k != src and self._endpoints[k].active and self._reachable(src, k)
        ]
        if cands:
            return min(cands, key=lambda k: (self._link(src, k).mean_latency, k))
        return None

    # -- event queue ----------------------------------------------------------

    def call_at(self, at: float, fn: Callable[[], None], timer: bool = True) -> None:
        if at < self.now:
            at = self.now
        self._seq += 1
        heapq.heappush(self._heap, (at, self._seq, fn, timer))

    def call_later(self, delay: float, fn: Callable[[], None], timer: bool = True) -> None:
        self.call_at(self.now + delay, fn, timer)

    def mark_activity(self) -> None:
        self._last_activity = self.now

    def add_busy_check(self, fn: Callable[[], bool]) -> None:
        self._busy_checks.append(fn)

    def _busy(self) -> bool:
        return any(fn() for fn in self._busy_checks)

    # -- tracing --------------------------------------------------------------

    def trace(self, kind: str, src: str = "-", dst: str = "-", name: str = "-",
              size: int = 0, outcome: str = "-") -> None:
        if self.trace_enabled:
            self.trace_lines.append(
                f"t={self.now:.6f} kind={kind} src={src} dst={dst} name={name} "
                f"size={size} outcome={outcome}"
            )

    def write_trace(self, path) -> None:
        with open(path, "w") as fh:
            for line in self.trace_lines:
                fh.write(line + "\n")

    # -- interest / data exchange ----------------------------------------------

    def express_interest(self, src: Name | str, name: Name, payload: bytes = b"",
                         hint: Optional[Name] = None,
                         timeout: float = DEFAULT_INTEREST_TIMEOUT,
                         cb: Optional[Callable[[object], None]] = None) -> int:
        src_key = src if isinstance(src, str) else str(src)
        token = self._next_token
        self._next_token += 1
        self._unresolved.add(token)

        def resolve(outcome, kind: str, dst: str, size: int = 0,
                    note: str = "-") -> None:
            if token not in self._unresolved:
                return
            self._unresolved.discard(token)
            self.trace(kind, dst, src_key, str(name), size, note)
            if cb is not None:
                cb(outcome)

        def on_timeout() -> None:
            if token in self._unresolved:
                self._unresolved.discard(token)
                self.trace("timeout", "-", src_key, str(name))
                if cb is not None:
                    cb(Timeout())

        self.call_later(timeout, on_timeout)

        dst = self._route(src_key, name, hint)
        if dst is None:
            self.drops["unroutable"] += 1
            self.trace("drop_unroutable", src_key, "-", str(name), len(payload))
            return token

        rng = self.node_rng(src_key)
        if rng.random() < self._loss(src_key, dst):
            self.drops["loss"] += 1
            self.trace("drop_loss", src_key, dst, str(name), len(payload))
            return token
        link = self._link(src_key, dst)
        latency = rng.uniform(link.latency_lo, link.latency_hi)

        def deliver() -> None:
            ep = self._endpoints[dst]
            if not ep.active:
                self.drops["crash"] += 1
                self.trace("drop_crash", src_key, dst, str(name), len(payload))
                return
            if not self._reachable(src_key, dst):
                self.drops["partition"] += 1
                self.trace("drop_partition", src_key, dst, str(name), len(payload))
                return
            self.bytes_transferred += len(payload)
            self.trace("interest", src_key, dst, str(name), len(payload))
            response = ep.handler(Interest(name, payload, hint)) if ep.handler else None
            if response is None:
                return
            rng2 = self.node_rng(dst)
            if rng2.random() < self._loss(dst, src_key):
                self.drops["loss"] += 1
                self.trace("drop_loss", dst, src_key, str(name))
                return
            lat2 = rng2.uniform(link.latency_lo, link.latency_hi)

            def deliver_response() -> None:
                requester = self._endpoints.get(src_key)
                if requester is None or not requester.active:
                    return
                if isinstance(response, Data):
                    self.bytes_transferred += len(response.payload)
                    resolve(response, "data", dst, len(response.payload))
                elif isinstance(response, Nack):
                    resolve(response, "nack", dst)
                elif isinstance(response, Hint):
                    resolve(response, "hint", dst, note=f"target={response.node}")
                else:
                    raise TypeError(f"handler returned {type(response).__name__}")

            self.call_later(lat2, deliver_response, timer=False)

        self.call_later(latency, deliver, timer=False)
        return token

    def broadcast(self, src: Name | str, name: Name, payload: bytes) -> None:
        """Deliver payload to every endpoint subscribed to a prefix of name."""
        src_key = src if isinstance(src, str) else str(src)
        receivers: set[str] = set()
        comps = name.components
        for plen in range(1, len(comps) + 1):
            receivers |= self._fib.get(comps[:plen], set())
        rng = self.node_rng(src_key)
        for dst in sorted(receivers):
            if dst == src_key:
                continue
            ep = self._endpoints[dst]
            if not ep.active or not self._reachable(src_key, dst):
                self.drops["partition" if ep.active else "crash"] += 1
                self.trace("drop_partition" if ep.active else "drop_crash",
                           src_key, dst, str(name), len(payload))
                continue
            if rng.random() < self._loss(src_key, dst):
                self.drops["loss"] += 1
                self.trace("drop_loss", src_key, dst, str(name), len(payload))
                continue
            link = self._link(src_key, dst)
            latency = rng.uniform(link.latency_lo, link.latency_hi)

            def deliver(dst=dst, ep=ep) -> None:
                if not ep.active or not self._reachable(src_key, dst):
                    reason = "crash" if not ep.active else "partition"
                    self.drops[reason] += 1
                    self.trace(f"drop_{reason}", src_key, dst, str(name), len(payload))
                    return
                self.bytes_transferred += len(payload)
                self.trace("broadcast", src_key, dst, str(name), len(payload))
                if ep.on_broadcast:
                    ep.on_broadcast(name, payload)

            self.call_later(latency, deliver, timer=False)

    # -- fault controls ---------------------------------------------------------

    def crash(self, node: Name | str) -> None:
        ep = self.endpoint(node)
        ep.active = False
        self.mark_activity()
        self.trace("crash", ep.key, ep.key)

    def restart(self, node: Name | str) -> None:
        ep = self.endpoint(node)
        ep.active = True
        self.mark_activity()
        self.trace("restart", ep.key, ep.key)

    def partition(self, groups: list[list[Name | str]]) -> None:
        self._groups = {}
        for idx, group in enumerate(groups):
            for member in group:
                key = member if isinstance(member, str) else str(member)
                if key not in self._endpoints:
                    raise UnknownNode(key)
                self._groups[key] = idx
        self.mark_activity()
        self.trace("partition", outcome=f"groups={len(groups)}")

    def heal(self) -> None:
        self._groups = {}
        self.mark_activity()
        self.trace("heal")

    def set_loss(self, p: Optional[float]) -> None:
        self._loss_override = p
        self.trace("set_loss", outcome=f"p={p}")

    # -- run loop ---------------------------------------------------------------

    def run(self, until: float) -> None:
        while self._heap and self._heap[0][0] <= until:
            at, _, fn, _ = heapq.heappop(self._heap)
            self.now = at
            self.events_executed += 1
            fn()
        self.now = until

    def run_until_quiescent(self, max_time: float, settle: float,
                            min_time: float = 0.0) -> RunResult:
        """Run until no activity for `settle` and no participant is busy.

        Timer-only churn (heartbeats, periodic announcements) does not count
        as activity; handlers mark activity at protocol-novel transitions.
        """
        while self._heap:
            at = self._heap[0][0]
            if at > max_time:
                self.now = max_time
                self.trace("maxtime", outcome=f"limit={max_time}")
                return RunResult(False, True, self.now)
            if (at >= min_time and at - self._last_activity >= settle
                    and not self._busy()):
                self.now = at
                return RunResult(True, False, self.now)
            _, _, fn, _ = heapq.heappop(self._heap)
            self.now = at
            self.events_executed += 1
            fn()
        return RunResult(True, False, self.now)
