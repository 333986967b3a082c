import heapq
import random

from hypothesis import given, strategies as st

from fedrepo.svs import RETRY_BACKOFF, StateVector, SvsNode, missing_range
from fedrepo.wire import Name, SyncAnnouncement


def _n(text):
    return Name.parse(text)


A = _n("/repo/node-a")
B = _n("/repo/node-b")
C = _n("/repo/node-c")


class Harness:
    """Drives one SvsNode with a manual clock and scripted fetch outcomes."""

    def __init__(self, name, announce_interval=5.0):
        self.time = 0.0
        self._heap = []
        self._seq = 0
        self.announcements = []
        self.fetches = []          # (publisher, seq, target)
        self.pending = []          # (publisher, seq, target, cb)
        self.delivered = []
        self.node = SvsNode(
            name,
            send_announcement=self.announcements.append,
            fetch=self._fetch,
            schedule=self._schedule,
            now=lambda: self.time,
            deliver=lambda p, s, payload: self.delivered.append((p, s, payload)),
            announce_interval=announce_interval,
        )

    def _schedule(self, delay, fn):
        self._seq += 1
        heapq.heappush(self._heap, (self.time + delay, self._seq, fn))

    def _fetch(self, publisher, seq, target, cb):
        self.fetches.append((publisher, seq, target))
        self.pending.append((publisher, seq, target, cb))

    def run_until(self, t):
        while self._heap and self._heap[0][0] <= t:
            at, _, fn = heapq.heappop(self._heap)
            self.time = at
            fn()
        self.time = t

    def answer_all(self, make_payload):
        while self.pending:
            publisher, seq, target, cb = self.pending.pop(0)
            cb(make_payload(publisher, seq))

    def fail_all(self):
        pending, self.pending = self.pending, []
        for _, _, _, cb in pending:
            cb(None)


# ---------------------------------------------------------------------------
# StateVector
# ---------------------------------------------------------------------------

vec_strategy = st.dictionaries(
    st.sampled_from([A, B, C]), st.integers(min_value=1, max_value=200), max_size=3)


@given(vec_strategy, vec_strategy)
def test_merge_commutative(u, v):
    left = StateVector(u)
    left.merge(v)
    right = StateVector(v)
    right.merge(u)
    assert left.entries == right.entries


@given(vec_strategy, vec_strategy, vec_strategy)
def test_merge_associative(u, v, w):
    left = StateVector(u)
    left.merge(v)
    left.merge(w)
    inner = StateVector(v)
    inner.merge(w)
    right = StateVector(u)
    right.merge(inner.entries)
    assert left.entries == right.entries


@given(vec_strategy)
def test_merge_idempotent(u):
    vec = StateVector(u)
    assert not vec.merge(u)
    assert vec.entries == u


def test_vector_entries_never_decrease():
    vec = StateVector({A: 5})
    try:
        vec.set(A, 4)
    except ValueError:
        pass
    else:
        raise AssertionError("decreasing entry accepted")


# ---------------------------------------------------------------------------
# Publishing
# ---------------------------------------------------------------------------

def test_first_publish_is_seq_one():
    h = Harness(A)
    assert h.node.publish(b"p1") == 1


def test_publish_after_merged_vector_continues_from_it():
    h = Harness(A)
    h.node.vector.merge({A: 123})
    h.node.applied[A] = 123
    assert h.node.publish(b"p") == 124


def test_publish_announces_own_vector():
    h = Harness(A)
    h.node.publish(b"p1")
    assert h.announcements == [{A: 1}]


def test_not_ready_to_publish_while_own_gap_open():
    h = Harness(A)
    h.node.on_announcement(SyncAnnouncement(B, {B: 1, A: 3}))
    assert not h.node.ready_to_publish()


# ---------------------------------------------------------------------------
# Announcement handling
# ---------------------------------------------------------------------------

def test_equal_vectors_trigger_no_fetches():
    h = Harness(A)
    h.node.vector.merge({A: 3})
    h.node.applied[A] = 3
    assert h.node.on_announcement(SyncAnnouncement(B, {A: 3})) == []


def test_single_gap_fetches_exactly_the_missing_pair():
    h = Harness(A)
    h.node.vector.merge({A: 123, B: 120})
    h.node.applied = {A: 123, B: 120}
    for seq in range(1, 121):
        h.node.store[(B, seq)] = b"x"
    started = h.node.on_announcement(SyncAnnouncement(B, {B: 121}))
    assert started == [(B, 121)]
    assert h.fetches == [(B, 121, B)]


def test_fetch_set_matches_brute_force_oracle():
    rng = random.Random(99)
    names = [B, C, _n("/repo/node-d")]
    for _ in range(200):
        local = {n: rng.randint(0, 30) for n in rng.sample(names, rng.randint(0, 3))}
        announced = {n: rng.randint(1, 30) for n in rng.sample(names, rng.randint(1, 3))}
        # independent oracle: enumerate every (publisher, seq) pair
        oracle = sorted(
            (n, s)
            for n in announced
            for s in range(1, announced[n] + 1)
            if s > local.get(n, 0)
        )
        h = Harness(A)
        h.node.vector.merge(local)
        h.node.applied = dict(local)
        for n, upto in local.items():
            for s in range(1, upto + 1):
                h.node.store[(n, s)] = b"x"
        started = h.node.on_announcement(SyncAnnouncement(B, {**announced, B: announced.get(B, 1)}))
        expected = sorted(set(oracle) | {
            (B, s) for s in range(local.get(B, 0) + 1, announced.get(B, 1) + 1)})
        assert sorted(started) == expected


def test_lagging_sender_gets_a_fresh_announcement():
    h = Harness(A)
    h.node.vector.merge({A: 5, B: 2})
    h.node.applied = {A: 5, B: 2}
    h.node.on_announcement(SyncAnnouncement(B, {B: 2}))
    assert h.announcements == []
    h.run_until(0.5)
    assert h.announcements == [{A: 5, B: 2}]


# ---------------------------------------------------------------------------
# Delivery ordering
# ---------------------------------------------------------------------------

def test_out_of_order_arrivals_deliver_in_publisher_order():
    h = Harness(A)
    h.node._ingest(B, 2, b"two")
    assert h.delivered == []
    h.node._ingest(B, 1, b"one")
    assert h.delivered == [(B, 1, b"one"), (B, 2, b"two")]


def test_duplicate_ingest_applied_at_most_once():
    h = Harness(A)
    h.node._ingest(B, 1, b"one")
    h.node._ingest(B, 1, b"one")
    assert h.delivered == [(B, 1, b"one")]


def test_cross_publisher_interleaving_keeps_per_publisher_fifo():
    rng = random.Random(4)
    pubs = {B: 5, C: 4}
    arrivals = [(p, s) for p, upto in pubs.items() for s in range(1, upto + 1)]
    for _ in range(30):
        rng.shuffle(arrivals)
        h = Harness(A)
        for p, s in arrivals:
            h.node._ingest(p, s, f"{p}:{s}".encode())
        per_pub = {p: [s for q, s, _ in h.delivered if q == p] for p in pubs}
        assert per_pub == {B: [1, 2, 3, 4, 5], C: [1, 2, 3, 4]}


# ---------------------------------------------------------------------------
# Fetch retries and serving
# ---------------------------------------------------------------------------

def test_fetch_serves_stored_payload_and_missing():
    h = Harness(A)
    h.node.publish(b"p1")
    assert h.node.on_fetch_request(A, 1) == b"p1"
    assert h.node.on_fetch_request(A, 2) is None


def test_retry_backoff_then_fall_back_to_originator():
    h = Harness(A)
    h.node.on_announcement(SyncAnnouncement(B, {B: 1, C: 1}))
    # campaign for (C, 1) tries the announcer B first, then the originator C
    h.fail_all()
    for delay in RETRY_BACKOFF:
        h.run_until(h.time + delay)
        h.fail_all()
    targets = [t for (p, s, t) in h.fetches if (p, s) == (C, 1)]
    assert targets[:1 + len(RETRY_BACKOFF)] == [B] * (1 + len(RETRY_BACKOFF))
    # exhaust the originator round too
    h.fail_all()
    for delay in RETRY_BACKOFF:
        h.run_until(h.time + delay)
        h.fail_all()
    targets = [t for (p, s, t) in h.fetches if (p, s) == (C, 1)]
    assert targets == [B] * (1 + len(RETRY_BACKOFF)) + [C] * (1 + len(RETRY_BACKOFF))
    assert not h.node._campaigns
    # a later announcement restarts the campaign
    h.node.on_announcement(SyncAnnouncement(C, {C: 1}))
    assert (C, 1) in h.node._campaigns


def test_busy_while_gap_or_campaign_open():
    h = Harness(A)
    assert not h.node.is_busy()
    h.node.on_announcement(SyncAnnouncement(B, {B: 1}))
    assert h.node.is_busy()
    h.answer_all(lambda p, s: b"payload")
    assert not h.node.is_busy()


def test_periodic_announcement_suppressed_after_identical_vector():
    h = Harness(A, announce_interval=5.0)
    h.node.vector.merge({A: 2})
    h.node.applied[A] = 2
    h.node.start()
    h.run_until(4.9)
    h.node.on_announcement(SyncAnnouncement(B, {A: 2}))
    h.run_until(5.1)
    assert h.announcements == []
    h.run_until(10.1)  # next period; nothing identical heard since
    assert h.announcements == [{A: 2}]


def test_missing_range_excludes_own_when_asked():
    assert missing_range({B: 1}, {B: 3, A: 2}, own=A) == [(B, 2), (B, 3)]
