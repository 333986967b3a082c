import random

import pytest
from hypothesis import given, strategies as st

from fedrepo.favor import InvalidParams, compute_favor, rank_candidates, should_replicate
from fedrepo.global_view import GlobalViewDB
from fedrepo.wire import FavorParams, Heartbeat, Insert, Name, Store, make_metadata

GB = 10**9


def _n(text):
    return Name.parse(text)


A, B, C, D = (_n(f"/repo/node-{x}") for x in "abcd")
FILE_A = _n("/genomics/fileA")


def test_empty_node_has_favor_one():
    assert compute_favor(FavorParams(100 * GB, 0)) == 1.0


def test_full_node_has_favor_zero():
    assert compute_favor(FavorParams(100 * GB, 100 * GB)) == 0.0


def test_quarter_used_gives_three_quarters():
    assert compute_favor(FavorParams(100 * GB, 25 * GB)) == 0.75


def test_strictly_decreasing_in_used():
    last = 2.0
    for used in range(0, 101, 10):
        favor = compute_favor(FavorParams(100, used))
        assert favor < last
        last = favor


@pytest.mark.parametrize("params", [FavorParams(0, 0), FavorParams(-5, 0), FavorParams(10, 11), FavorParams(10, -1)])
def test_invalid_params_rejected(params):
    with pytest.raises(InvalidParams):
        compute_favor(params)


def _db(params_by_node, on=(), claims=()):
    db = GlobalViewDB()
    seqs = {}

    def apply(gm):
        seqs[gm.sender] = seqs.get(gm.sender, 0) + 1
        db.apply_gm(gm, gm.sender, seqs[gm.sender], 0.0)

    for node, params in params_by_node.items():
        apply(Heartbeat(node, params))
    contact = on[0] if on else B
    meta = make_metadata(FILE_A, b"x" * 128, contact, copies=3)
    apply(Insert(contact, params_by_node[contact], meta))
    for extra in on[1:]:
        apply(Store(extra, params_by_node[extra], FILE_A))
    from fedrepo.wire import Claim, ClaimKind
    for claimant in claims:
        apply(Claim(claimant, params_by_node[claimant], FILE_A, ClaimKind.FETCHING))
    return db


def test_rank_order_follows_free_ratio():
    # free ratios 0.50 / 0.20 / 0.15 / 0.10 rank D > C > B > A
    params = {
        D: FavorParams(100, 50),
        C: FavorParams(100, 80),
        B: FavorParams(100, 85),
        A: FavorParams(100, 90),
    }
    db = _db(params, on=(B,))
    record = db.get_file(FILE_A)
    assert rank_candidates(db, record) == [D, C, A]  # B already holds it


def test_equal_favor_ties_break_by_name():
    params = {node: FavorParams(100, 40) for node in (A, B, C, D)}
    db = _db(params, on=(D,))
    record = db.get_file(FILE_A)
    assert rank_candidates(db, record) == [A, B, C]


def test_ranking_matches_brute_force_sort_oracle():
    rng = random.Random(31)
    nodes = [_n(f"/repo/node-{i:02d}") for i in range(8)]
    for _ in range(100):
        params = {n: FavorParams(rng.randint(1, 1000), 0) for n in nodes}
        params = {n: FavorParams(p.capacity_bytes, rng.randint(0, p.capacity_bytes))
                  for n, p in params.items()}
        holders = rng.sample(nodes, rng.randint(1, 3))
        db = _db(params, on=tuple(holders))
        record = db.get_file(FILE_A)
        # independent oracle: filter then stable-sort by (-favor, name)
        expected = sorted(
            (n for n in nodes if n not in holders),
            key=lambda n: (-(params[n].capacity_bytes - params[n].used_bytes)
                           / params[n].capacity_bytes, str(n)),
        )
        assert rank_candidates(db, record) == expected


@given(st.integers(min_value=1, max_value=10**6))
def test_rank_invariant_under_common_scaling(scale):
    base = {A: (100, 90), B: (100, 85), C: (100, 80), D: (100, 50)}
    db1 = _db({n: FavorParams(c, u) for n, (c, u) in base.items()}, on=(B,))
    db2 = _db({n: FavorParams(c * scale, u * scale) for n, (c, u) in base.items()}, on=(B,))
    r1, r2 = db1.get_file(FILE_A), db2.get_file(FILE_A)
    assert rank_candidates(db1, r1) == rank_candidates(db2, r2)


def test_candidates_exclude_suspended_and_claiming():
    params = {node: FavorParams(100, 10) for node in (A, B, C, D)}
    db = _db(params, on=(B,), claims=(C,))
    db.nodes[D].suspended = True
    record = db.get_file(FILE_A)
    assert rank_candidates(db, record) == [A]


def test_should_replicate_respects_deficit_window():
    params = {
        D: FavorParams(100, 50),
        C: FavorParams(100, 80),
        B: FavorParams(100, 85),
        A: FavorParams(100, 90),
    }
    db = _db(params, on=(B,))
    record = db.get_file(FILE_A)
    # deficit 2: top two candidates are D and C
    assert should_replicate(db, record, D, deficit=2)
    assert should_replicate(db, record, C, deficit=2)
    assert not should_replicate(db, record, A, deficit=2)
    # deficit 1: only the top candidate
    assert should_replicate(db, record, D, deficit=1)
    assert not should_replicate(db, record, C, deficit=1)
    # deficit 0: nobody
    assert not should_replicate(db, record, D, deficit=0)


def test_should_replicate_derives_deficit_from_view():
    params = {node: FavorParams(100, 10) for node in (A, B, C, D)}
    db = _db(params, on=(B,))
    record = db.get_file(FILE_A)
    # copies 3, one holder: deficit 2, ties break by name so A and C lead
    assert should_replicate(db, record, A)
    assert should_replicate(db, record, C)
    assert not should_replicate(db, record, D)


def test_holder_never_selects_itself():
    params = {node: FavorParams(100, 10) for node in (A, B, C, D)}
    db = _db(params, on=(B,))
    record = db.get_file(FILE_A)
    assert not should_replicate(db, record, B, deficit=2)
