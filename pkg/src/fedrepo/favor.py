"""Local suitability scoring and deterministic replicator selection.

Favor is the normalized free-capacity ratio, computed from the parameters
each node announces on every group message. All nodes sharing the same view
compute identical rankings, so replicator selection needs no coordination.
"""
from __future__ import annotations

from .global_view import FileRecord, GlobalViewDB
from .wire import FavorParams, Name


class InvalidParams(Exception):
    pass


def compute_favor(params: FavorParams) -> float:
    """Free-capacity ratio in [0, 1]; 1.0 for an empty node, 0.0 for a full one."""
    if params.capacity_bytes <= 0:
        raise InvalidParams(f"capacity must be positive, got {params.capacity_bytes}")
    if not 0 <= params.used_bytes <= params.capacity_bytes:
        raise InvalidParams(
            f"used must be within [0, capacity], got {params.used_bytes}/{params.capacity_bytes}")
    return (params.capacity_bytes - params.used_bytes) / params.capacity_bytes


def rank_candidates(db: GlobalViewDB, record: FileRecord) -> list[Name]:
    """Alive nodes able to take the file, best favor first, names breaking ties."""
    taken = set(record.on) | set(record.claims)
    candidates = [
        name for name in db.nodes
        if db.is_alive(name) and name not in taken
    ]
    candidates.sort(key=lambda n: (-compute_favor(db.nodes[n].favor_params), str(n)))
    return candidates


def rank_holders(db: GlobalViewDB, record: FileRecord) -> list[Name]:
    """Alive on-list members ordered like rank_candidates; fetch sources."""
    holders = [name for name in record.on if db.is_alive(name)]
    holders.sort(key=lambda n: (-compute_favor(db.nodes[n].favor_params), str(n)))
    return holders


def should_replicate(db: GlobalViewDB, record: FileRecord, self_name: Name,
                     deficit: int | None = None, min_favor: float = 0.0) -> bool:
    """True when this node is among the `deficit` highest-favor candidates."""
    if deficit is None:
        deficit = 0
        for name, _, short in db.under_replicated():
            if name == record.metadata.name:
                deficit = short
                break
    if deficit <= 0:
        return False
    ranked = rank_candidates(db, record)
    if min_favor > 0.0:
        ranked = [n for n in ranked if compute_favor(db.nodes[n].favor_params) >= min_favor]
    return self_name in ranked[:deficit]
