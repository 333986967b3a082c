"""Per-node segment store with reserved staging space and time-based GC.

Committed data may use at most capacity minus the reserved region; the
reserved region only ever holds in-flight ingestion staging. The optional
directory persistence layout is documented in docs/storage.md.
"""
from __future__ import annotations

import json
import urllib.parse
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

from .wire import FavorParams, FileMetadata, Name, digest_bytes


class ResourceLimit(Exception):
    """Not enough space; surfaces to clients as status 500."""


class DigestMismatch(Exception):
    pass


@dataclass
class _StoredFile:
    size: int
    segment_count: int
    digest: bytes
    last_access: float


class LocalStore:
    def __init__(self, capacity_bytes: int, reserved_bytes: Optional[int] = None):
        if capacity_bytes <= 0:
            raise ValueError("capacity must be positive")
        if reserved_bytes is None:
            reserved_bytes = capacity_bytes // 10
        if not 0 <= reserved_bytes < capacity_bytes:
            raise ValueError("reserved region must fit inside capacity")
        self.capacity_bytes = capacity_bytes
        self.reserved_bytes = reserved_bytes
        self.used_bytes = 0
        self.staged_bytes = 0
        self._segments: dict[tuple[Name, int], bytes] = {}
        self._files: dict[Name, _StoredFile] = {}

    # -- capacity ---------------------------------------------------------------

    @property
    def free_bytes(self) -> int:
        return self.capacity_bytes - self.reserved_bytes - self.used_bytes

    def favor_params(self) -> FavorParams:
        return FavorParams(self.capacity_bytes, self.used_bytes)

    def reserve(self, size: int) -> None:
        """Claim staging space in the reserved region for an in-flight ingestion."""
        if self.staged_bytes + size > self.reserved_bytes:
            raise ResourceLimit(
                f"staging {size} exceeds reserved region "
                f"({self.staged_bytes}/{self.reserved_bytes} in use)")
        self.staged_bytes += size

    def release(self, size: int) -> None:
        self.staged_bytes = max(0, self.staged_bytes - size)

    # -- files ------------------------------------------------------------------

    def put_file(self, meta: FileMetadata, segments: list[bytes], now: float) -> None:
        """Store all segments atomically; nothing changes on failure."""
        content_size = sum(len(s) for s in segments)
        if len(segments) != meta.segment_count or content_size != meta.size:
            raise ValueError(
                f"segments do not match metadata for {meta.name}: "
                f"{len(segments)} x {content_size} bytes")
        if digest_bytes(b"".join(segments)) != meta.digest:
            raise DigestMismatch(str(meta.name))
        if meta.name in self._files:
            return  # already held; keep the existing copy
        if self.used_bytes + meta.size > self.capacity_bytes - self.reserved_bytes:
            raise ResourceLimit(
                f"{meta.size} bytes do not fit "
                f"(used {self.used_bytes}, free {self.free_bytes})")
        for idx, segment in enumerate(segments):
            self._segments[(meta.name, idx)] = segment
        self._files[meta.name] = _StoredFile(meta.size, meta.segment_count, meta.digest, now)
        self.used_bytes += meta.size

    def has_file(self, name: Name) -> bool:
        return name in self._files

    def get_segment(self, name: Name, idx: int, now: float
                    ) -> Optional[tuple[bytes, int]]:
        """Return (segment bytes, final segment index), or None when absent."""
        entry = self._files.get(name)
        if entry is None or not 0 <= idx < entry.segment_count:
            return None
        entry.last_access = now
        return self._segments[(name, idx)], entry.segment_count - 1

    def read_file(self, name: Name, now: float) -> Optional[bytes]:
        entry = self._files.get(name)
        if entry is None:
            return None
        entry.last_access = now
        return b"".join(self._segments[(name, i)] for i in range(entry.segment_count))

    def remove_file(self, name: Name) -> bool:
        entry = self._files.pop(name, None)
        if entry is None:
            return False
        for idx in range(entry.segment_count):
            del self._segments[(name, idx)]
        self.used_bytes -= entry.size
        return True

    def file_names(self) -> list[Name]:
        return sorted(self._files, key=str)

    def held_files(self) -> list[tuple[Name, bytes]]:
        return [(name, self._files[name].digest) for name in self.file_names()]

    def digest_of(self, name: Name) -> Optional[bytes]:
        entry = self._files.get(name)
        return entry.digest if entry else None

    def last_access(self, name: Name) -> Optional[float]:
        entry = self._files.get(name)
        return entry.last_access if entry else None

    # -- garbage collection -------------------------------------------------------

    def expired(self, now: float, gc_ttl: float) -> list[Name]:
        return [
            name for name in self.file_names()
            if now - self._files[name].last_access > gc_ttl
        ]

    def gc_sweep(self, now: float, gc_ttl: float,
                 may_evict: Callable[[Name], bool]) -> list[Name]:
        """Evict files idle past the TTL where the policy callback allows it."""
        evicted = []
        for name in self.expired(now, gc_ttl):
            if may_evict(name):
                self.remove_file(name)
                evicted.append(name)
        return evicted

    # -- test support ----------------------------------------------------------------

    def verify_accounting(self) -> None:
        recomputed = sum(len(s) for s in self._segments.values())
        assert recomputed == self.used_bytes, (recomputed, self.used_bytes)
        assert self.used_bytes <= self.capacity_bytes - self.reserved_bytes
        assert 0 <= self.staged_bytes <= self.reserved_bytes

    # -- directory persistence ---------------------------------------------------------

    def save_dir(self, path: str | Path) -> None:
        root = Path(path)
        root.mkdir(parents=True, exist_ok=True)
        for name in self.file_names():
            entry = self._files[name]
            fdir = root / urllib.parse.quote(str(name), safe="")
            fdir.mkdir(exist_ok=True)
            (fdir / "meta.json").write_text(json.dumps({
                "size": entry.size,
                "segment_count": entry.segment_count,
                "digest": entry.digest.hex(),
                "last_access": entry.last_access,
            }, sort_keys=True))
            for idx in range(entry.segment_count):
                (fdir / f"{idx}.seg").write_bytes(self._segments[(name, idx)])

    def load_dir(self, path: str | Path) -> None:
        root = Path(path)
        if not root.exists():
            return
        for fdir in sorted(root.iterdir()):
            if not fdir.is_dir():
                continue
            name = Name.parse(urllib.parse.unquote(fdir.name))
            meta = json.loads((fdir / "meta.json").read_text())
            segments = [
                (fdir / f"{idx}.seg").read_bytes()
                for idx in range(meta["segment_count"])
            ]
            for idx, segment in enumerate(segments):
                self._segments[(name, idx)] = segment
            self._files[name] = _StoredFile(
                meta["size"], meta["segment_count"],
                bytes.fromhex(meta["digest"]), meta["last_access"])
            self.used_bytes += meta["size"]
