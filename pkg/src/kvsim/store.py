"""Tiered session-granularity KV store.

Items live in host memory or on disk, one per conversation session; a
session's cache is fetched and evicted as a unit.  Capacities are managed in
fixed-size blocks, so every item is charged a whole number of blocks and the
difference shows up as internal fragmentation.  Expiry is lazy (checked on
lookup) plus an explicit sweep hook the simulator calls periodically.

The store itself never chooses eviction victims; callers install an evictor
callback that frees memory (using whatever placement policy they like)
before a placement would overflow.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from typing import Callable, Iterator

from kvsim.model import ModelProfile, TierConfig, kv_size

DEFAULT_BLOCK_BYTES = 64_000_000


class Tier(enum.Enum):
    MEMORY = "memory"
    DISK = "disk"


class HitClass(enum.Enum):
    MEMORY_HIT = "memory_hit"
    DISK_HIT = "disk_hit"
    MISS = "miss"


class CapacityError(RuntimeError):
    """A placement violated tier capacity; indicates a policy bug or deadlock."""


class StoreSizeError(RuntimeError):
    """An item cannot fit in the whole hierarchy; caller falls back to recompute."""


class ItemNotFoundError(KeyError):
    pass


@dataclass
class KvItem:
    """One session's cached KV: token count, bytes, placement, freshness.

    `seq` records first-insertion order and survives replacement saves, so
    FIFO eviction ranks sessions by when they first entered the cache.
    """

    session_id: str
    tokens: int
    bytes: float
    tier: Tier
    decoupled: bool
    last_access: float
    ttl: float
    seq: int = 0

    def expired(self, now: float) -> bool:
        return now - self.last_access > self.ttl


class KvStore:
    """Hierarchical KV cache over host memory and disk."""

    def __init__(self, profile: ModelProfile, tiers: TierConfig, *,
                 block_bytes: int = DEFAULT_BLOCK_BYTES,
                 ttl: float = math.inf,
                 evictor: Callable[[int], None] | None = None):
        if block_bytes < 1:
            raise ValueError("block_bytes must be >= 1")
        self.profile = profile
        self.block_bytes = block_bytes
        self.mem_capacity = tiers.dram_capacity
        self.disk_capacity = tiers.disk_capacity
        self.default_ttl = ttl
        self.evictor = evictor
        self.items: dict[str, KvItem] = {}
        self.mem_used = 0       # block-granular bytes
        self.disk_used = 0
        self.mem_used_raw = 0.0
        self.disk_used_raw = 0.0
        self.mem_buffer_reserve = 0
        self._ops_since_refresh = 0
        self._avg_item_bytes = 0.0
        self._next_seq = 0
        # Sessions whose items must not be evicted (jobs currently executing).
        self.pinned: set[str] = set()

    # -- accounting helpers -------------------------------------------------

    def charge(self, nbytes: float) -> int:
        """Block-granular footprint of an item of `nbytes`."""
        return int(math.ceil(nbytes / self.block_bytes)) * self.block_bytes

    @property
    def mem_free(self) -> int:
        return self.mem_capacity - self.mem_used

    @property
    def disk_free(self) -> int:
        return self.disk_capacity - self.disk_used

    def avg_item_bytes(self) -> float:
        """Running mean item size (the S_kv estimator), refreshed lazily."""
        if self._ops_since_refresh >= 100 or self._avg_item_bytes == 0.0:
            self._refresh_estimates()
        return self._avg_item_bytes

    def _refresh_estimates(self) -> None:
        self._ops_since_refresh = 0
        if self.items:
            self._avg_item_bytes = (
                sum(i.bytes for i in self.items.values()) / len(self.items))
        if self._avg_item_bytes > 0:
            self.mem_buffer_reserve = min(
                self.mem_capacity // 2, 2 * self.charge(self._avg_item_bytes))

    def _tick(self) -> None:
        self._ops_since_refresh += 1

    def fragmentation(self) -> float:
        used = self.mem_used + self.disk_used
        raw = self.mem_used_raw + self.disk_used_raw
        return (used - raw) / used if used else 0.0

    # -- mutations ----------------------------------------------------------

    def _place(self, item: KvItem) -> None:
        blocks = self.charge(item.bytes)
        if item.tier is Tier.MEMORY:
            if self.mem_used + blocks > self.mem_capacity:
                raise CapacityError(
                    f"memory overflow placing {item.session_id}: "
                    f"{self.mem_used + blocks} > {self.mem_capacity}")
            self.mem_used += blocks
            self.mem_used_raw += item.bytes
        else:
            if self.disk_used + blocks > self.disk_capacity:
                raise CapacityError(
                    f"disk overflow placing {item.session_id}: "
                    f"{self.disk_used + blocks} > {self.disk_capacity}")
            self.disk_used += blocks
            self.disk_used_raw += item.bytes
        self.items[item.session_id] = item

    def _unplace(self, item: KvItem) -> None:
        blocks = self.charge(item.bytes)
        if item.tier is Tier.MEMORY:
            self.mem_used -= blocks
            self.mem_used_raw -= item.bytes
        else:
            self.disk_used -= blocks
            self.disk_used_raw -= item.bytes
        del self.items[item.session_id]

    def save(self, session_id: str, tokens: int, now: float, *,
             decoupled: bool = True) -> KvItem | None:
        """Write (or replace) a session's KV into the memory tier.

        Triggers the installed evictor if the placement would cut into the
        memory buffer reserve.  Returns None when the item cannot fit in the
        hierarchy at all (the session falls back to recomputation).
        """
        if tokens < 1:
            raise ValueError("tokens must be >= 1")
        nbytes = kv_size(tokens, self.profile)
        blocks = self.charge(nbytes)
        if blocks > self.mem_capacity + self.disk_capacity:
            raise StoreSizeError(
                f"item of {blocks} block bytes exceeds total capacity")
        old = self.items.get(session_id)
        seq = old.seq if old is not None else self._next_seq
        if old is None:
            self._next_seq += 1
        else:
            self._unplace(old)
        if blocks > self.mem_capacity:
            # Too big for memory outright; fall through to disk placement.
            item = KvItem(session_id, tokens, nbytes, Tier.DISK, decoupled,
                          now, self.default_ttl, seq)
            self._ensure_disk_space(blocks)
            self._place(item)
            self._tick()
            return item
        target_free = blocks + self.mem_buffer_reserve
        if self.mem_free < target_free and self.evictor is not None:
            self.evictor(target_free - self.mem_free)
        if self.mem_free < blocks:
            if self.evictor is not None:
                raise CapacityError(
                    f"evictor failed to free memory for {session_id}")
            raise CapacityError(f"memory full saving {session_id}")
        item = KvItem(session_id, tokens, nbytes, Tier.MEMORY, decoupled,
                      now, self.default_ttl, seq)
        self._place(item)
        self._tick()
        return item

    def _ensure_disk_space(self, blocks: int) -> None:
        if self.disk_free < blocks:
            raise CapacityError("disk full and no disk-side evictor")

    def lookup(self, session_id: str, now: float) -> HitClass:
        """Classify an access; expired items are removed on the way."""
        item = self.items.get(session_id)
        if item is None:
            return HitClass.MISS
        if item.expired(now):
            self._unplace(item)
            self._tick()
            return HitClass.MISS
        item.last_access = now
        self._tick()
        return HitClass.MEMORY_HIT if item.tier is Tier.MEMORY else HitClass.DISK_HIT

    def peek(self, session_id: str) -> KvItem | None:
        """Non-mutating view used by placement policies."""
        return self.items.get(session_id)

    def move(self, session_id: str, to_tier: Tier) -> float:
        """Retier an item; returns bytes moved so callers can charge the link."""
        item = self.items.get(session_id)
        if item is None:
            raise ItemNotFoundError(session_id)
        if item.tier is to_tier:
            return 0.0
        self._unplace(item)
        item.tier = to_tier
        try:
            self._place(item)
        except CapacityError:
            item.tier = Tier.DISK if to_tier is Tier.MEMORY else Tier.MEMORY
            self._place(item)
            raise
        self._tick()
        return item.bytes

    def remove(self, session_id: str) -> KvItem:
        """Drop an item from the hierarchy entirely (eviction out)."""
        item = self.items.get(session_id)
        if item is None:
            raise ItemNotFoundError(session_id)
        self._unplace(item)
        self._tick()
        return item

    def truncate_item(self, session_id: str, keep_tokens: int, now: float) -> KvItem | None:
        """Shrink an item to its most recent `keep_tokens` tokens.

        Decoupled items stay valid; coupled items are invalidated (removed)
        because their baked-in positions no longer match, and None is
        returned.
        """
        item = self.items.get(session_id)
        if item is None:
            raise ItemNotFoundError(session_id)
        if keep_tokens > item.tokens:
            raise ValueError(
                f"keep_tokens {keep_tokens} > item tokens {item.tokens}")
        if not item.decoupled:
            self._unplace(item)
            self._tick()
            return None
        if keep_tokens == item.tokens:
            return item
        if keep_tokens < 1:
            self._unplace(item)
            self._tick()
            return None
        self._unplace(item)
        item.tokens = keep_tokens
        item.bytes = kv_size(keep_tokens, self.profile)
        item.last_access = now
        self._place(item)
        self._tick()
        return item

    def sweep_expired(self, now: float) -> list[str]:
        """Drop all expired items; returns their session ids."""
        dead = [sid for sid, item in self.items.items() if item.expired(now)]
        for sid in dead:
            self._unplace(self.items[sid])
        if dead:
            self._tick()
        return dead

    # -- views --------------------------------------------------------------

    def memory_items(self) -> Iterator[KvItem]:
        return (i for i in self.items.values() if i.tier is Tier.MEMORY)

    def disk_items(self) -> Iterator[KvItem]:
        return (i for i in self.items.values() if i.tier is Tier.DISK)

    def check_invariants(self) -> None:
        """Recount everything from scratch; raises AssertionError on drift."""
        mem = disk = 0
        mem_raw = disk_raw = 0.0
        for item in self.items.values():
            blocks = self.charge(item.bytes)
            if item.tier is Tier.MEMORY:
                mem += blocks
                mem_raw += item.bytes
            else:
                disk += blocks
                disk_raw += item.bytes
        assert mem == self.mem_used, (mem, self.mem_used)
        assert disk == self.disk_used, (disk, self.disk_used)
        assert abs(mem_raw - self.mem_used_raw) < 1e-6
        assert abs(disk_raw - self.disk_used_raw) < 1e-6
        assert self.mem_used <= self.mem_capacity
        assert self.disk_used <= self.disk_capacity

    def dump_state(self) -> str:
        """JSON snapshot for debugging and golden tests."""
        state = {
            "mem_used": self.mem_used,
            "disk_used": self.disk_used,
            "mem_buffer_reserve": self.mem_buffer_reserve,
            "fragmentation": self.fragmentation(),
            "items": {
                sid: {
                    "tokens": item.tokens,
                    "bytes": item.bytes,
                    "tier": item.tier.value,
                    "decoupled": item.decoupled,
                    "last_access": item.last_access,
                    "ttl": item.ttl if math.isfinite(item.ttl) else None,
                }
                for sid, item in sorted(self.items.items())
            },
        }
        return json.dumps(state, indent=2, sort_keys=True)
