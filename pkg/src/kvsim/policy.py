"""Placement policies over the job queue and store state.

The queue-aware policy exploits the scheduler's knowledge of waiting jobs:
a prefetch window (sized by how many average items fit in free host memory)
promotes soon-needed items from disk, and an eviction window (sized by how
many fit in the whole hierarchy) protects queued jobs' items from eviction.
Victims are ranked never-queued first (first-in order), then jobs queued
beyond the window (latest queue position first), then windowed jobs from the
window tail inward.  LRU and FIFO baselines pick by recency and first
insertion and never prefetch.

Policies are pure decision functions over snapshots; the simulator applies
their decisions and charges transfer times.
"""

from __future__ import annotations

import enum
import itertools
import math
from collections import deque
from dataclasses import dataclass

from kvsim.store import KvItem, KvStore, Tier


class PolicyKind(enum.Enum):
    SCHEDULER_AWARE = "scheduler-aware"
    LRU = "lru"
    FIFO = "fifo"


class CapacityDeadlockError(RuntimeError):
    """No evictable item exists; the simulation cannot make progress."""


@dataclass(frozen=True)
class QueueEntry:
    session_id: str
    turn_index: int
    enqueue_time: float


class JobQueue:
    """Waiting jobs in FIFO order; the source of look-ahead hints.

    Positions are tracked with absolute sequence numbers so lookups stay O(1)
    even when the queue runs thousands deep.  A session has at most one
    waiting job at a time.
    """

    def __init__(self):
        self._entries: deque[QueueEntry] = deque()
        self._abs: dict[str, int] = {}
        self._head_abs = 0
        self._next_abs = 0

    def push(self, session_id: str, turn_index: int, enqueue_time: float) -> None:
        if self._entries and enqueue_time < self._entries[-1].enqueue_time:
            raise ValueError("queue entries must be pushed in time order")
        if session_id in self._abs:
            raise ValueError(f"session {session_id!r} already queued")
        self._entries.append(QueueEntry(session_id, turn_index, enqueue_time))
        self._abs[session_id] = self._next_abs
        self._next_abs += 1

    def pop(self) -> QueueEntry:
        entry = self._entries.popleft()
        del self._abs[entry.session_id]
        self._head_abs += 1
        return entry

    def head(self) -> QueueEntry | None:
        return self._entries[0] if self._entries else None

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def entries(self) -> list[QueueEntry]:
        return list(self._entries)

    def position_of(self, session_id: str) -> int | None:
        """0-based distance from the queue head, or None if not queued."""
        abs_pos = self._abs.get(session_id)
        return None if abs_pos is None else abs_pos - self._head_abs

    def window(self, length: int):
        return itertools.islice(self._entries, max(0, length))


@dataclass
class PolicyConfig:
    """Policy kind plus optional window overrides.

    When a window is None it is derived from capacities and the running
    average item size: prefetch = free_memory / avg_item, eviction =
    (memory + disk) / avg_item.
    """

    kind: PolicyKind = PolicyKind.SCHEDULER_AWARE
    prefetch_window: int | None = None
    eviction_window: int | None = None

    def resolved_prefetch_window(self, store: KvStore) -> int:
        if self.prefetch_window is not None:
            return self.prefetch_window
        avg = store.avg_item_bytes()
        if avg <= 0:
            return 0
        return int(store.mem_capacity // avg)

    def resolved_eviction_window(self, store: KvStore) -> int:
        if self.eviction_window is not None:
            return self.eviction_window
        avg = store.avg_item_bytes()
        if avg <= 0:
            return 0
        return int((store.mem_capacity + store.disk_capacity) // avg)


def plan_prefetch(queue: JobQueue, store: KvStore, cfg: PolicyConfig, *,
                  now: float = math.inf,
                  exclude: frozenset[str] | set[str] = frozenset()) -> list[str]:
    """Sessions to promote disk->memory for jobs inside the prefetch window.

    Scans the window in queue order and stops charging once the cumulative
    block footprint would no longer fit in free memory.  Baseline policies
    never prefetch.
    """
    if cfg.kind is not PolicyKind.SCHEDULER_AWARE:
        return []
    window = cfg.resolved_prefetch_window(store)
    budget = store.mem_free
    picks: list[str] = []
    seen: set[str] = set()
    for entry in queue.window(window):
        sid = entry.session_id
        if sid in exclude or sid in seen:
            continue
        seen.add(sid)
        item = store.peek(sid)
        if item is None or item.tier is not Tier.DISK or item.expired(now):
            continue
        blocks = store.charge(item.bytes)
        if blocks > budget:
            continue
        budget -= blocks
        picks.append(sid)
    return picks


def _baseline_key(item: KvItem, kind: PolicyKind):
    if kind is PolicyKind.LRU:
        return (item.last_access, item.seq)
    return (item.seq,)


def _scheduler_key(item: KvItem, queue: JobQueue, window: int):
    """Most-evictable-first ordering for the queue-aware policy.

    Never-queued items go first, coldest first (no scheduler hint exists for
    them, so recency is the best signal); items queued beyond the window
    follow, latest queue position first; windowed items are last resorts
    picked from the window tail, larger item first on equal position.
    """
    pos = queue.position_of(item.session_id)
    if pos is None:
        return (0, item.last_access, item.seq, 0.0)
    if pos >= window:
        return (1, -pos, 0.0, -item.bytes)
    return (2, -pos, 0.0, -item.bytes)


def _select_victim(candidates: list[KvItem], queue: JobQueue, cfg: PolicyConfig,
                   store: KvStore, what: str) -> str:
    if not candidates:
        raise CapacityDeadlockError(f"no evictable item for {what}")
    if cfg.kind is not PolicyKind.SCHEDULER_AWARE:
        victim = min(candidates, key=lambda i: _baseline_key(i, cfg.kind))
        return victim.session_id
    window = cfg.resolved_eviction_window(store)
    if window <= 0:
        # Degenerate window: queue hints are unusable; fall back to FIFO.
        victim = min(candidates, key=lambda i: (i.seq,))
        return victim.session_id
    victim = min(candidates, key=lambda i: _scheduler_key(i, queue, window))
    return victim.session_id


def select_evict_to_disk(queue: JobQueue, store: KvStore, cfg: PolicyConfig) -> str:
    """Pick the memory-resident item to demote when memory runs low."""
    candidates = [i for i in store.memory_items() if i.session_id not in store.pinned]
    return _select_victim(candidates, queue, cfg, store, "memory eviction")


def select_evict_out(queue: JobQueue, store: KvStore, cfg: PolicyConfig) -> str:
    """Pick the disk-resident item to drop when the disk runs low.

    Items whose jobs sit inside the eviction window are exempt while any
    other candidate exists.
    """
    candidates = [i for i in store.disk_items() if i.session_id not in store.pinned]
    return _select_victim(candidates, queue, cfg, store, "disk eviction")
