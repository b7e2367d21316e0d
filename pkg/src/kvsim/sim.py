"""Discrete-event simulation of a serving engine over a tiered KV cache.

One logical engine prefills jobs serially and decodes them as a continuously
batched group: a tick advances every active decode job by one token, and an
admitted job's prefill blocks ticking for its duration (shorter prefills
block decoding less).  Multi-GPU parallelism is folded into the profile's
calibrated per-token constants rather than modeled structurally.

Decode completions are computed analytically and shifted whenever a prefill
intervenes, instead of simulating millions of per-step events, so event
counts stay proportional to turn counts.

Modes:

* ``recompute``            -- no cache; every turn prefills its whole prompt.
* ``reuse``                -- the full system: tiered store, overlap planning,
                              placement policy, truncation-safe (decoupled)
                              cache entries.
* ``coupled-truncation``   -- cache entries keep positions baked in, so any
                              context-window truncation invalidates them.
* ``stale-truncation``     -- truncation keeps entries (timing equals reuse);
                              the output corruption it causes is demonstrated
                              by the rotary kernel, not modeled here.
* ``hbm-only``/``hbm-dram``-- the cache is confined to a small HBM slice
                              (optionally plus host memory), with no disk.

Determinism: identical (workload, config) inputs produce identical event
logs; simultaneous events process in (time, kind rank, session_id, turn)
order.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

from kvsim.model import ModelProfile, TierConfig, kv_size
from kvsim.overlap import plan_async_save, plan_preload
from kvsim.policy import (CapacityDeadlockError, JobQueue, PolicyConfig,
                          PolicyKind, plan_prefetch, select_evict_out,
                          select_evict_to_disk)
from kvsim.store import (DEFAULT_BLOCK_BYTES, HitClass, KvStore,
                         StoreSizeError, Tier)
from kvsim.trace import Workload


class SimulationError(RuntimeError):
    """The run cannot make progress (e.g. capacity deadlock)."""


class Mode(enum.Enum):
    RECOMPUTE = "recompute"
    REUSE = "reuse"
    COUPLED_TRUNCATION = "coupled-truncation"
    STALE_TRUNCATION = "stale-truncation"
    HBM_ONLY = "hbm-only"
    HBM_DRAM = "hbm-dram"


_CACHING_MODES = {Mode.REUSE, Mode.COUPLED_TRUNCATION, Mode.STALE_TRUNCATION,
                  Mode.HBM_ONLY, Mode.HBM_DRAM}


class EventKind(enum.Enum):
    # Enum value doubles as the deterministic tie rank.
    TTL_SWEEP = 0
    PREFETCH_DONE = 1
    EVICT_DONE = 2
    PREFILL_DONE = 3
    DECODE_STEP = 4   # engine-continuation kick (decode ticks are aggregated)
    JOB_DONE = 5
    ARRIVAL = 6


@dataclass
class SimConfig:
    profile: ModelProfile
    tiers: TierConfig = field(default_factory=TierConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    batch_size: int = 24
    mode: Mode = Mode.REUSE
    ttl: float = 3600.0
    warmup_turns: int = 0
    block_bytes: int = DEFAULT_BLOCK_BYTES
    hbm_cache_bytes: int = 10_000_000_000
    ttl_sweep_interval: float = 60.0
    link_contention: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.ttl <= 0:
            raise ValueError("ttl must be positive")

    def effective_tiers(self) -> TierConfig:
        """Apply the mode's storage shape (HBM-confined caches have no disk)."""
        if self.mode is Mode.HBM_ONLY:
            return replace(self.tiers, dram_capacity=self.hbm_cache_bytes,
                           disk_capacity=0)
        if self.mode is Mode.HBM_DRAM:
            return replace(self.tiers,
                           dram_capacity=self.hbm_cache_bytes + self.tiers.dram_capacity,
                           disk_capacity=0)
        return self.tiers

    def load_bandwidth(self) -> float:
        """Bandwidth for memory-tier cache loads into the execution buffer."""
        if self.mode is Mode.HBM_ONLY:
            return 1e15  # HBM-internal copy; effectively free
        b = self.tiers.pcie_bandwidth
        return b / 2 if self.link_contention else b

    def save_bandwidth(self) -> float:
        b = self.tiers.pcie_bandwidth
        return b / 2 if self.link_contention else b

    def to_dict(self) -> dict:
        return {
            "profile": self.profile.name,
            "mode": self.mode.value,
            "policy": self.policy.kind.value,
            "batch_size": self.batch_size,
            "ttl": self.ttl,
            "warmup_turns": self.warmup_turns,
            "dram": self.tiers.dram_capacity,
            "disk": self.tiers.disk_capacity,
            "read_buffer": self.tiers.hbm_read_buffer,
            "write_buffer": self.tiers.hbm_write_buffer,
            "block_bytes": self.block_bytes,
            "link_contention": self.link_contention,
        }


@dataclass
class Event:
    time: float
    kind: EventKind
    session_id: str
    turn_index: int
    data: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"time": self.time, "kind": self.kind.name.lower(),
                "session": self.session_id, "turn": self.turn_index,
                **self.data}


@dataclass
class TurnRecord:
    """Per-turn outcome row; the unit the metrics layer aggregates."""

    arrival: float
    session_id: str
    turn_index: int
    mode: str
    hit_class: str
    is_first_turn: bool
    warmup: bool
    ttft_s: float = math.nan
    stall_s: float = 0.0
    prefill_s: float = 0.0
    decode_s: float = 0.0
    done: float = math.nan
    prompt_tokens: int = 0
    new_tokens: int = 0
    output_tokens: int = 0
    bytes_loaded: float = 0.0
    bytes_saved: float = 0.0
    bytes_evicted: float = 0.0
    overflowed: bool = False

    CSV_COLUMNS = ("time", "session", "turn", "mode", "hit_class", "ttft_s",
                   "stall_s", "bytes_loaded", "bytes_saved", "bytes_evicted")

    def csv_row(self) -> str:
        return ",".join([
            f"{self.arrival:.6f}", self.session_id, str(self.turn_index),
            self.mode, self.hit_class, f"{self.ttft_s:.6f}",
            f"{self.stall_s:.6f}", f"{self.bytes_loaded:.0f}",
            f"{self.bytes_saved:.0f}", f"{self.bytes_evicted:.0f}",
        ])


@dataclass
class EventLog:
    turns: list[TurnRecord]
    events: list[Event]
    meta: dict

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"meta": self.meta}, sort_keys=True) + "\n")
            for ev in self.events:
                fh.write(json.dumps(ev.to_dict(), sort_keys=True) + "\n")

    def write_turn_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(TurnRecord.CSV_COLUMNS) + "\n")
            for row in self.turns:
                fh.write(row.csv_row() + "\n")

    @property
    def complete(self) -> bool:
        return all(not math.isnan(t.done) for t in self.turns)


def continuous_batching_step(active_batch: int, waiting_jobs: int,
                             batch_size: int, prefill_busy: bool) -> bool:
    """Whether the head-of-queue job may be admitted for prefill now.

    A newly admitted job must finish prefilling before joining the decode
    group, and its prefill blocks in-flight decoding; admission needs a free
    batch slot and an idle prefill stream.
    """
    if waiting_jobs < 1 or prefill_busy:
        return False
    return active_batch < batch_size


@dataclass
class _SessionState:
    context_tokens: int = 0  # conversation context after truncations


@dataclass
class _ActiveJob:
    session_id: str
    turn_index: int
    record: TurnRecord
    decode_steps: int = 0
    decode_done_at: float = 0.0
    version: int = 0


class _Engine:
    def __init__(self, workload: Workload, cfg: SimConfig):
        self.workload = workload
        self.cfg = cfg
        self.profile = cfg.profile
        self.caching = cfg.mode in _CACHING_MODES
        self.now = 0.0
        self.heap: list = []
        self._counter = itertools.count()
        self.queue = JobQueue()
        self.sessions = {s.session_id: s for s in workload.sessions}
        self.state: dict[str, _SessionState] = {
            s.session_id: _SessionState() for s in workload.sessions}
        self.decode_jobs: dict[str, _ActiveJob] = {}
        self.prefilling: _ActiveJob | None = None
        self.prefill_free_at = 0.0
        self._kick_scheduled = False
        self.disk_link_free_at = 0.0
        self.prefetch_in_flight: set[str] = set()
        self.turns: list[TurnRecord] = []
        self.events: list[Event] = []
        self.turn_counter = 0
        self.engine_prefill_busy = 0.0
        self.engine_decode_busy = 0.0
        self.engine_save_overrun = 0.0
        self.total_bytes_evicted = 0.0
        self.evict_out_count = 0
        self.evict_disk_count = 0
        self.next_sweep = cfg.ttl_sweep_interval
        self._decode_anchor = 0.0

        self.store: KvStore | None = None
        if self.caching:
            self.store = KvStore(self.profile, cfg.effective_tiers(),
                                 block_bytes=cfg.block_bytes, ttl=cfg.ttl,
                                 evictor=self._make_room)

    # -- event plumbing ------------------------------------------------------

    def push(self, time: float, kind: EventKind, sid: str, turn: int,
             data: dict | None = None) -> None:
        heapq.heappush(self.heap, (time, kind.value, sid, turn,
                                   next(self._counter), data or {}))

    def log(self, kind: EventKind, sid: str, turn: int, **data) -> None:
        self.events.append(Event(self.now, kind, sid, turn, data))

    def _kick_at(self, time: float) -> None:
        if not self._kick_scheduled:
            self._kick_scheduled = True
            self.push(time, EventKind.DECODE_STEP, "", -1)

    # -- capacity management ---------------------------------------------------

    def _evict_out(self, sid: str) -> None:
        dropped = self.store.remove(sid)
        self.log(EventKind.EVICT_DONE, sid, -1, action="evict_out",
                 bytes=dropped.bytes)
        self.evict_out_count += 1

    def _make_room(self, needed_bytes: float) -> None:
        """Demote memory items (dropping disk items as needed) to free space."""
        store = self.store
        freed = 0.0
        guard = len(store.items) + 8
        while freed < needed_bytes:
            guard -= 1
            if guard < 0:
                raise CapacityDeadlockError("eviction loop made no progress")
            victim = select_evict_to_disk(self.queue, store, self.cfg.policy)
            blocks = store.charge(store.peek(victim).bytes)
            if store.disk_capacity == 0:
                dropped = store.remove(victim)
                self.log(EventKind.EVICT_DONE, victim, -1, action="evict_out",
                         bytes=dropped.bytes)
                self.evict_out_count += 1
                self.total_bytes_evicted += dropped.bytes
                freed += blocks
                continue
            while store.disk_free < blocks:
                self._evict_out(select_evict_out(self.queue, store, self.cfg.policy))
            moved = store.move(victim, Tier.DISK)
            self.log(EventKind.EVICT_DONE, victim, -1, action="evict_to_disk",
                     bytes=moved)
            self.evict_disk_count += 1
            self.total_bytes_evicted += moved
            freed += blocks

    # -- prefetching -------------------------------------------------------------

    def _maybe_prefetch(self) -> None:
        if (self.store is None
                or self.cfg.policy.kind is not PolicyKind.SCHEDULER_AWARE
                or self.disk_link_free_at > self.now):
            return
        picks = plan_prefetch(self.queue, self.store, self.cfg.policy,
                              now=self.now, exclude=self.prefetch_in_flight)
        link_free = max(self.disk_link_free_at, self.now)
        for sid in picks:
            item = self.store.peek(sid)
            if item is None or item.tier is not Tier.DISK:
                continue
            # Transfers queue back-to-back on the serial disk link.
            link_free += item.bytes / self.cfg.tiers.disk_bandwidth
            self.prefetch_in_flight.add(sid)
            self.push(link_free, EventKind.PREFETCH_DONE, sid, -1,
                      {"bytes": item.bytes})
        self.disk_link_free_at = link_free

    def _on_prefetch_done(self, sid: str) -> None:
        self.prefetch_in_flight.discard(sid)
        item = self.store.peek(sid) if self.store else None
        if item is not None and item.tier is Tier.DISK:
            blocks = self.store.charge(item.bytes)
            try:
                # Restore the staging reserve as well so upcoming fetches
                # never stall on a full memory tier.
                target = blocks + self.store.mem_buffer_reserve
                if self.store.mem_free < target:
                    self._make_room(target - self.store.mem_free)
                self.store.move(sid, Tier.MEMORY)
                self.log(EventKind.PREFETCH_DONE, sid, -1, bytes=item.bytes)
            except CapacityDeadlockError:
                # Nothing evictable right now; leave the item on disk.
                pass
        self._maybe_prefetch()
        self._dispatch()

    # -- decode group bookkeeping -------------------------------------------------

    def _decode_accounting(self) -> None:
        if self.decode_jobs and self.now > self._decode_anchor:
            self.engine_decode_busy += self.now - self._decode_anchor
        self._decode_anchor = max(self._decode_anchor, self.now)

    def _pause_decode(self, duration: float) -> None:
        """A prefill of `duration` delays every in-flight decode completion."""
        if duration <= 0 or not self.decode_jobs:
            return
        for job in self.decode_jobs.values():
            job.decode_done_at += duration
            job.version += 1
            self.push(job.decode_done_at, EventKind.JOB_DONE, job.session_id,
                      job.turn_index, {"version": job.version})

    # -- job lifecycle --------------------------------------------------------------

    def _prefill_stream_busy(self) -> bool:
        return self.prefilling is not None or self.prefill_free_at > self.now

    def _dispatch(self) -> None:
        while continuous_batching_step(
                len(self.decode_jobs) + (1 if self.prefilling else 0),
                len(self.queue), self.cfg.batch_size,
                self._prefill_stream_busy()):
            head = self.queue.head()
            if head.session_id in self.prefetch_in_flight:
                # The head job's cache is already on the wire; serving it
                # from the landing buffer beats restarting the read from
                # disk, so hold admission until the transfer completes.
                break
            entry = self.queue.pop()
            self._start_job(entry.session_id, entry.turn_index,
                            entry.enqueue_time)
        if (self.queue and self.prefilling is None
                and self.prefill_free_at > self.now):
            self._kick_at(self.prefill_free_at)

    def _start_job(self, sid: str, turn_index: int, enqueued: float) -> None:
        turn = self.sessions[sid].turns[turn_index]
        st = self.state[sid]
        cfg = self.cfg
        profile = self.profile

        hist = st.context_tokens
        new = turn.new_input_tokens
        overflowed = False
        if hist + new > profile.context_window:
            overflowed = True
            hist = self._handle_overflow(sid, hist, new)
        prompt_tokens = hist + new

        hit = HitClass.MISS
        if self.store is not None and turn_index > 0:
            hit = self.store.lookup(sid, self.now)
            if hit is not HitClass.MISS and self.store.peek(sid).tokens != hist:
                # Cache out of step with the conversation (e.g. a skipped
                # fallback save); treat as a miss.
                self.store.remove(sid)
                hit = HitClass.MISS

        wait = max(0.0, self.now - enqueued)
        if hit is HitClass.MISS or hist == 0:
            hit = HitClass.MISS
            plan = plan_preload(0, prompt_tokens, profile, cfg.tiers, 0.0, False)
            bytes_loaded = 0.0
        else:
            bandwidth = (cfg.load_bandwidth() if hit is HitClass.MEMORY_HIT
                         else cfg.tiers.disk_bandwidth)
            read_buffer = min(cfg.tiers.hbm_read_buffer, bandwidth * wait)
            plan = plan_preload(hist, new, profile, cfg.tiers, read_buffer,
                                prev_job_running=wait > 0, bandwidth=bandwidth)
            bytes_loaded = kv_size(hist, profile)

        record = TurnRecord(
            arrival=enqueued, session_id=sid, turn_index=turn_index,
            mode=cfg.mode.value, hit_class=hit.value,
            is_first_turn=turn_index == 0,
            warmup=self.turn_counter < cfg.warmup_turns,
            stall_s=plan.stall_total, prefill_s=plan.makespan,
            prompt_tokens=prompt_tokens, new_tokens=new,
            output_tokens=turn.output_tokens, bytes_loaded=bytes_loaded,
            overflowed=overflowed,
        )
        self.turn_counter += 1
        self.turns.append(record)

        job = _ActiveJob(sid, turn_index, record)
        if self.store is not None:
            self.store.pinned.add(sid)
        self.prefilling = job
        self.engine_prefill_busy += plan.makespan
        self._decode_accounting()
        self._pause_decode(plan.makespan)
        self._decode_anchor = max(self._decode_anchor, self.now + plan.makespan)
        self.push(self.now + plan.makespan, EventKind.PREFILL_DONE, sid,
                  turn_index)

    def _handle_overflow(self, sid: str, hist: int, new: int) -> int:
        """Token truncation on context-window overflow; returns kept history."""
        profile = self.profile
        cut = max(1, int(profile.truncation_ratio * profile.context_window))
        kept = hist
        while kept + new > profile.context_window and kept > 0:
            kept = max(0, kept - cut)
        if self.store is not None and self.store.peek(sid) is not None:
            if kept == 0:
                self.store.remove(sid)
            else:
                # Decoupled items shrink and stay valid; coupled items are
                # invalidated by the store.
                self.store.truncate_item(sid, kept, self.now)
        self.state[sid].context_tokens = kept
        return kept

    def _on_prefill_done(self, sid: str, turn_index: int) -> None:
        job = self.prefilling
        assert job is not None and job.session_id == sid
        self.prefilling = None
        job.record.ttft_s = self.now - job.record.arrival

        job.decode_steps = max(0, job.record.output_tokens - 1)
        decode_duration = job.decode_steps * self.profile.decode_seconds_per_step
        job.record.decode_s = decode_duration
        if job.decode_steps > 0:
            if not self.decode_jobs:
                self._decode_anchor = self.now
            job.decode_done_at = self.now + decode_duration
            job.version += 1
            self.decode_jobs[sid] = job
            self.push(job.decode_done_at, EventKind.JOB_DONE, sid, turn_index,
                      {"version": job.version})
        else:
            self._finish_job(job)
        self._dispatch()
        self._maybe_prefetch()

    def _on_job_done(self, sid: str, turn_index: int, data: dict) -> None:
        job = self.decode_jobs.get(sid)
        if job is None or job.turn_index != turn_index:
            return
        if data.get("version") != job.version:
            return  # superseded by a prefill-induced reschedule
        self._decode_accounting()
        del self.decode_jobs[sid]
        self._finish_job(job)
        self._dispatch()
        self._maybe_prefetch()

    def _finish_job(self, job: _ActiveJob) -> None:
        sid = job.session_id
        record = job.record
        record.done = self.now
        session = self.sessions[sid]
        turn = session.turns[job.turn_index]
        st = self.state[sid]
        cfg = self.cfg

        raw_context = st.context_tokens + turn.new_input_tokens + turn.output_tokens
        st.context_tokens = self._truncate_tokens(raw_context)
        truncated_at_save = st.context_tokens < raw_context

        if self.store is not None:
            computed = (record.prompt_tokens if record.hit_class == "miss"
                        else record.new_tokens)
            save_plan = plan_async_save(computed, job.decode_steps,
                                        self.profile, cfg.tiers,
                                        cfg.tiers.hbm_write_buffer,
                                        bandwidth=cfg.save_bandwidth())
            if save_plan.stall_total > 0:
                self.engine_save_overrun += save_plan.stall_total
                self.prefill_free_at = max(self.prefill_free_at,
                                           self.now + save_plan.stall_total)
            decoupled = cfg.mode is not Mode.COUPLED_TRUNCATION
            evicted_before = self.total_bytes_evicted
            try:
                if truncated_at_save and not decoupled:
                    # Save-time truncation invalidates a coupled cache; skip
                    # the save so the next turn recomputes.
                    if self.store.peek(sid) is not None:
                        self.store.remove(sid)
                else:
                    self.store.save(sid, st.context_tokens, self.now,
                                    decoupled=decoupled)
                    record.bytes_saved = kv_size(
                        computed + turn.output_tokens, self.profile)
            except StoreSizeError:
                pass  # nothing stored; the session recomputes next turn
            except CapacityDeadlockError as exc:
                raise SimulationError(
                    f"capacity deadlock saving {sid}: {exc}; queue depth "
                    f"{len(self.queue)}, mem {self.store.mem_used}/"
                    f"{self.store.mem_capacity}, disk {self.store.disk_used}/"
                    f"{self.store.disk_capacity}") from exc
            record.bytes_evicted = self.total_bytes_evicted - evicted_before
            self.store.pinned.discard(sid)

        self.log(EventKind.JOB_DONE, sid, job.turn_index,
                 ttft=record.ttft_s, hit=record.hit_class)

        next_turn = job.turn_index + 1
        if next_turn < len(session.turns):
            gap = (session.arrival_times[next_turn]
                   - session.arrival_times[job.turn_index])
            self.push(self.now + gap, EventKind.ARRIVAL, sid, next_turn)

    def _truncate_tokens(self, tokens: int) -> int:
        w = self.profile.context_window
        cut = max(1, int(self.profile.truncation_ratio * w))
        while tokens > w:
            tokens -= cut
        return max(tokens, 0)

    def _on_arrival(self, sid: str, turn_index: int) -> None:
        self.queue.push(sid, turn_index, self.now)
        self.log(EventKind.ARRIVAL, sid, turn_index)
        self._maybe_prefetch()
        self._dispatch()

    # -- main loop --------------------------------------------------------------------

    def run(self) -> EventLog:
        for session in self.workload.sessions:
            self.push(session.arrival_times[0], EventKind.ARRIVAL,
                      session.session_id, 0)

        while self.heap:
            time, kind_value, sid, turn_index, _, data = heapq.heappop(self.heap)
            while time >= self.next_sweep:
                self._run_sweep(self.next_sweep)
                self.next_sweep += self.cfg.ttl_sweep_interval
            self.now = time
            kind = EventKind(kind_value)
            if kind is EventKind.ARRIVAL:
                self._on_arrival(sid, turn_index)
            elif kind is EventKind.PREFILL_DONE:
                self._on_prefill_done(sid, turn_index)
            elif kind is EventKind.JOB_DONE:
                self._on_job_done(sid, turn_index, data)
            elif kind is EventKind.PREFETCH_DONE:
                self._on_prefetch_done(sid)
            elif kind is EventKind.DECODE_STEP:
                self._kick_scheduled = False
                self._dispatch()
                self._maybe_prefetch()

        self._decode_accounting()
        meta = {
            "mode": self.cfg.mode.value,
            "policy": self.cfg.policy.kind.value,
            "profile": self.profile.name,
            "turns": len(self.turns),
            "sessions": len(self.workload.sessions),
            "warmup_turns": self.cfg.warmup_turns,
            "engine_prefill_busy_s": self.engine_prefill_busy,
            "engine_decode_busy_s": self.engine_decode_busy,
            "engine_save_overrun_s": self.engine_save_overrun,
            "bytes_evicted": self.total_bytes_evicted,
            "evict_out_count": self.evict_out_count,
            "evict_to_disk_count": self.evict_disk_count,
            "wall_time_s": self.now,
        }
        if self.store is not None:
            meta["store_fragmentation"] = self.store.fragmentation()
        return EventLog(self.turns, self.events, meta)

    def _run_sweep(self, at: float) -> None:
        if self.store is None:
            return
        dead = self.store.sweep_expired(at)
        if dead:
            self.events.append(Event(at, EventKind.TTL_SWEEP, "", -1,
                                     {"expired": len(dead)}))


def run(workload: Workload, cfg: SimConfig) -> EventLog:
    """Replay a workload through the engine; deterministic for fixed inputs."""
    if not workload.sessions:
        raise ValueError("workload must contain at least one session")
    try:
        return _Engine(workload, cfg).run()
    except CapacityDeadlockError as exc:
        raise SimulationError(f"capacity deadlock: {exc}") from exc
