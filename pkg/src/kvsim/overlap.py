"""Timelines for layer-wise KV pre-loading and asynchronous write-back.

Both planners are pure functions that turn token counts and buffer sizes into
per-stream interval schedules.  Conventions:

* t = 0 is the moment the job may use the execution buffer (the previous job
  released it).  With a read buffer and a previous job still running, the
  read stream starts early, at -buffer/bandwidth.
* Each of the model's `layers` layers owns an equal slice of KV bytes and an
  equal slice of prefill compute.  A layer's compute slot begins with
  KV-independent projection work on the new tokens, so the layer's KV slice
  must be resident by the *end* of its slot; equivalently the loader may run
  one layer behind the executing layer.  Under this convention a read buffer
  of exactly bandwidth x (T_load*L_hist - T_pref*L_new) closes every gap.
* The write-back of prefill-phase KV begins once prefill completes and
  overlaps decoding; decode-phase KV is written per step as it is produced.
  The final step's KV is only produced when decoding ends, so a write buffer
  absorbs the in-flight residue; residue beyond the buffer extends the
  makespan by its transfer time.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from kvsim.model import ModelProfile, TierConfig, kv_size, prefill_time


@dataclass
class Timeline:
    """Per-job schedule of load, compute, and save intervals.

    Intervals are (start, end) pairs in seconds, ordered and non-overlapping
    within each stream.  `stall_total` is engine idle time between t=0 and
    the makespan; `max_gap` is the largest single idle gap.
    """

    load_intervals: list[tuple[float, float]] = field(default_factory=list)
    compute_intervals: list[tuple[float, float]] = field(default_factory=list)
    save_intervals: list[tuple[float, float]] = field(default_factory=list)
    stall_total: float = 0.0
    max_gap: float = 0.0
    makespan: float = 0.0

    @property
    def compute_total(self) -> float:
        return sum(e - s for s, e in self.compute_intervals)

    @property
    def load_total(self) -> float:
        return sum(e - s for s, e in self.load_intervals)

    def to_dict(self) -> dict:
        return {
            "load_intervals": self.load_intervals,
            "compute_intervals": self.compute_intervals,
            "save_intervals": self.save_intervals,
            "stall_total": self.stall_total,
            "max_gap": self.max_gap,
            "makespan": self.makespan,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def plan_preload(hist_tokens: int, new_tokens: int, profile: ModelProfile,
                 tiers: TierConfig, read_buffer: float,
                 prev_job_running: bool = True, *,
                 bandwidth: float | None = None) -> Timeline:
    """Schedule layer-wise loading of historical KV against partial prefill.

    `read_buffer` bytes may be loaded before t=0 while the previous job is
    still running (assumed to run long enough to fill the buffer); without a
    previous job the head start is useless and loading begins at t=0.
    """
    if hist_tokens < 0 or new_tokens < 0:
        raise ValueError("token counts must be >= 0")
    if read_buffer < 0:
        raise ValueError("read_buffer must be >= 0")
    layers = profile.layers
    b = bandwidth if bandwidth is not None else tiers.pcie_bandwidth

    load_total = kv_size(hist_tokens, profile) / b
    compute_total = prefill_time(new_tokens, profile)
    t_load = load_total / layers
    t_comp = compute_total / layers

    head_start = 0.0
    if prev_job_running and hist_tokens > 0:
        head_start = min(read_buffer, kv_size(hist_tokens, profile)) / b

    tl = Timeline()
    if hist_tokens > 0:
        tl.load_intervals = [
            (k * t_load - head_start, (k + 1) * t_load - head_start)
            for k in range(layers)
        ]

    gaps: list[float] = []
    cursor = 0.0
    if new_tokens > 0:
        for k in range(1, layers + 1):
            load_done = max(0.0, k * t_load - head_start) if hist_tokens else 0.0
            start = max(cursor, load_done - t_comp)
            if start > cursor:
                gaps.append(start - cursor)
            cursor = start + t_comp
            tl.compute_intervals.append((start, cursor))
        tl.makespan = cursor
    else:
        tl.makespan = max(0.0, load_total - head_start)
        if tl.makespan > 0:
            gaps.append(tl.makespan)

    tl.stall_total = tl.makespan - compute_total
    # Clamp float dust so exact-zero stalls test clean.
    if abs(tl.stall_total) < 1e-12:
        tl.stall_total = 0.0
    tl.max_gap = max(gaps, default=0.0)
    return tl


def plan_async_save(prompt_tokens: int, decode_steps: int, profile: ModelProfile,
                    tiers: TierConfig, write_buffer: float, *,
                    bandwidth: float | None = None) -> Timeline:
    """Schedule KV write-back overlapped with decoding.

    Prefill-phase KV becomes writable when prefill ends; decode-step k's KV
    becomes writable at the end of step k.  Whatever is still unwritten when
    decoding finishes spills to the write buffer; the excess beyond the
    buffer extends the makespan by its transfer time.
    """
    if prompt_tokens < 0 or decode_steps < 0:
        raise ValueError("token counts must be >= 0")
    if write_buffer < 0:
        raise ValueError("write_buffer must be >= 0")
    b = bandwidth if bandwidth is not None else tiers.pcie_bandwidth

    prefill = prefill_time(prompt_tokens, profile)
    t_step = profile.decode_seconds_per_step
    decode = decode_steps * t_step
    compute_end = prefill + decode

    prefill_bytes = kv_size(prompt_tokens, profile)
    step_bytes = kv_size(1, profile)
    total_bytes = prefill_bytes + decode_steps * step_bytes

    tl = Timeline()
    tl.compute_intervals = [(0.0, prefill)] if prefill > 0 else []
    if decode > 0:
        tl.compute_intervals.append((prefill, compute_end))

    if total_bytes == 0:
        tl.makespan = compute_end
        return tl

    w = step_bytes / b
    prefill_flush_end = prefill + prefill_bytes / b

    if prefill_flush_end >= compute_end:
        # The link never clears the prefill backlog during decoding.
        unwritten = total_bytes - b * decode
        if prefill_bytes > 0:
            tl.save_intervals.append((prefill, prefill_flush_end))
    else:
        # Backlog clears mid-decode; afterwards the stream is gated by
        # production.  Chunk k finishes at
        #   max(flush_end + k*w, arrival_k + w, arrival_1 + k*w)
        # and counts as residue if that exceeds the decode end.
        late = 0
        if decode_steps > 0:
            k_ok1 = math.floor((compute_end - prefill_flush_end) / w + 1e-9)
            late1 = decode_steps - min(decode_steps, max(0, k_ok1))
            if w <= t_step:
                # production-gated tail: arrival_k + w > compute_end
                k_ok2 = math.floor(decode_steps - w / t_step + 1e-9)
            else:
                # arrival_1 + k*w > compute_end
                k_ok2 = math.floor((compute_end - prefill - t_step) / w + 1e-9)
            late2 = decode_steps - min(decode_steps, max(0, k_ok2))
            late = max(late1, late2)
        unwritten = late * step_bytes
        if prefill_bytes > 0:
            tl.save_intervals.append((prefill, prefill_flush_end))
        if decode_steps > 0:
            first = max(prefill_flush_end, prefill + t_step)
            tl.save_intervals.append(
                (first, max(compute_end, first) + late * w))

    spill = min(unwritten, write_buffer)
    overrun = (unwritten - spill) / b
    tl.makespan = compute_end + overrun
    tl.stall_total = overrun
    tl.max_gap = overrun
    if overrun > 0 and prefill_flush_end >= compute_end:
        tl.save_intervals.append((compute_end, tl.makespan))
    return tl
