"""Desk-scale simulator for hierarchical KV-cache reuse in multi-turn LLM serving.

The package models a serving engine that keeps per-session KV caches in a
host-memory/disk hierarchy instead of recomputing them each turn:

* :mod:`kvsim.trace`   -- conversation traces, synthetic workload generation, stats
* :mod:`kvsim.model`   -- analytical timing/size model and built-in model profiles
* :mod:`kvsim.overlap` -- layer-wise pre-loading and asynchronous write-back timelines
* :mod:`kvsim.store`   -- tiered session-granularity KV store with TTL and blocks
* :mod:`kvsim.policy`  -- queue-aware prefetch/eviction plus LRU/FIFO baselines
* :mod:`kvsim.sim`     -- discrete-event engine with continuous batching
* :mod:`kvsim.rope`    -- rotary-embedding kernel proving cache truncation validity
* :mod:`kvsim.metrics` -- hit rates, TTFT, throughput and dollar-cost aggregation
* :mod:`kvsim.cli`     -- experiment front end (run / sweep / figures / stats)
"""

from kvsim.model import ModelProfile, TierConfig, builtin_profile
from kvsim.trace import Session, Turn, Workload

__version__ = "0.1.0"

__all__ = [
    "ModelProfile",
    "TierConfig",
    "builtin_profile",
    "Session",
    "Turn",
    "Workload",
    "__version__",
]
