"""Conversation traces: ingestion, synthetic generation, and statistics.

A workload is a set of sessions; each session is an ordered list of turns
carrying only token counts (no text).  Arrival timestamps are synthesized --
public chat traces ship without them -- as a Poisson process over session
starts plus per-turn think-time gaps.  The nominal per-turn timestamps stored
here are lower bounds: the simulator never starts turn k+1 before turn k has
completed.
"""

from __future__ import annotations

import gzip
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np


class TraceParseError(ValueError):
    """Raised when a trace file does not match the documented schema."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Turn:
    """One conversation turn: the user's new input and the generated reply."""

    new_input_tokens: int
    output_tokens: int

    def __post_init__(self):
        if self.new_input_tokens < 1:
            raise ValueError("new_input_tokens must be >= 1")
        if self.output_tokens < 0:
            raise ValueError("output_tokens must be >= 0")

    @property
    def total_tokens(self) -> int:
        return self.new_input_tokens + self.output_tokens


@dataclass(frozen=True)
class Session:
    """A conversation with ordered turns and nominal per-turn arrival times."""

    session_id: str
    turns: tuple[Turn, ...]
    arrival_times: tuple[float, ...]

    def __post_init__(self):
        if not self.turns:
            raise ValueError(f"session {self.session_id!r} has no turns")
        if len(self.arrival_times) != len(self.turns):
            raise ValueError(
                f"session {self.session_id!r}: {len(self.arrival_times)} arrival "
                f"times for {len(self.turns)} turns")
        for a, b in zip(self.arrival_times, self.arrival_times[1:]):
            if b <= a:
                raise ValueError(
                    f"session {self.session_id!r}: arrival times must be "
                    f"strictly increasing")

    @property
    def total_tokens(self) -> int:
        return sum(t.total_tokens for t in self.turns)

    def history_tokens(self, turn_index: int) -> int:
        """Raw token count accumulated before `turn_index` (no truncation)."""
        return sum(t.total_tokens for t in self.turns[:turn_index])


@dataclass
class Workload:
    """All sessions plus a globally time-ordered view of their turns."""

    sessions: list[Session]
    merged_arrivals: list[tuple[float, str, int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.merged_arrivals:
            self.merged_arrivals = self._merge()

    def _merge(self) -> list[tuple[float, str, int]]:
        entries = [
            (t, s.session_id, k)
            for s in self.sessions
            for k, t in enumerate(s.arrival_times)
        ]
        # Ties broken by (session_id, turn_index) so runs are reproducible.
        entries.sort(key=lambda e: (e[0], e[1], e[2]))
        return entries

    @property
    def total_turns(self) -> int:
        return sum(len(s.turns) for s in self.sessions)

    def session(self, session_id: str) -> Session:
        for s in self.sessions:
            if s.session_id == session_id:
                return s
        raise KeyError(session_id)


# ---------------------------------------------------------------------------
# Distribution specs
# ---------------------------------------------------------------------------

# Session-level token totals follow a lognormal fitted to public multi-turn
# chat data: roughly 47% of sessions exceed 2K total tokens and 30% exceed
# 4K.  Turn counts mix 27% single-turn sessions with a Poisson component
# whose mean grows with the session's token budget (long conversations have
# many turns), targeting a 73% multi-turn share and 5.75 turns on average.
SHAREGPT_TOKEN_DIST = {
    "kind": "sharegpt",
    "log_mu": 7.509,
    "log_sigma": 1.543,
    "min_tokens": 24,
    "max_tokens": 131072,
    "input_frac": 1 / 3,
    "turn_jitter_sigma": 0.3,
}

SHAREGPT_TURN_DIST = {
    "kind": "sharegpt",
    "single_turn_frac": 0.27,
    "mean_turns": 5.75,
    "correlation_exp": 0.8,
    "max_turns": 64,
}

DEFAULT_THINK_DIST = {"kind": "exponential", "mean": 60.0}


def _resolve_dist(spec, presets: dict[str, dict]) -> dict:
    if isinstance(spec, str):
        try:
            return dict(presets[spec])
        except KeyError:
            raise ValueError(f"unknown distribution preset {spec!r}") from None
    return dict(spec)


def sample_think_gap(rng: np.random.Generator, spec: dict) -> float:
    kind = spec.get("kind", "exponential")
    if kind == "exponential":
        return float(rng.exponential(spec.get("mean", 60.0)))
    if kind == "fixed":
        return float(spec["value"])
    if kind == "lognormal":
        return float(rng.lognormal(spec["mu"], spec["sigma"]))
    raise ValueError(f"unknown think-time distribution {kind!r}")


# ---------------------------------------------------------------------------
# Trace ingestion
# ---------------------------------------------------------------------------


def _open_maybe_gzip(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rt", encoding="utf-8")
    return open(path, "r", encoding="utf-8")


def load_trace(path: str | Path, fmt: str = "jsonl", *,
               rate: float = 1.0,
               think_dist: dict | str | None = None,
               seed: int = 0) -> Workload:
    """Load a JSON-lines trace and synthesize arrival timestamps.

    Each line is ``{"id": str, "turns": [{"input": int, "output": int}]}``.
    Gzip-compressed files are recognized by the ``.gz`` extension.  Session
    starts follow a Poisson process with `rate` sessions/second; think-time
    gaps between turns are drawn from `think_dist`.
    """
    if fmt != "jsonl":
        raise TraceParseError(f"unsupported trace format {fmt!r}")
    if rate <= 0:
        raise ValueError("rate must be positive")
    path = Path(path)
    think = _resolve_dist(think_dist or DEFAULT_THINK_DIST, {})
    rng = np.random.default_rng(seed)

    raw_sessions: list[tuple[str, list[Turn]]] = []
    seen_ids: set[str] = set()
    with _open_maybe_gzip(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceParseError(f"{path}:{lineno}: invalid JSON: {exc}") from None
            try:
                session_id = str(record["id"])
                turn_specs = record["turns"]
            except (KeyError, TypeError):
                raise TraceParseError(
                    f"{path}:{lineno}: expected object with 'id' and 'turns'") from None
            if not turn_specs:
                raise TraceParseError(
                    f"{path}:{lineno}: session {session_id!r} has zero turns")
            if session_id in seen_ids:
                raise TraceParseError(
                    f"{path}:{lineno}: duplicate session id {session_id!r}")
            seen_ids.add(session_id)
            turns = []
            for t in turn_specs:
                try:
                    turns.append(Turn(int(t["input"]), int(t["output"])))
                except (KeyError, TypeError, ValueError) as exc:
                    raise TraceParseError(
                        f"{path}:{lineno}: bad turn in session {session_id!r}: {exc}"
                    ) from None
            raw_sessions.append((session_id, turns))

    if not raw_sessions:
        raise TraceParseError(f"{path}: empty trace file")

    sessions = []
    start = 0.0
    for session_id, turns in raw_sessions:
        start += rng.exponential(1.0 / rate)
        sessions.append(_with_arrivals(session_id, turns, start, rng, think))
    return Workload(sessions)


def dump_trace(workload: Workload, path: str | Path) -> None:
    """Write a workload back out in the JSON-lines trace schema."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wt", encoding="utf-8") as fh:
        for s in workload.sessions:
            record = {
                "id": s.session_id,
                "turns": [
                    {"input": t.new_input_tokens, "output": t.output_tokens}
                    for t in s.turns
                ],
            }
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")


def _with_arrivals(session_id: str, turns: list[Turn], start: float,
                   rng: np.random.Generator, think: dict) -> Session:
    arrivals = [start]
    for _ in turns[1:]:
        gap = max(sample_think_gap(rng, think), 1e-6)
        arrivals.append(arrivals[-1] + gap)
    return Session(session_id, tuple(turns), tuple(arrivals))


# ---------------------------------------------------------------------------
# Synthetic workload generation
# ---------------------------------------------------------------------------


def _sample_turn_count(rng: np.random.Generator, spec: dict, total_tokens: int) -> int:
    kind = spec.get("kind", "sharegpt")
    if kind == "fixed":
        return int(spec["turns"])
    if kind == "geometric":
        return max(1, int(rng.geometric(1.0 / spec["mean"])))
    if kind == "sharegpt":
        if rng.random() < spec["single_turn_frac"]:
            return 1
        # Poisson mean grows sublinearly with the session token budget so
        # long sessions get proportionally more turns.
        mean_extra = spec["_corr_coeff"] * total_tokens ** spec["correlation_exp"]
        return min(2 + int(rng.poisson(mean_extra)), spec.get("max_turns", 64))
    raise ValueError(f"unknown turn distribution {kind!r}")


def _turn_dist_prepare(spec: dict, token_spec: dict) -> dict:
    """Pre-compute the Poisson coefficient hitting the target mean turn count."""
    spec = dict(spec)
    if spec.get("kind", "sharegpt") != "sharegpt":
        return spec
    p1 = spec["single_turn_frac"]
    target_extra = (spec["mean_turns"] - p1 - 2 * (1 - p1)) / (1 - p1)
    if target_extra <= 0:
        raise ValueError("mean_turns too small for the single-turn fraction")
    b = spec["correlation_exp"]
    mu, sigma = token_spec["log_mu"], token_spec["log_sigma"]
    # E[X^b] for the lognormal token total; the 1.04 factor compensates for
    # the turn-count cap and token clipping shaving the Poisson tail.
    moment = math.exp(b * mu + 0.5 * b * b * sigma * sigma)
    spec["_corr_coeff"] = 1.04 * target_extra / moment
    return spec


def _sample_session_tokens(rng: np.random.Generator, spec: dict) -> int:
    kind = spec.get("kind", "sharegpt")
    if kind == "fixed":
        return int(spec["input"]) + int(spec["output"])
    if kind == "sharegpt":
        tokens = rng.lognormal(spec["log_mu"], spec["log_sigma"])
        return int(min(max(tokens, spec["min_tokens"]), spec["max_tokens"]))
    raise ValueError(f"unknown token distribution {kind!r}")


def _split_tokens(rng: np.random.Generator, spec: dict, total: int,
                  n_turns: int) -> list[Turn]:
    if spec.get("kind") == "fixed":
        return [Turn(int(spec["input"]), int(spec["output"]))] * n_turns
    weights = rng.lognormal(0.0, spec["turn_jitter_sigma"], size=n_turns)
    weights /= weights.sum()
    input_frac = spec["input_frac"]
    turns = []
    for w in weights:
        n = max(2, int(round(total * w)))
        inp = max(1, int(round(n * input_frac)))
        turns.append(Turn(inp, n - inp))
    return turns


def generate_poisson(n_sessions: int, rate: float,
                     turn_dist: dict | str = "sharegpt",
                     token_dist: dict | str = "sharegpt",
                     seed: int = 0, *,
                     think_dist: dict | str | None = None) -> Workload:
    """Generate a synthetic workload with Poisson session arrivals.

    Session starts are spaced by exponential gaps with mean 1/rate; turns
    within a session are spaced by think-time draws.  Fully deterministic
    for a fixed seed.
    """
    if n_sessions < 1:
        raise ValueError("n_sessions must be >= 1")
    if rate <= 0:
        raise ValueError("rate must be positive")
    token_spec = _resolve_dist(token_dist, {"sharegpt": SHAREGPT_TOKEN_DIST})
    turn_spec = _turn_dist_prepare(
        _resolve_dist(turn_dist, {"sharegpt": SHAREGPT_TURN_DIST}), token_spec)
    think = _resolve_dist(think_dist or DEFAULT_THINK_DIST, {})

    rng = np.random.default_rng(seed)
    sessions = []
    start = 0.0
    width = len(str(n_sessions - 1))
    for i in range(n_sessions):
        start += rng.exponential(1.0 / rate)
        total = _sample_session_tokens(rng, token_spec)
        n_turns = _sample_turn_count(rng, turn_spec, total)
        turns = _split_tokens(rng, token_spec, total, n_turns)
        sessions.append(_with_arrivals(f"s{i:0{width}d}", turns, start, rng, think))
    return Workload(sessions)


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


@dataclass
class StatsReport:
    """Workload statistics mirroring the usual multi-turn trace analyses."""

    n_sessions: int
    n_turns: int
    multi_turn_fraction: float
    mean_turns: float
    turn_histogram: dict[str, int]
    session_token_histogram: dict[str, int]
    frac_sessions_over_2k: float
    frac_sessions_over_4k: float
    mean_session_tokens: float
    hist_vs_new_ratio: list[float]

    def to_dict(self) -> dict:
        return {
            "n_sessions": self.n_sessions,
            "n_turns": self.n_turns,
            "multi_turn_fraction": self.multi_turn_fraction,
            "mean_turns": self.mean_turns,
            "turn_histogram": self.turn_histogram,
            "session_token_histogram": self.session_token_histogram,
            "frac_sessions_over_2k": self.frac_sessions_over_2k,
            "frac_sessions_over_4k": self.frac_sessions_over_4k,
            "mean_session_tokens": self.mean_session_tokens,
            "hist_vs_new_ratio": self.hist_vs_new_ratio,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        lines = [
            f"{'sessions':<28}{self.n_sessions}",
            f"{'turns':<28}{self.n_turns}",
            f"{'multi-turn fraction':<28}{self.multi_turn_fraction:.3f}",
            f"{'mean turns/session':<28}{self.mean_turns:.2f}",
            f"{'mean tokens/session':<28}{self.mean_session_tokens:.0f}",
            f"{'sessions > 2K tokens':<28}{self.frac_sessions_over_2k:.3f}",
            f"{'sessions > 4K tokens':<28}{self.frac_sessions_over_4k:.3f}",
            "turn-count histogram:",
        ]
        for bucket, count in self.turn_histogram.items():
            lines.append(f"  {bucket:<10}{count}")
        lines.append("session-token histogram:")
        for bucket, count in self.session_token_histogram.items():
            lines.append(f"  {bucket:<10}{count}")
        lines.append("mean historical:new token ratio by turn:")
        for k, ratio in enumerate(self.hist_vs_new_ratio, start=1):
            lines.append(f"  turn {k:<5}{ratio:.2f}")
        return "\n".join(lines)


def _bucketize(values: Iterable[int], edges: list[int]) -> dict[str, int]:
    counts = {}
    labels = []
    last = 0
    for e in edges:
        labels.append((f"{last + 1}-{e}", last, e))
        last = e
    labels.append((f">{last}", last, None))
    for label, _, _ in labels:
        counts[label] = 0
    for v in values:
        for label, lo, hi in labels:
            if v > lo and (hi is None or v <= hi):
                counts[label] += 1
                break
    return counts


def trace_stats(workload: Workload, max_ratio_turns: int = 10) -> StatsReport:
    """Compute multi-turn statistics for a workload."""
    if not workload.sessions:
        raise ValueError("workload has no sessions")
    turn_counts = [len(s.turns) for s in workload.sessions]
    token_totals = [s.total_tokens for s in workload.sessions]
    n_sessions = len(turn_counts)
    n_turns = sum(turn_counts)

    ratios: list[float] = []
    for k in range(1, max_ratio_turns + 1):
        hist_sum = 0
        new_sum = 0
        for s in workload.sessions:
            if len(s.turns) > k:
                hist_sum += s.history_tokens(k)
                new_sum += s.turns[k].new_input_tokens
        ratios.append(hist_sum / new_sum if new_sum else 0.0)

    return StatsReport(
        n_sessions=n_sessions,
        n_turns=n_turns,
        multi_turn_fraction=sum(1 for c in turn_counts if c > 1) / n_sessions,
        mean_turns=n_turns / n_sessions,
        turn_histogram=_bucketize(turn_counts, [1, 2, 4, 8, 16, 32]),
        session_token_histogram=_bucketize(
            token_totals, [512, 1024, 2048, 4096, 8192, 16384, 32768]),
        frac_sessions_over_2k=sum(1 for t in token_totals if t > 2048) / n_sessions,
        frac_sessions_over_4k=sum(1 for t in token_totals if t > 4096) / n_sessions,
        mean_session_tokens=sum(token_totals) / n_sessions,
        hist_vs_new_ratio=ratios,
    )
