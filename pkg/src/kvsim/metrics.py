"""Aggregation of event logs into serving metrics and dollar costs.

Hit rates count non-first turns after the warm-up window (a session's first
turn can never hit).  GPU time sums the engine's prefill, decode, and
unoverlapped write-back busy seconds over the whole run; storage cost
charges the configured DRAM/disk capacities for the full simulated wall
time, which is the conservative reading when only active intervals are
known.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from kvsim.sim import EventLog, SimConfig


class IncompleteLogError(RuntimeError):
    """The log still contains unfinished turns."""


@dataclass(frozen=True)
class PriceTable:
    """On-demand prices: dollars per GPU-hour and per GB-hour of storage."""

    gpu_hourly: float = 5.0
    dram_hourly_per_gb: float = 0.0088
    disk_hourly_per_gb: float = 0.000082


@dataclass
class MetricsReport:
    overall_hit_rate: float
    mem_hit_rate: float
    disk_hit_rate: float
    mean_ttft: float
    p50_ttft: float
    p99_ttft: float
    prefill_throughput: float
    gpu_time: float
    output_throughput: float
    cost_usd: float
    cost_breakdown: dict[str, float]
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "overall_hit_rate": self.overall_hit_rate,
            "mem_hit_rate": self.mem_hit_rate,
            "disk_hit_rate": self.disk_hit_rate,
            "mean_ttft": self.mean_ttft,
            "p50_ttft": self.p50_ttft,
            "p99_ttft": self.p99_ttft,
            "prefill_throughput": self.prefill_throughput,
            "gpu_time": self.gpu_time,
            "output_throughput": self.output_throughput,
            "cost_usd": self.cost_usd,
            "cost_breakdown": self.cost_breakdown,
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    CSV_COLUMNS = ("overall_hit_rate", "mem_hit_rate", "disk_hit_rate",
                   "mean_ttft", "p50_ttft", "p99_ttft", "prefill_throughput",
                   "gpu_time", "output_throughput", "cost_usd", "cost_gpu",
                   "cost_dram", "cost_disk")

    def write_csv(self, path: str | Path) -> None:
        row = [self.overall_hit_rate, self.mem_hit_rate, self.disk_hit_rate,
               self.mean_ttft, self.p50_ttft, self.p99_ttft,
               self.prefill_throughput, self.gpu_time, self.output_throughput,
               self.cost_usd, self.cost_breakdown["gpu"],
               self.cost_breakdown["dram"], self.cost_breakdown["disk"]]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(self.CSV_COLUMNS) + "\n")
            fh.write(",".join(f"{v:.9g}" for v in row) + "\n")


def _percentile(sorted_values: list[float], q: float) -> float:
    """Exact percentile by sort/interpolation (fine at desk scale)."""
    if not sorted_values:
        return 0.0
    if len(sorted_values) == 1:
        return sorted_values[0]
    pos = q * (len(sorted_values) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(sorted_values) - 1)
    frac = pos - lo
    return sorted_values[lo] * (1 - frac) + sorted_values[hi] * frac


def compute(log: EventLog, cfg: SimConfig,
            prices: PriceTable | None = None) -> MetricsReport:
    """Aggregate a completed event log into a metrics report."""
    prices = prices or PriceTable()
    unfinished = sorted({t.session_id for t in log.turns if math.isnan(t.done)})
    if unfinished:
        shown = ", ".join(unfinished[:8])
        raise IncompleteLogError(
            f"{len(unfinished)} session(s) unfinished: {shown}"
            + ("..." if len(unfinished) > 8 else ""))

    evaluated = [t for t in log.turns if not t.warmup]
    eligible = [t for t in evaluated if not t.is_first_turn]
    mem_hits = sum(1 for t in eligible if t.hit_class == "memory_hit")
    disk_hits = sum(1 for t in eligible if t.hit_class == "disk_hit")
    denom = len(eligible)

    ttfts = sorted(t.ttft_s for t in evaluated)
    prompt_tokens = sum(t.prompt_tokens for t in evaluated)
    prefill_seconds = sum(t.prefill_s for t in evaluated)
    out_tokens = sum(t.output_tokens for t in evaluated)
    processing = sum(t.done - t.arrival for t in evaluated)

    gpu_time = (log.meta.get("engine_prefill_busy_s", 0.0)
                + log.meta.get("engine_decode_busy_s", 0.0)
                + log.meta.get("engine_save_overrun_s", 0.0))
    wall_hours = log.meta.get("wall_time_s", 0.0) / 3600.0
    gpu_cost = gpu_time / 3600.0 * prices.gpu_hourly * cfg.profile.gpus
    tiers = cfg.effective_tiers()
    uses_store = cfg.mode.value != "recompute"
    dram_cost = (tiers.dram_capacity / 1e9) * wall_hours \
        * prices.dram_hourly_per_gb if uses_store else 0.0
    disk_cost = (tiers.disk_capacity / 1e9) * wall_hours \
        * prices.disk_hourly_per_gb if uses_store else 0.0

    return MetricsReport(
        overall_hit_rate=(mem_hits + disk_hits) / denom if denom else 0.0,
        mem_hit_rate=mem_hits / denom if denom else 0.0,
        disk_hit_rate=disk_hits / denom if denom else 0.0,
        mean_ttft=sum(ttfts) / len(ttfts) if ttfts else 0.0,
        p50_ttft=_percentile(ttfts, 0.50),
        p99_ttft=_percentile(ttfts, 0.99),
        prefill_throughput=prompt_tokens / prefill_seconds if prefill_seconds else 0.0,
        gpu_time=gpu_time,
        output_throughput=out_tokens / processing if processing else 0.0,
        cost_usd=gpu_cost + dram_cost + disk_cost,
        cost_breakdown={"gpu": gpu_cost, "dram": dram_cost, "disk": disk_cost},
        meta={
            "turns_evaluated": len(evaluated),
            "hit_denominator": denom,
            "mode": log.meta.get("mode"),
            "policy": log.meta.get("policy"),
            "profile": log.meta.get("profile"),
            "storage_charged": "whole wall time",
            "gpu_time_scope": "whole run including warm-up",
        },
    )


# ---------------------------------------------------------------------------
# Cross-run comparison
# ---------------------------------------------------------------------------


@dataclass
class ComparisonRow:
    label: str
    overall_hit_rate: float
    mem_hit_rate: float
    mean_ttft: float
    ttft_reduction_pct: float
    prefill_throughput: float
    prefill_speedup: float
    gpu_time: float
    gpu_speedup: float
    cost_usd: float
    cost_savings_pct: float


@dataclass
class ComparisonTable:
    baseline: str
    rows: list[ComparisonRow]
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "baseline": self.baseline,
            "warnings": self.warnings,
            "rows": [vars(r) for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        cols = list(vars(self.rows[0]))
        lines = [",".join(cols)]
        for r in self.rows:
            lines.append(",".join(
                v if isinstance(v := getattr(r, c), str) else f"{v:.6g}"
                for c in cols))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        header = (f"{'label':<16}{'hit%':>8}{'mem%':>8}{'ttft(s)':>10}"
                  f"{'ttft-red%':>11}{'prefill t/s':>13}{'speedup':>9}"
                  f"{'gpu(s)':>10}{'gpu-x':>7}{'cost$':>9}{'saved%':>8}")
        lines = [header, "-" * len(header)]
        for r in self.rows:
            lines.append(
                f"{r.label:<16}{100 * r.overall_hit_rate:>8.1f}"
                f"{100 * r.mem_hit_rate:>8.1f}{r.mean_ttft:>10.4f}"
                f"{r.ttft_reduction_pct:>11.1f}{r.prefill_throughput:>13.0f}"
                f"{r.prefill_speedup:>9.2f}{r.gpu_time:>10.1f}"
                f"{r.gpu_speedup:>7.2f}{r.cost_usd:>9.2f}"
                f"{r.cost_savings_pct:>8.1f}")
        for w in self.warnings:
            lines.append(f"warning: {w}")
        return "\n".join(lines)


def _ratio(a: float, b: float) -> float:
    return a / b if b else 0.0


def compare(reports: list[tuple[str, MetricsReport]]) -> ComparisonTable:
    """Ratios and percentage deltas of each report against the first."""
    if len(reports) < 2:
        raise ValueError("compare needs at least two reports")
    base_label, base = reports[0]
    warnings = []
    base_turns = base.meta.get("turns_evaluated")
    for label, rep in reports[1:]:
        if rep.meta.get("turns_evaluated") != base_turns:
            warnings.append(
                f"{label}: evaluated {rep.meta.get('turns_evaluated')} turns "
                f"vs baseline {base_turns}; workloads may differ")
    rows = []
    for label, rep in reports:
        rows.append(ComparisonRow(
            label=label,
            overall_hit_rate=rep.overall_hit_rate,
            mem_hit_rate=rep.mem_hit_rate,
            mean_ttft=rep.mean_ttft,
            ttft_reduction_pct=100.0 * (1.0 - _ratio(rep.mean_ttft, base.mean_ttft)),
            prefill_throughput=rep.prefill_throughput,
            prefill_speedup=_ratio(rep.prefill_throughput, base.prefill_throughput),
            gpu_time=rep.gpu_time,
            gpu_speedup=_ratio(base.gpu_time, rep.gpu_time),
            cost_usd=rep.cost_usd,
            cost_savings_pct=100.0 * (1.0 - _ratio(rep.cost_usd, base.cost_usd)),
        ))
    return ComparisonTable(base_label, rows, warnings)
