"""Artifact writers and readers: trace CSV, cache event JSONL, run summary,
and the run manifest.

The CSV column set is fixed (frame, t_s, strategy, live_tokens, append_flops,
recompute_flops, mem_bytes_proxy, pred, correct, verbalized); wall-clock
timings stay in memory so artifacts are byte-stable for a given config and
seed. Memory is a proxy: live tokens times d times 8 bytes.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Dict, List, Optional

import numpy as np

from .config import SimConfig
from .harness import StrategyTrace, fit_growth, spike_ratio
from .verbalize import budget_report

TRACE_COLUMNS = ["frame", "t_s", "strategy", "live_tokens", "append_flops",
                 "recompute_flops", "mem_bytes_proxy", "pred", "correct", "verbalized"]


def write_trace_csv(path: str, trace: StrategyTrace) -> None:
    d = trace.cfg.d
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for row in trace.rows:
            writer.writerow([
                row.frame,
                f"{row.t_s:.3f}",
                trace.kind.value,
                row.live_token_count,
                row.append_flops,
                row.extra_recompute_flops,
                row.memory_tokens * d * 8,
                row.predicted_step_id,
                int(row.correct),
                int(row.verbalization_event),
            ])


def read_trace_csv(path: str) -> Dict[str, Dict[str, np.ndarray]]:
    """Per-strategy column arrays from a trace CSV."""
    by_strategy: Dict[str, Dict[str, list]] = {}
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != TRACE_COLUMNS:
            raise ValueError(f"unexpected trace columns: {reader.fieldnames}")
        for rec in reader:
            cols = by_strategy.setdefault(rec["strategy"],
                                          {name: [] for name in TRACE_COLUMNS})
            for name in TRACE_COLUMNS:
                cols[name].append(rec[name])
    if not by_strategy:
        raise ValueError(f"empty trace file: {path}")
    out: Dict[str, Dict[str, np.ndarray]] = {}
    for strategy, cols in by_strategy.items():
        out[strategy] = {
            name: (np.array(vals) if name == "strategy"
                   else np.array(vals, dtype=np.float64))
            for name, vals in cols.items()
        }
    return out


def write_events_jsonl(path: str, trace: StrategyTrace) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for event in trace.cache_events:
            fh.write(json.dumps(event.to_dict(), sort_keys=True) + "\n")


def summarize(traces: List[StrategyTrace], tokens_per_step: float = 5.7) -> dict:
    """Growth fit, spike ratio, accuracy, and flop totals per strategy, plus
    the analytic token-budget report for the traced horizon."""
    summary: dict = {"strategies": {}}
    for trace in traces:
        entry = {
            "frames": len(trace.rows),
            "final_live_tokens": trace.rows[-1].live_token_count if trace.rows else 0,
            "accuracy": trace.accuracy(),
            "spike_ratio": spike_ratio(trace),
            "engine_total_flops": trace.engine_total_flops,
            "text_entry_flops": int(sum(r.text_entry_flops for r in trace.rows)),
            "verbalization_events": int(sum(r.verbalization_event for r in trace.rows)),
            "truncated_at": trace.truncated_at,
        }
        if len(trace.rows) >= 100:
            entry["growth"] = fit_growth(trace).to_dict()
        summary["strategies"][trace.kind.value] = entry
    if traces:
        cfg = traces[0].cfg
        horizon = len(traces[0].rows) / cfg.fps if traces[0].rows else 0.0
        if horizon > 0:
            summary["budget"] = budget_report(cfg, horizon, tokens_per_step).to_dict()
        summary["config"] = cfg.to_dict()
    return summary


@dataclass
class RunManifest:
    """Reproducibility record: config, seed, and every artifact written."""

    config: dict
    seed: int
    artifacts: List[str]
    tool_version: str
    created_at: str = field(
        default_factory=lambda: datetime.now(timezone.utc).isoformat())

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "seed": self.seed,
            "artifacts": self.artifacts,
            "tool_version": self.tool_version,
            "created_at": self.created_at,
        }


def write_manifest(path: str, cfg: SimConfig, artifacts: List[str],
                   tool_version: str) -> RunManifest:
    missing = [a for a in artifacts if not os.path.exists(a)]
    if missing:
        raise FileNotFoundError(f"manifest lists missing artifacts: {missing}")
    manifest = RunManifest(config=cfg.to_dict(), seed=cfg.seed,
                           artifacts=list(artifacts), tool_version=tool_version)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest.to_dict(), fh, indent=2, sort_keys=True)
    return manifest
