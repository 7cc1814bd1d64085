"""Per-query evaluation against the two baselines, summary metrics, and CSV export.

CSV files written by :func:`write_csvs`:

``records.csv``
    query_id, method, status, c_plan, c_execute, c_total, shuffles, bushy, delta, actions
``summary.csv``
    method, queries, failures, total, c_plan, c_execute, p30, p60, p90, p99,
    improved_small, improved_large, regressed_small, regressed_large, unchanged, bushy_fraction

Costs are simulated seconds.  ``delta`` compares against the reference method
(syntactic planning with adaptive execution by default).  The four delta
buckets are (0, 0.2], (0.2, inf), [-0.2, 0) and (-inf, -0.2); ``unchanged``
counts delta == 0 so the buckets always partition the queries.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from aqora.nncore import TreeCNN
from aqora.planir import is_bushy
from aqora.ppo import EpisodeConfig, run_episode
from aqora.stagesim import COMPLETED

log = logging.getLogger(__name__)

PERCENTILES = (30, 60, 90, 99)


@dataclass(frozen=True)
class EvalRecord:
    query_id: str
    method: str
    status: str
    c_plan: float
    c_execute: float
    c_total: float
    shuffles: int
    bushy: bool
    delta: float = 0.0
    actions: str = ""

    @property
    def failed(self) -> bool:
        return self.status != COMPLETED


def _record(query_id, method, outcome, c_plan, cap, actions=""):
    if outcome.status == COMPLETED:
        c_exec = outcome.total_cost
        total = c_plan + c_exec
    else:
        # failures are booked at the cap, whatever was spent on planning
        total = cap
        c_exec = max(cap - c_plan, 0.0)
    return EvalRecord(query_id, method, outcome.status, c_plan, c_exec, total, outcome.total_shuffles,
                      outcome.status == COMPLETED and is_bushy(outcome.final_plan), 0.0, actions)


def run_method(query, method: str, net: TreeCNN | None = None, episode: EpisodeConfig | None = None,
               decision_charge: float = 0.1) -> EvalRecord:
    cap = query.sim.timeout_budget
    if method == "baseline-syntactic-aqe":
        outcome, _ = query.execute(query.plan(False)[0])
        return _record(query.query_id, method, outcome, 0.0, cap)
    if method == "baseline-cbo-aqe":
        plan, charge = query.plan(True)
        outcome, _ = query.execute(plan)
        return _record(query.query_id, method, outcome, charge, cap)
    if method == "aqora":
        if net is None or episode is None:
            raise ValueError("aqora evaluation needs a model and an episode config")
        _, outcome, steps = run_episode(query, net, episode, "greedy")
        c_plan = outcome.planning_cost + decision_charge * outcome.decisions
        actions = " ".join(s.action for s in steps)
        return _record(query.query_id, method, outcome, c_plan, cap, actions)
    raise ValueError(f"unknown method {method!r}")


def delta(c_base: float, c_method: float) -> float:
    """Relative improvement over the baseline; negative means a regression."""
    if c_base <= 0:
        return 0.0
    return (c_base - c_method) / c_base


def attach_deltas(records: Sequence[EvalRecord], reference: str) -> list[EvalRecord]:
    base = {r.query_id: r.c_total for r in records if r.method == reference}
    out = []
    for r in records:
        d = delta(base[r.query_id], r.c_total) if r.query_id in base else float("nan")
        out.append(EvalRecord(**{**asdict(r), "delta": d}))
    return out


def evaluate(queries: Sequence, methods: Sequence[str], net: TreeCNN | None = None,
             episode: EpisodeConfig | None = None, decision_charge: float = 0.1,
             reference: str = "baseline-syntactic-aqe") -> list[EvalRecord]:
    """Every query under every method, in query-major order; a method without a model is skipped."""
    active = []
    for m in methods:
        if m == "aqora" and net is None:
            log.warning("no checkpoint for method aqora; skipping it")
            continue
        active.append(m)
    records = [run_method(q, m, net, episode, decision_charge) for q in queries for m in active]
    return attach_deltas(records, reference)


def buckets(deltas: Sequence[float]) -> dict[str, int]:
    d = np.asarray(deltas, dtype=np.float64)
    return {
        "improved_small": int(((d > 0) & (d <= 0.2)).sum()),
        "improved_large": int((d > 0.2).sum()),
        "regressed_small": int(((d < 0) & (d >= -0.2)).sum()),
        "regressed_large": int((d < -0.2).sum()),
        "unchanged": int((d == 0).sum()),
    }


def summarize(records: Sequence[EvalRecord]) -> list[dict]:
    rows = []
    for method in dict.fromkeys(r.method for r in records):
        rs = [r for r in records if r.method == method]
        c = np.array([r.c_total for r in rs])
        pct = np.percentile(c, PERCENTILES) if len(c) else [0.0] * len(PERCENTILES)
        row = {"method": method, "queries": len(rs), "failures": sum(r.failed for r in rs),
               "total": float(c.sum()), "c_plan": float(sum(r.c_plan for r in rs)),
               "c_execute": float(sum(r.c_execute for r in rs))}
        row.update({f"p{p}": float(v) for p, v in zip(PERCENTILES, pct)})
        row.update(buckets([r.delta for r in rs]))
        row["bushy_fraction"] = sum(r.bushy for r in rs) / len(rs) if rs else 0.0
        rows.append(row)
    return rows


def _fmt(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    return v


def to_csv(rows: Sequence[Mapping], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


RECORD_COLUMNS = [f.name for f in fields(EvalRecord)]
SUMMARY_COLUMNS = ["method", "queries", "failures", "total", "c_plan", "c_execute",
                   *[f"p{p}" for p in PERCENTILES], "improved_small", "improved_large",
                   "regressed_small", "regressed_large", "unchanged", "bushy_fraction"]


def write_csvs(records: Sequence[EvalRecord], out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rec_path, sum_path = out / "records.csv", out / "summary.csv"
    rec_path.write_text(to_csv([asdict(r) for r in records], RECORD_COLUMNS))
    sum_path.write_text(to_csv(summarize(records), SUMMARY_COLUMNS))
    return rec_path, sum_path
