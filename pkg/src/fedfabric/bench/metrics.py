"""Latency decomposition and steering metrics derived from event logs.

Per-task components cover consecutive, disjoint spans of the lifecycle::

    created -> serialized -> sent_to_server -> started_on_worker
        -> result_serialized -> result_posted -> result_received

so they telescope to the task lifetime.  Events from different processes are
shifted onto the relay's clock with the offsets measured at startup.
"""

from __future__ import annotations

import collections
import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .events import RUN_STAGES, STAGE_INDEX, EventRecord, read_events

PERCENTILES = (40, 50, 60)
COMPONENTS = (
    "serialization_ms",
    "thinker_to_server_ms",
    "server_to_worker_ms",
    "time_on_worker_ms",
    "worker_to_server_ms",
    "server_to_thinker_ms",
)
# stage pairs bounding each component
SPANS = {
    "serialization_ms": ("created", "serialized"),
    "thinker_to_server_ms": ("serialized", "sent_to_server"),
    "server_to_worker_ms": ("sent_to_server", "started_on_worker"),
    "time_on_worker_ms": ("started_on_worker", "result_serialized"),
    "worker_to_server_ms": ("result_serialized", "result_posted"),
    "server_to_thinker_ms": ("result_posted", "result_received"),
}
REQUIRED = ("created", "serialized", "sent_to_server", "started_on_worker", "result_serialized", "result_posted", "result_received")
WORKER_STAGES = ("started_on_worker", "inputs_resolved", "finished_on_worker", "result_serialized", "result_posted")
# after result_received the log forks: a data branch and a decision branch
MAIN_CHAIN = tuple(s for s in STAGE_INDEX if STAGE_INDEX[s] <= STAGE_INDEX["result_received"])


@dataclass
class LatencyBreakdown:
    task_id: str
    topic: str
    serialization_ms: float
    thinker_to_server_ms: float
    server_to_worker_ms: float
    time_on_worker_ms: float
    worker_to_server_ms: float
    server_to_thinker_ms: float
    task_lifetime_ms: float

    def components(self) -> dict[str, float]:
        return {c: getattr(self, c) for c in COMPONENTS}


@dataclass
class SteeringMetrics:
    reaction_notify_ms: dict[str, list[float]] = field(default_factory=dict)  # per topic
    reaction_data_ms: dict[str, list[float]] = field(default_factory=dict)
    decision_ms: list[float] = field(default_factory=list)
    dispatch_ms: list[float] = field(default_factory=list)
    idle_gap_ms: dict[str, list[float]] = field(default_factory=dict)  # per worker
    ml_makespan_ms: list[float] = field(default_factory=list)
    utilization: dict[str, float] = field(default_factory=dict)  # per endpoint


@dataclass
class Analysis:
    tasks: list[LatencyBreakdown]
    steering: SteeringMetrics
    incomplete: list[str]
    violations: list[str]

    def by_topic(self) -> dict[str, list[LatencyBreakdown]]:
        out = collections.defaultdict(list)
        for b in self.tasks:
            out[b.topic].append(b)
        return dict(out)

    def percentiles(self) -> dict[str, dict[str, dict[str, float]]]:
        """{topic: {metric: {"p40", "p50", "p60", "n"}}}; deterministic key order."""
        out: dict[str, dict[str, dict[str, float]]] = {}
        for topic, rows in sorted(self.by_topic().items()):
            metrics = {}
            for m in COMPONENTS + ("task_lifetime_ms",):
                metrics[m] = summarize([getattr(r, m) for r in rows])
            out[topic] = metrics
        st = self.steering
        for name, per_topic in (("reaction_notify_ms", st.reaction_notify_ms), ("reaction_data_ms", st.reaction_data_ms)):
            for topic, vals in sorted(per_topic.items()):
                out.setdefault(topic, {})[name] = summarize(vals)
        run: dict[str, dict[str, float]] = {}
        if st.decision_ms:
            run["decision_ms"] = summarize(st.decision_ms)
        if st.dispatch_ms:
            run["dispatch_ms"] = summarize(st.dispatch_ms)
        if st.ml_makespan_ms:
            run["ml_makespan_ms"] = summarize(st.ml_makespan_ms)
        gaps = [g for v in st.idle_gap_ms.values() for g in v]
        if gaps:
            run["idle_gap_ms"] = summarize(gaps)
        if run:
            out["_run"] = run
        for ep, u in sorted(st.utilization.items()):
            out.setdefault(f"_endpoint:{ep}", {})["utilization"] = {"p40": u, "p50": u, "p60": u, "n": 1}
        return out


def summarize(values: Iterable[float]) -> dict[str, float]:
    v = np.asarray(list(values), dtype=float)
    if v.size == 0:
        return {"p40": math.nan, "p50": math.nan, "p60": math.nan, "n": 0}
    p = np.percentile(v, PERCENTILES)
    return {"p40": float(p[0]), "p50": float(p[1]), "p60": float(p[2]), "n": int(v.size)}


# -- loading --------------------------------------------------------------------

_ROLE = re.compile(r"events-(.+)\.jsonl$")


def load_offsets(run_dir: str | Path) -> dict[str, float]:
    """Role -> ns to add to that role's timestamps (relay clock frame)."""
    out = {}
    for p in Path(run_dir).glob("clock-*.json"):
        d = json.loads(p.read_text())
        out[d.get("role", p.stem[len("clock-"):])] = float(d["offset_ns"])
    return out


def load_run(run_dir: str | Path, correct_skew: bool = True) -> list[EventRecord]:
    offsets = load_offsets(run_dir) if correct_skew else {}
    events: list[EventRecord] = []
    for p in sorted(Path(run_dir).glob("events-*.jsonl")):
        role = _ROLE.search(p.name).group(1)
        shift = int(round(offsets.get(role, 0.0)))
        for e in read_events([p]):
            events.append(EventRecord(e.task_id, e.topic, e.stage, e.t_ns + shift, e.worker_id, e.detail) if shift else e)
    return events


# -- analysis ---------------------------------------------------------------------


def _ms(a: int, b: int) -> float:
    return (b - a) / 1e6


def _task_view(evs: list[EventRecord]) -> dict[str, EventRecord]:
    """One event per stage, picking the worker attempt whose result was accepted."""
    by_stage: dict[str, list[EventRecord]] = collections.defaultdict(list)
    for e in evs:
        by_stage[e.stage].append(e)
    received = min(by_stage["result_received"], key=lambda e: e.t_ns) if by_stage.get("result_received") else None
    chosen_worker = received.worker_id if received is not None else None
    view: dict[str, EventRecord] = {}
    for stage, lst in by_stage.items():
        if stage in WORKER_STAGES and chosen_worker:
            mine = [e for e in lst if e.worker_id == chosen_worker]
            lst = mine or lst
        if stage in WORKER_STAGES or stage == "fetched_by_endpoint":
            # latest attempt that is not after the accepted receipt
            if received is not None:
                lst = [e for e in lst if e.t_ns <= received.t_ns] or lst
            view[stage] = max(lst, key=lambda e: e.t_ns)
        else:
            view[stage] = min(lst, key=lambda e: e.t_ns)
    if "fetched_by_endpoint" in view and "started_on_worker" in view:
        fetches = [e for e in by_stage["fetched_by_endpoint"] if e.t_ns <= view["started_on_worker"].t_ns]
        if fetches:
            view["fetched_by_endpoint"] = max(fetches, key=lambda e: e.t_ns)
    return view


def validate_order(view: dict[str, EventRecord], task_id: str = "") -> list[str]:
    """Stage-order violations for one task view (absent stages are skipped)."""
    problems = []
    present = [s for s in MAIN_CHAIN if s in view]
    for a, b in zip(present, present[1:]):
        if view[b].t_ns < view[a].t_ns:
            problems.append(f"{task_id}: {b} precedes {a} by {_ms(view[b].t_ns, view[a].t_ns):.3f} ms")
    if "result_received" in view:
        t = view["result_received"].t_ns
        for s in ("data_resolved", "decision_made"):
            if s in view and view[s].t_ns < t:
                problems.append(f"{task_id}: {s} precedes result_received")
    if "decision_made" in view and "next_submitted" in view:
        if view["next_submitted"].t_ns < view["decision_made"].t_ns:
            problems.append(f"{task_id}: next_submitted precedes decision_made")
    elif "next_submitted" in view:
        problems.append(f"{task_id}: next_submitted without decision_made")
    return problems


def derive_breakdowns(
    events: Iterable[EventRecord] | str | Path, slots: dict[str, int] | None = None
) -> Analysis:
    """Pure function of the log: per-task breakdowns plus run-level metrics."""
    if isinstance(events, (str, Path)):
        events = load_run(events)
    per_task: dict[str, list[EventRecord]] = collections.defaultdict(list)
    run_events: list[EventRecord] = []
    for e in events:
        (run_events if e.stage in RUN_STAGES else per_task[e.task_id]).append(e)

    tasks, incomplete, violations = [], [], []
    views: dict[str, dict[str, EventRecord]] = {}
    for tid in sorted(per_task):
        view = _task_view(per_task[tid])
        views[tid] = view
        violations.extend(validate_order(view, tid))
        if not all(s in view for s in REQUIRED):
            incomplete.append(tid)
            continue
        topic = view["created"].topic
        comps = {c: _ms(view[a].t_ns, view[b].t_ns) for c, (a, b) in SPANS.items()}
        tasks.append(
            LatencyBreakdown(tid, topic, **comps, task_lifetime_ms=_ms(view["created"].t_ns, view["result_received"].t_ns))
        )

    st = SteeringMetrics()
    for tid, v in views.items():
        topic = next(iter(v.values())).topic
        if "finished_on_worker" in v and "result_received" in v:
            st.reaction_notify_ms.setdefault(topic, []).append(_ms(v["finished_on_worker"].t_ns, v["result_received"].t_ns))
        if "data_resolved" in v and "result_received" in v:
            st.reaction_data_ms.setdefault(topic, []).append(_ms(v["result_received"].t_ns, v["data_resolved"].t_ns))
        if "decision_made" in v and "result_received" in v:
            st.decision_ms.append(_ms(v["result_received"].t_ns, v["decision_made"].t_ns))
        if "next_submitted" in v:
            nxt = views.get(v["next_submitted"].detail or "")
            if nxt and "started_on_worker" in nxt:
                st.dispatch_ms.append(_ms(v["next_submitted"].t_ns, nxt["started_on_worker"].t_ns))

    # worker occupancy from the accepted attempts plus any abandoned ones
    intervals: dict[str, list[tuple[int, int]]] = collections.defaultdict(list)
    for evs in per_task.values():
        starts = [e for e in evs if e.stage == "started_on_worker" and e.worker_id]
        ends = [e for e in evs if e.stage == "result_serialized" and e.worker_id]
        for s in starts:
            end = [e.t_ns for e in ends if e.worker_id == s.worker_id and e.t_ns >= s.t_ns]
            if end:
                intervals[s.worker_id].append((s.t_ns, min(end)))
    for w, iv in intervals.items():
        iv.sort()
        st.idle_gap_ms[w] = [_ms(a[1], b[0]) for a, b in zip(iv, iv[1:])]
    by_endpoint: dict[str, dict[str, list]] = collections.defaultdict(dict)
    for w, iv in intervals.items():
        by_endpoint[w.rsplit("/", 1)[0]][w] = iv
    for ep, workers in by_endpoint.items():
        st.utilization[ep] = utilization(workers, (slots or {}).get(ep))

    requested = {e.task_id: e.t_ns for e in run_events if e.stage == "retrain_requested"}
    for e in run_events:
        if e.stage == "queue_reprioritized" and e.task_id in requested:
            st.ml_makespan_ms.append(_ms(requested[e.task_id], e.t_ns))
    return Analysis(tasks, st, incomplete, violations)


def utilization(workers: dict[str, list[tuple[int, int]]], slots: int | None = None, span=None) -> float:
    """busy / (slots * span) over the window from first start to last end."""
    all_iv = [iv for ivs in workers.values() for iv in ivs]
    if not all_iv:
        return math.nan
    t0, t1 = span or (min(a for a, _ in all_iv), max(b for _, b in all_iv))
    busy = sum(min(b, t1) - max(a, t0) for a, b in all_iv if b > t0 and a < t1)
    n = slots or len(workers)
    return busy / (n * (t1 - t0)) if t1 > t0 else math.nan


def check_accounting(analysis: Analysis, slack: float = 0.01) -> list[str]:
    """Violations of: spans >= 0, sum of spans <= lifetime * (1 + slack), stage order."""
    problems = list(analysis.violations)
    for b in analysis.tasks:
        comps = b.components()
        for name, v in comps.items():
            if v < 0:
                problems.append(f"{b.task_id}: {name} = {v:.3f} ms < 0")
        total = sum(comps.values())
        if total > b.task_lifetime_ms * (1 + slack) + 1e-9:
            problems.append(f"{b.task_id}: components {total:.3f} ms exceed lifetime {b.task_lifetime_ms:.3f} ms")
    return problems


def to_json(analysis: Analysis) -> dict:
    return {
        "percentiles": analysis.percentiles(),
        "completed": len(analysis.tasks),
        "incomplete": len(analysis.incomplete),
        "violations": analysis.violations,
        "utilization": analysis.steering.utilization,
    }


def breakdowns_table(analysis: Analysis) -> list[dict]:
    return [asdict(b) for b in analysis.tasks]
