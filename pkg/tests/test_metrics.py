import json
import math
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedfabric.bench.events import EventLog, EventRecord, read_events
from fedfabric.bench.metrics import (
    COMPONENTS,
    check_accounting,
    derive_breakdowns,
    load_run,
    summarize,
    utilization,
)
from fedfabric.bench.report import emit_report, parse_csv, report_dir, write_csv

MS = 1_000_000
CHAIN = ("created", "serialized", "sent_to_server", "sent_to_relay", "fetched_by_endpoint", "started_on_worker",
         "inputs_resolved", "finished_on_worker", "result_serialized", "result_posted", "result_received")
WORKER = {"started_on_worker", "inputs_resolved", "finished_on_worker", "result_serialized", "result_posted"}


def task_events(tid, times_ms, topic="sim", worker="ep/w0"):
    return [
        EventRecord(tid, topic, s, int(t * MS), worker if s in WORKER or s == "result_received" else None)
        for s, t in zip(CHAIN, times_ms)
    ]


def test_three_task_fixture():
    evs = (
        task_events("a", [0, 1, 2, 3, 4, 5, 6, 16, 17, 18, 20])
        + task_events("b", [0, 2, 4, 5, 6, 8, 9, 29, 30, 33, 36])
        + task_events("c", [10, 10.5, 11, 12, 13, 14, 14, 15, 16, 17, 18], worker="ep/w1")
    )
    an = derive_breakdowns(evs)
    assert [t.task_id for t in an.tasks] == ["a", "b", "c"]
    a, b, c = an.tasks
    assert a.components() == {
        "serialization_ms": 1, "thinker_to_server_ms": 1, "server_to_worker_ms": 3,
        "time_on_worker_ms": 12, "worker_to_server_ms": 1, "server_to_thinker_ms": 2,
    }
    assert a.task_lifetime_ms == 20 and b.task_lifetime_ms == 36 and c.task_lifetime_ms == 8
    pct = an.percentiles()["sim"]
    # linear interpolation over sorted [8, 20, 36] at ranks 0.8, 1, 1.2
    assert pct["task_lifetime_ms"] == pytest.approx({"p40": 17.6, "p50": 20.0, "p60": 23.2, "n": 3})
    assert pct["time_on_worker_ms"]["p50"] == 12
    assert check_accounting(an) == []
    assert an.steering.reaction_notify_ms["sim"] == [4, 7, 3]


@given(st.lists(st.integers(0, 10**9), min_size=len(CHAIN), max_size=len(CHAIN)))
def test_components_telescope_to_lifetime(gaps):
    t = np.cumsum(gaps)
    (b,) = derive_breakdowns(
        [EventRecord("x", "t", s, int(v), "w/0" if s in WORKER else None) for s, v in zip(CHAIN, t)]
    ).tasks
    assert sum(b.components().values()) == pytest.approx(b.task_lifetime_ms)
    assert all(v >= 0 for v in b.components().values())


def test_out_of_order_is_a_violation():
    evs = task_events("a", [0, 1, 2, 3, 4, 5, 6, 16, 17, 18, 20])
    evs[9] = EventRecord("a", "sim", "result_posted", 30 * MS, "ep/w0")  # after result_received
    an = derive_breakdowns(evs)
    problems = check_accounting(an)
    assert any("result_received precedes result_posted" in p for p in problems)
    assert an.tasks[0].server_to_thinker_ms < 0


def test_incomplete_tasks_are_reported():
    an = derive_breakdowns(task_events("a", range(11))[:6])
    assert an.tasks == [] and an.incomplete == ["a"]


def test_two_worker_utilization_fixture():
    workers = {"ep/w0": [(0, 10), (12, 20)], "ep/w1": [(0, 5)]}
    assert utilization(workers) == pytest.approx(23 / 40)
    assert utilization(workers, slots=4) == pytest.approx(23 / 80)
    assert utilization(workers, span=(0, 10)) == pytest.approx(15 / 20)
    assert math.isnan(utilization({}))


def test_idle_gaps_and_utilization_from_log():
    evs = (
        task_events("a", [0, 0, 0, 0, 0, 0, 0, 9, 10, 10, 11])
        + task_events("b", [0, 0, 0, 0, 0, 12, 12, 19, 20, 20, 21])
        + task_events("c", [0, 0, 0, 0, 0, 0, 0, 4, 5, 5, 6], worker="ep/w1")
    )
    st_ = derive_breakdowns(evs, slots={"ep": 2}).steering
    assert st_.idle_gap_ms == {"ep/w0": [2.0], "ep/w1": []}
    assert st_.utilization["ep"] == pytest.approx((10 + 8 + 5) / 40)


def test_redelivered_task_uses_accepted_attempt():
    first = task_events("a", [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 30], worker="ep/w0")[:8]  # abandoned attempt
    second = task_events("a", [0, 1, 2, 3, 10, 11, 12, 20, 21, 22, 30], worker="ep/w1")[4:]
    an = derive_breakdowns(first + second)
    (b,) = an.tasks
    assert b.server_to_worker_ms == 9 and b.time_on_worker_ms == 10
    assert check_accounting(an) == []


def test_steering_spans():
    evs = task_events("a", [0, 1, 2, 3, 4, 5, 6, 16, 17, 18, 20])
    evs += [
        EventRecord("a", "sim", "data_resolved", 23 * MS),
        EventRecord("a", "sim", "decision_made", 21 * MS, detail="b"),
        EventRecord("a", "sim", "next_submitted", 22 * MS, detail="b"),
        EventRecord("round-1", "train", "retrain_requested", 100 * MS),
        EventRecord("round-1", "infer", "queue_reprioritized", 350 * MS),
    ]
    evs += task_events("b", [21, 22, 22, 23, 24, 26, 26, 30, 31, 32, 33], worker="ep/w1")
    st_ = derive_breakdowns(evs).steering
    assert st_.decision_ms == [1.0]
    assert st_.dispatch_ms == [4.0]
    assert st_.reaction_data_ms["sim"] == [3.0]
    assert st_.ml_makespan_ms == [250.0]


def test_skew_correction(tmp_path):
    thinker = EventLog(tmp_path / "events-thinker.jsonl")
    worker = EventLog(tmp_path / "events-ep.jsonl")
    for e in task_events("a", [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10]):
        (worker if e.stage in WORKER or e.stage == "fetched_by_endpoint" else thinker).append(e)
    thinker.close()
    worker.close()
    # the worker clock runs 1 s ahead of the relay
    (tmp_path / "clock-ep.json").write_text(json.dumps({"role": "ep", "offset_ns": -1e9, "rtt_ns": 1, "rounds": 1}))
    raw = derive_breakdowns(load_run(tmp_path, correct_skew=False))
    assert raw.tasks[0].server_to_worker_ms == 3
    (tmp_path / "clock-ep.json").write_text(json.dumps({"role": "ep", "offset_ns": -2 * MS, "rtt_ns": 1, "rounds": 1}))
    fixed = derive_breakdowns(tmp_path)
    assert fixed.tasks[0].server_to_worker_ms == 1
    assert len(read_events([tmp_path / "events-ep.jsonl"])) == 6


def test_unknown_stage_rejected():
    with pytest.raises(ValueError):
        EventRecord("a", "t", "teleported", 0)


pct_tables = st.dictionaries(
    st.text(st.characters(min_codepoint=48, max_codepoint=122), min_size=1, max_size=8),
    st.dictionaries(
        st.sampled_from(COMPONENTS),
        st.fixed_dictionaries({k: st.floats(allow_nan=False, allow_infinity=False) for k in ("p40", "p50", "p60")}),
        min_size=1,
    ),
    max_size=4,
)


@given(pct_tables)
def test_csv_roundtrip(table):
    assert parse_csv(write_csv(table)) == table


def test_empty_report_is_header_only(tmp_path):
    csv_text, text = emit_report({"scenario": "empty"}, tmp_path)
    assert csv_text == "topic,metric,percentile,value\n"
    assert (tmp_path / "summary.csv").read_text() == csv_text
    assert "scenario: empty" in text
    assert summarize([])["n"] == 0


def test_report_dir_regenerates(tmp_path):
    an = derive_breakdowns(task_events("a", range(11)))
    metrics = {"scenario": "x", "percentiles": an.percentiles(), "assertions": [{"name": "ok", "passed": True}]}
    (tmp_path / "metrics.json").write_text(json.dumps(metrics))
    text = report_dir(tmp_path)
    assert "[PASS] ok" in text
    assert parse_csv((tmp_path / "summary.csv").read_text())["sim"]["task_lifetime_ms"]["p50"] == 10


def test_large_log_is_fast():
    rng = np.random.default_rng(0)
    evs = []
    for i in range(10_000):
        t = np.cumsum(rng.integers(1, 1000, len(CHAIN)))
        evs += [EventRecord(f"t{i}", "sim", s, int(v), f"ep/w{i % 8}" if s in WORKER else None) for s, v in zip(CHAIN, t)]
    assert len(evs) > 100_000
    t0 = time.perf_counter()
    an = derive_breakdowns(evs)
    assert time.perf_counter() - t0 < 30
    assert len(an.tasks) == 10_000 and check_accounting(an) == []
