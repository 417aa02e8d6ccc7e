"""Multi-process scenario runs.

A :class:`Deployment` launches the relay, store servers and endpoints as
separate ``fedfabric`` role processes on this host, pairs the endpoints and
hands out a :class:`~fedfabric.steering.TaskServer` for the thinker, which
runs in the orchestrating process.  Each scenario writes ``events-*.jsonl``,
``metrics.json``, ``summary.csv`` and ``summary.txt`` to its output directory.
"""

from __future__ import annotations

import copy
import json
import logging
import os
import signal
import subprocess
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from ..config import RunConfig, THINKER_SITE, assign_ports
from ..errors import FabricError
from ..refcore import StoreKind, TaskPayload
from ..relay.server import RelayClient
from ..steering import Thinker, TaskServer, TopicSpec
from ..stores import StoreRegistry, connect
from ..tasks import default_implementations
from . import metrics as M
from .events import EventLog
from .report import emit_report

log = logging.getLogger(__name__)

KB, MB = 1_000, 1_000_000


class LaunchError(FabricError):
    """A role process failed to come up."""


def deep_merge(base: dict, over: dict | None) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def topology(cpu_slots: int = 8, gpu_slots: int = 4, time_scale: float = 1 / 30, data_scale: float = 1 / 100,
             seed: int = 0) -> dict:
    """Three sites (thinker, cpu-site, gpu-site) with a key-value store, a
    shared filesystem and a wide-area store."""
    return {
        "run": {"time_scale": time_scale, "data_scale": data_scale, "seed": seed},
        "relay": {"port": 0},
        "stores": [
            {"store_id": "kv", "kind": "memory-kv", "port": 0},
            {"store_id": "shared", "kind": "filesystem"},
            {"store_id": "wan", "kind": "wide-area", "port": 0},
        ],
        "sites": {
            THINKER_SITE: {"stores": ["kv", "shared", "wan"]},
            "cpu-site": {"stores": ["kv", "shared", "wan"]},
            "gpu-site": {"stores": ["kv", "wan"]},
        },
        "endpoints": [
            {"endpoint_id": "cpu", "site": "cpu-site", "resource_kind": "cpu", "worker_slots": cpu_slots},
            {"endpoint_id": "gpu", "site": "gpu-site", "resource_kind": "gpu", "worker_slots": gpu_slots},
        ],
        "topics": {},
        "proxy": {"topics": {}},
        "policy": {},
        "app": {},
    }


def role_command(role: str, *args: str) -> list[str]:
    return [sys.executable, "-m", "fedfabric.cli", role, *args]


class Deployment:
    """Relay, stores and endpoints as child processes; the thinker in-process."""

    def __init__(self, raw: dict, out_dir: str | Path, start_timeout: float = 30.0):
        self.out = Path(out_dir).resolve()
        self.out.mkdir(parents=True, exist_ok=True)
        raw = assign_ports(raw)
        for s in raw.get("stores", []):
            if s["kind"] == StoreKind.FILESYSTEM.value:
                s.setdefault("root", str(self.out / "stores" / s["store_id"]))
            if s["kind"] == StoreKind.WIDE_AREA.value:
                s.setdefault("staging_dir", str(self.out / "stores" / s["store_id"]))
        for e in raw.get("endpoints", []):
            e.setdefault("token_path", str(self.out / "tokens" / f"{e['endpoint_id']}.token"))
        self.cfg = RunConfig.from_dict(raw).check(default_implementations())
        self.config_path = self.out / "config.json"
        self.cfg.dump(self.config_path)
        self.start_timeout = start_timeout
        self.procs: dict[str, subprocess.Popen] = {}
        self._logs: dict[str, object] = {}
        self.task_servers: list[TaskServer] = []

    @property
    def relay_address(self) -> str:
        return f"{self.cfg.relay.host}:{self.cfg.relay.port}"

    # -- processes -------------------------------------------------------------------
    def _spawn(self, name: str, role: str, *args: str) -> subprocess.Popen:
        logf = open(self.out / f"{name}.log", "ab")
        env = dict(os.environ, PYTHONUNBUFFERED="1")
        cmd = role_command(role, *args, "--config", str(self.config_path), "--out", str(self.out))
        proc = subprocess.Popen(cmd, stdout=logf, stderr=subprocess.STDOUT, env=env)
        self.procs[name] = proc
        self._logs[name] = logf
        return proc

    def _tail(self, name: str, n: int = 20) -> str:
        path = self.out / f"{name}.log"
        if not path.exists():
            return ""
        return "\n".join(path.read_text(errors="replace").splitlines()[-n:])

    def _check_alive(self, name: str) -> None:
        proc = self.procs[name]
        if proc.poll() is not None:
            raise LaunchError(f"{name} exited with code {proc.returncode}:\n{self._tail(name)}")

    def start(self) -> "Deployment":
        try:
            self._start()
        except BaseException:
            self.close()
            raise
        return self

    def _start(self) -> None:
        self._spawn("relay", "relay")
        client = RelayClient(self.relay_address)
        deadline = time.monotonic() + self.start_timeout
        while True:
            self._check_alive("relay")
            try:
                client.wait_ready(0.5)
                break
            except FabricError:
                if time.monotonic() > deadline:
                    raise LaunchError(f"relay did not come up:\n{self._tail('relay')}")
        for sc in self.cfg.stores.values():
            if sc.kind is not StoreKind.FILESYSTEM:
                self._spawn(f"store-{sc.store_id}", "store", sc.store_id)
        for sc in self.cfg.stores.values():
            if sc.kind is not StoreKind.FILESYSTEM:
                self._wait_store(sc)
        self._write_thinker_clock(client)
        for ep in self.cfg.endpoints.values():
            token = client.pair(ep.endpoint_id, self.cfg.relay.admin_token)
            Path(ep.token_path).parent.mkdir(parents=True, exist_ok=True)
            Path(ep.token_path).write_text(token)
            self.start_endpoint(ep.endpoint_id)
        client.close()

    def _wait_store(self, sc) -> None:
        deadline = time.monotonic() + self.start_timeout
        store = connect(sc)
        try:
            while True:
                self._check_alive(f"store-{sc.store_id}")
                try:
                    store.stats()
                    return
                except FabricError:
                    if time.monotonic() > deadline:
                        raise LaunchError(f"store {sc.store_id} did not come up")
                    time.sleep(0.05)
        finally:
            store.close()

    def _write_thinker_clock(self, client: RelayClient) -> None:
        est = client.clock_offset()
        (self.out / "clock-thinker.json").write_text(json.dumps({"role": "thinker", **est}))

    def start_endpoint(self, endpoint_id: str) -> None:
        clock = self.out / f"clock-{endpoint_id}.json"
        clock.unlink(missing_ok=True)
        name = f"endpoint-{endpoint_id}"
        self._spawn(name, "endpoint", endpoint_id)
        deadline = time.monotonic() + self.start_timeout
        while not clock.exists():
            self._check_alive(name)
            if time.monotonic() > deadline:
                raise LaunchError(f"endpoint {endpoint_id} did not pair:\n{self._tail(name)}")
            time.sleep(0.05)

    def stop_endpoint(self, endpoint_id: str, timeout: float = 60.0) -> int:
        """Graceful stop: the endpoint drains what it fetched, then exits."""
        return self._terminate(f"endpoint-{endpoint_id}", timeout)

    def _terminate(self, name: str, timeout: float) -> int:
        proc = self.procs.get(name)
        if proc is None or proc.poll() is not None:
            return proc.returncode if proc else 0
        proc.send_signal(signal.SIGTERM)
        try:
            return proc.wait(timeout)
        except subprocess.TimeoutExpired:
            log.warning("%s ignored SIGTERM; killing", name)
            proc.kill()
            return proc.wait()

    # -- thinker side ------------------------------------------------------------------
    def registry(self, site: str = THINKER_SITE) -> StoreRegistry:
        return StoreRegistry({sid: connect(sc) for sid, sc in self.cfg.site_stores(site).items()})

    def task_server(self, topics: list[TopicSpec] | None = None, **kw) -> TaskServer:
        ts = TaskServer(
            self.relay_address,
            topics if topics is not None else list(self.cfg.topics.values()),
            self.cfg.proxy,
            self.registry(),
            EventLog(self.out / "events-thinker.jsonl"),
            client_id="thinker",
            **kw,
        )
        self.task_servers.append(ts)
        return ts.start()

    def relay_stats(self) -> dict[str, int]:
        client = RelayClient(self.relay_address)
        try:
            return client.stats()
        finally:
            client.close()

    def close(self) -> dict[str, int]:
        for ts in self.task_servers:
            ts.close()
            ts.events.close()
        codes = {}
        order = [n for n in self.procs if n.startswith("endpoint-")]
        order += [n for n in self.procs if n.startswith("store-")] + [n for n in self.procs if n == "relay"]
        for name in order:
            codes[name] = self._terminate(name, 30.0)
        for f in self._logs.values():
            f.close()
        return codes

    def __enter__(self) -> "Deployment":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.close()


# -- helpers --------------------------------------------------------------------------


@dataclass
class Assertion:
    name: str
    passed: bool
    detail: str = ""

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed), "detail": self.detail}


def median(values) -> float:
    values = list(values)
    return float(np.percentile(values, 50)) if values else float("nan")


def size_label(n: int) -> str:
    if n >= MB:
        return f"{n // MB}MB"
    return f"{n // KB}kB"


def run_serial(ts: TaskServer, plan: list[tuple[str, TaskPayload]], timeout: float = 120.0) -> list:
    """Submit one task at a time and wait for its result."""
    results = []
    for topic, payload in plan:
        ts.submit_task(topic, payload)
        res = ts.get_result(topic, timeout)
        if res is None:
            raise FabricError(f"no result for a {topic} task within {timeout} s")
        ts.resolve(res)
        results.append(res)
    return results


def analyze(out: Path, cfg: RunConfig) -> M.Analysis:
    slots = {e.endpoint_id: e.worker_slots for e in cfg.endpoints.values()}
    return M.derive_breakdowns(out, slots)


def accounting_assertion(analysis: M.Analysis) -> Assertion:
    problems = M.check_accounting(analysis)
    detail = f"{len(analysis.tasks)} tasks checked, {len(problems)} violations"
    if problems:
        detail += "; first: " + problems[0]
    return Assertion("accounting_invariant", not problems, detail)


def span_medians(analysis: M.Analysis, component: str) -> dict[str, float]:
    return {topic: median(getattr(b, component) for b in bs) for topic, bs in analysis.by_topic().items()}


# -- scenarios ----------------------------------------------------------------------------


def noop_tiering_config() -> dict:
    raw = topology(cpu_slots=4)
    raw["endpoints"] = raw["endpoints"][:1]
    raw["app"] = {"sizes": [10 * KB, 1 * MB], "tasks_per_cell": 50, "proxy_store": "kv", "proxy_threshold": 1000}
    return raw


def noop_tiering(raw: dict, out: Path) -> dict:
    app = raw["app"]
    cells = []
    for size in app["sizes"]:
        for proxied in (True, False):
            topic = f"noop-{size_label(size)}-{'proxy' if proxied else 'inline'}"
            raw["topics"][topic] = {"function": "noop", "endpoint": "cpu"}
            if proxied:
                raw["proxy"]["topics"][topic] = {"threshold_bytes": app["proxy_threshold"], "store_id": app["proxy_store"]}
            cells.append((topic, size, proxied))
    with Deployment(raw, out) as dep:
        ts = dep.task_server()
        plan = []
        for i in range(app["tasks_per_cell"]):
            for topic, size, _ in cells:  # interleaved so drift hits every cell alike
                plan.append((topic, TaskPayload.of({"seed": str(i)}, data=bytes(size))))
        run_serial(ts, plan)
        cfg = dep.cfg
    analysis = analyze(out, cfg)
    s2w = span_medians(analysis, "server_to_worker_ms")
    big = size_label(max(app["sizes"]))
    small = size_label(min(app["sizes"]))
    on, off, small_on = s2w[f"noop-{big}-proxy"], s2w[f"noop-{big}-inline"], s2w[f"noop-{small}-proxy"]
    asserts = [
        Assertion("proxy_speedup_large", off >= 5 * on,
                  f"{big} server_to_worker median: inline {off:.2f} ms, proxied {on:.2f} ms ({off / on:.1f}x)"),
        Assertion("proxy_size_independent", max(on, small_on) <= 2 * min(on, small_on),
                  f"proxied server_to_worker median: {small} {small_on:.2f} ms, {big} {on:.2f} ms"),
    ]
    return {"analysis": analysis, "assertions": asserts, "app": {"server_to_worker_ms": s2w}, "config": cfg}


def backend_sweep_config() -> dict:
    raw = topology(cpu_slots=4)
    raw["endpoints"] = raw["endpoints"][:1]
    raw["app"] = {
        "sizes": [10 * KB, 100 * KB, 1 * MB, 10 * MB, 100 * MB],
        "backends": ["kv", "shared", "wan"],
        "tasks_per_cell": 10,
        "max_bytes_per_cell": 200 * MB,
        "constant_sizes": [10 * KB, 10 * MB],
    }
    return raw


def backend_sweep(raw: dict, out: Path) -> dict:
    app = raw["app"]
    cells = []
    for backend in app["backends"]:
        for size in app["sizes"]:
            topic = f"noop-{backend}-{size_label(size)}"
            raw["topics"][topic] = {"function": "noop", "endpoint": "cpu"}
            raw["proxy"]["topics"][topic] = {"threshold_bytes": 0, "store_id": backend}
            reps = max(2, min(app["tasks_per_cell"], app["max_bytes_per_cell"] // size))
            cells.append((topic, size, reps))
    with Deployment(raw, out) as dep:
        ts = dep.task_server()
        for topic, size, reps in cells:
            data = bytes(size)
            run_serial(ts, [(topic, TaskPayload.of({"seed": str(i)}, data=data)) for i in range(reps)], timeout=300)
        cfg = dep.cfg
    analysis = analyze(out, cfg)
    ser = span_medians(analysis, "serialization_ms")
    tow = span_medians(analysis, "time_on_worker_ms")
    life = span_medians(analysis, "task_lifetime_ms")
    lo, hi = (size_label(s) for s in app["constant_sizes"])
    wan_tow = [tow[f"noop-wan-{size_label(s)}"] for s in app["sizes"] if min(app["constant_sizes"]) <= s <= max(app["constant_sizes"])]
    ratio = max(wan_tow) / min(wan_tow)
    e2e = life["noop-wan-1MB"] / 1e3
    asserts = [
        Assertion("kv_serializes_faster_than_fs", ser["noop-kv-10kB"] < ser["noop-shared-10kB"],
                  f"10kB serialization median: kv {ser['noop-kv-10kB']:.2f} ms, fs {ser['noop-shared-10kB']:.2f} ms"),
        Assertion("wide_area_time_on_worker_constant", ratio < 1.5,
                  f"wide-area time_on_worker {lo}..{hi}: max/min = {ratio:.3f}"),
        Assertion("wide_area_end_to_end_1MB", 1.0 <= e2e <= 6.0, f"wide-area 1MB lifetime median {e2e:.3f} s"),
    ]
    return {"analysis": analysis, "assertions": asserts,
            "app": {"serialization_ms": ser, "time_on_worker_ms": tow, "lifetime_ms": life}, "config": cfg}


def offline_endpoint_config() -> dict:
    raw = topology(cpu_slots=4)
    raw["endpoints"] = raw["endpoints"][:1]
    raw["topics"] = {"work": {"function": "sleep", "endpoint": "cpu"}}
    raw["app"] = {"outage_s": 5.0, "tasks_during_outage": 20, "results_during_outage": 5, "task_s": 0.1}
    return raw


def offline_endpoint(raw: dict, out: Path) -> dict:
    app = raw["app"]
    outage, n1, n2 = app["outage_s"], app["tasks_during_outage"], app["results_during_outage"]
    meta = {"duration_s": repr(app["task_s"])}
    with Deployment(raw, out) as dep:
        ts = dep.task_server()
        # phase 1: the endpoint is offline while tasks are submitted
        dep.stop_endpoint("cpu")
        t_down = time.monotonic_ns()
        ids1 = []
        for i in range(n1):
            ids1.append(ts.submit_task("work", TaskPayload.of(dict(meta, seed=str(i)))))
            time.sleep(outage * 0.8 / n1)
        time.sleep(max(0.0, outage - (time.monotonic_ns() - t_down) / 1e9))
        t_up = time.monotonic_ns()
        dep.start_endpoint("cpu")
        got1 = [ts.get_result("work", 60) for _ in range(n1)]
        # phase 2: the thinker's relay client is offline while results are posted
        ts.pause_results(outage)
        t_pause = time.monotonic_ns()
        ids2 = [ts.submit_task("work", TaskPayload.of(dict(meta, seed=str(100 + i)))) for i in range(n2)]
        got2 = [ts.get_result("work", outage + 60) for _ in range(n2)]
        time.sleep(1.0)
        extra = ts.get_result("work", 0.5)
        dup = ts.duplicates_received
        stats = dep.relay_stats()
        cfg = dep.cfg
    analysis = analyze(out, cfg)
    events = M.load_run(out)
    started = {e.task_id: e.t_ns for e in events if e.stage == "started_on_worker"}
    posted = {e.task_id: e.t_ns for e in events if e.stage == "result_posted"}
    received = {e.task_id: e.t_ns for e in events if e.stage == "result_received"}
    recv_ids = [r.task_id for r in got1 + got2 if r is not None]
    once = sorted(recv_ids) == sorted(ids1 + ids2) and extra is None and dup == 0
    held = all(started.get(t, 0) >= t_up for t in ids1)
    offline_posts = sum(1 for t in ids2 if posted.get(t, 0) < t_pause + outage * 1e9)
    late = all(received.get(t, 0) >= t_pause + outage * 1e9 * 0.95 for t in ids2)
    ok = all(r is not None and r.success for r in got1 + got2)
    asserts = [
        Assertion("delivered_exactly_once", once and ok,
                  f"{len(recv_ids)}/{n1 + n2} results, duplicates seen {dup}, late extra {extra is not None}"),
        Assertion("tasks_held_while_endpoint_offline", held, f"{n1} tasks all started after the endpoint returned"),
        Assertion("results_held_while_client_offline", offline_posts == n2 and late,
                  f"{offline_posts}/{n2} results posted during the outage, all delivered after it"),
    ]
    return {"analysis": analysis, "assertions": asserts, "app": {"relay_stats": stats}, "config": cfg}


def _app_config(app_name: str, time_scale: float, **app) -> dict:
    raw = topology(time_scale=time_scale)
    raw["policy"] = {"retrain_trigger": "every_n", "retrain_n": 25, "simulation_backlog_k": 1,
                     "inference_chunk_size": 500, "ensemble_size": 8}
    raw["proxy"] = {"topics": {
        "simulate": {"threshold_bytes": 10_000, "store_id": "kv"},
        "sample": {"threshold_bytes": 10_000, "store_id": "kv"},
        "train": {"threshold_bytes": 10_000, "store_id": "wan"},
        "infer": {"threshold_bytes": 10_000, "store_id": "wan"},
    }}
    raw["app"] = {app_name: {"ml_store": "wan", **app}, "timeout_s": 3600}
    return raw


def moldesign_config() -> dict:
    return _app_config("moldesign", 1 / 30, budget_node_hours=40.0, pool_size=4000)


def build_app(cfg: RunConfig, name: str):
    """(driver, topics, state) for the application configured under ``app.<name>``."""
    if name == "moldesign":
        from ..apps.moldesign import MolDesign, MolDesignConfig, MolDesignState, moldesign_topics

        acfg = MolDesignConfig.from_dict(cfg.app.get(name))
        state = MolDesignState(acfg, cfg.time_scale, cfg.data_scale, cfg.seed, cfg.slots("cpu"), cfg.slots("gpu"))
        return MolDesign(state, cfg.policy), moldesign_topics("cpu", "gpu", state.objective, acfg), state
    if name == "finetune":
        from ..apps.finetune import Finetune, FinetuneConfig, FinetuneState, finetune_topics

        acfg = FinetuneConfig.from_dict(cfg.app.get(name))
        state = FinetuneState(acfg, cfg.time_scale, cfg.data_scale, cfg.seed, cfg.slots("cpu"), cfg.policy.ensemble_size)
        return Finetune(state, cfg.policy), finetune_topics("cpu", "gpu", state.energy, acfg), state
    raise KeyError(f"unknown application {name!r}")


def run_thinker_app(cfg: RunConfig, name: str, task_server_factory) -> tuple:
    driver, topics, state = build_app(cfg, name)
    ts = task_server_factory(topics)
    thinker = Thinker(driver.agents(), cfg.policy, ts, getattr(driver, "resources", None), state)
    try:
        thinker.run(timeout=cfg.app.get("timeout_s", 3600))
    finally:
        driver.close()
    return state, ts


def efficacy_overrides(strategy: str, seed: int) -> dict:
    """Equal-budget comparison runs: short simulations and a fast ML loop
    whose data moves through the key-value store."""
    kv = {"threshold_bytes": 10_000, "store_id": "kv"}
    return {
        "run": {"time_scale": 1 / 60, "seed": seed},
        "proxy": {"topics": {"train": kv, "infer": kv}},
        "app": {"moldesign": {"strategy": strategy, "budget_node_hours": 6.0, "ml_time_scale": 1 / 600,
                              "ml_store": "kv"}},
    }


def moldesign(raw: dict, out: Path) -> dict:
    with Deployment(raw, out) as dep:
        cfg = dep.cfg
        state, ts = run_thinker_app(cfg, "moldesign", dep.task_server)
        mcfg = state.cfg
        cache_misses = ts.cache.misses
    analysis = analyze(out, cfg)
    summary = state.summary()
    st = analysis.steering
    util = st.utilization.get("cpu", float("nan"))
    gaps = [g for w, gs in st.idle_gap_ms.items() if w.startswith("cpu/") for g in gs]
    gap = median(gaps)
    dec = median(st.decision_ms)
    target = summary["in_flight_target"]
    trace = summary["in_flight_trace"]
    sim_s = mcfg.sim_duration_s * cfg.time_scale
    asserts = [
        Assertion("cpu_utilization", util > 0.99, f"cpu utilization {util:.4f}"),
        Assertion("idle_gap_median", gap < 500, f"median idle gap {gap:.2f} ms over {len(gaps)} gaps"),
        Assertion("decision_latency", dec <= 50 and summary["decision_resolves"] == 0,
                  f"median decision {dec:.3f} ms over {len(st.decision_ms)} decisions, "
                  f"{summary['decision_resolves']} store reads inside decisions"),
        Assertion("backlog_held", bool(trace) and all(n == target for n in trace),
                  f"in-flight simulations stayed at {target} for {len(trace)} decisions"),
        Assertion("budget_respected", summary["used_s"] <= state.budget_s + sim_s * 1.5,
                  f"used {summary['used_s']:.1f} s of {state.budget_s:.1f} s"),
    ]
    summary["found_fraction"] = summary["found"] / max(1, summary["counted_simulations"])
    summary["thinker_cache_misses"] = cache_misses
    return {"analysis": analysis, "assertions": asserts, "app": summary, "config": cfg}


def finetune_config() -> dict:
    return _app_config("finetune", 1 / 120, new_structures=100, schedule=[20, 200, 4])


def finetune(raw: dict, out: Path) -> dict:
    with Deployment(raw, out) as dep:
        cfg = dep.cfg
        state, _ = run_thinker_app(cfg, "finetune", dep.task_server)
    analysis = analyze(out, cfg)
    summary = state.summary()
    pre, best = summary["pre_rms"], summary["best_rms"]
    asserts = [
        Assertion("finetune_improves", pre is not None and best is not None and best < pre,
                  f"held-out rms before {pre}, best after fine-tuning {best}"),
    ]
    return {"analysis": analysis, "assertions": asserts, "app": summary, "config": cfg}


SCENARIOS: dict[str, tuple[Callable[[], dict], Callable[[dict, Path], dict]]] = {
    "noop_tiering": (noop_tiering_config, noop_tiering),
    "backend_sweep": (backend_sweep_config, backend_sweep),
    "offline_endpoint": (offline_endpoint_config, offline_endpoint),
    "moldesign": (moldesign_config, moldesign),
    "finetune": (finetune_config, finetune),
}


def default_config(name: str) -> dict:
    if name not in SCENARIOS:
        raise KeyError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
    return SCENARIOS[name][0]()


def run_scenario(name: str, overrides: dict | None = None, out_dir: str | Path = "runs") -> dict:
    """Run a named scenario and write its artifacts; returns metrics.json's content."""
    raw = deep_merge(default_config(name), overrides)
    out = Path(out_dir)
    if out.exists():
        for stale in list(out.glob("events-*.jsonl")) + list(out.glob("clock-*.json")):
            stale.unlink()
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.monotonic()
    res = SCENARIOS[name][1](raw, out)
    analysis: M.Analysis = res["analysis"]
    asserts = res["assertions"] + [accounting_assertion(analysis)]
    metrics = {
        "scenario": name,
        "wall_s": time.monotonic() - t0,
        "passed": all(a.passed for a in asserts),
        "assertions": [a.to_dict() for a in asserts],
        **M.to_json(analysis),
        "app": res.get("app", {}),
    }
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, default=_json_default))
    emit_report(metrics, out)
    return metrics


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
