"""UCB-steered search over a fixed candidate pool.

Three agents share one state object: a simulation agent keeps the CPU
pipeline full and records labels, an ML agent retrains the ensemble and
scores the remaining pool, and a result agent gathers training and
inference outputs.  ``strategy="random"`` runs the same pipeline without ML.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from ..clock import now_ns
from ..refcore import TaskPayload, proxy
from ..steering import (
    AgentSpec,
    PrioritizedTaskQueue,
    SimulationState,
    SteeringPolicy,
    Thinker,
    TopicSpec,
    next_simulation_decision,
    retrain_gate,
)
from .objective import Objective, make_pool, pack, top_decile_threshold, unpack
from .surrogate import ucb_scores

log = logging.getLogger(__name__)


@dataclass
class MolDesignConfig:
    pool_size: int = 4000
    d: int = 16
    noise: float = 0.0
    n_seed: int = 50  # pre-labeled examples so the first model can train at start
    strategy: str = "ucb"  # or "random"
    budget_node_hours: float = 6.0
    sim_duration_s: float = 60.0
    train_duration_s: float = 340.0
    infer_full_pass_s: float = 900.0  # one member over the whole pool
    duration_sigma: float = 0.0
    ml_time_scale: float | None = None  # defaults to the run's time_scale
    sim_output_bytes: int = 1_000_000
    train_output_bytes: int = 10_000_000
    infer_round_trip_bytes: int = 2_400_000_000  # per member, whole pool
    n_features: int = 64
    ridge: float = 1e-3
    activation: str = "square"
    ml_store: str | None = None  # store for explicitly proxied ML inputs
    proxy_workers: int = 8

    @classmethod
    def from_dict(cls, d: dict | None) -> "MolDesignConfig":
        return cls(**(d or {}))


def moldesign_topics(cpu_endpoint: str, gpu_endpoint: str, objective: Objective, cfg: MolDesignConfig):
    obj = json.dumps({"d": objective.d, "seed": objective.seed})
    return [
        TopicSpec("simulate", "simulate", cpu_endpoint, {"objective": obj, "noise": repr(cfg.noise)}, "cpu"),
        TopicSpec("train", "train", gpu_endpoint,
                  {"n_features": str(cfg.n_features), "ridge": repr(cfg.ridge), "activation": cfg.activation}, "gpu"),
        TopicSpec("infer", "infer", gpu_endpoint, {}, "gpu"),
    ]


@dataclass
class MolDesignState:
    cfg: MolDesignConfig
    time_scale: float
    data_scale: float
    seed: int
    cpu_slots: int
    gpu_slots: int
    objective: Objective = field(init=False)
    pool: np.ndarray = field(init=False)
    threshold: float = field(init=False)
    queue: PrioritizedTaskQueue = field(init=False)
    sim: SimulationState | None = None
    train_x: list = field(default_factory=list)
    train_y: list = field(default_factory=list)
    budget_s: float = 0.0
    used_s: float = 0.0
    counted: int = 0
    found: int = 0
    curve: list = field(default_factory=list)
    new_since_train: int = 0
    retrain_wanted: bool = False
    ml_running: bool = False
    round_id: int = 0
    members: dict = field(default_factory=dict)
    preds: dict = field(default_factory=dict)
    chunks: list = field(default_factory=list)
    round_started: dict = field(default_factory=dict)
    rounds_done: int = 0
    in_flight_trace: list = field(default_factory=list)
    decisions: int = 0
    decision_resolves: int = 0
    sim_task_candidate: dict = field(default_factory=dict)

    def __post_init__(self):
        cfg = self.cfg
        self.objective = Objective(d=cfg.d, seed=self.seed)
        self.pool = make_pool(cfg.pool_size, cfg.d, self.seed)
        truth = self.objective.value(self.pool)
        self.threshold = top_decile_threshold(truth)
        rng = np.random.default_rng([self.seed, 0x0DE5])
        order = rng.permutation(cfg.pool_size)
        seed_ids, rest = order[: cfg.n_seed], order[cfg.n_seed:]
        self.train_x = [self.pool[i] for i in seed_ids]
        self.train_y = [float(truth[i]) for i in seed_ids]
        # initial order is random: scores descend along the permutation
        n = len(rest)
        self.queue = PrioritizedTaskQueue({int(c): float(n - k) for k, c in enumerate(rest)})
        self.budget_s = cfg.budget_node_hours * 3600 * self.time_scale

    @property
    def ml_scale(self) -> float:
        return self.cfg.ml_time_scale if self.cfg.ml_time_scale is not None else self.time_scale

    def summary(self) -> dict:
        return {
            "strategy": self.cfg.strategy,
            "found": self.found,
            "counted_simulations": self.counted,
            "budget_s": self.budget_s,
            "used_s": self.used_s,
            "threshold": self.threshold,
            "rounds": self.rounds_done,
            "curve": self.curve,
            "decisions": self.decisions,
            "decision_resolves": self.decision_resolves,
            "in_flight_target": self.sim.target if self.sim else None,
            "in_flight_trace": self.in_flight_trace,
            "config": asdict(self.cfg),
        }


class MolDesign:
    def __init__(self, state: MolDesignState, policy: SteeringPolicy):
        self.s = state
        self.policy = policy
        self._pool = ThreadPoolExecutor(state.cfg.proxy_workers, thread_name_prefix="proxy")

    # -- task construction -------------------------------------------------------
    def _submit_sim(self, ts, cand: int, on_sent) -> str:
        s = self.s
        meta = {
            "seed": str(s.seed * 1_000_003 + cand),
            "candidate": str(cand),
            "duration_s": repr(s.cfg.sim_duration_s * s.time_scale),
            "duration_sigma": repr(s.cfg.duration_sigma),
            "pad_bytes": str(int(s.cfg.sim_output_bytes * s.data_scale)),
        }
        tid = ts.submit_task("simulate", TaskPayload.of(meta, x=pack(s.pool[cand])), on_sent=on_sent)
        s.sim_task_candidate[tid] = cand
        return tid

    def _proxy_all(self, ts, blobs: list[bytes]):
        store = ts.registry.store(self.s.cfg.ml_store)
        return list(self._pool.map(lambda b: proxy(b, store), blobs))

    def agents(self) -> list[AgentSpec]:
        agents = [
            AgentSpec.on_start("launch", self.launch),
            AgentSpec.on_result("simulations", "simulate", self.on_simulation),
        ]
        if self.s.cfg.strategy == "ucb":
            agents += [
                AgentSpec.on_timer("ml", 0.05, self.ml_tick),
                AgentSpec.on_result("trainer", "train", self.on_train),
                AgentSpec.on_result("scorer", "infer", self.on_infer),
            ]
        return agents

    # -- agents -------------------------------------------------------------------
    def launch(self, th: Thinker) -> None:
        s = self.s
        ts = th.task_server
        s.sim = SimulationState(
            s.queue, s.cpu_slots, self.policy.simulation_backlog_k, lambda c, cb: self._submit_sim(ts, c, cb)
        )
        next_simulation_decision(s.sim, None, th.events)
        s.in_flight_trace.append(s.sim.in_flight)
        if s.cfg.strategy == "ucb":
            with th.lock:
                s.retrain_wanted = True

    def on_simulation(self, th: Thinker, res) -> None:
        s = self.s
        ts = th.task_server
        # decide first: the envelope alone is enough to keep workers busy
        before = ts.thread_resolves()
        next_simulation_decision(s.sim, res, th.events)
        s.decisions += 1
        s.decision_resolves += ts.thread_resolves() - before
        if s.queue and not s.sim.paused:
            s.in_flight_trace.append(s.sim.in_flight)
        y = None
        if res.success:
            y = float(unpack(ts.resolve(res)["y"])[0])
        cand = s.sim_task_candidate.pop(res.task_id, None)
        with th.lock:
            if s.used_s < s.budget_s:
                s.used_s += res.timings.execute_ms / 1000.0
                if y is not None:
                    s.counted += 1
                    if y > s.threshold:
                        s.found += 1
                    s.train_x.append(s.pool[cand])
                    s.train_y.append(y)
                    s.new_since_train += 1
                s.curve.append((s.used_s, s.found))
                if s.cfg.strategy == "ucb" and retrain_gate(self.policy, s.new_since_train):
                    s.retrain_wanted = True
            if s.used_s >= s.budget_s:
                s.sim.paused = True
            if s.sim.paused and s.sim.in_flight == 0:
                th.stop()

    def ml_tick(self, th: Thinker) -> None:
        s = self.s
        with th.lock:
            if not s.retrain_wanted or s.ml_running or s.sim is None or s.sim.paused:
                return
            s.retrain_wanted = False
            s.ml_running = True
            s.round_id += 1
            s.new_since_train = 0
            s.members, s.preds = {}, {}
            x = np.array(s.train_x)
            y = np.array(s.train_y)
        rid = f"round-{s.round_id}"
        th.events.record(rid, "train", "retrain_requested")
        s.round_started[rid] = now_ns()
        k = self.policy.ensemble_size
        pad = int(s.cfg.train_output_bytes * s.data_scale)
        data = TaskPayload.of(None, x=pack(x), y=pack(y))
        if s.cfg.ml_store:
            rx, ry = self._proxy_all(th.task_server, [pack(x), pack(y)])
            data = TaskPayload.of(None, x=rx, y=ry)
        for m in range(k):
            meta = {
                "seed": str(s.seed * 1009 + s.round_id * 31 + m),
                "member": str(m),
                "round": str(s.round_id),
                "duration_s": repr(s.cfg.train_duration_s * s.ml_scale),
                "pad_bytes": str(pad),
            }
            th.task_server.submit_task("train", TaskPayload(data.fields, meta))

    def on_train(self, th: Thinker, res) -> None:
        s = self.s
        if int(res.metadata.get("round", -1)) != s.round_id:
            return
        if not res.success:
            raise RuntimeError(f"training failed: {res.message}")
        member = th.task_server.resolve(res)["member"]
        with th.lock:
            s.members[int(res.metadata["member"])] = member
            if len(s.members) < self.policy.ensemble_size:
                return
            remaining = np.array(sorted(s.queue.ids()), dtype=int)
        self._launch_inference(th, remaining)

    def _launch_inference(self, th: Thinker, remaining: np.ndarray) -> None:
        s = self.s
        k = self.policy.ensemble_size
        size = self.policy.inference_chunk_size
        chunks = [remaining[i:i + size] for i in range(0, len(remaining), size)] or [remaining]
        s.chunks = chunks
        members = [s.members[m] for m in range(k)]
        per_task = lambda n: n / max(1, s.cfg.pool_size)  # noqa: E731
        inputs = [pack(s.pool[c]) for c in chunks]
        pads = [bytes(int(s.cfg.infer_round_trip_bytes / 2 * k * per_task(len(c)) * s.data_scale)) for c in chunks]
        if s.cfg.ml_store:
            refs = self._proxy_all(th.task_server, members + inputs + pads)
            members, inputs, pads = refs[:k], refs[k:k + len(chunks)], refs[k + len(chunks):]
        for i, c in enumerate(chunks):
            meta = {
                "seed": str(i),
                "chunk": str(i),
                "round": str(s.round_id),
                "duration_s": repr(s.cfg.infer_full_pass_s * s.ml_scale * k * per_task(len(c))),
                "pad_bytes": str(int(s.cfg.infer_round_trip_bytes / 2 * k * per_task(len(c)) * s.data_scale)),
            }
            fields = {f"member{m}": members[m] for m in range(k)}
            payload = TaskPayload.of(meta, **fields, x=inputs[i], pad=pads[i])
            th.task_server.submit_task("infer", payload)

    def on_infer(self, th: Thinker, res) -> None:
        s = self.s
        if int(res.metadata.get("round", -1)) != s.round_id:
            return
        if not res.success:
            raise RuntimeError(f"inference failed: {res.message}")
        preds = unpack(th.task_server.resolve(res)["pred"])
        with th.lock:
            s.preds[int(res.metadata["chunk"])] = preds
            if len(s.preds) < len(s.chunks):
                return
            ids = np.concatenate(s.chunks)
            matrix = np.hstack([s.preds[i] for i in range(len(s.chunks))])
        scores = ucb_scores(matrix)
        s.queue.reprioritize({int(c): float(v) for c, v in zip(ids, scores)})
        rid = f"round-{s.round_id}"
        th.events.record(rid, "infer", "queue_reprioritized")
        with th.lock:
            s.rounds_done += 1
            s.ml_running = False

    def close(self) -> None:
        self._pool.shutdown(wait=False)

