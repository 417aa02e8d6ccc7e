"""Active fine-tuning of an energy surrogate.

The seed ensemble is fitted to labels from a cheap, biased approximation of
the true energy.  Sampling tasks walk trajectories on the current ensemble;
their frames feed an audit pool (last frame of each trajectory) and, after
ensemble scoring, an uncertainty pool.  Simulation tasks label frames with
the true energy, and every ``retrain_n`` new labels the ensemble is refit.
Held-out error on trajectories of the true dynamics is tracked per round.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from ..clock import now_ns
from ..refcore import TaskPayload, proxy
from ..steering import AgentSpec, ResourceCounter, SteeringPolicy, Thinker, TopicSpec, retrain_gate
from .objective import Objective, pack, unpack
from .sampling import Choice, SamplePools, select_next_finetune_task, trajectory_length, trajectory_schedule
from .surrogate import Member, ensemble_predict

log = logging.getLogger(__name__)


@dataclass
class FinetuneConfig:
    d: int = 16
    n_starts: int = 10
    n_seed: int = 200
    start_spread: float = 0.5
    seed_noise: float = 0.3
    bias_scale: float = 0.5  # slope of the approximation's linear error
    bias_curvature: float = 0.09  # and its quadratic error
    test_temperatures: tuple = (0.02, 0.05, 0.1)
    test_steps: int = 32
    step_size: float = 0.01
    sample_noise: float = 0.05
    new_structures: int = 100
    new_weight: int = 10  # repeats of each true label in the training set
    audit_target: int = 8
    uncertainty_size: int = 20
    refresh_every: int = 100
    schedule: tuple = (20, 1000, 8)
    sim_duration_s: float = 360.0
    train_duration_s: float = 240.0
    infer_per_100_s: float = 3.2
    sample_min_s: float = 1.0
    sample_max_s: float = 3.0
    duration_sigma: float = 0.0
    ml_time_scale: float | None = None
    sim_output_bytes: int = 20_000
    train_output_bytes: int = 21_000_000
    n_features: int = 128
    ridge: float = 1.0
    ml_store: str | None = None
    proxy_workers: int = 8

    @classmethod
    def from_dict(cls, d: dict | None) -> "FinetuneConfig":
        d = dict(d or {})
        for k in ("test_temperatures", "schedule"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def finetune_topics(cpu_endpoint: str, gpu_endpoint: str, energy: Objective, cfg: FinetuneConfig):
    obj = json.dumps({"d": energy.d, "seed": energy.seed, "sign": energy.sign})
    return [
        TopicSpec("simulate", "simulate", cpu_endpoint, {"objective": obj}, "cpu"),
        TopicSpec("sample", "sample", cpu_endpoint,
                  {"step_size": repr(cfg.step_size), "noise": repr(cfg.sample_noise)}, "cpu"),
        TopicSpec("train", "train", gpu_endpoint, {"n_features": str(cfg.n_features), "ridge": repr(cfg.ridge)}, "gpu"),
        TopicSpec("infer", "infer", gpu_endpoint, {}, "gpu"),
    ]


def rms_error(members: list[Member], x: np.ndarray, y: np.ndarray) -> float:
    pred = ensemble_predict(members, x).mean(axis=0)
    return float(np.sqrt(np.mean((pred - y) ** 2)))


@dataclass
class FinetuneState:
    cfg: FinetuneConfig
    time_scale: float
    data_scale: float
    seed: int
    cpu_slots: int
    ensemble_size: int = 8
    energy: Objective = field(init=False)
    pools: SamplePools = field(init=False)
    rounds: list = field(default_factory=list)  # (round, n_new, rms)
    new_x: list = field(default_factory=list)
    new_y: list = field(default_factory=list)
    members: list | None = None
    member_fields: dict = field(default_factory=dict)
    pending_members: dict = field(default_factory=dict)
    round_id: int = -1
    round_new: int = 0
    ml_running: bool = False
    retrain_wanted: bool = True
    new_since_train: int = 0
    sims_submitted: int = 0
    samples_submitted: int = 0
    labels_from: dict = field(default_factory=lambda: {"audit": 0, "uncertainty": 0})
    frame_of_task: dict = field(default_factory=dict)
    batch_of_task: dict = field(default_factory=dict)
    finished: bool = False

    def __post_init__(self):
        cfg = self.cfg
        self.energy = Objective(d=cfg.d, seed=self.seed, sign=-1)
        rng = np.random.default_rng([self.seed, 0xF17E])
        c = self.energy.center
        self.bias = rng.normal(0, cfg.bias_scale, cfg.d)
        self.starts = c + rng.normal(0, cfg.start_spread, (cfg.n_starts, cfg.d))
        per = -(-cfg.n_seed // cfg.n_starts)
        self.seed_x = (np.repeat(self.starts, per, axis=0) + rng.normal(0, cfg.seed_noise, (per * cfg.n_starts, cfg.d)))[
            : cfg.n_seed
        ]
        self.seed_y = self.approx(self.seed_x)
        self.test_x = self._true_trajectories(rng)
        self.test_y = self.energy.value(self.test_x)
        self.pools = SamplePools(cfg.uncertainty_size, cfg.refresh_every)
        self.schedule = trajectory_schedule(*cfg.schedule)
        self.rng = np.random.default_rng([self.seed, 0x5EED])

    def approx(self, x: np.ndarray) -> np.ndarray:
        dx = np.atleast_2d(x) - self.energy.center
        return self.energy.value(x) + dx @ self.bias + self.cfg.bias_curvature * np.sum(dx**2, axis=-1)

    def _true_trajectories(self, rng) -> np.ndarray:
        frames = []
        for s in self.starts:
            for temp in self.cfg.test_temperatures:
                f = s.copy()
                for _ in range(self.cfg.test_steps):
                    f = f - self.cfg.step_size * self.energy.gradient(f)[0] + rng.normal(0, temp, f.shape)
                    frames.append(f.copy())
        return np.array(frames)

    @property
    def ml_scale(self) -> float:
        return self.cfg.ml_time_scale if self.cfg.ml_time_scale is not None else self.time_scale

    def training_set(self) -> tuple[np.ndarray, np.ndarray]:
        w = self.cfg.new_weight
        xs = [self.seed_x] + [np.array(self.new_x).reshape(-1, self.cfg.d)] * w
        ys = [self.seed_y] + [np.array(self.new_y)] * w
        return np.vstack(xs), np.concatenate(ys)

    @property
    def pre_rms(self) -> float | None:
        return self.rounds[0][2] if self.rounds else None

    @property
    def best_rms(self) -> float | None:
        tuned = [r for _, n, r in self.rounds if n > 0]
        return min(tuned) if tuned else None

    def summary(self) -> dict:
        return {
            "pre_rms": self.pre_rms,
            "best_rms": self.best_rms,
            "rounds": self.rounds,
            "new_structures": len(self.new_y),
            "labels_from": self.labels_from,
            "samples_submitted": self.samples_submitted,
            "uncertainty_refreshes": self.pools.refreshes,
            "config": asdict(self.cfg),
        }


class Finetune:
    def __init__(self, state: FinetuneState, policy: SteeringPolicy):
        self.s = state
        self.policy = policy
        self.resources = ResourceCounter({"cpu": state.cpu_slots})
        self._pool = ThreadPoolExecutor(state.cfg.proxy_workers, thread_name_prefix="proxy")

    def agents(self) -> list[AgentSpec]:
        return [
            AgentSpec.on_resource_free("allocator", "cpu", self.allocate),
            AgentSpec.on_timer("ml", 0.05, self.ml_tick),
            AgentSpec.on_result("sampler", "sample", self.on_sample),
            AgentSpec.on_result("labeler", "simulate", self.on_simulation),
            AgentSpec.on_result("trainer", "train", self.on_train),
            AgentSpec.on_result("scorer", "infer", self.on_infer),
        ]

    def _proxy_all(self, ts, blobs):
        store = ts.registry.store(self.s.cfg.ml_store)
        return list(self._pool.map(lambda b: proxy(b, store), blobs))

    # -- CPU allocation -----------------------------------------------------------
    def allocate(self, th: Thinker, _kind: str = "cpu") -> None:
        s = self.s
        with th.lock:
            if s.members is None or s.finished:
                return
            free = self.resources.available("cpu")
            if not free:
                return
            for choice in select_next_finetune_task(s.pools, s.cfg.audit_target, free):
                labeling = choice is not Choice.SAMPLE
                if labeling and s.sims_submitted >= s.cfg.new_structures:
                    continue
                if not self.resources.try_acquire("cpu"):
                    break
                if choice is Choice.SAMPLE:
                    self._submit_sample(th)
                else:
                    frame = s.pools.take_audit() if choice is Choice.AUDIT else s.pools.take_uncertain()
                    self._submit_label(th, frame, "audit" if choice is Choice.AUDIT else "uncertainty")

    def _submit_sample(self, th: Thinker) -> None:
        s = self.s
        progress = s.sims_submitted / max(1, s.cfg.new_structures)
        n_steps = trajectory_length(progress, s.schedule)
        first, last = s.schedule[0], s.schedule[-1]
        frac = (n_steps - first) / max(1, last - first)
        duration = (s.cfg.sample_min_s + (s.cfg.sample_max_s - s.cfg.sample_min_s) * frac) * s.time_scale
        start = s.starts[s.rng.integers(len(s.starts))]
        meta = {
            "seed": str(int(s.rng.integers(1 << 31))),
            "n_steps": str(n_steps),
            "duration_s": repr(duration),
            "duration_sigma": repr(s.cfg.duration_sigma),
        }
        s.samples_submitted += 1
        th.task_server.submit_task("sample", TaskPayload.of(meta, **s.member_fields, start=pack(start)))

    def _submit_label(self, th: Thinker, frame, source: str) -> None:
        s = self.s
        meta = {
            "seed": str(frame.frame_id),
            "duration_s": repr(s.cfg.sim_duration_s * s.time_scale),
            "duration_sigma": repr(s.cfg.duration_sigma),
            "pad_bytes": str(int(s.cfg.sim_output_bytes * s.data_scale)),
        }
        s.sims_submitted += 1
        s.labels_from[source] += 1
        tid = th.task_server.submit_task("simulate", TaskPayload.of(meta, x=pack(frame.x)))
        s.frame_of_task[tid] = frame

    # -- results ------------------------------------------------------------------
    def on_sample(self, th: Thinker, res) -> None:
        s = self.s
        self.resources.release("cpu")
        if not res.success:
            log.warning("sampling task failed: %s", res.message)
            return
        frames = unpack(th.task_server.resolve(res)["frames"])
        with th.lock:
            due = s.pools.add_trajectory(frames[1:])  # the start frame is not new
        for batch in due:
            self._submit_scoring(th, batch)

    def _submit_scoring(self, th: Thinker, batch) -> None:
        s = self.s
        x = np.vstack([f.x for f in batch])
        meta = {"seed": "0", "duration_s": repr(s.cfg.infer_per_100_s * len(batch) / 100 * s.ml_scale)}
        tid = th.task_server.submit_task("infer", TaskPayload.of(meta, **s.member_fields, x=pack(x)))
        s.batch_of_task[tid] = batch

    def on_infer(self, th: Thinker, res) -> None:
        s = self.s
        batch = s.batch_of_task.pop(res.task_id)
        if not res.success:
            log.warning("scoring task failed: %s", res.message)
            return
        preds = unpack(th.task_server.resolve(res)["pred"])
        with th.lock:
            s.pools.refresh_uncertainty(batch, preds.var(axis=0))

    def on_simulation(self, th: Thinker, res) -> None:
        s = self.s
        self.resources.release("cpu")
        frame = s.frame_of_task.pop(res.task_id)
        if not res.success:
            with th.lock:
                s.sims_submitted -= 1  # let another frame take its place
            return
        y = float(unpack(th.task_server.resolve(res)["y"])[0])
        with th.lock:
            s.new_x.append(frame.x)
            s.new_y.append(y)
            s.new_since_train += 1
            if retrain_gate(self.policy, s.new_since_train) or len(s.new_y) >= s.cfg.new_structures:
                s.retrain_wanted = True

    def ml_tick(self, th: Thinker) -> None:
        s = self.s
        with th.lock:
            if not s.retrain_wanted or s.ml_running or s.finished:
                return
            s.retrain_wanted = False
            s.ml_running = True
            s.round_id += 1
            s.round_new = len(s.new_y)
            s.new_since_train = 0
            s.pending_members = {}
            x, y = s.training_set()
        rid = f"round-{s.round_id}"
        th.events.record(rid, "train", "retrain_requested")
        data = {"x": pack(x), "y": pack(y)}
        if s.cfg.ml_store:
            rx, ry = self._proxy_all(th.task_server, [data["x"], data["y"]])
            data = {"x": rx, "y": ry}
        for m in range(s.ensemble_size):
            meta = {
                "seed": str(s.seed * 7919 + s.round_id * 97 + m),
                "member": str(m),
                "round": str(s.round_id),
                "duration_s": repr(s.cfg.train_duration_s * s.ml_scale),
                "pad_bytes": str(int(s.cfg.train_output_bytes * s.data_scale)),
            }
            th.task_server.submit_task("train", TaskPayload.of(meta, **data))

    def on_train(self, th: Thinker, res) -> None:
        s = self.s
        if not res.success:
            raise RuntimeError(f"training failed: {res.message}")
        blob = th.task_server.resolve(res)["member"]
        with th.lock:
            if int(res.metadata["round"]) != s.round_id:
                return
            s.pending_members[int(res.metadata["member"])] = blob
            if len(s.pending_members) < s.ensemble_size:
                return
            blobs = [s.pending_members[m] for m in range(s.ensemble_size)]
        members = [Member.from_bytes(b) for b in blobs]
        rms = rms_error(members, s.test_x, s.test_y)
        refs = self._proxy_all(th.task_server, blobs) if s.cfg.ml_store else blobs
        th.events.record(f"round-{s.round_id}", "train", "queue_reprioritized")
        with th.lock:
            s.rounds.append((s.round_id, s.round_new, rms))
            log.info("round %d: %d new labels, held-out rms %.4f", s.round_id, s.round_new, rms)
            s.members = members
            s.member_fields = {f"member{m}": r for m, r in enumerate(refs)}
            s.ml_running = False
            if s.round_new >= s.cfg.new_structures:
                s.finished = True
                th.stop()
                return
        self.allocate(th)

    def close(self) -> None:
        self._pool.shutdown(wait=False)
