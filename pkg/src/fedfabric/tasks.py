"""Registered task implementations: named builtins invoked by endpoints.

A registered function body is a builtin name plus a string parameter block, so
the relay routes real registrations without shipping code.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class DurationModel:
    """Simulated compute time: constant, or lognormal around ``mean_s``."""

    mean_s: float = 0.0
    sigma: float = 0.0

    def sample(self, rng: np.random.Generator) -> float:
        if self.mean_s <= 0:
            return 0.0
        if self.sigma <= 0:
            return self.mean_s
        # keep the mean at mean_s
        mu = math.log(self.mean_s) - self.sigma**2 / 2
        return float(rng.lognormal(mu, self.sigma))

    @classmethod
    def from_params(cls, params: dict[str, str], prefix: str = "duration") -> "DurationModel":
        return cls(float(params.get(f"{prefix}_s", 0.0)), float(params.get(f"{prefix}_sigma", 0.0)))

    def to_params(self, prefix: str = "duration") -> dict[str, str]:
        return {f"{prefix}_s": repr(self.mean_s), f"{prefix}_sigma": repr(self.sigma)}


@dataclass
class TaskContext:
    params: dict[str, str]
    metadata: dict[str, str] = field(default_factory=dict)
    worker_id: str = ""
    sleep: Callable[[float], None] = time.sleep
    _t0: float = field(default_factory=time.monotonic)

    @property
    def seed(self) -> int:
        return int(self.metadata.get("seed", self.params.get("seed", "0")))

    def rng(self, salt: int = 0) -> np.random.Generator:
        return np.random.default_rng([self.seed, salt])

    def duration(self, prefix: str = "duration") -> float:
        """Sampled compute time; per-task metadata overrides registered params."""
        merged = {**self.params, **{k: v for k, v in self.metadata.items() if k.startswith(prefix + "_")}}
        return DurationModel.from_params(merged, prefix).sample(self.rng(salt=0xD0))

    def pad_to(self, seconds: float) -> None:
        """Sleep so the task's total execution takes about ``seconds``."""
        remaining = seconds - (time.monotonic() - self._t0)
        if remaining > 0:
            self.sleep(remaining)


TaskFn = Callable[[dict[str, bytes], TaskContext], dict[str, bytes]]


@dataclass(frozen=True)
class TaskImplementation:
    name: str
    fn: TaskFn
    resource: str = "cpu"
    schema: tuple[str, ...] = ()  # recognised parameter names

    def __call__(self, inputs: dict[str, bytes], ctx: TaskContext) -> dict[str, bytes]:
        unknown = set(ctx.params) - set(self.schema) - {"seed", "duration_s", "duration_sigma"}
        if unknown:
            raise ValueError(f"{self.name}: unknown parameters {sorted(unknown)}")
        return self.fn(inputs, ctx)


IMPLEMENTATIONS: dict[str, TaskImplementation] = {}


def register(name: str, resource: str = "cpu", schema: tuple[str, ...] = ()):
    def deco(fn: TaskFn) -> TaskFn:
        IMPLEMENTATIONS[name] = TaskImplementation(name, fn, resource, schema)
        return fn

    return deco


@register("noop")
def noop(inputs: dict[str, bytes], ctx: TaskContext) -> dict[str, bytes]:
    return {}


@register("sleep")
def sleep_task(inputs: dict[str, bytes], ctx: TaskContext) -> dict[str, bytes]:
    ctx.pad_to(ctx.duration())
    return {}


@register("echo")
def echo(inputs: dict[str, bytes], ctx: TaskContext) -> dict[str, bytes]:
    ctx.pad_to(ctx.duration())
    return dict(inputs)


@register("fail", schema=("message",))
def fail(inputs: dict[str, bytes], ctx: TaskContext) -> dict[str, bytes]:
    raise RuntimeError(ctx.params.get("message", "configured failure"))


def default_implementations() -> dict[str, TaskImplementation]:
    from .apps import tasks as _app_tasks  # noqa: F401  (registers app builtins)

    return IMPLEMENTATIONS
