"""Task implementations for the synthetic applications, registered by name.

Each is pure in (inputs, params, seed); compute time is padded out to the
configured duration and outputs are padded to the configured byte size.
"""

from __future__ import annotations

import json

import numpy as np

from ..tasks import TaskContext, register
from .objective import Objective, pack, unpack
from .sampling import sample_trajectory
from .surrogate import Member, train_member


def objective_from_params(params: dict[str, str]) -> Objective:
    return Objective(**json.loads(params.get("objective", "{}")))


def padded(outputs: dict[str, bytes], ctx: TaskContext) -> dict[str, bytes]:
    """Add a ``pad`` field so the output payload totals about ``pad_bytes``."""
    target = int(ctx.metadata.get("pad_bytes", ctx.params.get("pad_bytes", "0")))
    used = sum(len(k) + len(v) for k, v in outputs.items())
    if target > used + 3:
        outputs["pad"] = bytes(target - used - 3)
    return outputs


def members_from(inputs: dict[str, bytes]) -> list[Member]:
    names = sorted((k for k in inputs if k.startswith("member")), key=lambda k: int(k[6:] or 0))
    return [Member.from_bytes(inputs[k]) for k in names]


@register("simulate", "cpu", schema=("objective", "noise", "pad_bytes", "failure_rate"))
def simulate(inputs: dict[str, bytes], ctx: TaskContext) -> dict[str, bytes]:
    obj = objective_from_params(ctx.params)
    rng = ctx.rng(salt=0x51)
    if rng.random() < float(ctx.params.get("failure_rate", 0.0)):
        raise RuntimeError("simulation failed to converge")
    x = unpack(inputs["x"])
    y = obj.value(x)
    noise = float(ctx.params.get("noise", 0.0))
    if noise > 0:
        y = y + rng.normal(0, noise, np.shape(y))
    ctx.pad_to(ctx.duration())
    return padded({"y": pack(np.atleast_1d(y))}, ctx)


@register("train", "gpu", schema=("n_features", "ridge", "activation", "pad_bytes", "bandwidth"))
def train(inputs: dict[str, bytes], ctx: TaskContext) -> dict[str, bytes]:
    p = ctx.params
    member = train_member(
        unpack(inputs["x"]),
        unpack(inputs["y"]),
        ctx.seed,
        n_features=int(p.get("n_features", 64)),
        ridge=float(p.get("ridge", 1e-3)),
        activation=p.get("activation", "square"),
        bandwidth=float(p.get("bandwidth", 0.5)),
    )
    ctx.pad_to(ctx.duration())
    return padded({"member": member.to_bytes()}, ctx)


@register("infer", "gpu", schema=("pad_bytes",))
def infer(inputs: dict[str, bytes], ctx: TaskContext) -> dict[str, bytes]:
    members = members_from(inputs)
    x = unpack(inputs["x"])
    preds = np.vstack([m.predict(x) for m in members]) if len(x) else np.zeros((len(members), 0))
    ctx.pad_to(ctx.duration())
    return padded({"pred": pack(preds)}, ctx)


@register("sample", "cpu", schema=("step_size", "noise", "pad_bytes"))
def sample(inputs: dict[str, bytes], ctx: TaskContext) -> dict[str, bytes]:
    frames = sample_trajectory(
        members_from(inputs),
        unpack(inputs["start"]),
        int(ctx.metadata.get("n_steps", "20")),
        ctx.seed,
        step_size=float(ctx.params.get("step_size", 0.01)),
        noise=float(ctx.params.get("noise", 0.05)),
    )
    ctx.pad_to(ctx.duration())
    return padded({"frames": pack(frames)}, ctx)
