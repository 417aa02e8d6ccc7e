"""Fine-tuning helpers: surrogate-guided trajectories, the audit and
uncertainty pools, and the controller that splits CPU workers between
sampling and simulation.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .surrogate import Member

log = logging.getLogger(__name__)


def sample_trajectory(
    members: list[Member], start_frame: np.ndarray, n_steps: int, seed: int, step_size: float = 0.01, noise: float = 0.05
) -> np.ndarray:
    """Walk downhill on the ensemble-mean prediction with Gaussian kicks.

    Returns ``n_steps + 1`` frames (start included), or fewer if the walk
    leaves the finite range.
    """
    rng = np.random.default_rng([seed, 0x5A3B])
    frames = [np.asarray(start_frame, dtype=float)]
    f = frames[0]
    for _ in range(n_steps):
        grad = np.mean([m.gradient(f)[0] for m in members], axis=0) if members and step_size else 0.0
        f = f - step_size * grad + (rng.normal(0, noise, f.shape) if noise else 0.0)
        if not np.all(np.isfinite(f)):
            log.warning("trajectory left the finite range after %d steps; truncated", len(frames) - 1)
            break
        frames.append(f)
    return np.vstack(frames)


def trajectory_schedule(first: int = 20, last: int = 1000, stages: int = 8) -> list[int]:
    """Geometric ramp of trajectory lengths."""
    if stages == 1:
        return [last]
    ratio = (last / first) ** (1 / (stages - 1))
    return [int(round(first * ratio**i)) for i in range(stages)]


def trajectory_length(progress: float, schedule: list[int]) -> int:
    """Length for a run ``progress`` fraction complete (equal-width stages)."""
    stage = min(len(schedule) - 1, max(0, int(math.floor(progress * len(schedule)))))
    return schedule[stage]


@dataclass
class Frame:
    frame_id: int
    x: np.ndarray
    trajectory: int
    last: bool = False


@dataclass
class SamplePools:
    """Frames waiting to be labeled.

    The audit pool keeps the final frame of each trajectory.  Every frame
    also counts toward the uncertainty refresh, which fires exactly when
    ``refresh_every`` new frames have been sampled.
    """

    uncertainty_size: int = 20
    refresh_every: int = 100
    audit_pool: dict[int, Frame] = field(default_factory=dict)
    uncertainty_pool: list[Frame] = field(default_factory=list)
    sampled_since_refresh: int = 0
    frames: dict[int, Frame] = field(default_factory=dict)
    _pending_refresh: list[Frame] = field(default_factory=list)
    _next_frame: int = 0
    _next_traj: int = 0
    refreshes: int = 0

    def add_trajectory(self, xs: np.ndarray) -> list[list[Frame]]:
        """Register a trajectory; returns any batches due for uncertainty scoring."""
        traj = self._next_traj
        self._next_traj += 1
        due = []
        for i, x in enumerate(xs):
            fr = Frame(self._next_frame, np.asarray(x), traj, last=(i == len(xs) - 1))
            self._next_frame += 1
            self.frames[fr.frame_id] = fr
            if fr.last:
                self.audit_pool[fr.frame_id] = fr
            self._pending_refresh.append(fr)
            self.sampled_since_refresh += 1
            if self.sampled_since_refresh == self.refresh_every:
                due.append(self._pending_refresh)
                self._pending_refresh = []
                self.sampled_since_refresh = 0
        return due

    def refresh_uncertainty(self, frames: list[Frame], variances: np.ndarray) -> None:
        order = np.argsort(-np.asarray(variances), kind="stable")[: self.uncertainty_size]
        self.uncertainty_pool = [frames[i] for i in order]
        self.refreshes += 1

    def take_audit(self) -> Frame | None:
        if not self.audit_pool:
            return None
        fid = next(iter(self.audit_pool))  # oldest first
        self.uncertainty_pool = [f for f in self.uncertainty_pool if f.frame_id != fid]
        return self.audit_pool.pop(fid)

    def take_uncertain(self) -> Frame | None:
        if not self.uncertainty_pool:
            return None
        fr = self.uncertainty_pool.pop(0)
        self.audit_pool.pop(fr.frame_id, None)
        return fr


class Choice(str, enum.Enum):
    AUDIT = "simulate-audit"
    UNCERTAINTY = "simulate-uncertainty"
    SAMPLE = "sample"


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def sampling_fraction(audit_size: int, target: int) -> float:
    if target <= 0:
        return 0.0
    return min(1.0, max(0.0, (target - audit_size) / target))


def select_next_finetune_task(pools: SamplePools, audit_target: int, free_workers: int) -> list[Choice]:
    """Assign ``free_workers`` CPU slots to sampling or simulation.

    A fraction clamp((T - |audit|)/T, 0, 1) of slots samples.  Each
    simulation slot draws from the audit pool while it is below target, from
    the uncertainty pool otherwise, falling back to whichever pool is
    nonempty and finally to sampling.
    """
    n_sample = _round_half_up(free_workers * sampling_fraction(len(pools.audit_pool), audit_target))
    choices = [Choice.SAMPLE] * n_sample
    audit_left = len(pools.audit_pool)
    unc_left = len(pools.uncertainty_pool)
    for _ in range(free_workers - n_sample):
        prefer_audit = audit_left < audit_target
        if prefer_audit and audit_left:
            choices.append(Choice.AUDIT)
            audit_left -= 1
        elif unc_left:
            choices.append(Choice.UNCERTAINTY)
            unc_left -= 1
        elif audit_left:
            choices.append(Choice.AUDIT)
            audit_left -= 1
        else:
            choices.append(Choice.SAMPLE)
    return choices
