"""Bootstrap ensemble of random-feature ridge regressors and UCB ranking."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("linear", "cos", "square")


@dataclass
class Member:
    projection: np.ndarray  # d x m
    weights: np.ndarray  # m + 1, bias last
    seed: int
    activation: str = "square"
    offset: np.ndarray | None = None  # per-feature shift (cos, square)

    def features(self, x: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(np.asarray(x, dtype=float)) @ self.projection
        if self.activation == "cos":
            z = np.cos(z + self.offset)
        elif self.activation == "square":
            z = (z + self.offset) ** 2
        return np.hstack([z, np.ones((z.shape[0], 1))])

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.size == 0:
            return np.zeros(0)
        return self.features(x) @ self.weights

    def gradient(self, x: np.ndarray) -> np.ndarray:
        """d prediction / d x for each row of ``x``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        w = self.weights[:-1]
        if self.activation == "linear":
            return np.tile(self.projection @ w, (x.shape[0], 1))
        z = x @ self.projection + self.offset
        s = -np.sin(z) if self.activation == "cos" else 2 * z
        return (s * w) @ self.projection.T

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        arrays = {"projection": self.projection, "weights": self.weights, "seed": np.array(self.seed)}
        arrays["activation"] = np.array(self.activation)
        if self.offset is not None:
            arrays["offset"] = self.offset
        np.savez(buf, **arrays)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Member":
        with np.load(io.BytesIO(data), allow_pickle=False) as z:
            return cls(
                z["projection"],
                z["weights"],
                int(z["seed"]),
                str(z["activation"]),
                z["offset"] if "offset" in z.files else None,
            )


def random_projection(d: int, m: int, seed: int, activation: str, bandwidth: float = 0.5):
    rng = np.random.default_rng([seed, 0xFEA7])
    if activation == "linear":
        return rng.normal(0, 1 / np.sqrt(d), (d, m)), None
    if activation == "square":
        return rng.normal(0, 1 / np.sqrt(d), (d, m)), rng.normal(0, 1, m)
    # random Fourier features for an RBF kernel
    return rng.normal(0, bandwidth, (d, m)), rng.uniform(0, 2 * np.pi, m)


def train_member(
    x: np.ndarray,
    y: np.ndarray,
    member_seed: int,
    n_features: int = 64,
    ridge: float = 1e-3,
    activation: str = "square",
    identity: bool = False,
    bootstrap: bool = True,
    bandwidth: float = 0.5,
) -> Member:
    """Fit one member on a bootstrap resample of (x, y)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 2:
        raise ValueError("need at least two training examples")
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    d = x.shape[1]
    if identity:
        projection, offset, activation = np.eye(d), None, "linear"
    else:
        projection, offset = random_projection(d, n_features, member_seed, activation, bandwidth)
    rng = np.random.default_rng([member_seed, 0xB007])
    idx = rng.integers(0, len(x), len(x)) if bootstrap else np.arange(len(x))
    member = Member(projection, np.zeros(projection.shape[1] + 1), member_seed, activation, offset)
    phi = member.features(x[idx])
    a = phi.T @ phi + ridge * np.eye(phi.shape[1])
    member.weights = np.linalg.solve(a, phi.T @ y[idx])
    if not np.all(np.isfinite(member.weights)):
        raise FloatingPointError("non-finite weights")
    return member


def infer_chunk(member: Member, candidates: np.ndarray) -> np.ndarray:
    return member.predict(candidates)


def ensemble_predict(members: list[Member], x: np.ndarray) -> np.ndarray:
    """K x N prediction matrix."""
    return np.vstack([m.predict(x) for m in members])


def ucb_scores(preds: np.ndarray) -> np.ndarray:
    """Mean plus population standard deviation across members (rows)."""
    preds = np.atleast_2d(np.asarray(preds, dtype=float))
    if preds.shape[0] < 1:
        raise ValueError("need at least one member")
    return preds.mean(axis=0) + preds.std(axis=0, ddof=0)


def rank(scores: np.ndarray, ids=None) -> list:
    """Candidate ids by descending score, ties by ascending id."""
    ids = np.arange(len(scores)) if ids is None else np.asarray(ids)
    order = np.lexsort((ids, -np.asarray(scores)))
    return [ids[i].item() for i in order]
