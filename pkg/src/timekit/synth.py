"""Synthetic interaction logs with controllable preference drift.

Each user owns a fixed 2-D plane in latent space, spanned by its starting
taste vector and a random orthogonal direction; the taste rotates by
``drift_angle`` radians per period inside that plane.  Items are static.
Each period a user draws ``interactions_per_period`` distinct items from a
softmax over current scores.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from timekit.data import _month_edge
from timekit.numgrad import make_rng


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class DriftConfig:
    num_users: int = 200
    num_items: int = 500
    latent_dim: int = 8
    num_periods: int = 12
    interactions_per_period: int = 20
    drift_angle: float = math.pi / 24
    noise_std: float = 0.05
    temperature: float = 0.1
    seed: int = 0
    start_year: int = 2020

    def validate(self) -> None:
        for name in ("num_users", "num_items", "latent_dim", "num_periods", "interactions_per_period"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if self.latent_dim < 2:
            raise ConfigError("latent_dim", "must be >= 2 to hold a rotation plane")
        if not 0.0 <= self.drift_angle < math.pi:
            raise ConfigError("drift_angle", f"must lie in [0, pi), got {self.drift_angle}")
        if self.noise_std < 0:
            raise ConfigError("noise_std", "must be >= 0")
        if self.temperature <= 0:
            raise ConfigError("temperature", "must be > 0")
        if self.interactions_per_period > self.num_items:
            raise ConfigError("interactions_per_period", f"{self.interactions_per_period} exceeds num_items={self.num_items}")


@dataclass(frozen=True)
class SyntheticData:
    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    user_latents: np.ndarray  # (U, P, d) taste per period, noise included
    item_latents: np.ndarray  # (I, d)

    def top_items(self, period: int, k: int) -> list[set[int]]:
        """Deterministic top-k item sets under each user's period taste (0-based period)."""
        scores = self.user_latents[:, period] @ self.item_latents.T
        order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
        return [set(row.tolist()) for row in order]

    def to_text(self) -> str:
        lines = ["user,item,timestamp"]
        lines += [f"u{u},i{v},{t}" for u, v, t in zip(self.users.tolist(), self.items.tolist(), self.timestamps.tolist())]
        return "\n".join(lines) + "\n"


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def user_trajectories(base: np.ndarray, ortho: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Rotate each user's taste inside its own plane: (U, d) x (P,) -> (U, P, d)."""
    return np.cos(angles)[None, :, None] * base[:, None, :] + np.sin(angles)[None, :, None] * ortho[:, None, :]


def sample_interactions(tastes: np.ndarray, item_latents: np.ndarray, k: int, temperature: float, rng) -> list[np.ndarray]:
    out = []
    for taste in tastes:
        logits = item_latents @ taste / temperature
        p = np.exp(logits - logits.max())
        p /= p.sum()
        out.append(rng.choice(len(item_latents), size=k, replace=False, p=p))
    return out


def generate(config: DriftConfig) -> SyntheticData:
    config.validate()
    rng = make_rng(config.seed)
    d = config.latent_dim
    items = _unit(rng.normal(size=(config.num_items, d)))
    base = _unit(rng.normal(size=(config.num_users, d)))
    raw = rng.normal(size=(config.num_users, d))
    ortho = _unit(raw - np.sum(raw * base, axis=1, keepdims=True) * base)
    angles = config.drift_angle * np.arange(config.num_periods)
    tastes = user_trajectories(base, ortho, angles)
    if config.noise_std:
        tastes = tastes + rng.normal(0.0, config.noise_std, size=tastes.shape)

    first_month = (config.start_year - 1970) * 12
    us, vs, ts = [], [], []
    for p in range(config.num_periods):
        lo, hi = _month_edge(first_month + p), _month_edge(first_month + p + 1)
        picks = sample_interactions(tastes[:, p], items, config.interactions_per_period, config.temperature, rng)
        for u, chosen in enumerate(picks):
            us.append(np.full(len(chosen), u))
            vs.append(chosen)
            # strictly inside (lo, hi] so the record lands in month p
            ts.append(rng.integers(lo + 1, hi + 1, size=len(chosen)))
    users = np.concatenate(us)
    its = np.concatenate(vs)
    stamps = np.concatenate(ts)
    order = np.lexsort((its, users, stamps))
    return SyntheticData(users[order], its[order], stamps[order], tastes, items)


def write_dataset(data: SyntheticData, directory, name: str = "synthetic") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{name}.csv"
    path.write_text(data.to_text(), encoding="utf-8")
    np.savez(directory / f"{name}_latents.npz", user_latents=data.user_latents, item_latents=data.item_latents)
    return path
