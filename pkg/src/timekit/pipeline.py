"""Incremental warm-start training over periods and forecaster windows."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from timekit import cf
from timekit.data import PeriodedDataset, cumulative_interactions
from timekit.numgrad import make_rng

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    base: cf.BaseConfig = field(default_factory=cf.BaseConfig)
    cold_epochs: int = 500
    warm_epochs: int = 100
    seed: int = 0
    # optional per-period override, keyed by 1-based period index
    epochs_override: dict[int, int] = field(default_factory=dict)

    def epochs_for(self, period: int) -> int:
        if period in self.epochs_override:
            return self.epochs_override[period]
        return self.cold_epochs if period == 1 else self.warm_epochs


@dataclass(frozen=True)
class EmbeddingTimeSeries:
    users: np.ndarray  # (|U|, M, D)
    items: np.ndarray  # (|V|, M, D)
    boundaries: tuple[int, ...]
    # trainable (layer-0) embeddings of period M, the warm start for anything after it
    last_ego: cf.EmbeddingSnapshot | None = field(default=None, compare=False, repr=False)

    @property
    def num_periods(self) -> int:
        return self.users.shape[1]

    @property
    def dim(self) -> int:
        return self.users.shape[2]

    def snapshot(self, i: int) -> cf.EmbeddingSnapshot:
        """Snapshot of 1-based period i."""
        return cf.EmbeddingSnapshot(self.users[:, i - 1].copy(), self.items[:, i - 1].copy(), i)


def period_dir(run_dir, i: int) -> Path:
    return Path(run_dir) / f"period_{i}"


def read_manifest(run_dir) -> dict:
    path = Path(run_dir) / MANIFEST
    if not path.exists():
        return {}
    return json.loads(path.read_text())


def write_manifest(run_dir, manifest: dict) -> None:
    path = Path(run_dir) / MANIFEST
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


def _load_period(run_dir, i: int, base: str, dim: int, num_users: int, num_items: int):
    d = period_dir(run_dir, i)
    snap = cf.load_snapshot(d, i, base)
    ego = cf.load_snapshot(d, i, base, prefix=".ego") if base == "lightgcn" else snap
    for s in (snap, ego):
        if s.user_embeddings.shape != (num_users, dim) or s.item_embeddings.shape != (num_items, dim):
            raise cf.CheckpointError(f"{d}: checkpoint shape does not match the run")
    return snap, ego


def run_incremental(dataset: PeriodedDataset, base: str, config: PipelineConfig, run_dir=None, strict: bool = False) -> EmbeddingTimeSeries:
    """Warm-started training on cumulative data for periods 1..M.

    The last period of ``dataset`` (M+1) is held out and never trained on.
    With ``run_dir`` set, each period is checkpointed and periods whose
    checkpoints already load cleanly are skipped.  A completed period whose
    checkpoint fails verification is retrained, or raises when ``strict``.
    """
    m = dataset.num_periods - 1
    if m < 3:
        raise PipelineError(f"need at least 3 training periods, dataset has M={m}")
    if base not in cf.BASES:
        raise PipelineError(f"unknown base algorithm {base!r}")
    nu, ni, dim = dataset.num_users, dataset.num_items, config.base.dim
    manifest = read_manifest(run_dir) if run_dir is not None else {}
    done = set(manifest.get("completed_periods", []))

    users = np.empty((nu, m, dim))
    items = np.empty((ni, m, dim))
    ego = None
    for i in range(1, m + 1):
        if run_dir is not None and i in done:
            try:
                snap, ego = _load_period(run_dir, i, base, dim, nu, ni)
            except cf.CheckpointError:
                if strict:
                    raise
                log.warning("period %d checkpoint failed verification; retraining", i)
                done.discard(i)
            else:
                users[:, i - 1], items[:, i - 1] = snap.user_embeddings, snap.item_embeddings
                continue
        rng = make_rng([config.seed, i])
        init = ego if ego is not None else cf.random_snapshot(nu, ni, dim, rng, config.base.init_std)
        init = replace(init, period_index=i)
        u, v = cumulative_interactions(dataset, i)
        bc = replace(config.base, epochs=config.epochs_for(i))
        try:
            result = cf.train_base(base, u, v, nu, ni, init, bc, rng)
        except Exception as exc:
            raise PipelineError(f"period {i}: base training failed: {exc}") from exc
        snap, ego = result.snapshot, result.ego
        users[:, i - 1], items[:, i - 1] = snap.user_embeddings, snap.item_embeddings
        if run_dir is not None:
            d = period_dir(run_dir, i)
            try:
                cf.save_snapshot(d, snap)
                if base == "lightgcn":
                    cf.save_snapshot(d, ego, prefix=".ego")
            except OSError as exc:
                raise PipelineError(f"period {i}: checkpoint write failed: {exc}") from exc
            done.add(i)
            manifest.update(
                base=base,
                dim=dim,
                num_periods=m,
                seed=config.seed,
                completed_periods=sorted(done),
                pipeline=_config_record(config),
            )
            write_manifest(run_dir, manifest)
        log.info("period %d/%d trained (%d pairs)", i, m, len(u))
    return EmbeddingTimeSeries(users, items, tuple(dataset.boundaries[:m]), last_ego=ego)


def _config_record(config: PipelineConfig) -> dict:
    rec = asdict(config)
    rec["epochs_override"] = {str(k): v for k, v in config.epochs_override.items()}
    return rec


def load_series(run_dir, base: str, m: int, boundaries=()) -> EmbeddingTimeSeries:
    snaps = [cf.load_snapshot(period_dir(run_dir, i), i, base) for i in range(1, m + 1)]
    users = np.stack([s.user_embeddings for s in snaps], axis=1)
    items = np.stack([s.item_embeddings for s in snaps], axis=1)
    return EmbeddingTimeSeries(users, items, tuple(boundaries))


def train_test_snapshot(dataset: PeriodedDataset, base: str, config: PipelineConfig, ego: cf.EmbeddingSnapshot) -> cf.EmbeddingSnapshot:
    """Diagnostic only: warm-start one more period on data through M+1.

    Used to measure forecaster test MSE; never fed back into forecasting.
    """
    i = dataset.num_periods
    u, v = cumulative_interactions(dataset, i)
    bc = replace(config.base, epochs=config.warm_epochs)
    return cf.train_base(base, u, v, dataset.num_users, dataset.num_items, ego, bc, make_rng([config.seed, i])).snapshot


# ---------------------------------------------------------------------------
# windows


@dataclass(frozen=True)
class ForecastWindowSet:
    inputs: np.ndarray  # (S, R, D)
    targets: np.ndarray | None  # (S, D)
    entities: np.ndarray  # (S,)
    target_periods: np.ndarray  # (S,), 1-based

    def __len__(self) -> int:
        return len(self.entities)

    @property
    def times(self) -> np.ndarray:
        """Normalised knot clock 0..R-1 shared by every window."""
        return np.arange(self.inputs.shape[1], dtype=np.float64)

    def subset(self, idx) -> "ForecastWindowSet":
        return ForecastWindowSet(
            self.inputs[idx],
            None if self.targets is None else self.targets[idx],
            self.entities[idx],
            self.target_periods[idx],
        )


def _check_window(m: int, r: int) -> None:
    if r < 1:
        raise PipelineError(f"window length R must be >= 1, got {r}")
    if r + 1 > m:
        raise PipelineError(f"window length R={r} needs at least M={r + 1} periods, got M={m}")


def make_windows(series: np.ndarray, r: int, split: str) -> ForecastWindowSet:
    """Windows over one entity class, ``series`` shaped (N, M, D).

    A window ending at period i reads rows i-R+1..i and targets row i+1.
    ``train`` targets periods R+1..M-1; ``valid`` targets period M.
    """
    n, m, d = series.shape
    _check_window(m, r)
    if split == "train":
        if m - 1 - r < 1:
            raise PipelineError(f"insufficient training windows: M={m}, R={r} gives {m - 1 - r}")
        ends = range(r, m - 1)
    elif split == "valid":
        ends = [m - 1]
    else:
        raise ValueError(f"split must be 'train' or 'valid', got {split!r}")
    inputs, targets, ents, periods = [], [], [], []
    for i in ends:  # i is the 1-based last input period
        inputs.append(series[:, i - r : i])
        targets.append(series[:, i])
        ents.append(np.arange(n))
        periods.append(np.full(n, i + 1))
    # order samples entity-major so an entity's windows stay contiguous
    inputs = np.stack(inputs, axis=1).reshape(-1, r, d)
    targets = np.stack(targets, axis=1).reshape(-1, d)
    ents = np.stack(ents, axis=1).reshape(-1)
    periods = np.stack(periods, axis=1).reshape(-1)
    return ForecastWindowSet(inputs, targets, ents, periods)


def make_test_window(series: np.ndarray, r: int) -> ForecastWindowSet:
    """Final window, rows M-R+1..M, whose forecast is evaluated on M+1."""
    n, m, d = series.shape
    if r < 1 or r > m:
        raise PipelineError(f"window length R={r} needs at least M={r} periods, got M={m}")
    return ForecastWindowSet(series[:, m - r :].copy(), None, np.arange(n), np.full(n, m + 1))
