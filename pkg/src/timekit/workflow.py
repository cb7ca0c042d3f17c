"""End-to-end run: ingest -> incremental base training -> forecasters -> evaluation.

Run-directory layout::

    config.ini  manifest.json  user_index.csv  item_index.csv
    period_<i>/users.emb, items.emb        (plus .ego files for lightgcn)
    forecast/<pairing>/users.emb, items.emb, user.model, item.model,
                       history_user.csv, history_item.csv, diagnostics.json
    trajectories/user_<id>.csv, item_<id>.csv
    results.csv  results.txt
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from timekit import cf, metrics, pipeline
from timekit import forecaster as fc
from timekit.config import RunConfig, load_config, write_config
from timekit.data import InteractionLog, PeriodedDataset, ingest_interactions, partition_periods, write_index_maps
from timekit.synth import ConfigError

log = logging.getLogger(__name__)

STAGES = ("ingest", "pipeline", "forecast", "eval")
CONFIG_FILE = "config.ini"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.__cause__ = cause


@contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


@dataclass
class RunOutcome:
    run_dir: Path
    rows: list[dict]
    diagnostics: dict = field(default_factory=dict)
    reused: bool = False


def load_dataset(cfg: RunConfig) -> tuple[InteractionLog, PeriodedDataset]:
    if not cfg.dataset:
        raise ConfigError("dataset", "no dataset path given")
    raw = ingest_interactions(cfg.dataset)
    ds = partition_periods(raw, cfg.granularity)
    if cfg.drop_leading_fraction:
        ds = ds.drop_leading(cfg.drop_leading_fraction)
    return raw, ds


def _check_manifest(cfg: RunConfig, manifest: dict, num_periods: int) -> None:
    expect = {"base": cfg.base, "dim": cfg.dim, "seed": cfg.seed, "num_periods": num_periods}
    for key, want in expect.items():
        if key in manifest and manifest[key] != want:
            raise ConfigError(key, f"config/manifest mismatch: config has {want!r}, manifest has {manifest[key]!r}")
    rec = manifest.get("pipeline")
    if rec is not None:
        now = pipeline._config_record(cfg.pipeline_config())
        for key in sorted(set(rec) | set(now)):
            if rec.get(key) != now.get(key):
                raise ConfigError(key, f"config/manifest mismatch: config has {now.get(key)!r}, manifest has {rec.get(key)!r}")


def _mark(run_dir: Path, **updates) -> dict:
    manifest = pipeline.read_manifest(run_dir)
    manifest.update(updates)
    pipeline.write_manifest(run_dir, manifest)
    return manifest


def _write_history(path: Path, hist: fc.TrainHistory) -> None:
    lines = ["epoch,train_mse,valid_mse"]
    lines += [f"{e},{a:.10g},{b:.10g}" for e, (a, b) in enumerate(zip(hist.train_loss, hist.valid_loss))]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def train_pair(series: pipeline.EmbeddingTimeSeries, cfg: RunConfig):
    """Train the user and the item forecaster of ``cfg.pairing`` (concurrently when workers > 1)."""
    kinds = fc.PAIRINGS[cfg.pairing]
    jobs = []
    for arr, kind in zip((series.users, series.items), kinds):
        train = pipeline.make_windows(arr, cfg.window, "train")
        valid = pipeline.make_windows(arr, cfg.window, "valid")
        jobs.append((train, valid, kind, cfg.train_config(kind)))
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=min(cfg.workers, len(jobs))) as pool:
            futures = [pool.submit(fc.train_forecaster, *job) for job in jobs]
            return [f.result() for f in futures]
    return [fc.train_forecaster(*job) for job in jobs]


def holdout_mse(model: fc.Forecaster, arr: np.ndarray, target: np.ndarray, window: int) -> float:
    pred = model.predict(pipeline.make_test_window(arr, window).inputs)
    return float(np.mean((pred - target) ** 2))


def dump_trajectories(run_dir: Path, series: pipeline.EmbeddingTimeSeries, raw: InteractionLog, cfg: RunConfig) -> list[Path]:
    """Per requested entity, a D x M matrix of its embedding across periods."""
    out = []
    for cls, ids, wanted, arr in (("user", raw.user_ids, cfg.dump_users, series.users), ("item", raw.item_ids, cfg.dump_items, series.items)):
        index = {name: i for i, name in enumerate(ids)}
        for name in filter(None, (s.strip() for s in wanted.split(","))):
            if name not in index:
                raise ConfigError(f"dump_{cls}s", f"unknown {cls} id {name!r}")
            mat = arr[index[name]].T  # (D, M)
            lines = ["dim," + ",".join(f"period_{i}" for i in range(1, mat.shape[1] + 1))]
            lines += [f"{d}," + ",".join(f"{v:.10g}" for v in row) for d, row in enumerate(mat)]
            path = run_dir / "trajectories" / f"{cls}_{name}.csv"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("\n".join(lines) + "\n", encoding="utf-8")
            out.append(path)
    return out


def _load_forecast(fdir: Path, pairing: str):
    snap = cf.load_snapshot(fdir, 0, pairing)
    models = (fc.load_model(fdir / "user.model"), fc.load_model(fdir / "item.model"))
    return snap, models


def execute_run(cfg: RunConfig, run_dir=None, resume: bool = False) -> RunOutcome:
    cfg.validate()
    if cfg.dataset:
        cfg = replace(cfg, dataset=str(Path(cfg.dataset).resolve()))
    run_dir = Path(run_dir) if run_dir is not None else cfg.resolved_output_dir()
    existing = pipeline.read_manifest(run_dir)
    if existing and not resume:
        raise ConfigError("output_dir", f"{run_dir} already holds a run; use resume")

    with stage("ingest"):
        raw, ds = load_dataset(cfg)
        run_dir.mkdir(parents=True, exist_ok=True)
        _check_manifest(cfg, existing, ds.num_periods - 1)
        write_config(cfg, run_dir / CONFIG_FILE)
        write_index_maps(raw, run_dir)
        _mark(run_dir, dataset=str(cfg.dataset), stages=sorted(set(existing.get("stages", [])) | {"ingest"}))

    with stage("pipeline"):
        series = pipeline.run_incremental(ds, cfg.base, cfg.pipeline_config(), run_dir, strict=resume)
        manifest = _mark(run_dir, stages=sorted(set(pipeline.read_manifest(run_dir).get("stages", [])) | {"pipeline"}))

    fdir = run_dir / "forecast" / cfg.pairing
    record = manifest.get("forecasts", {}).get(cfg.pairing)
    reused = False
    with stage("forecast"):
        if resume and record is not None and record.get("window") == cfg.window:
            forecast, (um, im) = _load_forecast(fdir, cfg.pairing)
            diagnostics = json.loads((fdir / "diagnostics.json").read_text())
            reused = True
        else:
            (um, uh), (im, ih) = train_pair(series, cfg)
            m = series.num_periods
            forecast = fc.forecast_all(um, im, pipeline.make_test_window(series.users, cfg.window),
                                       pipeline.make_test_window(series.items, cfg.window), m + 1)
            fdir.mkdir(parents=True, exist_ok=True)
            cf.save_snapshot(fdir, forecast)
            fc.save_model(fdir / "user.model", um)
            fc.save_model(fdir / "item.model", im)
            _write_history(fdir / "history_user.csv", uh)
            _write_history(fdir / "history_item.csv", ih)
            diagnostics = {
                "user": {"kind": um.kind, "best_epoch": uh.best_epoch, "valid_mse": uh.best_valid},
                "item": {"kind": im.kind, "best_epoch": ih.best_epoch, "valid_mse": ih.best_valid},
            }
            if cfg.test_mse:
                nxt = pipeline.train_test_snapshot(ds, cfg.base, cfg.pipeline_config(), series.last_ego)
                diagnostics["user"]["test_mse"] = holdout_mse(um, series.users, nxt.user_embeddings, cfg.window)
                diagnostics["item"]["test_mse"] = holdout_mse(im, series.items, nxt.item_embeddings, cfg.window)
            (fdir / "diagnostics.json").write_text(json.dumps(diagnostics, indent=2, sort_keys=True) + "\n")
            forecasts = dict(pipeline.read_manifest(run_dir).get("forecasts", {}))
            forecasts[cfg.pairing] = {"window": cfg.window, "user_kind": um.kind, "item_kind": im.kind}
            stages = set(pipeline.read_manifest(run_dir).get("stages", [])) | {"forecast"}
            _mark(run_dir, forecasts=forecasts, stages=sorted(stages))

    with stage("eval"):
        original = series.snapshot(series.num_periods)
        a, b, _ = metrics.evaluate_run(original, forecast, ds, cfg.k)
        rows = metrics.result_rows(Path(cfg.dataset).stem, cfg.base, a, {cfg.pairing: b})
        (run_dir / "results.csv").write_text(metrics.format_csv(rows), encoding="utf-8")
        (run_dir / "results.txt").write_text(metrics.format_table(rows), encoding="utf-8")
        dump_trajectories(run_dir, series, raw, cfg)
        stages = set(pipeline.read_manifest(run_dir).get("stages", [])) | {"eval"}
        _mark(run_dir, stages=sorted(stages))
    return RunOutcome(run_dir, rows, diagnostics, reused)


def load_run_config(run_dir) -> RunConfig:
    path = Path(run_dir) / CONFIG_FILE
    if not path.exists():
        raise FileNotFoundError(f"{path}: no run config (is this a run directory?)")
    return load_config(path)


def eval_only(run_dir, pairing: str | None = None, k: int | None = None, cfg: RunConfig | None = None) -> list[dict]:
    """Recompute metrics from stored snapshots; ``pairing='original'`` gives the baseline row alone."""
    run_dir = Path(run_dir)
    cfg = cfg or load_run_config(run_dir)
    pairing = pairing or cfg.pairing
    k = k or cfg.k
    manifest = pipeline.read_manifest(run_dir)
    if not manifest:
        raise FileNotFoundError(f"{run_dir / pipeline.MANIFEST}: missing manifest")
    with stage("ingest"):
        _, ds = load_dataset(cfg)
    with stage("eval"):
        m = ds.num_periods - 1
        original = cf.load_snapshot(pipeline.period_dir(run_dir, m), m, cfg.base)
        exclusion, truth = metrics.holdout_protocol(ds)
        a = metrics.evaluate_snapshot(original, exclusion, truth, k)
        forecasts = {}
        if pairing != "original":
            if pairing not in fc.PAIRINGS:
                raise ConfigError("pairing", f"unknown pairing {pairing!r}")
            snap = cf.load_snapshot(run_dir / "forecast" / pairing, m + 1, pairing)
            forecasts[pairing] = metrics.evaluate_snapshot(snap, exclusion, truth, k)
        return metrics.result_rows(Path(cfg.dataset).stem, cfg.base, a, forecasts)
