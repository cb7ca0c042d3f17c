"""Desk-scale control experiments on synthetic drift data.

The positive control uses the generator defaults (drift pi/24, noise 0.05);
the negative control switches both drift and noise off.  Forecaster and base
sizes are reduced from the CLI defaults so five seeds per base fit in a few
minutes on one core; see ``CONTROL_OVERRIDES``.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from pathlib import Path

from timekit import synth
from timekit.config import RunConfig
from timekit.workflow import RunOutcome, execute_run

CONTROL_OVERRIDES = dict(
    dim=16,
    window=5,
    pairing="gru-ncde",
    gru_hidden=32,
    gru_lr=3e-3,
    ncde_hidden=32,
    ncde_lr=3e-3,
    ncde_epochs=60,
    ncde_steps_per_interval=1,
    workers=1,
    test_mse=True,
)

SEEDS = (0, 1, 2, 3, 4)


def control_config(base: str, seed: int, drift: float = math.pi / 24, noise: float = 0.05, **overrides) -> RunConfig:
    opts = dict(CONTROL_OVERRIDES, base=base, seed=seed, synth_drift_angle=drift, synth_noise_std=noise)
    opts.update(overrides)
    return replace(RunConfig(), **opts)


@dataclass
class ControlResult:
    base: str
    seed: int
    recall: tuple[float, float]  # (original, forecast)
    ndcg: tuple[float, float]
    improvement: dict
    diagnostics: dict
    seconds: float

    @property
    def strictly_better(self) -> bool:
        return self.recall[1] > self.recall[0] and self.ndcg[1] > self.ndcg[0]


def run_control(cfg: RunConfig, root) -> ControlResult:
    """Generate the seed's dataset, run the full workflow, collect the metrics."""
    t0 = time.perf_counter()
    root = Path(root)
    data_path = synth.write_dataset(synth.generate(cfg.drift_config()), root / "data")
    cfg = replace(cfg, dataset=str(data_path))
    out: RunOutcome = execute_run(cfg, root / "run")
    orig, fc = out.rows[0], out.rows[1]
    return ControlResult(
        cfg.base,
        cfg.seed,
        (orig["recall"], fc["recall"]),
        (orig["ndcg"], fc["ndcg"]),
        {"recall": fc["improvement_recall_pct"], "ndcg": fc["improvement_ndcg_pct"]},
        out.diagnostics,
        time.perf_counter() - t0,
    )


def format_result(r: ControlResult) -> str:
    d = r.diagnostics
    mse = "  ".join(f"{c} valid {d[c]['valid_mse']:.4g} test {d[c].get('test_mse', float('nan')):.4g}" for c in ("user", "item"))
    return (f"{r.base:<9} seed {r.seed}  recall {r.recall[0]:.4f}->{r.recall[1]:.4f} ({r.improvement['recall']:+.2f}%)  "
            f"ndcg {r.ndcg[0]:.4f}->{r.ndcg[1]:.4f} ({r.improvement['ndcg']:+.2f}%)  {mse}  {r.seconds:.0f}s")
