import json
import math
import shutil

import numpy as np
import pytest

from timekit import cf, cli, metrics, pipeline
from timekit.config import RunConfig, build_config, format_config, load_config, read_config_file
from timekit.synth import ConfigError

TINY = """\
[synth]
num_users = 30
num_items = 60
num_periods = 8
interactions_per_period = 6
[base]
dim = 4
cold_epochs = 10
warm_epochs = 3
batch_size = 256
lr = 0.01
[forecast]
window = 3
workers = 2
[gru]
hidden = 6
epochs = 4
[ncde]
hidden = 6
epochs = 2
steps_per_interval = 1
[eval]
k = 10
dump_users = u0
dump_items = i1,i2
"""


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.ini").write_text(TINY)
    assert cli.main(["generate", "--config", str(root / "tiny.ini"), "--output-dir", str(root / "data")]) == 0
    assert cli.main(["run", "--config", str(root / "tiny.ini"), "--dataset", str(root / "data" / "synthetic.csv"),
                     "--output-dir", str(root / "run")]) == 0
    return root


def test_three_layer_precedence(tmp_path):
    (tmp_path / "c.ini").write_text("[run]\nseed = 3\n[base]\ndim = 16  ; embedding width\nlr = 0.5\n[gru]\nepochs = 7\n")
    file_values = read_config_file(tmp_path / "c.ini")
    cfg = build_config(file_values, {"seed": "9", "gru_epochs": None})
    assert cfg.seed == 9  # flag beats file
    assert cfg.dim == 16 and cfg.base_lr == 0.5 and cfg.gru_epochs == 7  # file beats default
    assert cfg.ncde_epochs == RunConfig().ncde_epochs  # default survives


def test_config_text_round_trip(tmp_path):
    cfg = build_config({"synth_drift_angle": "pi/12", "test_mse": "yes", "dump_users": "a,b"})
    assert cfg.synth_drift_angle == pytest.approx(math.pi / 12)
    (tmp_path / "c.ini").write_text(format_config(cfg))
    assert load_config(tmp_path / "c.ini") == cfg


def test_unknown_keys_and_bad_values(tmp_path):
    (tmp_path / "c.ini").write_text("[gru]\nhidde = 3\n")
    with pytest.raises(ConfigError, match="gru.hidde"):
        read_config_file(tmp_path / "c.ini")
    with pytest.raises(ConfigError, match="dim"):
        build_config({"dim": "sixteen"})
    with pytest.raises(ConfigError, match="pairing"):
        build_config({"pairing": "lstm-gru"}).validate()


def test_generate_bad_drift_names_field(tmp_path, capsys):
    code = cli.main(["generate", "--synth-drift-angle", "4", "--output-dir", str(tmp_path)])
    assert code == cli.EXIT_CONFIG
    assert "synth_drift_angle" in capsys.readouterr().err


def test_generate_seed_flag_overrides_file(tmp_path):
    (tmp_path / "g.ini").write_text("[run]\nseed = 1\n[synth]\nnum_users = 5\nnum_items = 20\nnum_periods = 3\n")
    cli.main(["generate", "--config", str(tmp_path / "g.ini"), "--output-dir", str(tmp_path / "a")])
    cli.main(["generate", "--config", str(tmp_path / "g.ini"), "--seed", "2", "--output-dir", str(tmp_path / "b")])
    cli.main(["generate", "--config", str(tmp_path / "g.ini"), "--seed", "1", "--output-dir", str(tmp_path / "c")])
    a, b, c = ((tmp_path / d / "synthetic.csv").read_text() for d in "abc")
    assert a != b and a == c


def test_generate_unwritable_dir(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["generate", "--output-dir", str(blocker / "sub")]) == cli.EXIT_IO


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("TIMEKIT_OUTPUT_ROOT", str(tmp_path))
    cfg = RunConfig(dataset="x/foo.csv", base="lightgcn", seed=4)
    assert cfg.resolved_output_dir() == tmp_path / "foo-lightgcn-gru-ncde-s4"


def test_run_outputs(tiny):
    run = tiny / "run"
    rows = metrics.parse_csv((run / "results.csv").read_text())
    assert [r["forecaster"] for r in rows] == ["original", "gru-ncde"]
    assert all(0 <= r["recall"] <= 1 and 0 <= r["ndcg"] <= 1 and r["k"] == 10 for r in rows)
    manifest = pipeline.read_manifest(run)
    assert manifest["forecasts"]["gru-ncde"] == {"item_kind": "ncde", "user_kind": "gru", "window": 3}
    assert set(manifest["stages"]) == {"ingest", "pipeline", "forecast", "eval"}
    traj = np.loadtxt(run / "trajectories" / "user_u0.csv", delimiter=",", skiprows=1)
    assert traj.shape == (4, 1 + 7)  # D rows, dim column + M periods
    series = pipeline.load_series(run, "bprmf", 7)
    user0 = [i for i, name in enumerate((run / "user_index.csv").read_text().split()[1:]) if name.startswith("u0,")][0]
    np.testing.assert_allclose(traj[:, 1:], series.users[user0].T, rtol=1e-9)
    assert (run / "trajectories" / "item_i2.csv").exists()
    snap = cf.load_snapshot(run / "forecast" / "gru-ncde")
    assert snap.user_embeddings.shape == (30, 4)
    assert load_config(run / "config.ini").window == 3


def test_identical_runs_give_identical_results(tiny, tmp_path):
    args = ["run", "--config", str(tiny / "tiny.ini"), "--dataset", str(tiny / "data" / "synthetic.csv")]
    assert cli.main(args + ["--output-dir", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "results.csv").read_bytes() == (tiny / "run" / "results.csv").read_bytes()


def test_run_refuses_existing_run_dir(tiny, capsys):
    args = ["run", "--config", str(tiny / "tiny.ini"), "--dataset", str(tiny / "data" / "synthetic.csv"), "--output-dir", str(tiny / "run")]
    assert cli.main(args) == cli.EXIT_CONFIG
    assert "resume" in capsys.readouterr().err


def test_pairings_choose_model_kinds(tiny, tmp_path):
    for pairing, kinds in (("ncde-ncde", ("ncde", "ncde")), ("gru-gru", ("gru", "gru"))):
        out = tmp_path / pairing
        assert cli.main(["run", "--config", str(tiny / "tiny.ini"), "--dataset", str(tiny / "data" / "synthetic.csv"),
                         "--pairing", pairing, "--output-dir", str(out)]) == 0
        rec = pipeline.read_manifest(out)["forecasts"][pairing]
        assert (rec["user_kind"], rec["item_kind"]) == kinds


def test_drop_leading_fraction(tiny, tmp_path):
    out = tmp_path / "trim"
    assert cli.main(["run", "--config", str(tiny / "tiny.ini"), "--dataset", str(tiny / "data" / "synthetic.csv"),
                     "--drop-leading-fraction", "0.25", "--output-dir", str(out)]) == 0
    assert pipeline.read_manifest(out)["num_periods"] == 5  # 8 periods, 2 dropped, 1 held out


def test_resume_untouched_run_is_a_noop(tiny, capsys, tmp_path):
    run = tmp_path / "copy"
    shutil.copytree(tiny / "run", run)
    before = {p: p.stat().st_mtime_ns for p in run.rglob("*.emb")}
    stored = (run / "results.csv").read_bytes()
    assert cli.main(["resume", str(run)]) == 0
    assert "gru-ncde" in capsys.readouterr().out
    assert {p: p.stat().st_mtime_ns for p in run.rglob("*.emb")} == before
    assert (run / "results.csv").read_bytes() == stored


def test_resume_after_pipeline_reruns_only_forecasting(tiny, tmp_path):
    run = tmp_path / "partial"
    shutil.copytree(tiny / "run", run)
    manifest = pipeline.read_manifest(run)
    manifest.pop("forecasts")
    manifest["stages"] = ["ingest", "pipeline"]
    pipeline.write_manifest(run, manifest)
    shutil.rmtree(run / "forecast")
    (run / "results.csv").unlink()
    period_stamps = {p: p.stat().st_mtime_ns for p in run.glob("period_*/*.emb")}
    assert cli.main(["resume", str(run)]) == 0
    assert {p: p.stat().st_mtime_ns for p in run.glob("period_*/*.emb")} == period_stamps
    assert (run / "results.csv").read_bytes() == (tiny / "run" / "results.csv").read_bytes()


def test_resume_with_changed_dim_is_refused(tiny, capsys):
    assert cli.main(["resume", str(tiny / "run"), "--dim", "8"]) == cli.EXIT_CONFIG
    assert "config/manifest mismatch" in capsys.readouterr().err


def test_resume_corrupt_checkpoint_names_file(tiny, tmp_path, capsys):
    run = tmp_path / "corrupt"
    shutil.copytree(tiny / "run", run)
    path = run / "period_3" / "users.emb"
    path.write_bytes(path.read_bytes()[:40])
    assert cli.main(["resume", str(run)]) == cli.EXIT_IO
    err = capsys.readouterr().err
    assert "period_3" in err and "users.emb" in err and "stage pipeline" in err


def test_eval_only(tiny, capsys):
    run = str(tiny / "run")
    assert cli.main(["eval-only", run, "--csv"]) == 0
    assert capsys.readouterr().out == (tiny / "run" / "results.csv").read_text()
    assert cli.main(["eval-only", run, "--pairing", "original", "--csv"]) == 0
    rows = metrics.parse_csv(capsys.readouterr().out)
    assert [r["forecaster"] for r in rows] == ["original"]
    assert cli.main(["eval-only", run, "--k", "5", "--csv"]) == 0
    assert {r["k"] for r in metrics.parse_csv(capsys.readouterr().out)} == {5}
    assert cli.main(["eval-only", run, "--pairing", "gru-gru"]) == cli.EXIT_IO  # never trained


def test_ingest_check(tiny, capsys, tmp_path):
    assert cli.main(["ingest-check", str(tiny / "data" / "synthetic.csv")]) == 0
    assert "periods 8" in capsys.readouterr().out
    (tmp_path / "bad.csv").write_text("u,i,1\nu,i,oops\n")
    assert cli.main(["ingest-check", str(tmp_path / "bad.csv")]) == cli.EXIT_DATA
    assert "line 2" in capsys.readouterr().err


def test_exit_code_classification():
    from timekit.forecaster import ForecastDivergence
    from timekit.workflow import StageError

    diverged = StageError("forecast", ForecastDivergence("nan at epoch 3"))
    assert cli.exit_code(diverged) == cli.EXIT_DIVERGED
    wrapped = pipeline.PipelineError("period 2: base training failed")
    wrapped.__cause__ = FloatingPointError("nan")
    assert cli.exit_code(StageError("pipeline", wrapped)) == cli.EXIT_DIVERGED
    assert cli.exit_code(StageError("ingest", FileNotFoundError("x"))) == cli.EXIT_IO
    assert cli.exit_code(ConfigError("dim", "bad")) == cli.EXIT_CONFIG


def test_manifest_is_json(tiny):
    json.loads((tiny / "run" / "manifest.json").read_text())
