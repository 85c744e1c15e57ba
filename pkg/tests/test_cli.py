import json

import numpy as np
import pytest

from risamodal.cli import build_parser, main
from risamodal.report import RESULT_COLUMNS, read_table

TINY = """
grid:
  counts: [4, 4, 4]
scene:
  rows: 4
  cols: 4
optimizer:
  K: 6
  steps: 5
predictor:
  epochs: 5
diffusion:
  T: 5
  widths: [4, 8]
  temb_dim: 8
  epochs: 2
  batch_size: 8
  num_samples: 1
dataset:
  num_shapes: 12
  test_fraction: 0.25
sweep:
  K_list: [4, 6]
  ris_sides: [3, 4]
  trials: 2
  shapes_per_trial: 1
"""


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(TINY)
    out = root / "out"

    def call(*args):
        return main([args[0], "--config", str(cfg), "--out-dir", str(out), "--seed", "3", *args[1:]])

    return call, out, root


def test_missing_artifacts_are_named(run, capsys):
    call, out, _ = run
    assert call("train-completion") == 2
    assert "gen-data" in capsys.readouterr().err
    assert call("optimize-configs", "--method", "predictor") == 2
    assert "train-predictor --K 6" in capsys.readouterr().err
    assert call("sense", "--configs", str(out / "nope.csv"), "--shape-id", "s0") == 2
    assert "optimize-configs" in capsys.readouterr().err


def test_bad_config_reports_everything(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("solver:\n  damping: 0\n  nonsense: 1\n")
    assert main(["gen-data", "--config", str(bad), "--out-dir", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "damping" in err and "nonsense" in err


def test_end_to_end(run):
    call, out, root = run
    assert call("gen-data") == 0
    rows = (out / "data" / "manifest.csv").read_text().splitlines()
    assert len(rows) == 13 and sum("test" in r for r in rows) == 3
    assert call("train-completion") == 0
    assert (out / "models" / "denoiser.ckpt").exists()
    assert (out / "models" / "denoiser_loss.png").exists()
    assert call("train-predictor", "--num-settings", "12", "--objects", "1") == 0
    assert json.loads((out / "models" / "predictor_K6_M16_summary.json").read_text())["n_train"] >= 8
    assert call("train-predictor", "--reuse-data", "--epochs", "3") == 0
    assert call("train-predictor", "--num-settings", "10", "--objects", "1", "--K", "4") == 0
    assert (out / "models" / "predictor_K4_M16.ckpt").exists()

    for method in ("predictor", "corrmin", "random"):
        assert call("optimize-configs", "--method", method) == 0
    cfg_path = out / "configs" / "predictor_K6_M16.csv"
    assert cfg_path.exists() and (out / "configs" / "predictor_K6_M16_trace.csv").exists()

    assert call("sense", "--configs", str(cfg_path), "--shape-id", "s00000") == 0
    d = out / "sense" / "s00000"
    for name in ("chi_v.txt", "chi_tilde.txt", "chi_tilde.ply", "shapes.png", "metrics.csv",
                 "run_manifest.json"):
        assert (d / name).exists(), name
    man = json.loads((d / "run_manifest.json").read_text())
    assert man["seed"] == 3 and len(man["checkpoints"]["denoiser"]["sha256"]) == 64

    assert call("sense", "--configs", str(cfg_path), "--shape-file",
                str(out / "data" / "shapes" / "s00001_chi.txt"), "--no-completion") == 0

    # a predictor family that was never trained is named before any trial runs
    assert call("eval-sweep", "--methods", "predictor", "--values", "4", "8") == 2
    assert call("eval-sweep", "--methods", "predictor", "random", "no_completion") == 0
    res = read_table(out / "sweep_K" / "results.csv")
    assert len(res) == 2 * 2 * 3
    assert (out / "sweep_K" / "sweep_K.png").exists()
    assert call("eval-sweep", "--sweep", "M", "--methods", "random", "--trials", "1", "--no-plots") == 0
    assert sorted({r["M"] for r in read_table(out / "sweep_M" / "results.csv")}) == [9, 16]

    assert call("export", "--results", str(out / "sweep_K" / "results.csv")) == 0
    assert (out / "summary.csv").exists() and (out / "schema.json").exists()
    assert not (out / "sweep_M" / "sweep_M.png").exists()

    # same seed and config reproduce the sweep
    first = read_table(out / "sweep_M" / "results.csv")
    assert call("eval-sweep", "--sweep", "M", "--methods", "random", "--trials", "1", "--no-plots") == 0
    second = read_table(out / "sweep_M" / "results.csv")
    assert [r["error"] for r in first] == [r["error"] for r in second]


def test_help_lists_schema(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["eval-sweep", "--help"])
    text = capsys.readouterr().out
    for col in RESULT_COLUMNS:
        assert col in text
