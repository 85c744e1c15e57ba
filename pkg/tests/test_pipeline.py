import numpy as np
import pytest

from risamodal.config import preset
from risamodal.diffusion import Denoiser
from risamodal.pipeline import (AmodalPipeline, MissingModelError, build_completion_pairs, draw_test_shapes, eval_sweep,
                                make_configs, run_trial, summarize)
from risamodal.report import (RESULT_COLUMNS, SUMMARY_COLUMNS, export_results, read_table, write_table)


@pytest.fixture(scope="module")
def small_pipe():
    cfg = preset()
    cfg.grid.counts = [4, 4, 4]
    cfg.scene.rows = cfg.scene.cols = 4
    cfg.optimizer.steps = 5
    cfg.diffusion.T = 5
    cfg.diffusion.num_samples = 2
    return AmodalPipeline(cfg, denoiser=Denoiser((4, 8), 8, seed=0))


def test_pipeline_basics(small_pipe):
    assert small_pipe.M == 16 and small_pipe.channel().shape == (16, 64)
    other = small_pipe.with_setting([0.1, 0, 0], ris_side=3)
    assert other.M == 9 and other.grid.roi_center[0] == pytest.approx(0.1)
    assert small_pipe.grid.roi_center[0] == 0.0
    assert small_pipe.partition().L == 8


def test_make_configs_share_start(small_pipe):
    rnd, _ = make_configs("random", small_pipe, 6, 3)
    cm, trace = make_configs("corrmin", small_pipe, 6, 3)
    assert rnd.is_discrete() and cm.is_discrete()
    assert trace["objective"][-1] <= trace["objective"][0]
    with pytest.raises(MissingModelError, match="K=6, M=16"):
        make_configs("predictor", small_pipe, 6, 3)
    with pytest.raises(ValueError):
        make_configs("magic", small_pipe, 6, 3)


def test_shapes_and_pairs(small_pipe):
    shapes = draw_test_shapes(small_pipe, 3, 0)
    assert len(shapes) == 3 and all(s.shape == (64,) for s in shapes)
    pairs = build_completion_pairs(small_pipe, 10, 0, occluder_probability=1.0)
    for _, cv, chi in pairs:
        assert np.all(cv <= chi)


def test_sense_contains_visible_part(small_pipe):
    shapes = draw_test_shapes(small_pipe, 2, 1)
    cfg, _ = make_configs("random", small_pipe, 8, 0)
    for completion in (True, False):
        for o in small_pipe.sense(shapes, cfg, seed=0, completion=completion):
            assert np.array_equal(o.chi_tilde * o.chi_v, o.chi_v)
            assert 0 <= o.error <= 1 and 0 <= o.iou <= 1
            assert set(o.row()) >= {"error", "iou", "visible_error", "residual"}


def test_sweep_is_deterministic_and_paired(small_pipe):
    methods = ["random", "no_completion", "no_occlusion_update"]
    a = eval_sweep(small_pipe, "K", [4, 8], 2, methods, seed=5, shapes_per_trial=1)
    b = eval_sweep(small_pipe, "K", [4, 8], 2, methods, seed=5, shapes_per_trial=1)
    assert len(a) == 12
    for ra, rb in zip(a, b):
        skip = ("wall_time", "predicted")
        assert {k: v for k, v in ra.items() if k not in skip} == \
            {k: v for k, v in rb.items() if k not in skip}
    assert [r["method"] for r in a[:3]] == methods
    m = eval_sweep(small_pipe, "M", [3], 1, ["random"], seed=5, shapes_per_trial=1)
    assert m[0]["M"] == 9
    with pytest.raises(ValueError):
        eval_sweep(small_pipe, "Q", [1], 1)
    with pytest.raises(MissingModelError):
        eval_sweep(small_pipe, "M", [3], 1, ["predictor"])


def test_parallel_matches_serial(small_pipe):
    a = eval_sweep(small_pipe, "K", [4], 2, ["random"], seed=2, shapes_per_trial=1, workers=1)
    b = eval_sweep(small_pipe, "K", [4], 2, ["random"], seed=2, shapes_per_trial=1, workers=2)
    assert [r["error"] for r in a] == [r["error"] for r in b]


def test_run_trial_falls_back_without_predictor(small_pipe):
    rows = run_trial(small_pipe, "K", 4, 0, ["no_occlusion_update"], 0, 1)
    assert np.isnan(rows[0]["predicted"])


def _fake_rows():
    rows = []
    for x in (4, 8):
        for t in range(3):
            for m in ("random", "corrmin"):
                rows.append({"trial_id": t, "sweep": "K", "x": x, "method": m, "K": x, "M": 64,
                             "error": 0.01 * t + 0.001 * x, "iou": 0.5, "visible_error": 0.0,
                             "residual": 1.0, "outer_iters": 2.0, "wall_time": 0.1,
                             "predicted": float("nan"), "seed": 0})
    return rows


def test_summarize():
    s = summarize(_fake_rows())
    cell = next(c for c in s if c["x"] == 8 and c["method"] == "random")
    assert cell["n"] == 3 and cell["error_mean"] == pytest.approx(0.018)


def test_export_roundtrip(tmp_path):
    rows = _fake_rows()
    paths = export_results(rows, tmp_path)
    back = read_table(paths["results"])
    assert len(back) == len(rows)
    assert back[1]["error"] == rows[1]["error"] and np.isnan(back[0]["predicted"])
    assert read_table(paths["summary"], SUMMARY_COLUMNS)[0]["n"] == 3
    assert paths["figure_K"].stat().st_size > 0
    assert paths["plotdata_K_random"].read_text().splitlines()[0] == "x,error_mean,error_std,n"
    write_table([], tmp_path / "empty.csv")
    assert (tmp_path / "empty.csv").read_text().strip() == ",".join(RESULT_COLUMNS)
    with pytest.raises(ValueError):
        read_table(paths["summary"])
    with pytest.raises(ValueError):
        write_table([{"trial_id": 1}], tmp_path / "bad.csv")
