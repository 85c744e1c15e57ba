"""Command-line interface.

Every subcommand reads the preset, then ``--config``, then its own flags,
validates the whole configuration before doing any work, and writes under
``--out-dir``::

    data/manifest.csv, data/shapes/*.txt        gen-data
    models/denoiser.ckpt, denoiser_loss.*        train-completion
    data/predictor_train_K<K>_M<M>.csv,
    models/predictor_K<K>_M<M>.*                 train-predictor
    configs/<method>_K<K>_M<M>.csv (+ trace)     optimize-configs
    sense/<shape_id>/...                          sense
    sweep_<K|M>[_tag]/results.csv, summary.csv    eval-sweep
    <dir>/results.csv, summary.csv, schema.json   export
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config, save_config
from .datagen import generate_shape, read_manifest, write_manifest
from .diffusion import Denoiser, build_schedule, denoiser_from_params, save_denoiser_params, train_completion
from .geometry import export_point_cloud, load_voxel_grid, save_voxel_grid
from .nn import load_checkpoint, save_checkpoint
from .pipeline import (AmodalPipeline, MissingModelError, build_completion_pairs, draw_test_shapes,
                       eval_sweep, make_configs)
from .predictor import (PredictorModel, build_training_set, load_training_set, save_training_set,
                        train_predictor)
from .report import RESULT_COLUMNS, export_results, plot_curves, plot_shapes, read_table
from .ris import load_configs, save_configs

log = logging.getLogger("risamodal")


class MissingArtifactError(RuntimeError):
    pass


def _paths(out_dir: Path) -> dict:
    return {
        "data": out_dir / "data",
        "manifest": out_dir / "data" / "manifest.csv",
        "shapes": out_dir / "data" / "shapes",
        "models": out_dir / "models",
        "denoiser": out_dir / "models" / "denoiser.ckpt",
        "configs": out_dir / "configs",
        "sense": out_dir / "sense",
    }


def _require(path: Path, stage: str) -> Path:
    if not Path(path).exists():
        raise MissingArtifactError(f"{path} not found; run `{stage}` first")
    return Path(path)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_run_manifest(out: Path, cfg: ExperimentConfig, command: str, artifacts: dict) -> None:
    """Config, seed and checkpoint hashes needed to regenerate a run."""
    ckpts = {k: {"path": str(p), "sha256": _sha256(p)} for k, p in artifacts.items() if Path(p).exists()}
    (out / "run_manifest.json").write_text(json.dumps(
        {"command": command, "version": __version__, "seed": cfg.seed, "config": cfg.to_dict(),
         "checkpoints": ckpts}, indent=2))


def load_denoiser(path):
    params = load_checkpoint(_require(path, "train-completion"))
    model = denoiser_from_params(params)
    model.eval()
    ex = params.extra
    return model, build_schedule(int(ex["T"]), float(ex["beta_start"]), float(ex["beta_end"]))


def _family(K, M) -> str:
    return f"K{int(K)}_M{int(M)}"


def load_predictors(models_dir: Path) -> dict:
    """Every ``predictor_K<K>_M<M>.ckpt`` under ``models_dir``, keyed by (K, M)."""
    out = {}
    for path in sorted(Path(models_dir).glob("predictor_K*_M*.ckpt")):
        params = load_checkpoint(path)
        out[(int(params.extra["K"]), int(params.extra["M"]))] = PredictorModel.from_params(params)
    return out


def _pipeline(cfg, out: Path, need_denoiser=True, need_predictor=False) -> AmodalPipeline:
    p = _paths(out)
    den, sched = load_denoiser(p["denoiser"]) if need_denoiser else (None, None)
    preds = load_predictors(p["models"]) if need_predictor else None
    return AmodalPipeline(cfg, den, sched, preds)


# --- commands -------------------------------------------------------------------

def cmd_gen_data(cfg: ExperimentConfig, out: Path, num_shapes=None) -> Path:
    """Procedural shapes with their simulated visible parts, plus a manifest."""
    p = _paths(out)
    p["shapes"].mkdir(parents=True, exist_ok=True)
    pipe = AmodalPipeline(cfg)
    n = int(num_shapes or cfg.dataset.num_shapes)
    pairs = build_completion_pairs(pipe, n, cfg.seed, cfg.dataset.occluder_probability, cfg.dataset.max_size)
    n_test = int(round(cfg.dataset.test_fraction * n))
    rows = []
    for i, (spec, chi_v, chi) in enumerate(pairs):
        sid = f"s{i:05d}"
        save_voxel_grid(pipe.grid.with_shape(chi), p["shapes"] / f"{sid}_chi.txt")
        save_voxel_grid(pipe.grid.with_shape(chi_v), p["shapes"] / f"{sid}_chi_v.txt")
        rows.append({"shape_id": sid, "spec": spec, "split": "test" if i >= n - n_test else "train",
                     "path": f"shapes/{sid}_chi.txt"})
    write_manifest(rows, p["manifest"])
    log.info("wrote %d shapes (%d test) to %s", n, n_test, p["data"])
    return p["manifest"]


def _load_pairs(cfg, out: Path, split="train"):
    p = _paths(out)
    manifest = Path(cfg.dataset.manifest) if cfg.dataset.manifest else _require(p["manifest"], "gen-data")
    rows = [r for r in read_manifest(manifest) if r["split"] == split]
    full, vis, ids = [], [], []
    for r in rows:
        chi_path = manifest.parent / r["path"]
        g = load_voxel_grid(chi_path)
        gv = load_voxel_grid(str(chi_path).replace("_chi.txt", "_chi_v.txt"))
        full.append(g.to_array(g.chi))
        vis.append(g.to_array(gv.chi))
        ids.append(r["shape_id"])
    return np.array(full, dtype=np.int8), np.array(vis, dtype=np.int8), ids


def cmd_train_completion(cfg: ExperimentConfig, out: Path, epochs=None) -> Path:
    p = _paths(out)
    full, vis, _ = _load_pairs(cfg, out)
    if len(full) == 0:
        raise MissingArtifactError("dataset has no training shapes; run `gen-data` first")
    d = cfg.diffusion
    sched = build_schedule(d.T, d.beta_start, d.beta_end)
    model = Denoiser(tuple(d.widths), d.temb_dim, seed=cfg.seed)
    hist = train_completion(model, full, vis, sched, epochs=int(epochs or d.epochs),
                            batch_size=d.batch_size, lr=d.lr, seed=cfg.seed)
    p["models"].mkdir(parents=True, exist_ok=True)
    save_checkpoint(save_denoiser_params(model, sched, {"seed": cfg.seed}), p["denoiser"])
    with open(p["models"] / "denoiser_loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        w.writerows([[i + 1, repr(float(v))] for i, v in enumerate(hist)])
    plot_curves({"training loss": hist}, p["models"] / "denoiser_loss.png", "noise MSE")
    return p["denoiser"]


def cmd_train_predictor(cfg: ExperimentConfig, out: Path, num_settings=None, objects=None,
                        epochs=None, reuse_data=False, K=None, ris_side=None) -> Path:
    """Label settings of one (K, M) family and fit its error predictor."""
    p = _paths(out)
    pr = cfg.predictor
    K = int(K or cfg.optimizer.K)
    pipe = _pipeline(cfg, out, need_denoiser=not reuse_data)
    if ris_side:
        pipe = pipe.with_setting(ris_side=int(ris_side))
    fam = _family(K, pipe.M)
    data_path = p["data"] / f"predictor_train_{fam}.csv"
    if reuse_data:
        samples = load_training_set(_require(data_path, "train-predictor"))
    else:
        objs = draw_test_shapes(pipe, int(objects or pr.objects_per_setting), cfg.seed + 1)
        samples = build_training_set(int(pr.num_settings if num_settings is None else num_settings),
                                     objs, pipe, K, seed=cfg.seed, roi_jitter=pr.roi_jitter,
                                     partition_blocks=cfg.optimizer.partition_blocks,
                                     corrmin_fraction=pr.corrmin_fraction,
                                     corrmin_steps=cfg.optimizer.steps)
        p["data"].mkdir(parents=True, exist_ok=True)
        save_training_set(samples, data_path)
    model, metrics = train_predictor(samples, epochs=int(epochs or pr.epochs), lr=pr.lr,
                                     seed=cfg.seed, weight_decay=pr.weight_decay)
    p["models"].mkdir(parents=True, exist_ok=True)
    ckpt = p["models"] / f"predictor_{fam}.ckpt"
    params = model.to_params()
    params.extra.update({"K": K, "M": pipe.M})
    save_checkpoint(params, ckpt)
    with open(p["models"] / f"predictor_{fam}_metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_mse", "val_mse"])
        for i, (a, b) in enumerate(zip(metrics["train_mse"], metrics["val_mse"])):
            w.writerow([i, repr(float(a)), repr(float(b))])
    summary = {k: v for k, v in metrics.items() if not isinstance(v, list)}
    (p["models"] / f"predictor_{fam}_summary.json").write_text(json.dumps(summary, indent=2))
    plot_curves({"train": metrics["train_mse"], "validation": metrics["val_mse"]},
                p["models"] / f"predictor_{fam}_metrics.png", "MSE")
    return ckpt


def cmd_optimize_configs(cfg: ExperimentConfig, out: Path, method="predictor", K=None,
                         ris_side=None) -> Path:
    p = _paths(out)
    pipe = _pipeline(cfg, out, need_denoiser=False, need_predictor=method == "predictor")
    if ris_side:
        pipe = pipe.with_setting(ris_side=int(ris_side))
    K = int(K or cfg.optimizer.K)
    configs, trace = make_configs(method, pipe, K, cfg.seed)
    p["configs"].mkdir(parents=True, exist_ok=True)
    path = p["configs"] / f"{method}_K{K}_M{pipe.M}.csv"
    save_configs(configs, path)
    with open(path.with_name(path.stem + "_trace.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "objective"])
        w.writerows([[i, repr(float(v))] for i, v in enumerate(trace.get("objective", []))])
    if "pre_quantization" in trace:
        log.info("predicted error before/after quantization: %.5f / %.5f",
                 trace["pre_quantization"], trace["post_quantization"])
    return path


def _read_shape(cfg, out: Path, shape_id=None, shape_file=None):
    if shape_file:
        g = load_voxel_grid(shape_file)
        return Path(shape_file).stem, g.chi.astype(np.int8)
    p = _paths(out)
    manifest = Path(cfg.dataset.manifest) if cfg.dataset.manifest else _require(p["manifest"], "gen-data")
    for r in read_manifest(manifest):
        if r["shape_id"] == shape_id:
            return shape_id, generate_shape(r["spec"], tuple(cfg.grid.counts))
    raise KeyError(f"shape {shape_id!r} not in {manifest}")


def cmd_sense(cfg: ExperimentConfig, out: Path, configs_path, shape_id=None, shape_file=None,
              completion=True) -> dict:
    """Measure, reconstruct and complete one shape; writes shapes and a metrics row."""
    configs_path = _require(configs_path, "optimize-configs")
    p = _paths(out)
    pipe = _pipeline(cfg, out, need_denoiser=completion)
    configs = load_configs(configs_path)
    if configs.M != pipe.M:
        raise ValueError(f"{configs_path} has M={configs.M}, scene has M={pipe.M}")
    sid, chi = _read_shape(cfg, out, shape_id, shape_file)
    if len(chi) != pipe.grid.N:
        raise ValueError(f"shape has {len(chi)} voxels, grid has {pipe.grid.N}")
    (o,) = pipe.sense([chi], configs, seed=cfg.seed, completion=completion)
    d = p["sense"] / sid
    d.mkdir(parents=True, exist_ok=True)
    save_voxel_grid(pipe.grid.with_shape(o.chi_v), d / "chi_v.txt")
    save_voxel_grid(pipe.grid.with_shape(o.chi_tilde), d / "chi_tilde.txt")
    export_point_cloud(pipe.grid, d / "chi_tilde.ply", o.chi_tilde)
    plot_shapes(pipe.grid, {"ground truth": chi, "recovered visible": o.chi_v, "completed": o.chi_tilde},
                d / "shapes.png")
    row = {"shape_id": sid, "K": configs.K, "M": configs.M, **o.row()}
    with open(d / "metrics.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(row))
        w.writeheader()
        w.writerow({k: repr(float(v)) if isinstance(v, float) else v for k, v in row.items()})
    _write_run_manifest(d, cfg, "sense", {"denoiser": p["denoiser"], "configs": configs_path})
    return row


def cmd_eval_sweep(cfg: ExperimentConfig, out: Path, sweep="K", values=None, trials=None,
                   methods=None, workers=None, plots=True, tag=None) -> dict:
    p = _paths(out)
    sw = cfg.sweep
    methods = list(methods or sw.methods)
    # the ablations reuse predictor configs when a predictor exists, else random ones
    pipe = _pipeline(cfg, out, need_predictor=True)
    values = list(values or (sw.K_list if sweep == "K" else sw.ris_sides))
    t0 = time.perf_counter()
    rows = eval_sweep(pipe, sweep, values, int(trials or sw.trials), methods, seed=cfg.seed,
                      workers=int(workers or sw.workers))
    log.info("sweep over %s took %.1f s", sweep, time.perf_counter() - t0)
    d = out / (f"sweep_{sweep}_{tag}" if tag else f"sweep_{sweep}")
    paths = export_results(rows, d, plots=plots)
    arts = {"denoiser": p["denoiser"]}
    arts.update({f"predictor_{_family(*k)}": p["models"] / f"predictor_{_family(*k)}.ckpt" for k in pipe.predictors})
    _write_run_manifest(d, cfg, f"eval-sweep {sweep}", arts)
    return paths


def cmd_export(results_path, out: Path, plots=True) -> dict:
    rows = read_table(_require(results_path, "eval-sweep"))
    return export_results(rows, out, plots=plots)


# --- argument parsing -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="risamodal", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML config file; keys override the preset")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out-dir", type=Path, default=Path("runs/default"), help="artifact root")
    common.add_argument("--preset", choices=["desk", "paper"], help="base preset (default: desk)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="procedural shapes and visible parts")
    s.add_argument("--num-shapes", type=int)

    s = sub.add_parser("train-completion", parents=[common], help="train the diffusion completer")
    s.add_argument("--epochs", type=int)

    s = sub.add_parser("train-predictor", parents=[common], help="label settings and train the error predictor")
    s.add_argument("--num-settings", type=int)
    s.add_argument("--objects", type=int, help="label objects per setting")
    s.add_argument("--epochs", type=int)
    s.add_argument("--reuse-data", action="store_true", help="reuse an existing labelled training set")
    s.add_argument("--K", type=int, help="configurations per family (default optimizer.K)")
    s.add_argument("--ris-side", type=int, help="square RIS side of the family (default: scene)")

    s = sub.add_parser("optimize-configs", parents=[common], help="optimize RIS configurations")
    s.add_argument("--method", choices=["predictor", "corrmin", "random"], default="predictor")
    s.add_argument("--K", type=int)
    s.add_argument("--ris-side", type=int, help="square RIS side (M = side^2)")

    s = sub.add_parser("sense", parents=[common], help="sense and reconstruct one shape")
    s.add_argument("--configs", type=Path, required=True, help="ConfigSet file")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--shape-id", help="shape id from the dataset manifest")
    g.add_argument("--shape-file", type=Path, help="VoxelGrid text file")
    s.add_argument("--no-completion", action="store_true")

    s = sub.add_parser("eval-sweep", parents=[common], help="paired trials over K or RIS size",
                       epilog="results.csv columns (schema v1): " + ", ".join(RESULT_COLUMNS))
    s.add_argument("--sweep", choices=["K", "M"], default="K", help="M sweeps the square RIS side")
    s.add_argument("--values", type=int, nargs="+")
    s.add_argument("--trials", type=int)
    s.add_argument("--methods", nargs="+")
    s.add_argument("--workers", type=int)
    s.add_argument("--no-plots", action="store_true")
    s.add_argument("--tag", help="write to sweep_<K|M>_<tag> instead of sweep_<K|M>")

    s = sub.add_parser("export", parents=[common], help="re-export a results table",
                       epilog="results.csv columns (schema v1): " + ", ".join(RESULT_COLUMNS)
                       + ". A schema.json with names and types is written alongside.")
    s.add_argument("--results", type=Path, required=True)
    s.add_argument("--no-plots", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        cfg = load_config(args.config, args.preset, overrides)
        out = args.out_dir
        out.mkdir(parents=True, exist_ok=True)
        save_config(cfg, out / f"config_{args.command}.yaml")
        c = args.command
        if c == "gen-data":
            res = cmd_gen_data(cfg, out, args.num_shapes)
        elif c == "train-completion":
            res = cmd_train_completion(cfg, out, args.epochs)
        elif c == "train-predictor":
            res = cmd_train_predictor(cfg, out, args.num_settings, args.objects, args.epochs, args.reuse_data,
                                      args.K, args.ris_side)
        elif c == "optimize-configs":
            res = cmd_optimize_configs(cfg, out, args.method, args.K, args.ris_side)
        elif c == "sense":
            res = cmd_sense(cfg, out, args.configs, args.shape_id, args.shape_file, not args.no_completion)
        elif c == "eval-sweep":
            res = cmd_eval_sweep(cfg, out, args.sweep, args.values, args.trials, args.methods,
                                 args.workers, not args.no_plots, args.tag)
        else:
            res = cmd_export(args.results, out, not args.no_plots)
    except (ConfigError, MissingArtifactError, MissingModelError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if isinstance(res, dict):
        for k, v in res.items():
            print(f"{k}: {v}")
    else:
        print(res)
    return 0


if __name__ == "__main__":
    sys.exit(main())
