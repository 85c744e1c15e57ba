"""End-to-end sensing: measure, occlusion-aware reconstruction, completion,
plus the sweep driver that compares configuration strategies and ablations.

Voxel reflectivity is taken as omega = chi (unit scatterers), which is the
slab mean of the solver prior.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
import torch

from .channel import RadioParams, free_space_channel, measure, noise_std_from_dbm
from .config import ExperimentConfig
from .datagen import (generate_shape, iou, make_pair, occluder_slab, random_shape_spec,
                      reconstruction_error)
from .diffusion import Denoiser, NoiseSchedule, build_schedule, finalize_shape, reverse_sample
from .features import partition_subregions
from .gamp import GampPrior, GampSettings, occlusion_aware_reconstruct
from .geometry import OcclusionParams, Scene, compute_occlusion, voxelize
from .predictor import PredictorModel, corr_min_baseline, optimize_configs
from .ris import ConfigSet, phase_set

log = logging.getLogger(__name__)

__all__ = [
    "MissingModelError",
    "AmodalPipeline",
    "SenseOutcome",
    "make_configs",
    "draw_test_shapes",
    "build_completion_pairs",
    "run_trial",
    "eval_sweep",
    "summarize",
]


class MissingModelError(RuntimeError):
    pass


@dataclass
class SenseOutcome:
    chi: np.ndarray
    chi_v_true: np.ndarray
    chi_v: np.ndarray
    chi_tilde: np.ndarray
    error: float
    iou: float
    visible_error: float
    residual: float
    outer_iters: int
    converged: bool
    wall_time: float

    def row(self) -> dict:
        return {"error": self.error, "iou": self.iou, "visible_error": self.visible_error,
                "residual": self.residual, "outer_iters": self.outer_iters,
                "converged": int(self.converged), "wall_time": self.wall_time}


class AmodalPipeline:
    """Scene, channel, solver and completion model for one experiment setting.

    ``predictors`` maps (K, M) to the error predictor trained for that
    configuration family.
    """

    def __init__(self, cfg: ExperimentConfig, denoiser: Denoiser | None = None,
                 schedule: NoiseSchedule | None = None,
                 predictors: dict[tuple[int, int], PredictorModel] | None = None):
        self.cfg = cfg
        s, g, so = cfg.scene, cfg.grid, cfg.solver
        self.scene = Scene(np.array(s.tx, float), np.array(s.rx, float), np.array(s.ris_center, float),
                           int(s.rows), int(s.cols), float(s.spacing))
        self.grid = voxelize(g.center, g.size, *[int(c) for c in g.counts])
        r = cfg.radio
        self.radio = RadioParams(r.frequency, r.tx_gain, r.element_gain, r.path_loss_exponent,
                                 r.tx_power_dbm, r.noise_power_dbm, r.pattern_q)
        tau_d = so.tau_d if so.tau_d is not None else so.tau_d_scale * float(np.min(self.grid.voxel_size))
        self.occlusion = OcclusionParams(tau_d, so.tau_omega)
        self.settings = GampSettings(max_iters=so.max_iters, damping=so.damping, tol=so.tol,
                                     noise_variance=self.radio.noise_variance * so.noise_inflation,
                                     outer_max_iters=so.outer_max_iters)
        self.prior = GampPrior(so.sparsity_rate, so.slab_mean, so.slab_variance)
        self.noise_std = noise_std_from_dbm(r.noise_power_dbm)
        self.denoiser = denoiser
        self.schedule = schedule or build_schedule(cfg.diffusion.T, cfg.diffusion.beta_start,
                                                   cfg.diffusion.beta_end)
        self.predictors = dict(predictors or {})
        self._H = None

    @property
    def bits(self) -> int:
        return int(self.cfg.scene.bits)

    @property
    def M(self) -> int:
        return self.scene.M

    def with_setting(self, roi_offset=None, ris_side: int | None = None) -> "AmodalPipeline":
        """Copy with the ROI shifted by ``roi_offset`` metres and/or a square RIS."""
        cfg = self.cfg.copy()
        if roi_offset is not None:
            cfg.grid.center = [float(c + o) for c, o in zip(cfg.grid.center, roi_offset)]
        if ris_side is not None:
            cfg.scene.rows = cfg.scene.cols = int(ris_side)
        return AmodalPipeline(cfg, self.denoiser, self.schedule, self.predictors)

    def channel(self) -> np.ndarray:
        """H_r with the pilot amplitude folded in, (M, N)."""
        if self._H is None:
            self._H = free_space_channel(self.scene, self.grid, self.radio).H * self.radio.pilot_amplitude
        return self._H

    def predictor_for(self, K: int) -> PredictorModel | None:
        return self.predictors.get((int(K), self.M))

    def partition(self, blocks: int | None = None):
        return partition_subregions(self.grid, blocks or self.cfg.optimizer.partition_blocks)

    # --- sensing ----------------------------------------------------------------

    def observe(self, chi, Q, seed=None):
        """Noisy measurements of occupancy ``chi``; returns (r, true V state)."""
        chi = np.asarray(chi, dtype=np.int8)
        occ = compute_occlusion(self.grid, self.scene, self.occlusion, chi=chi)
        omega_v = (chi * occ.v).astype(complex)
        r = measure(self.channel(), occ.V, omega_v, Q, self.noise_std, rng=seed)
        return r, occ

    def reconstruct(self, r, Q, update_occlusion: bool = True):
        return occlusion_aware_reconstruct(r, Q, self.channel(), self.scene, self.grid, self.occlusion,
                                           self.settings, self.prior,
                                           eps_v=self.cfg.solver.eps_v, update_occlusion=update_occlusion)

    def complete(self, chi_v_list, seed=None) -> list[np.ndarray]:
        """Diffusion completion of flattened visible shapes, sampled as one batch."""
        if self.denoiser is None:
            raise MissingModelError("no completion model loaded; run train-completion first")
        if len(chi_v_list) == 0:
            return []
        vis = np.stack([self.grid.to_array(c) for c in chi_v_list]).astype(np.int8)
        S = int(self.cfg.diffusion.num_samples)
        rng = np.random.default_rng(seed)
        # averaging S samples before binarizing gives a per-voxel majority vote
        raw = np.mean([reverse_sample(self.denoiser, vis, self.schedule, rng=rng.integers(2**31))
                       for _ in range(S)], axis=0)
        return [self.grid.from_array(finalize_shape(raw[i], vis[i])) for i in range(len(vis))]

    def sense(self, shapes, configs: ConfigSet, seed=None, completion: bool = True,
              update_occlusion: bool = True) -> list[SenseOutcome]:
        """Full protocol for each shape: measure, reconstruct, complete."""
        rng = np.random.default_rng(seed)
        Q = configs.Q
        recs = []
        for chi in shapes:
            t0 = time.perf_counter()
            r, occ = self.observe(chi, Q, seed=int(rng.integers(2**31)))
            res = self.reconstruct(r, Q, update_occlusion)
            recs.append((np.asarray(chi, dtype=np.int8), occ, res, time.perf_counter() - t0))
        t0 = time.perf_counter()
        if completion:
            done = self.complete([rec[2].chi_v for rec in recs], seed=int(rng.integers(2**31)))
        else:
            done = [rec[2].chi_v.astype(np.int8) for rec in recs]
        share = (time.perf_counter() - t0) / max(len(recs), 1)
        out = []
        for (chi, occ, res, dt), chi_tilde in zip(recs, done):
            chi_v_true = chi * occ.v
            out.append(SenseOutcome(chi, chi_v_true, res.chi_v, chi_tilde,
                                    reconstruction_error(chi_tilde, chi), iou(chi_tilde, chi),
                                    reconstruction_error(res.chi_v, chi_v_true), res.residual,
                                    res.outer_iters, res.converged, dt + share))
        return out

    def evaluate(self, configs: ConfigSet, objects, seed=None) -> list[float]:
        """Per-object complete-shape errors (the predictor's label source)."""
        return [o.error for o in self.sense(objects, configs, seed=seed)]


def make_configs(method: str, pipe: AmodalPipeline, K: int, seed: int) -> tuple[ConfigSet, dict]:
    """Configurations for one strategy; all strategies share the random start."""
    o = pipe.cfg.optimizer
    rng = np.random.default_rng(seed)
    init = rng.choice(phase_set(pipe.bits), size=(K, pipe.M))
    if method == "random":
        return ConfigSet(init, pipe.bits), {}
    if method == "corrmin":
        return corr_min_baseline(pipe.channel(), K, pipe.M, pipe.bits, steps=o.steps, lr=o.lr,
                                 seed=seed, init=init)
    if method == "predictor":
        model = pipe.predictor_for(K)
        if model is None:
            side = pipe.cfg.scene.rows
            raise MissingModelError(f"no predictor for K={K}, M={pipe.M}; "
                                    f"run train-predictor --K {K} --ris-side {side} first")
        return optimize_configs(model, pipe.channel(), pipe.partition(), K, pipe.M,
                                pipe.bits, steps=o.steps, lr=o.lr, seed=seed, init=init)
    raise ValueError(f"unknown configuration method {method!r}")


def draw_test_shapes(pipe: AmodalPipeline, count: int, seed, occluded_only: bool = True,
                     max_size: int | None = None) -> list[np.ndarray]:
    """Random procedural shapes; with ``occluded_only`` each hides >= 1 voxel."""
    rng = np.random.default_rng(seed)
    dims = tuple(pipe.grid.counts)
    out = []
    for _ in range(200 * count):
        if len(out) == count:
            break
        chi = generate_shape(random_shape_spec(rng, dims, max_size=max_size), dims)
        if occluded_only:
            occ = compute_occlusion(pipe.grid, pipe.scene, pipe.occlusion, chi=chi)
            if np.array_equal(chi * occ.v, chi):
                continue
        out.append(chi)
    if len(out) < count:
        raise RuntimeError("could not draw enough occluded shapes")
    return out


def build_completion_pairs(pipe: AmodalPipeline, num_shapes: int, seed, occluder_probability=0.0,
                           max_size: int | None = None):
    """Procedural (spec, chi_v, chi) triples for completion training.

    With probability ``occluder_probability`` a one-voxel wall is placed in
    the layer just below the shape (RIS side) over part of its footprint;
    it blocks paths but is not part of either returned shape.
    """
    rng = np.random.default_rng(seed)
    dims = tuple(pipe.grid.counts)
    out = []
    while len(out) < num_shapes:
        spec = random_shape_spec(rng, dims, max_size=max_size)
        chi = generate_shape(spec, dims)
        wall = None
        zmin = int(np.min(pipe.grid.grid_index(np.flatnonzero(chi))[2]))
        if zmin >= 1 and rng.uniform() < occluder_probability:
            ix, iy, _ = pipe.grid.grid_index(np.flatnonzero(chi))
            x0 = int(rng.integers(ix.min(), ix.max() + 1))
            y0 = int(rng.integers(iy.min(), iy.max() + 1))
            wall = occluder_slab(pipe.grid, zmin - 1, (x0, ix.max() + 1), (y0, iy.max() + 1))
        chi_v, chi = make_pair(chi, pipe.scene, pipe.grid, pipe.occlusion, occluder=wall)
        out.append((spec, chi_v, chi))
    return out


def run_trial(pipe: AmodalPipeline, sweep: str, x, trial: int, methods, seed: int,
              shapes_per_trial: int) -> list[dict]:
    """One paired trial at sweep point ``x``: same shapes and start for every method."""
    K = int(x) if sweep == "K" else int(pipe.cfg.optimizer.K)
    sub = pipe.with_setting(ris_side=int(x)) if sweep == "M" else pipe
    ss = np.random.SeedSequence([seed, trial])
    shape_seed, cfg_seed, noise_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    shapes = draw_test_shapes(sub, shapes_per_trial, shape_seed)
    cache = {}
    rows = []
    for method in methods:
        base = "predictor" if method in ("no_completion", "no_occlusion_update") else method
        if base == "predictor" and sub.predictor_for(K) is None:
            base = "random"
        if base not in cache:
            cache[base] = make_configs(base, sub, K, cfg_seed)
        configs, trace = cache[base]
        outs = sub.sense(shapes, configs, seed=noise_seed,
                         completion=method != "no_completion",
                         update_occlusion=method != "no_occlusion_update")
        rows.append({"trial_id": trial, "sweep": sweep, "x": x, "method": method, "K": K, "M": sub.M,
                     "error": float(np.mean([o.error for o in outs])),
                     "iou": float(np.mean([o.iou for o in outs])),
                     "visible_error": float(np.mean([o.visible_error for o in outs])),
                     "residual": float(np.mean([o.residual for o in outs])),
                     "outer_iters": float(np.mean([o.outer_iters for o in outs])),
                     "wall_time": float(sum(o.wall_time for o in outs)),
                     "predicted": trace.get("post_quantization", float("nan")),
                     "seed": seed})
    return rows


def _trial_job(args):
    torch.set_num_threads(1)
    return run_trial(*args)


def eval_sweep(pipe: AmodalPipeline, sweep: str, values, trials: int, methods=None, seed: int = 0,
               shapes_per_trial: int | None = None, workers: int = 1) -> list[dict]:
    """Paired trials over ``values`` of K or of the RIS side length."""
    if sweep not in ("K", "M"):
        raise ValueError("sweep must be 'K' or 'M'")
    methods = list(methods or pipe.cfg.sweep.methods)
    spt = shapes_per_trial or pipe.cfg.sweep.shapes_per_trial
    if "predictor" in methods:
        need = [(int(x), pipe.M) if sweep == "K" else (int(pipe.cfg.optimizer.K), int(x) ** 2) for x in values]
        missing = [f"K={k}, M={m}" for k, m in need if (k, m) not in pipe.predictors]
        if missing:
            raise MissingModelError(f"no predictor for {'; '.join(missing)}; run train-predictor for those families")
    jobs = [(pipe, sweep, x, t, methods, seed, spt) for x in values for t in range(trials)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            parts = list(ex.map(_trial_job, jobs))
    else:
        parts = [run_trial(*j) for j in jobs]
    rows = [r for part in parts for r in part]
    # order-independent aggregation: rows are keyed by (x, trial, method)
    order = {m: i for i, m in enumerate(methods)}
    rows.sort(key=lambda r: (r["x"], r["trial_id"], order[r["method"]]))
    return rows


def summarize(rows) -> list[dict]:
    """Mean and std of error and IoU per (sweep, x, method) cell."""
    cells = {}
    for r in rows:
        cells.setdefault((r["sweep"], r["x"], r["method"]), []).append(r)
    out = []
    for (sweep, x, method), rs in cells.items():
        e = np.array([r["error"] for r in rs])
        j = np.array([r["iou"] for r in rs])
        out.append({"sweep": sweep, "x": x, "method": method, "n": len(rs),
                    "error_mean": float(e.mean()), "error_std": float(e.std()),
                    "iou_mean": float(j.mean()), "iou_std": float(j.std())})
    return out
