"""Experiment configuration: typed blocks, presets, YAML IO and validation.

A config file is YAML with one mapping per block; any key left out keeps
the preset value. Unknown blocks or keys are reported as errors.

Example::

    grid:
      counts: [8, 8, 8]
    optimizer:
      K: 32
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "PRESETS",
    "preset",
    "load_config",
    "save_config",
]


class ConfigError(ValueError):
    """Raised with every violation found, one per line."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


@dataclass
class SceneBlock:
    tx: list = field(default_factory=lambda: [-2.12, 0.0, 2.12])
    rx: list = field(default_factory=lambda: [2.0, 0.0, 0.0])
    ris_center: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    rows: int = 8
    cols: int = 8
    spacing: float = 0.05
    bits: int = 2


@dataclass
class RadioBlock:
    frequency: float = 3e9
    tx_power_dbm: float = 35.0
    noise_power_dbm: float = -104.0
    tx_gain: float = 1.0
    element_gain: float = 1.0
    path_loss_exponent: float = 1.0
    pattern_q: float = 0.0


@dataclass
class GridBlock:
    center: list = field(default_factory=lambda: [0.0, 0.0, 2.5])
    size: list = field(default_factory=lambda: [3.0, 3.0, 3.0])
    counts: list = field(default_factory=lambda: [8, 8, 8])


@dataclass
class SolverBlock:
    tau_omega: float = 0.5
    # blocking distance = tau_d_scale * smallest voxel side, unless tau_d is set
    tau_d: float | None = None
    tau_d_scale: float = 0.5
    eps_v: float | None = None
    outer_max_iters: int = 20
    max_iters: int = 200
    damping: float = 0.5
    tol: float = 1e-8
    # solver noise variance = noise_inflation * physical noise variance
    noise_inflation: float = 1e3
    sparsity_rate: float = 0.03
    slab_mean: float = 1.0
    slab_variance: float = 0.02


@dataclass
class OptimizerBlock:
    K: int = 24
    steps: int = 150
    lr: float = 0.3
    partition_blocks: int = 2


@dataclass
class PredictorBlock:
    # one predictor per (K, M) family: K from optimizer.K, M from the scene
    num_settings: int = 150
    objects_per_setting: int = 8
    roi_jitter: float = 0.1  # metres; test scenes sit at offset 0
    corrmin_fraction: float = 0.4
    epochs: int = 1500
    lr: float = 1e-3
    weight_decay: float = 1e-4


@dataclass
class DiffusionBlock:
    T: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2
    widths: list = field(default_factory=lambda: [8, 16])
    temb_dim: int = 32
    epochs: int = 150
    batch_size: int = 32
    lr: float = 2e-3
    # raw samples averaged before binarization
    num_samples: int = 4


@dataclass
class DatasetBlock:
    manifest: str | None = None
    num_shapes: int = 600
    occluder_probability: float = 0.3
    test_fraction: float = 0.1
    max_size: int | None = None


@dataclass
class SweepBlock:
    K_list: list = field(default_factory=lambda: [4, 8, 16, 24, 32])
    ris_sides: list = field(default_factory=lambda: [6, 8, 10])
    trials: int = 20
    shapes_per_trial: int = 4
    methods: list = field(default_factory=lambda: ["predictor", "corrmin", "random",
                                                   "no_completion", "no_occlusion_update"])
    workers: int = 1


BLOCKS = {
    "scene": SceneBlock,
    "radio": RadioBlock,
    "grid": GridBlock,
    "solver": SolverBlock,
    "optimizer": OptimizerBlock,
    "predictor": PredictorBlock,
    "diffusion": DiffusionBlock,
    "dataset": DatasetBlock,
    "sweep": SweepBlock,
}
METHODS = ("predictor", "corrmin", "random", "no_completion", "no_occlusion_update")


@dataclass
class ExperimentConfig:
    scene: SceneBlock = field(default_factory=SceneBlock)
    radio: RadioBlock = field(default_factory=RadioBlock)
    grid: GridBlock = field(default_factory=GridBlock)
    solver: SolverBlock = field(default_factory=SolverBlock)
    optimizer: OptimizerBlock = field(default_factory=OptimizerBlock)
    predictor: PredictorBlock = field(default_factory=PredictorBlock)
    diffusion: DiffusionBlock = field(default_factory=DiffusionBlock)
    dataset: DatasetBlock = field(default_factory=DatasetBlock)
    sweep: SweepBlock = field(default_factory=SweepBlock)
    seed: int = 0
    preset: str = "desk"

    def to_dict(self) -> dict:
        return asdict(self)

    def copy(self) -> "ExperimentConfig":
        return copy.deepcopy(self)

    def validate(self, base_dir=None) -> list[str]:
        """Every problem found, as human-readable strings (empty when valid)."""
        p = []
        s, r, g, so = self.scene, self.radio, self.grid, self.solver

        def vec3(name, v):
            try:
                a = np.asarray(v, dtype=float)
            except (TypeError, ValueError):
                p.append(f"{name} must be a 3-vector of numbers")
                return
            if a.shape != (3,) or not np.all(np.isfinite(a)):
                p.append(f"{name} must be a finite 3-vector")

        vec3("scene.tx", s.tx)
        vec3("scene.rx", s.rx)
        vec3("scene.ris_center", s.ris_center)
        vec3("grid.center", g.center)
        vec3("grid.size", g.size)
        if s.rows < 1 or s.cols < 1:
            p.append("scene.rows and scene.cols must be >= 1")
        if not s.spacing > 0:
            p.append("scene.spacing must be positive")
        if s.bits < 1:
            p.append("scene.bits must be >= 1")
        if not r.frequency > 0:
            p.append("radio.frequency must be positive")
        if not r.path_loss_exponent > 0:
            p.append("radio.path_loss_exponent must be positive")
        if not (r.tx_gain > 0 and r.element_gain > 0):
            p.append("radio gains must be positive")
        if r.pattern_q < 0:
            p.append("radio.pattern_q must be >= 0")
        if len(g.counts) != 3 or any(int(c) < 1 for c in g.counts):
            p.append("grid.counts must be three integers >= 1")
        elif len(g.size) == 3 and any(float(x) <= 0 for x in g.size):
            p.append("grid.size entries must be positive")
        if not 0 <= so.tau_omega:
            p.append("solver.tau_omega must be >= 0")
        if so.tau_d is not None and not so.tau_d > 0:
            p.append("solver.tau_d must be positive")
        if not so.tau_d_scale > 0:
            p.append("solver.tau_d_scale must be positive")
        if not 0 < so.damping <= 1:
            p.append("solver.damping must lie in (0, 1]")
        if so.max_iters < 1 or so.outer_max_iters < 1:
            p.append("solver iteration caps must be >= 1")
        if not 0 < so.sparsity_rate < 1:
            p.append("solver.sparsity_rate must lie in (0, 1)")
        if not so.slab_variance > 0:
            p.append("solver.slab_variance must be positive")
        if not so.noise_inflation > 0:
            p.append("solver.noise_inflation must be positive")
        o = self.optimizer
        if o.K < 1:
            p.append("optimizer.K must be >= 1")
        if o.steps < 0 or not o.lr > 0:
            p.append("optimizer.steps must be >= 0 and optimizer.lr positive")
        if o.partition_blocks < 1:
            p.append("optimizer.partition_blocks must be >= 1")
        elif len(g.counts) == 3 and any(int(c) % o.partition_blocks for c in g.counts):
            p.append(f"grid.counts {list(g.counts)} not divisible by optimizer.partition_blocks "
                     f"{o.partition_blocks}")
        pr = self.predictor
        if pr.num_settings < 0 or pr.objects_per_setting < 1:
            p.append("predictor.num_settings must be >= 0 and objects_per_setting >= 1")
        if pr.roi_jitter < 0 or not 0 <= pr.corrmin_fraction <= 1:
            p.append("predictor.roi_jitter must be >= 0 and corrmin_fraction in [0, 1]")
        if pr.epochs < 0 or not pr.lr > 0 or pr.weight_decay < 0:
            p.append("predictor.epochs >= 0, lr > 0 and weight_decay >= 0 required")
        d = self.diffusion
        if d.T < 1:
            p.append("diffusion.T must be >= 1")
        if not 0 < d.beta_start <= d.beta_end < 1:
            p.append("diffusion betas need 0 < beta_start <= beta_end < 1")
        if len(d.widths) != 2 or any(int(w) < 1 for w in d.widths):
            p.append("diffusion.widths must be two positive integers")
        if d.num_samples < 1:
            p.append("diffusion.num_samples must be >= 1")
        if d.epochs < 0 or d.batch_size < 1 or not d.lr > 0:
            p.append("diffusion.epochs >= 0, batch_size >= 1 and lr > 0 required")
        ds = self.dataset
        if ds.num_shapes < 1:
            p.append("dataset.num_shapes must be >= 1")
        if not 0 <= ds.occluder_probability <= 1:
            p.append("dataset.occluder_probability must lie in [0, 1]")
        if not 0 <= ds.test_fraction < 1:
            p.append("dataset.test_fraction must lie in [0, 1)")
        if ds.manifest:
            mp = Path(ds.manifest)
            if base_dir is not None and not mp.is_absolute():
                mp = Path(base_dir) / mp
            if not mp.exists():
                p.append(f"dataset.manifest {ds.manifest} does not exist")
        sw = self.sweep
        if sw.trials < 1 or sw.shapes_per_trial < 1 or sw.workers < 1:
            p.append("sweep.trials, shapes_per_trial and workers must be >= 1")
        bad = [m for m in sw.methods if m not in METHODS]
        if bad:
            p.append(f"sweep.methods has unknown entries {bad}; choose from {list(METHODS)}")
        return p

    def check(self, base_dir=None) -> "ExperimentConfig":
        problems = self.validate(base_dir)
        if problems:
            raise ConfigError(problems)
        return self


def _desk() -> ExperimentConfig:
    return ExperimentConfig()


def _paper() -> ExperimentConfig:
    # 10^3 voxels over the 3 m ROI and the full 1000-step schedule; slow
    cfg = ExperimentConfig(preset="paper")
    cfg.grid.counts = [10, 10, 10]
    cfg.solver.tau_d_scale = 1.0
    cfg.optimizer.partition_blocks = 2
    cfg.diffusion.T = 1000
    cfg.diffusion.beta_start = 1e-4
    cfg.diffusion.beta_end = 0.02
    cfg.diffusion.widths = [16, 32]
    cfg.diffusion.epochs = 100
    cfg.dataset.num_shapes = 3000
    cfg.predictor.num_settings = 1000
    cfg.predictor.objects_per_setting = 30
    return cfg


PRESETS = {"desk": _desk, "paper": _paper}


def preset(name: str = "desk") -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError([f"unknown preset {name!r}; choose from {sorted(PRESETS)}"])
    return PRESETS[name]()


def _merge(cfg: ExperimentConfig, data: dict) -> list[str]:
    problems = []
    for key, val in data.items():
        if key in ("seed", "preset"):
            setattr(cfg, key, val)
            continue
        if key not in BLOCKS:
            problems.append(f"unknown block {key!r}")
            continue
        if not isinstance(val, dict):
            problems.append(f"block {key!r} must be a mapping")
            continue
        block = getattr(cfg, key)
        names = {f.name for f in fields(block)}
        for k, v in val.items():
            if k not in names:
                problems.append(f"unknown key {key}.{k}")
            else:
                setattr(block, k, v)
    return problems


def load_config(path=None, preset_name: str | None = None, overrides: dict | None = None,
                validate: bool = True) -> ExperimentConfig:
    """Preset values, then the file, then ``overrides`` (same nesting).

    The preset is ``preset_name`` if given, else the file's ``preset`` key,
    else desk. All problems (unknown keys and invalid values) are raised
    together as one ConfigError.
    """
    data = {}
    base_dir = None
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError([f"config file {path} does not exist"])
        data = yaml.safe_load(path.read_text()) or {}
        if not isinstance(data, dict):
            raise ConfigError([f"{path}: top level must be a mapping"])
        base_dir = path.parent
    cfg = preset(preset_name or data.get("preset", "desk"))
    problems = _merge(cfg, {k: v for k, v in data.items() if k != "preset"})
    if overrides:
        problems += _merge(cfg, overrides)
    if validate:
        try:
            problems += cfg.validate(base_dir)
        except (TypeError, ValueError) as exc:
            problems.append(f"malformed value: {exc}")
    if problems:
        raise ConfigError(problems)
    return cfg


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
