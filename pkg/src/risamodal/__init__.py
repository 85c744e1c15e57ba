"""RIS-aided amodal 3D sensing: occlusion-aware sparse recovery, diffusion
shape completion and learned RIS configuration design."""

__version__ = "0.1.0"

from .geometry import OcclusionParams, Scene, VoxelGrid, compute_occlusion, voxelize
from .channel import RadioParams, free_space_channel, measure, path_coefficient
from .ris import ConfigSet, phase_set, quantize_phase, random_configs
from .features import feature_vector, global_correlation, partition_subregions
from .gamp import GampPrior, GampSettings, gamp_solve, occlusion_aware_reconstruct
from .config import ExperimentConfig, load_config, preset
from .pipeline import AmodalPipeline, MissingModelError, eval_sweep

__all__ = [
    "OcclusionParams", "Scene", "VoxelGrid", "compute_occlusion", "voxelize",
    "RadioParams", "free_space_channel", "measure", "path_coefficient",
    "ConfigSet", "phase_set", "quantize_phase", "random_configs",
    "feature_vector", "global_correlation", "partition_subregions",
    "GampPrior", "GampSettings", "gamp_solve", "occlusion_aware_reconstruct",
    "ExperimentConfig", "load_config", "preset",
    "AmodalPipeline", "MissingModelError", "eval_sweep",
]
