"""Free-space Tx-RIS-voxel-Rx channel and noisy measurement synthesis."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Scene, VoxelGrid

SPEED_OF_LIGHT = 299_792_458.0

__all__ = [
    "RadioParams",
    "ChannelMatrix",
    "path_coefficient",
    "free_space_channel",
    "noise_std_from_dbm",
    "dbm_to_watts",
    "measure",
    "save_channel",
    "load_channel",
]


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


@dataclass
class RadioParams:
    """Radio constants.

    ``pattern_q`` selects a cos^q radiation pattern (angle from boresight)
    for the Tx gain toward each element and the element arrival/departure
    patterns; q = 0 is isotropic.
    """

    frequency: float = 3e9
    tx_gain: float = 1.0
    element_gain: float = 1.0
    path_loss_exponent: float = 1.0
    tx_power_dbm: float = 35.0
    noise_power_dbm: float = -104.0
    pattern_q: float = 0.0

    def __post_init__(self):
        if not self.frequency > 0:
            raise ValueError("frequency must be positive")
        if not self.path_loss_exponent > 0:
            raise ValueError("path_loss_exponent must be positive")
        if not (self.tx_gain > 0 and self.element_gain > 0):
            raise ValueError("antenna gains must be positive")
        if self.pattern_q < 0:
            raise ValueError("pattern_q must be non-negative")

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.frequency

    @property
    def pilot_amplitude(self) -> float:
        return float(np.sqrt(dbm_to_watts(self.tx_power_dbm)))

    @property
    def noise_variance(self) -> float:
        return dbm_to_watts(self.noise_power_dbm)


@dataclass
class ChannelMatrix:
    H: np.ndarray
    wavelength: float
    alpha: float
    pattern_q: float = 0.0

    @property
    def shape(self):
        return self.H.shape


def _cos_pattern(vec, normal, q):
    if q == 0:
        return np.ones(vec.shape[:-1])
    c = np.abs(vec @ normal) / np.linalg.norm(vec, axis=-1)
    return c**q


def _coefficients(scene: Scene, radio: RadioParams, elems, centers):
    """(len(elems), len(centers)) matrix of single-path coefficients."""
    lam = radio.wavelength
    alpha = radio.path_loss_exponent
    to_elem = elems - scene.tx_pos  # (M, 3)
    e2v = centers[None, :, :] - elems[:, None, :]  # (M, N, 3)
    v2r = scene.rx_pos - centers  # (N, 3)
    d_tm = np.linalg.norm(to_elem, axis=-1)
    d_mn = np.linalg.norm(e2v, axis=-1)
    d_nr = np.linalg.norm(v2r, axis=-1)
    if np.any(d_tm == 0) or np.any(d_mn == 0) or np.any(d_nr == 0):
        raise ValueError("coincident points give a zero path length")

    normal = np.array([0.0, 0.0, 1.0])
    q = radio.pattern_q
    # Tx boresight points at the RIS center
    tx_axis = scene.ris_center - scene.tx_pos
    nrm = np.linalg.norm(tx_axis)
    K_m = _cos_pattern(to_elem, tx_axis / nrm, q) if nrm > 0 else np.ones(len(elems))
    F_a = _cos_pattern(to_elem, normal, q)
    F_d = _cos_pattern(e2v, normal, q)

    gain = (radio.tx_gain * radio.element_gain * scene.element_spacing**2
            * K_m[:, None] * F_a[:, None] * F_d)
    amp = lam * np.sqrt(gain) / ((4 * np.pi) ** 1.5
                                 * d_tm[:, None] ** alpha * d_mn**alpha * d_nr[None, :] ** alpha)
    total = d_tm[:, None] + d_mn + d_nr[None, :]
    return amp * np.exp(-2j * np.pi / lam * total)


def path_coefficient(scene: Scene, radio: RadioParams, m: int, voxel_center) -> complex:
    elem = scene.element_positions()[m][None, :]
    c = np.asarray(voxel_center, dtype=float)[None, :]
    return complex(_coefficients(scene, radio, elem, c)[0, 0])


def free_space_channel(scene: Scene, grid: VoxelGrid, radio: RadioParams) -> ChannelMatrix:
    H = _coefficients(scene, radio, scene.element_positions(), grid.centers())
    return ChannelMatrix(H=H, wavelength=radio.wavelength, alpha=radio.path_loss_exponent,
                         pattern_q=radio.pattern_q)


def noise_std_from_dbm(noise_dbm: float) -> float:
    """Standard deviation whose square is the noise power ``noise_dbm`` in watts."""
    return float(np.sqrt(dbm_to_watts(noise_dbm)))


def measure(H_r, V, omega_v, Q, noise_std: float = 0.0, rng=None) -> np.ndarray:
    """r = Q (H_r * V) omega_v + z with circular complex Gaussian z."""
    H_r = np.asarray(H_r)
    V = np.asarray(V)
    omega_v = np.asarray(omega_v)
    Q = np.atleast_2d(np.asarray(Q))
    M, N = H_r.shape
    if V.shape != (M, N):
        raise ValueError(f"V has shape {V.shape}, expected {(M, N)}")
    if omega_v.shape != (N,):
        raise ValueError(f"omega_v has shape {omega_v.shape}, expected ({N},)")
    if Q.shape[1] != M:
        raise ValueError(f"Q has {Q.shape[1]} columns, expected {M}")
    r = Q @ ((H_r * V) @ omega_v)
    if noise_std > 0:
        rng = np.random.default_rng(rng)
        K = Q.shape[0]
        r = r + noise_std * (rng.standard_normal(K) + 1j * rng.standard_normal(K)) / np.sqrt(2)
    return r


def save_channel(ch: ChannelMatrix, path) -> None:
    """``.npz`` container with header fields M, N, wavelength, alpha, pattern_q."""
    M, N = ch.H.shape
    np.savez(path, H=ch.H, M=M, N=N, wavelength=ch.wavelength, alpha=ch.alpha,
             pattern_q=ch.pattern_q)


def load_channel(path) -> ChannelMatrix:
    with np.load(Path(path)) as z:
        H = z["H"]
        if H.shape != (int(z["M"]), int(z["N"])):
            raise ValueError(f"{path}: header shape does not match stored matrix")
        return ChannelMatrix(H=H, wavelength=float(z["wavelength"]), alpha=float(z["alpha"]),
                             pattern_q=float(z["pattern_q"]))
