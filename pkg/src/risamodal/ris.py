"""Discrete RIS phase configurations."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

TWO_PI = 2 * np.pi

__all__ = [
    "ConfigSet",
    "phase_set",
    "quantize_phase",
    "random_configs",
    "phases_to_complex",
    "save_configs",
    "load_configs",
]


def phase_set(b: int) -> np.ndarray:
    if b < 1:
        raise ValueError("need at least one bit of phase resolution")
    return TWO_PI * np.arange(2**b) / 2**b


def quantize_phase(phi, b: int):
    """Nearest member of the b-bit phase set under circular distance.

    Ties go to the smaller member; a tie across the wrap (between the
    largest member and 2*pi) therefore resolves to 0.
    """
    if b < 1:
        raise ValueError("need at least one bit of phase resolution")
    step = TWO_PI / 2**b
    x = np.mod(np.asarray(phi, dtype=float), TWO_PI) / step
    lo = np.floor(x)
    frac = x - lo
    up = (frac > 0.5) | ((frac == 0.5) & (lo == 2**b - 1))
    idx = np.where(up, lo + 1, lo).astype(np.int64) % 2**b
    out = idx * step
    return float(out) if np.ndim(out) == 0 else out


def phases_to_complex(phases):
    return np.exp(-1j * np.asarray(phases))


@dataclass
class ConfigSet:
    phases: np.ndarray
    bits: int = 2

    def __post_init__(self):
        self.phases = np.atleast_2d(np.asarray(self.phases, dtype=float))

    @property
    def K(self) -> int:
        return self.phases.shape[0]

    @property
    def M(self) -> int:
        return self.phases.shape[1]

    @property
    def Q(self) -> np.ndarray:
        return phases_to_complex(self.phases)

    def quantized(self) -> "ConfigSet":
        return ConfigSet(quantize_phase(self.phases, self.bits), self.bits)

    def is_discrete(self) -> bool:
        return bool(np.allclose(quantize_phase(self.phases, self.bits), np.mod(self.phases, TWO_PI),
                                atol=1e-12, rtol=0))


def random_configs(K: int, M: int, b: int = 2, seed=None) -> ConfigSet:
    if K < 1 or M < 1:
        raise ValueError("K and M must be positive")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, 2**b, size=(K, M))
    return ConfigSet(phase_set(b)[idx], b)


def save_configs(cfg: ConfigSet, path) -> None:
    """Header ``# configset K M b`` then K rows of M comma-separated phases (rad)."""
    lines = [f"# configset {cfg.K} {cfg.M} {cfg.bits}"]
    lines += [",".join(repr(float(p)) for p in row) for row in cfg.phases]
    Path(path).write_text("\n".join(lines) + "\n")


def load_configs(path) -> ConfigSet:
    text = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not text or not text[0].startswith("# configset"):
        raise ValueError(f"{path}: missing configset header")
    K, M, b = (int(x) for x in text[0].split()[2:5])
    rows = [[float(x) for x in ln.split(",")] for ln in text[1:]]
    phases = np.array(rows, dtype=float)
    if phases.shape != (K, M):
        raise ValueError(f"{path}: expected {K}x{M} phases, found {phases.shape}")
    return ConfigSet(phases, b)
