"""Scene description, ROI voxelization and occlusion geometry.

Voxel linear indexing is frozen as x fastest, then y, then z::

    n = ix + nx * (iy + ny * iz)

which is numpy's Fortran order for an array indexed ``[ix, iy, iz]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Scene",
    "VoxelGrid",
    "OcclusionParams",
    "OcclusionState",
    "voxelize",
    "threshold_occupancy",
    "path_blocked",
    "blocked_mask",
    "compute_occlusion",
    "visibility",
    "split_shape",
    "save_voxel_grid",
    "load_voxel_grid",
    "export_point_cloud",
]


@dataclass
class Scene:
    """Tx, Rx and a planar RIS lying in the x-y plane.

    Element ``m = row * ris_cols + col`` sits at
    ``ris_center + ((col - (cols-1)/2) * s, (row - (rows-1)/2) * s, 0)``.
    """

    tx_pos: np.ndarray = field(default_factory=lambda: np.array([-2.12, 0.0, 2.12]))
    rx_pos: np.ndarray = field(default_factory=lambda: np.array([2.0, 0.0, 0.0]))
    ris_center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ris_rows: int = 8
    ris_cols: int = 8
    element_spacing: float = 0.05

    def __post_init__(self):
        self.tx_pos = np.asarray(self.tx_pos, dtype=float)
        self.rx_pos = np.asarray(self.rx_pos, dtype=float)
        self.ris_center = np.asarray(self.ris_center, dtype=float)
        if self.ris_rows < 1 or self.ris_cols < 1:
            raise ValueError("RIS needs at least one element")
        if not self.element_spacing > 0:
            raise ValueError("element_spacing must be positive")
        for name in ("tx_pos", "rx_pos", "ris_center"):
            v = getattr(self, name)
            if v.shape != (3,) or not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be a finite 3-vector")

    @property
    def M(self) -> int:
        return self.ris_rows * self.ris_cols

    def element_positions(self) -> np.ndarray:
        """(M, 3) element centers."""
        s = self.element_spacing
        rows, cols = np.meshgrid(np.arange(self.ris_rows), np.arange(self.ris_cols), indexing="ij")
        x = (cols.ravel() - (self.ris_cols - 1) / 2) * s
        y = (rows.ravel() - (self.ris_rows - 1) / 2) * s
        return self.ris_center + np.stack([x, y, np.zeros_like(x)], axis=1)


@dataclass
class VoxelGrid:
    roi_center: np.ndarray
    roi_size: np.ndarray
    counts: tuple[int, int, int]
    chi: np.ndarray = None
    omega: np.ndarray = None

    def __post_init__(self):
        self.roi_center = np.asarray(self.roi_center, dtype=float)
        self.roi_size = np.asarray(self.roi_size, dtype=float)
        self.counts = tuple(int(c) for c in self.counts)
        if len(self.counts) != 3 or min(self.counts) < 1:
            raise ValueError(f"voxel counts must be three positive integers, got {self.counts}")
        if self.roi_size.shape != (3,) or not np.all(self.roi_size > 0):
            raise ValueError("roi_size must be three positive lengths")
        if self.chi is None:
            self.chi = np.zeros(self.N, dtype=np.int8)
        if self.omega is None:
            self.omega = np.zeros(self.N, dtype=complex)
        self.chi = np.asarray(self.chi, dtype=np.int8)
        self.omega = np.asarray(self.omega, dtype=complex)
        if self.chi.shape != (self.N,) or self.omega.shape != (self.N,):
            raise ValueError("chi/omega length must equal the voxel count")

    @property
    def N(self) -> int:
        nx, ny, nz = self.counts
        return nx * ny * nz

    @property
    def voxel_size(self) -> np.ndarray:
        return self.roi_size / np.asarray(self.counts)

    @property
    def corner(self) -> np.ndarray:
        return self.roi_center - self.roi_size / 2

    def linear_index(self, ix, iy, iz):
        nx, ny, _ = self.counts
        return ix + nx * (iy + ny * iz)

    def grid_index(self, n):
        nx, ny, _ = self.counts
        n = np.asarray(n)
        return n % nx, (n // nx) % ny, n // (nx * ny)

    def centers(self) -> np.ndarray:
        """(N, 3) voxel centers in linear-index order."""
        ix, iy, iz = self.grid_index(np.arange(self.N))
        idx = np.stack([ix, iy, iz], axis=1)
        return self.corner + (idx + 0.5) * self.voxel_size

    def to_array(self, values) -> np.ndarray:
        """Reshape a length-N vector to an ``[ix, iy, iz]`` array."""
        return np.asarray(values).reshape(self.counts, order="F")

    def from_array(self, arr) -> np.ndarray:
        return np.asarray(arr).reshape(-1, order="F")

    def with_shape(self, chi, omega=None) -> "VoxelGrid":
        chi = np.asarray(chi, dtype=np.int8)
        if omega is None:
            omega = chi.astype(complex)
        return VoxelGrid(self.roi_center, self.roi_size, self.counts, chi, omega)


@dataclass
class OcclusionParams:
    tau_d: float
    tau_omega: float = 0.5
    exclude_self: bool = True

    def __post_init__(self):
        if not self.tau_d > 0 or not self.tau_omega > 0:
            raise ValueError("tau_d and tau_omega must be positive")

    @classmethod
    def for_grid(cls, grid: VoxelGrid, tau_omega: float = 0.5) -> "OcclusionParams":
        return cls(tau_d=float(np.min(grid.voxel_size)), tau_omega=tau_omega)


@dataclass
class OcclusionState:
    V: np.ndarray
    v: np.ndarray
    v_ris: np.ndarray
    v_rx: np.ndarray


def voxelize(roi_center, roi_size, nx: int, ny: int, nz: int) -> VoxelGrid:
    return VoxelGrid(roi_center, roi_size, (nx, ny, nz))


def threshold_occupancy(omega, tau_omega: float) -> np.ndarray:
    if not tau_omega > 0:
        raise ValueError("tau_omega must be positive")
    return (np.abs(np.asarray(omega)) >= tau_omega).astype(np.int8)


def blocked_mask(starts, ends, blockers, tau_d: float) -> np.ndarray:
    """Blockage test for every (path, blocker) pair.

    ``starts``/``ends`` are (P, 3) path endpoints and ``blockers`` is (B, 3).
    Returns a (P, B) boolean array. A blocker stops a path when its distance
    to the line is below ``tau_d`` and its projection falls strictly inside
    the segment.
    """
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    ends = np.atleast_2d(np.asarray(ends, dtype=float))
    blockers = np.atleast_2d(np.asarray(blockers, dtype=float))
    b = ends - starts
    bb = np.einsum("pi,pi->p", b, b)
    if np.any(bb == 0):
        raise ValueError("zero-length path")
    bp = blockers[None, :, :] - starts[:, None, :]
    dot = np.einsum("pbi,pi->pb", bp, b)
    cross = np.cross(bp, b[:, None, :])
    dist2 = np.einsum("pbi,pbi->pb", cross, cross) / bb[:, None]
    return (dist2 < tau_d**2) & (dot > 0) & (np.abs(dot) < bb[:, None])


def path_blocked(p_from, p_to, blocker, tau_d: float) -> bool:
    return bool(blocked_mask(p_from, p_to, blocker, tau_d)[0, 0])


def _occluded_paths(starts, ends, end_idx, blockers, blocker_idx, tau_d, exclude_self,
                    chunk=2_000_000):
    """True where a path is blocked by any blocker (ignoring its own voxel)."""
    P = len(starts)
    out = np.zeros(P, dtype=bool)
    if len(blockers) == 0:
        return out
    step = max(1, chunk // max(1, len(blockers)))
    for lo in range(0, P, step):
        sl = slice(lo, lo + step)
        mask = blocked_mask(starts[sl], ends[sl], blockers, tau_d)
        if exclude_self:
            mask &= end_idx[sl, None] != blocker_idx[None, :]
        out[sl] = mask.any(axis=1)
    return out


def compute_occlusion(grid: VoxelGrid, scene: Scene, params: OcclusionParams,
                      chi=None) -> OcclusionState:
    """Path occlusion matrix and voxel visibility given the occupancy.

    ``chi`` overrides ``grid.chi`` as the blocker set (used with estimated
    shapes during reconstruction).
    """
    chi = grid.chi if chi is None else np.asarray(chi)
    centers = grid.centers()
    elems = scene.element_positions()
    M, N = len(elems), grid.N
    occ = np.flatnonzero(chi)
    blockers = centers[occ]

    starts = np.repeat(elems, N, axis=0)
    ends = np.tile(centers, (M, 1))
    end_idx = np.tile(np.arange(N), M)
    v_ris = ~_occluded_paths(starts, ends, end_idx, blockers, occ, params.tau_d,
                             params.exclude_self).reshape(M, N)

    # voxel -> Rx legs: the path starts at the voxel itself
    rx = np.broadcast_to(scene.rx_pos, (N, 3))
    v_rx = ~_occluded_paths(centers, rx, np.arange(N), blockers, occ, params.tau_d,
                            params.exclude_self)

    v_ris = v_ris.astype(np.int8)
    v_rx = v_rx.astype(np.int8)
    V = v_ris * v_rx[None, :]
    return OcclusionState(V=V, v=visibility(V), v_ris=v_ris, v_rx=v_rx)


def visibility(V) -> np.ndarray:
    return (np.asarray(V).sum(axis=0) > 0).astype(np.int8)


def split_shape(chi, v):
    chi = np.asarray(chi)
    v = np.asarray(v)
    if chi.shape != v.shape:
        raise ValueError(f"length mismatch: chi {chi.shape} vs v {v.shape}")
    chi_v = chi * v
    return chi_v, chi * (1 - v)


# --- serialization -----------------------------------------------------------

def save_voxel_grid(grid: VoxelGrid, path) -> None:
    """Text format: a header line, then ``index,chi,omega_re,omega_im`` per voxel.

    Header: ``# voxelgrid nx ny nz cx cy cz lx ly lz``.
    """
    nx, ny, nz = grid.counts
    cx, cy, cz = (float(v) for v in grid.roi_center)
    lx, ly, lz = (float(v) for v in grid.roi_size)
    lines = [f"# voxelgrid {nx} {ny} {nz} {cx!r} {cy!r} {cz!r} {lx!r} {ly!r} {lz!r}"]
    for n in range(grid.N):
        w = grid.omega[n]
        lines.append(f"{n},{int(grid.chi[n])},{float(w.real)!r},{float(w.imag)!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_voxel_grid(path) -> VoxelGrid:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("# voxelgrid"):
        raise ValueError(f"{path}: missing voxelgrid header")
    head = text[0].split()[2:]
    if len(head) != 9:
        raise ValueError(f"{path}: malformed voxelgrid header")
    counts = tuple(int(h) for h in head[:3])
    center = [float(h) for h in head[3:6]]
    size = [float(h) for h in head[6:9]]
    grid = VoxelGrid(center, size, counts)
    rows = [ln for ln in text[1:] if ln.strip()]
    if len(rows) != grid.N:
        raise ValueError(f"{path}: expected {grid.N} voxel rows, found {len(rows)}")
    for row in rows:
        n, c, re, im = row.split(",")
        n = int(n)
        grid.chi[n] = int(c)
        grid.omega[n] = complex(float(re), float(im))
    return grid


def export_point_cloud(grid: VoxelGrid, path, chi=None) -> int:
    """Write occupied voxel centers as an ASCII PLY point set. Returns the count."""
    chi = grid.chi if chi is None else np.asarray(chi)
    pts = grid.centers()[np.flatnonzero(chi)]
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(pts)}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    body = [f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}" for p in pts]
    Path(path).write_text("\n".join(header + body) + "\n")
    return len(pts)
