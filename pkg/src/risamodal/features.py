"""Global and local column-correlation features of the composite channel Q @ H_r.

The local correlation of a sub-region is the corresponding diagonal block of
the global correlation matrix, so both are computed from one Gram matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .geometry import VoxelGrid

__all__ = [
    "SubregionPartition",
    "normalized_correlation_matrix",
    "global_correlation",
    "partition_subregions",
    "feature_vector",
    "feature_vector_torch",
]


@dataclass
class SubregionPartition:
    members: list[np.ndarray]

    def __post_init__(self):
        self.members = [np.asarray(m, dtype=np.int64) for m in self.members]
        if any(len(m) < 2 for m in self.members):
            raise ValueError("each sub-region needs at least two voxels")

    @property
    def L(self) -> int:
        return len(self.members)

    @property
    def sizes(self) -> list[int]:
        return [len(m) for m in self.members]

    def check(self, N: int) -> None:
        allidx = np.concatenate(self.members)
        if len(allidx) != N or len(np.unique(allidx)) != N or allidx.min() < 0 or allidx.max() >= N:
            raise ValueError(f"partition does not cover 0..{N - 1} exactly once")


def normalized_correlation_matrix(A) -> np.ndarray:
    A = np.asarray(A)
    if A.ndim != 2 or A.shape[1] < 2:
        raise ValueError("need a matrix with at least two columns")
    norms = np.linalg.norm(A, axis=0)
    if np.any(norms == 0):
        raise ValueError(f"zero column(s) at {np.flatnonzero(norms == 0).tolist()}")
    R = np.abs(A.conj().T @ A) / np.outer(norms, norms)
    np.fill_diagonal(R, 1.0)
    return R


def _off_diag_norm(R) -> float:
    n = R.shape[0]
    return float(np.linalg.norm(R - np.eye(n)) / (n * n - n))


def global_correlation(Q, H_r) -> float:
    return _off_diag_norm(normalized_correlation_matrix(np.asarray(Q) @ np.asarray(H_r)))


def partition_subregions(grid: VoxelGrid | tuple, blocks_per_axis: int = 2) -> SubregionPartition:
    counts = grid.counts if isinstance(grid, VoxelGrid) else tuple(grid)
    if blocks_per_axis < 1 or any(c % blocks_per_axis for c in counts):
        raise ValueError(f"grid {counts} is not divisible into {blocks_per_axis} blocks per axis")
    nx, ny, nz = counts
    sx, sy, sz = (c // blocks_per_axis for c in counts)
    members = []
    for bz in range(blocks_per_axis):
        for by in range(blocks_per_axis):
            for bx in range(blocks_per_axis):
                ix, iy, iz = np.meshgrid(np.arange(bx * sx, (bx + 1) * sx),
                                         np.arange(by * sy, (by + 1) * sy),
                                         np.arange(bz * sz, (bz + 1) * sz), indexing="ij")
                idx = ix + nx * (iy + ny * iz)
                members.append(np.sort(idx.ravel()))
    return SubregionPartition(members)


def feature_vector(Q, H_r, partition: SubregionPartition) -> np.ndarray:
    """[c_0, c_1, ..., c_L] for the composite channel Q @ H_r."""
    R = normalized_correlation_matrix(np.asarray(Q) @ np.asarray(H_r))
    partition.check(R.shape[0])
    feats = [_off_diag_norm(R)]
    for idx in partition.members:
        feats.append(_off_diag_norm(R[np.ix_(idx, idx)]))
    return np.array(feats)


def feature_vector_torch(phases: torch.Tensor, H_r: torch.Tensor,
                         partition: SubregionPartition) -> torch.Tensor:
    """Differentiable features as a function of the (K, M) phase matrix.

    ``phases`` may carry a leading batch dimension.
    """
    Q = torch.exp(-1j * phases.to(H_r.real.dtype))
    A = Q @ H_r
    G = A.conj().transpose(-1, -2) @ A
    norms = torch.linalg.vector_norm(A, dim=-2)
    R = G.abs() / (norms[..., :, None] * norms[..., None, :])
    N = R.shape[-1]
    off = ~torch.eye(N, dtype=torch.bool, device=R.device)
    Roff = R * off
    feats = [torch.linalg.matrix_norm(Roff) / (N * N - N)]
    for idx in partition.members:
        t = torch.as_tensor(idx, device=R.device)
        sub = Roff.index_select(-2, t).index_select(-1, t)
        n = len(idx)
        feats.append(torch.linalg.matrix_norm(sub) / (n * n - n))
    return torch.stack(feats, dim=-1)
