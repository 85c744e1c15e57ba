"""Procedural voxel objects, visible/complete training pairs, and shape metrics."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .geometry import OcclusionParams, Scene, VoxelGrid, compute_occlusion

FAMILIES = ("box", "lshape", "tshape", "plus", "pyramid", "twobox")

__all__ = [
    "FAMILIES",
    "ShapeSpec",
    "random_shape_spec",
    "generate_shape",
    "make_pair",
    "occluder_slab",
    "reconstruction_error",
    "iou",
    "write_manifest",
    "read_manifest",
]


@dataclass
class ShapeSpec:
    """A procedural shape.

    ``size`` meaning per family (all in voxels):
    box (a, b, c); lshape/tshape/plus (a, b, t, c) with arm lengths a, b,
    arm width t and thickness c; pyramid (base, height); twobox
    (a1, b1, c1, a2, b2, c2, dx, dy, dz) with the second box offset by d.
    ``rot`` counts quarter turns about x, y, z; ``offset`` is the grid index
    of the rotated bounding box's low corner.
    """

    family: str
    size: tuple
    rot: tuple = (0, 0, 0)
    offset: tuple = (0, 0, 0)
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown shape family {self.family!r}")
        self.size = tuple(int(s) for s in self.size)
        self.rot = tuple(int(r) % 4 for r in self.rot)
        self.offset = tuple(int(o) for o in self.offset)


def _box(a, b, c):
    return np.ones((a, b, c), dtype=bool)


def _local_shape(spec: ShapeSpec) -> np.ndarray:
    f, s = spec.family, spec.size
    if any(v < 0 for v in s) or (f != "twobox" and any(v < 1 for v in s)):
        raise ValueError(f"invalid size {s} for {f}")
    if f == "box":
        return _box(*s)
    if f in ("lshape", "tshape", "plus"):
        a, b, t, c = s
        if t > min(a, b):
            raise ValueError("arm width exceeds arm length")
        out = np.zeros((a, b, c), dtype=bool)
        if f == "lshape":
            out[:, :t, :] = True
            out[:t, :, :] = True
        elif f == "tshape":
            lo = (a - t) // 2
            out[:, b - t:, :] = True
            out[lo:lo + t, :, :] = True
        else:
            lx, ly = (a - t) // 2, (b - t) // 2
            out[:, ly:ly + t, :] = True
            out[lx:lx + t, :, :] = True
        return out
    if f == "pyramid":
        base, h = s
        out = np.zeros((base, base, h), dtype=bool)
        for z in range(h):
            w = base - 2 * z
            if w < 1:
                raise ValueError("pyramid too tall for its base")
            out[z:z + w, z:z + w, z] = True
        return out
    a1, b1, c1, a2, b2, c2, dx, dy, dz = s
    if min(a1, b1, c1, a2, b2, c2) < 1:
        raise ValueError("twobox boxes need positive sizes")
    ext = (max(a1, dx + a2), max(b1, dy + b2), max(c1, dz + c2))
    out = np.zeros(ext, dtype=bool)
    out[:a1, :b1, :c1] = True
    out[dx:dx + a2, dy:dy + b2, dz:dz + c2] = True
    return out


def _rotate(arr, rot):
    rx, ry, rz = rot
    arr = np.rot90(arr, rx, axes=(1, 2))
    arr = np.rot90(arr, ry, axes=(2, 0))
    return np.rot90(arr, rz, axes=(0, 1))


def generate_shape(spec: ShapeSpec, grid_dims) -> np.ndarray:
    """Binary occupancy, flattened in the grid's linear order (x fastest)."""
    grid_dims = tuple(int(g) for g in grid_dims)
    local = _rotate(_local_shape(spec), spec.rot)
    ox, oy, oz = spec.offset
    ex, ey, ez = local.shape
    if min(ox, oy, oz) < 0 or ox + ex > grid_dims[0] or oy + ey > grid_dims[1] or oz + ez > grid_dims[2]:
        raise ValueError(f"{spec.family} of extent {local.shape} at {spec.offset} exceeds grid {grid_dims}")
    full = np.zeros(grid_dims, dtype=np.int8)
    full[ox:ox + ex, oy:oy + ey, oz:oz + ez] = local
    if not full.any():
        raise ValueError("shape has no occupied voxel")
    return full.reshape(-1, order="F")


def random_shape_spec(rng, grid_dims, family: str | None = None, min_size: int = 2,
                      max_size: int | None = None) -> ShapeSpec:
    """Draw a random spec that fits the grid."""
    rng = np.random.default_rng(rng)
    g = min(grid_dims)
    hi = max_size or max(min_size, (g * 5) // 8)
    family = family or FAMILIES[rng.integers(len(FAMILIES))]
    seed = int(rng.integers(2**31))

    def n(lo=min_size, top=hi):
        return int(rng.integers(lo, max(lo, top) + 1))

    if family == "box":
        size = (n(), n(), n())
    elif family in ("lshape", "tshape", "plus"):
        a, b = n(3), n(3)
        t = int(rng.integers(1, max(1, min(a, b) // 2) + 1))
        size = (a, b, t, n(1, max(1, hi // 2)))
    elif family == "pyramid":
        base = n(3)
        size = (base, int(rng.integers(1, (base + 1) // 2 + 1)))
    else:
        a1, b1, c1 = n(), n(), n()
        a2, b2, c2 = n(1), n(1), n(1)
        dx, dy, dz = (int(rng.integers(0, m + 1)) for m in (a1, b1, c1))
        size = (a1, b1, c1, a2, b2, c2, dx, dy, dz)
    rot = tuple(int(r) for r in rng.integers(0, 4, 3))
    spec = ShapeSpec(family, size, rot, (0, 0, 0), seed)
    ext = _rotate(_local_shape(spec), rot).shape
    if any(e > d for e, d in zip(ext, grid_dims)):
        # too big after rotation: retry with a fresh draw
        return random_shape_spec(rng, grid_dims, family, min_size, max_size)
    spec.offset = tuple(int(rng.integers(0, d - e + 1)) for e, d in zip(ext, grid_dims))
    return spec


def occluder_slab(grid: VoxelGrid, layer: int, x_range, y_range, axis: int = 2) -> np.ndarray:
    """Occupancy of a one-voxel-thick wall at index ``layer`` along ``axis``."""
    arr = np.zeros(grid.counts, dtype=np.int8)
    sl = [slice(*x_range), slice(*y_range)]
    sl.insert(axis, layer)
    arr[tuple(sl)] = 1
    return grid.from_array(arr)


def make_pair(chi, scene: Scene, grid: VoxelGrid, params: OcclusionParams, occluder=None):
    """(chi_v, chi): the part of ``chi`` seen through the RIS, and ``chi`` itself.

    An ``occluder`` occupancy takes part in blocking only; it is removed
    from the returned shapes.
    """
    chi = np.asarray(chi, dtype=np.int8)
    if not chi.any():
        return chi.copy(), chi.copy()
    blockers = chi if occluder is None else np.maximum(chi, np.asarray(occluder, dtype=np.int8))
    occ = compute_occlusion(grid, scene, params, chi=blockers)
    return chi * occ.v, chi.copy()


def reconstruction_error(chi_tilde, chi) -> float:
    chi_tilde = np.asarray(chi_tilde)
    chi = np.asarray(chi)
    if chi_tilde.shape != chi.shape:
        raise ValueError(f"length mismatch: {chi_tilde.shape} vs {chi.shape}")
    return float(np.abs(chi_tilde.astype(int) - chi).sum() / chi.size)


def iou(chi_tilde, chi) -> float:
    a = np.asarray(chi_tilde).astype(bool)
    b = np.asarray(chi).astype(bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


MANIFEST_FIELDS = ["shape_id", "family", "size", "rot", "offset", "seed", "split", "path"]


def write_manifest(rows, path) -> None:
    """Delimited manifest; tuple fields are stored as JSON lists."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
        w.writeheader()
        for row in rows:
            spec = row["spec"]
            w.writerow({"shape_id": row["shape_id"], "family": spec.family,
                        "size": json.dumps(list(spec.size)), "rot": json.dumps(list(spec.rot)),
                        "offset": json.dumps(list(spec.offset)), "seed": spec.seed,
                        "split": row.get("split", "train"), "path": row.get("path", "")})


def read_manifest(path) -> list[dict]:
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            spec = ShapeSpec(rec["family"], tuple(json.loads(rec["size"])), tuple(json.loads(rec["rot"])),
                             tuple(json.loads(rec["offset"])), int(rec["seed"]))
            out.append({"shape_id": rec["shape_id"], "spec": spec, "split": rec["split"],
                        "path": rec["path"]})
    return out
