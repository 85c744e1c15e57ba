"""Sum-product GAMP with a Bernoulli-Gaussian prior, and the occlusion-aware
reconstruction loop that alternates it with path-occlusion updates."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .geometry import (OcclusionParams, Scene, VoxelGrid, compute_occlusion, save_voxel_grid,
                       threshold_occupancy, visibility)

log = logging.getLogger(__name__)

__all__ = [
    "GampPrior",
    "GampSettings",
    "GampDivergedError",
    "ReconstructionResult",
    "gamp_solve",
    "threshold_shape",
    "occlusion_aware_reconstruct",
    "export_reconstruction",
]


@dataclass
class GampPrior:
    """Spike-and-slab prior: x = 0 w.p. 1 - rho, else CN(slab_mean, slab_variance)."""

    sparsity_rate: float = 0.1
    slab_mean: complex = 1.0
    slab_variance: float = 0.05

    def __post_init__(self):
        if not 0 < self.sparsity_rate < 1:
            raise ValueError("sparsity_rate must lie in (0, 1)")
        if not self.slab_variance > 0:
            raise ValueError("slab_variance must be positive")


@dataclass
class GampSettings:
    max_iters: int = 200
    damping: float = 0.7
    tol: float = 1e-8
    noise_variance: float = 1e-10
    outer_max_iters: int = 20
    divergence_guard: float = 1e8
    whiten: bool = True
    rank_tol: float = 1e-10

    def __post_init__(self):
        if self.max_iters < 1 or self.outer_max_iters < 1:
            raise ValueError("iteration caps must be at least 1")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if not self.noise_variance > 0:
            raise ValueError("noise_variance must be positive")


class GampDivergedError(RuntimeError):
    def __init__(self, message, last_stable):
        super().__init__(message)
        self.last_stable = last_stable


def _bg_denoise(r, nu_r, prior: GampPrior):
    """Posterior mean/variance of x given r = x + CN(0, nu_r)."""
    rho, mu, s2 = prior.sparsity_rate, prior.slab_mean, prior.slab_variance
    # log CN(r; m, v) = -log(pi v) - |r - m|^2 / v
    log_slab = -np.log(s2 + nu_r) - np.abs(r - mu) ** 2 / (s2 + nu_r)
    log_spike = -np.log(nu_r) - np.abs(r) ** 2 / nu_r
    llr = np.log(rho / (1 - rho)) + log_slab - log_spike
    pi = 0.5 * (1 + np.tanh(0.5 * np.clip(llr, -700, 700)))
    m = (s2 * r + nu_r * mu) / (s2 + nu_r)
    v = s2 * nu_r / (s2 + nu_r)
    xhat = pi * m
    nu_x = pi * (v + np.abs(m) ** 2) - np.abs(xhat) ** 2
    return xhat, np.maximum(nu_x, 0.0)


def _whiten(A, r, noise_variance, rank_tol):
    """Map r = A x + w to diag(1/s) U^H r = W^H x + w' via the thin SVD.

    Components outside the column space of A carry no information on x and
    are dropped. The transformed rows are orthonormal; the noise stays white
    per row with variance noise_variance / s_i^2.
    """
    U, sv, Wh = np.linalg.svd(A, full_matrices=False)
    keep = sv > rank_tol * (sv[0] if len(sv) and sv[0] > 0 else 1.0)
    if not np.any(keep):
        return np.zeros((1, A.shape[1]), dtype=complex), np.zeros(1, dtype=complex), np.ones(1)
    U, sv, Wh = U[:, keep], sv[keep], Wh[keep]
    # scale so that the mean column energy is one, as in the unwhitened path
    c = np.sqrt(A.shape[1] / Wh.shape[0])
    return Wh * c, (U.conj().T @ r) / sv * c, noise_variance * c**2 / sv**2


def gamp_solve(A, r, prior: GampPrior | None = None, settings: GampSettings | None = None,
               return_info: bool = False):
    """MMSE estimate of x in r = A x + CN(0, noise_variance).

    With ``settings.whiten`` the problem is first mapped to an equivalent one
    with orthonormal rows (see ``_whiten``); otherwise A is only rescaled to
    unit mean column energy. Neither changes the likelihood of x.
    """
    prior = prior or GampPrior()
    settings = settings or GampSettings()
    A = np.asarray(A, dtype=complex)
    r = np.asarray(r, dtype=complex)
    K, N = A.shape
    if K < 1 or r.shape != (K,):
        raise ValueError(f"measurement length {r.shape} does not match A {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("A has non-finite entries")

    if settings.whiten:
        A, r, nu_w = _whiten(A, r, settings.noise_variance, settings.rank_tol)
    else:
        col_energy = np.sum(np.abs(A) ** 2, axis=0)
        scale = np.sqrt(np.mean(col_energy[col_energy > 0])) if np.any(col_energy > 0) else 1.0
        A = A / scale
        r = r / scale
        nu_w = np.full(K, settings.noise_variance / scale**2)
    K = A.shape[0]
    A2 = np.abs(A) ** 2
    AH = A.conj().T
    A2H = A2.T

    rho = prior.sparsity_rate
    xhat = np.full(N, rho * prior.slab_mean, dtype=complex)
    nu_x = np.full(N, rho * (prior.slab_variance + abs(prior.slab_mean) ** 2)
                   - abs(rho * prior.slab_mean) ** 2)
    shat = np.zeros(K, dtype=complex)
    nu_s = np.zeros(K)
    damp = settings.damping
    last_stable = xhat.copy()
    converged = False
    it = 0
    for it in range(1, settings.max_iters + 1):
        nu_p = A2 @ nu_x
        phat = A @ xhat - nu_p * shat
        shat_new = (r - phat) / (nu_p + nu_w)
        nu_s_new = 1.0 / (nu_p + nu_w)
        if it > 1:
            shat_new = damp * shat_new + (1 - damp) * shat
            nu_s_new = damp * nu_s_new + (1 - damp) * nu_s
        shat, nu_s = shat_new, nu_s_new

        denom = A2H @ nu_s
        nu_r = 1.0 / np.maximum(denom, 1e-300)
        nu_r = np.minimum(nu_r, 1e300)
        rhat = xhat + nu_r * (AH @ shat)
        x_new, nu_x_new = _bg_denoise(rhat, nu_r, prior)
        x_new = damp * x_new + (1 - damp) * xhat
        nu_x = damp * nu_x_new + (1 - damp) * nu_x

        if not np.all(np.isfinite(x_new)) or np.linalg.norm(x_new) > settings.divergence_guard * np.sqrt(N):
            raise GampDivergedError(f"GAMP diverged at iteration {it}", last_stable)
        change = np.linalg.norm(x_new - xhat) / max(np.linalg.norm(x_new), 1e-30)
        xhat = x_new
        last_stable = xhat.copy()
        if change < settings.tol:
            converged = True
            break
    if return_info:
        return xhat, {"iterations": it, "converged": converged}
    return xhat


def _gamp_with_backoff(A, r, prior, settings, retries=3):
    """gamp_solve, retrying with halved damping on divergence."""
    for attempt in range(retries + 1):
        try:
            return gamp_solve(A, r, prior, settings)
        except GampDivergedError:
            if attempt == retries:
                raise
            settings = replace(settings, damping=settings.damping / 2,
                               max_iters=settings.max_iters * 2)
            log.info("GAMP diverged; retrying with damping %.3f", settings.damping)


def threshold_shape(omega_v, v, tau_omega: float) -> np.ndarray:
    return threshold_occupancy(omega_v, tau_omega) * np.asarray(v, dtype=np.int8)


@dataclass
class ReconstructionResult:
    omega_v: np.ndarray
    V_est: np.ndarray
    chi_v: np.ndarray
    outer_iters: int
    converged: bool
    residual: float = float("nan")
    initial_residual: float = float("nan")
    history: list = None

    @property
    def v_est(self) -> np.ndarray:
        return visibility(self.V_est)


def occlusion_aware_reconstruct(r, Q, H_r, scene: Scene, grid: VoxelGrid,
                                params: OcclusionParams, settings: GampSettings | None = None,
                                prior: GampPrior | None = None, eps_v: float | None = None,
                                update_occlusion: bool = True) -> ReconstructionResult:
    """Alternate GAMP recovery with occlusion re-estimation until V settles.

    ``update_occlusion=False`` runs a single GAMP pass with V fixed to all
    ones (the occlusion-unaware baseline).
    """
    settings = settings or GampSettings()
    Q = np.atleast_2d(np.asarray(Q))
    H_r = np.asarray(H_r)
    r = np.asarray(r)
    M, N = H_r.shape
    if Q.shape[1] != M or r.shape != (Q.shape[0],) or grid.N != N:
        raise ValueError("shapes of r, Q, H_r and grid do not conform")
    if eps_v is None:
        eps_v = 0.01 * np.sqrt(M * N)

    V_prev = np.ones((M, N), dtype=np.int8)
    initial_residual = float(np.linalg.norm(r))
    history = []
    converged = False
    omega_v = np.zeros(N, dtype=complex)
    best = None
    i = 0
    for i in range(1, settings.outer_max_iters + 1):
        A = Q @ (H_r * V_prev)
        omega_hat = _gamp_with_backoff(A, r, prior, settings)
        v_prev = visibility(V_prev)
        omega_v = omega_hat * v_prev
        res_i = float(np.linalg.norm(r - A @ omega_v))
        if best is None or res_i < best[0]:
            best = (res_i, V_prev, omega_v)
        if not update_occlusion:
            V_new = V_prev
        else:
            chi_est = threshold_occupancy(omega_v, params.tau_omega)
            V_new = compute_occlusion(grid, scene, params, chi=chi_est).V
        delta = float(np.sqrt(np.sum((V_new.astype(int) - V_prev) ** 2)))
        history.append({"iteration": i, "delta_V": delta, "residual": res_i})
        log.debug("outer iteration %d: ||dV||_F = %.3f", i, delta)
        V_prev = V_new
        if delta <= eps_v:
            converged = True
            break
    if not converged:
        # the loop can cycle between occlusion patterns; keep the best fit
        log.warning("occlusion loop hit the %d-iteration cap; keeping the lowest-residual iterate",
                    settings.outer_max_iters)
        _, V_prev, omega_v = best

    v_est = visibility(V_prev)
    # the final V may have hidden voxels that the last GAMP pass still saw
    omega_v = omega_v * v_est
    chi_v = threshold_shape(omega_v, v_est, params.tau_omega)
    residual = float(np.linalg.norm(r - Q @ ((H_r * V_prev) @ omega_v)))
    return ReconstructionResult(omega_v=omega_v, V_est=V_prev, chi_v=chi_v, outer_iters=i,
                                converged=converged, residual=residual,
                                initial_residual=initial_residual, history=history)


def export_reconstruction(result: ReconstructionResult, grid: VoxelGrid, path) -> None:
    """VoxelGrid text file plus a ``.meta.json`` sidecar with run metadata."""
    path = Path(path)
    save_voxel_grid(grid.with_shape(result.chi_v, result.omega_v), path)
    meta = {
        "outer_iters": result.outer_iters,
        "converged": result.converged,
        "residual": result.residual,
        "initial_residual": result.initial_residual,
        "history": result.history,
    }
    path.with_suffix(path.suffix + ".meta.json").write_text(json.dumps(meta, indent=2))
