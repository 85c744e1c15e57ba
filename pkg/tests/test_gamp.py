import numpy as np
import pytest

from risamodal.gamp import (GampDivergedError, GampPrior, GampSettings, export_reconstruction,
                            gamp_solve, occlusion_aware_reconstruct, threshold_shape)
from risamodal.gamp import _bg_denoise
from risamodal.geometry import OcclusionParams, Scene, voxelize
from risamodal.channel import RadioParams, free_space_channel, measure
from risamodal.geometry import compute_occlusion
from risamodal.ris import random_configs

from oracles import support_least_squares


def _problem(seed, N=80, s=5, K=40):
    rng = np.random.default_rng(seed)
    A = np.exp(1j * rng.uniform(0, 2 * np.pi, (K, N))) * rng.uniform(0.5, 2, N)
    x = np.zeros(N)
    sup = rng.choice(N, s, replace=False)
    x[sup] = rng.choice([-1.0, 1.0], s)
    return A, x, sup


def test_denoiser_limits():
    prior = GampPrior(0.2, 1.0, 0.05)
    # vanishing noise: the posterior mean is the observation on the slab
    xh, v = _bg_denoise(np.array([1.0 + 0j]), 1e-12, prior)
    assert abs(xh[0] - 1.0) < 1e-6 and v[0] < 1e-6
    # huge noise: the posterior mean tends to the prior mean
    xh, _ = _bg_denoise(np.array([0.3 + 0j]), 1e12, prior)
    assert abs(xh[0] - 0.2) < 1e-6


def test_noiseless_recovery_and_support_ls():
    A, x, sup = _problem(0)
    xs, rank = support_least_squares(A, A @ x, sup)
    assert rank == len(sup)
    np.testing.assert_allclose(xs, x, atol=1e-10)
    xh, info = gamp_solve(A, A @ x, GampPrior(5 / 80, 0.0, 1.0),
                          GampSettings(max_iters=500, noise_variance=1e-10, tol=1e-12), return_info=True)
    assert np.sum(np.abs(xh - x) ** 2) / np.sum(x**2) < 1e-3
    assert info["iterations"] <= 500


def test_unwhitened_path_recovers_too():
    A, x, _ = _problem(1, K=60)
    xh = gamp_solve(A, A @ x, GampPrior(5 / 80, 0.0, 1.0),
                    GampSettings(max_iters=800, noise_variance=1e-8, whiten=False, damping=0.5))
    assert np.sum(np.abs(xh - x) ** 2) / np.sum(x**2) < 1e-2


def test_settings_validation():
    for kw in ({"damping": 0}, {"damping": 1.5}, {"max_iters": 0}, {"tol": 0}, {"noise_variance": 0}):
        with pytest.raises(ValueError):
            GampSettings(**kw)
    for kw in ({"sparsity_rate": 1.0}, {"slab_variance": 0.0}):
        with pytest.raises(ValueError):
            GampPrior(**kw)
    with pytest.raises(ValueError):
        gamp_solve(np.ones((3, 4)), np.ones(2))
    with pytest.raises(ValueError):
        gamp_solve(np.full((3, 4), np.nan), np.ones(3))


def test_divergence_guard_reports_last_stable():
    A, x, _ = _problem(2)
    with pytest.raises(GampDivergedError) as exc:
        gamp_solve(A, 1e9 * (A @ x), settings=GampSettings(divergence_guard=1.0, whiten=False))
    assert exc.value.last_stable.shape == (80,)


def test_threshold_shape():
    out = threshold_shape(np.array([0.9, 0.9, 0.1]), np.array([1, 0, 1]), 0.5)
    assert out.tolist() == [1, 0, 0]


def _sensing_setup(K=32):
    g = voxelize([0, 0, 2.5], [3, 3, 3], 5, 5, 5)
    sc = Scene()
    radio = RadioParams()
    H = free_space_channel(sc, g, radio).H * radio.pilot_amplitude
    params = OcclusionParams(0.3)
    settings = GampSettings(noise_variance=radio.noise_variance * 1e3, damping=0.5)
    prior = GampPrior(0.03, 1.0, 0.02)
    return g, sc, H, params, settings, prior, random_configs(K, sc.M, 2, seed=0).Q


def test_occlusion_aware_reconstruction_noiseless():
    g, sc, H, params, settings, prior, Q = _sensing_setup()
    arr = np.zeros(g.counts, np.int8)
    arr[0:3, :, 1] = 1
    arr[2:4, 2:4, 3] = 1
    chi = g.from_array(arr)
    occ = compute_occlusion(g, sc, params, chi=chi)
    r = measure(H, occ.V, (chi * occ.v).astype(complex), Q)
    res = occlusion_aware_reconstruct(r, Q, H, sc, g, params, settings, prior)
    assert res.converged and res.outer_iters <= settings.outer_max_iters
    assert np.array_equal(res.chi_v, chi * occ.v)
    assert np.mean(res.V_est == occ.V) > 0.95
    assert res.residual <= res.initial_residual
    assert [h["iteration"] for h in res.history] == list(range(1, res.outer_iters + 1))
    fixed = occlusion_aware_reconstruct(r, Q, H, sc, g, params, settings, prior, update_occlusion=False)
    assert fixed.outer_iters == 1 and fixed.V_est.all()


def test_reconstruction_shape_checks():
    g, sc, H, params, settings, prior, Q = _sensing_setup()
    with pytest.raises(ValueError):
        occlusion_aware_reconstruct(np.zeros(5), Q, H, sc, g, params, settings, prior)


def test_export_reconstruction(tmp_path):
    g, sc, H, params, settings, prior, Q = _sensing_setup(8)
    res = occlusion_aware_reconstruct(np.zeros(8, complex), Q, H, sc, g, params, settings, prior)
    export_reconstruction(res, g, tmp_path / "rec.txt")
    assert (tmp_path / "rec.txt").exists() and (tmp_path / "rec.txt.meta.json").exists()
