import numpy as np
import pytest
import torch

from risamodal.features import (SubregionPartition, feature_vector, feature_vector_torch,
                                global_correlation, normalized_correlation_matrix,
                                partition_subregions)

from oracles import central_difference, correlation_by_loops


def test_correlation_matrix_matches_loops(rng):
    A = rng.standard_normal((5, 7)) + 1j * rng.standard_normal((5, 7))
    np.testing.assert_allclose(normalized_correlation_matrix(A), correlation_by_loops(A), atol=1e-13)


def test_orthonormal_columns_give_zero():
    Q = np.eye(4, dtype=complex)
    H = np.linalg.qr(np.random.default_rng(0).standard_normal((4, 4)))[0].astype(complex)
    assert global_correlation(Q, H) == pytest.approx(0.0, abs=1e-12)


def test_two_identical_columns():
    H = np.array([[1.0], [2.0j]]) @ np.ones((1, 2))
    # R - I has two unit off-diagonal entries: sqrt(2) / (4 - 2)
    assert abs(global_correlation(np.eye(2), H) - np.sqrt(2) / 2) < 1e-12


def test_zero_column_rejected():
    with pytest.raises(ValueError, match="zero column"):
        normalized_correlation_matrix(np.array([[1.0, 0.0], [1.0, 0.0]]))


def test_partition_covers_grid():
    part = partition_subregions((4, 4, 6), 2)
    assert part.L == 8 and part.sizes == [12] * 8
    part.check(96)
    with pytest.raises(ValueError):
        partition_subregions((5, 4, 4), 2)
    with pytest.raises(ValueError):
        SubregionPartition([np.array([0])])
    with pytest.raises(ValueError):
        SubregionPartition([np.array([0, 1]), np.array([1, 2])]).check(3)


def test_feature_vector_torch_matches_numpy(rng):
    K, M = 4, 6
    part = partition_subregions((2, 2, 2), 1)
    H = rng.standard_normal((M, 8)) + 1j * rng.standard_normal((M, 8))
    phases = rng.uniform(0, 2 * np.pi, (K, M))
    ref = feature_vector(np.exp(-1j * phases), H, part)
    got = feature_vector_torch(torch.tensor(phases), torch.tensor(H), part).numpy()
    np.testing.assert_allclose(got, ref, rtol=1e-10)
    batch = feature_vector_torch(torch.tensor(np.stack([phases, phases])), torch.tensor(H), part)
    assert batch.shape == (2, 2)


def test_gradients_match_central_differences(rng):
    K, M = 3, 4
    part = partition_subregions((2, 2, 4), 2)
    H = rng.standard_normal((M, 16)) + 1j * rng.standard_normal((M, 16))
    phases = rng.uniform(0, 2 * np.pi, (K, M))
    Ht = torch.tensor(H)
    for j in (0, 3):
        x = torch.tensor(phases, requires_grad=True)
        feature_vector_torch(x, Ht, part)[j].backward()

        def f(p):
            return feature_vector(np.exp(-1j * p), H, part)[j]

        num = central_difference(f, phases, 1e-6)
        err = np.linalg.norm(x.grad.numpy() - num) / np.linalg.norm(num)
        assert err < 1e-3
