import numpy as np
import numpy.testing as npt
import pytest

from glq.calib_model import LayerCalibration, calibrate
from glq.errors import EmptyCalibration, InvalidSize, PartitionMismatch
from glq.hessian import (
    ChannelPartition,
    HessianCache,
    fisher_block_oracle,
    fisher_diag,
    guided_hessians,
    hessian_cache_key,
    model_hash,
    plain_hessian,
    squared_grad_averages,
)


def _calib(seed: int, n: int, d_in: int, d_out: int) -> LayerCalibration:
    rng = np.random.default_rng(seed)
    return LayerCalibration(
        X=rng.standard_normal((n, d_in)),
        gradZ=rng.standard_normal((n, d_out)),
    )


class TestPartition:
    def test_even_split(self):
        p = ChannelPartition.consecutive(8, 4)
        assert p.groups == ((0, 1), (2, 3), (4, 5), (6, 7))

    def test_ragged_split(self):
        p = ChannelPartition.consecutive(7, 3)
        assert p.groups == ((0, 1, 2), (3, 4), (5, 6))

    def test_single_group(self):
        assert ChannelPartition.consecutive(5, 1).groups == ((0, 1, 2, 3, 4),)

    def test_bad_g(self):
        with pytest.raises(InvalidSize):
            ChannelPartition.consecutive(4, 5)
        with pytest.raises(InvalidSize):
            ChannelPartition.consecutive(4, 0)

    def test_cover_validated(self):
        with pytest.raises(PartitionMismatch):
            ChannelPartition(d_out=3, groups=((0, 1), (1, 2)))
        with pytest.raises(PartitionMismatch):
            ChannelPartition(d_out=3, groups=((0, 1),))

    def test_group_lookup(self):
        h = guided_hessians(_calib(0, 6, 3, 4), ChannelPartition.consecutive(4, 2))
        assert h.group_for_channel(0) == 0
        assert h.group_for_channel(3) == 1


class TestPlainHessian:
    def test_matches_gram_matrix(self):
        c = _calib(1, 10, 4, 3)
        h = plain_hessian(c, damping_rel=0.0)
        npt.assert_allclose(h.hessians[0], c.X.T @ c.X, atol=1e-12)
        assert h.kind == "plain" and h.partition.g == 1

    def test_relative_damping_value(self):
        c = _calib(2, 10, 4, 3)
        M = c.X.T @ c.X
        h = plain_hessian(c, damping_rel=1e-3)
        lam = 1e-3 * float(np.mean(np.diag(M)))
        assert h.lambdas[0] == pytest.approx(lam, rel=1e-12)
        npt.assert_allclose(h.hessians[0], M + lam * np.eye(4), atol=1e-10)

    def test_empty_rejected(self):
        c = LayerCalibration(X=np.zeros((0, 3)), gradZ=np.zeros((0, 2)))
        with pytest.raises(EmptyCalibration):
            plain_hessian(c)


class TestGuidedHessians:
    def test_hand_2x2_expansion(self):
        # n=2, d_in=2, one channel: nF = sum_i g_i^2 x_i x_i^T
        c = LayerCalibration(
            X=np.array([[1.0, 2.0], [3.0, 4.0]]),
            gradZ=np.array([[0.5], [-1.0]]),
        )
        part = ChannelPartition.consecutive(1, 1)
        h = guided_hessians(c, part, grad_scale=1.0, damping_rel=0.0)
        npt.assert_allclose(
            h.hessians[0], [[9.25, 12.5], [12.5, 17.0]], atol=1e-12
        )

    def test_averaging_consistency(self):
        c = _calib(3, 12, 5, 6)
        part = ChannelPartition.consecutive(6, 3)
        h = guided_hessians(c, part, grad_scale=7.0, damping_rel=0.0)
        for k, grp in enumerate(part.groups):
            acc = np.zeros((5, 5))
            for j in grp:
                g2 = (7.0 * c.gradZ[:, j]) ** 2
                acc += (c.X * g2[:, None]).T @ c.X
            acc /= len(grp)
            scale = max(1.0, float(np.max(np.abs(acc))))
            assert np.max(np.abs(acc - h.hessians[k])) <= 1e-10 * scale

    def test_g_equals_dout_is_per_channel(self):
        c = _calib(4, 10, 4, 5)
        part = ChannelPartition.consecutive(5, 5)
        h = guided_hessians(c, part, grad_scale=1.0, damping_rel=0.0)
        for j in range(5):
            direct = (c.X * (c.gradZ[:, j] ** 2)[:, None]).T @ c.X
            scale = max(1.0, float(np.max(np.abs(direct))))
            assert np.max(np.abs(h.hessians[j] - direct)) <= 1e-10 * scale

    def test_grad_scale_quadratic_law(self):
        c = _calib(5, 10, 4, 4)
        part = ChannelPartition.consecutive(4, 2)
        h1 = guided_hessians(c, part, grad_scale=1.0, damping_rel=0.0)
        hs = guided_hessians(c, part, grad_scale=50.0, damping_rel=0.0)
        for a, b in zip(h1.hessians, hs.hessians):
            npt.assert_allclose(b, 2500.0 * a, rtol=1e-12)

    def test_positive_semidefinite(self):
        c = _calib(6, 8, 6, 4)
        h = guided_hessians(c, ChannelPartition.consecutive(4, 2), damping_rel=0.0)
        for H in h.hessians:
            evmin = float(np.min(np.linalg.eigvalsh(H)))
            assert evmin >= -1e-8 * max(1.0, float(np.max(np.abs(H))))

    def test_partition_size_checked(self):
        c = _calib(7, 8, 3, 4)
        with pytest.raises(PartitionMismatch):
            guided_hessians(c, ChannelPartition.consecutive(5, 1))

    def test_squared_grad_averages_values(self):
        c = _calib(8, 6, 3, 4)
        part = ChannelPartition.consecutive(4, 2)
        s = squared_grad_averages(c, part, grad_scale=3.0)
        expect0 = np.mean((3.0 * c.gradZ[:, [0, 1]]) ** 2, axis=1)
        npt.assert_allclose(s.s[:, 0], expect0, atol=1e-13)


class TestFisherOracle:
    def test_diag_identity(self):
        # n * F_j == X^T Diag(gradZ_j^2) X
        c = _calib(9, 11, 5, 3)
        n = 11
        for j in range(3):
            F = fisher_block_oracle(c, j, n)
            direct = (c.X * (c.gradZ[:, j] ** 2)[:, None]).T @ c.X
            npt.assert_allclose(n * F, direct, atol=1e-12 * max(1.0, np.max(np.abs(direct))))

    def test_fisher_diag_matches_blocks(self):
        c = _calib(10, 9, 4, 3)
        D = fisher_diag(c)
        for j in range(3):
            F = fisher_block_oracle(c, j, 9)
            npt.assert_allclose(D[:, j], np.diag(F), atol=1e-13)

    def test_channel_range_checked(self):
        with pytest.raises(PartitionMismatch):
            fisher_block_oracle(_calib(0, 4, 3, 2), 2, 4)


class TestCacheAndHash:
    def test_model_hash_sensitivity(self, toy_problem):
        model, _ = toy_problem
        h1 = model_hash(model)
        assert h1 == model_hash(model.copy())
        bumped = model.copy()
        bumped.layers[0][0, 0] += 1e-9
        assert model_hash(bumped) != h1

    def test_key_stability(self):
        k1 = hessian_cache_key("abc", 0, 1, 4, 1e3, 1e-7, "guided")
        k2 = hessian_cache_key("abc", 0, 1, 4, 1e3, 1e-7, "guided")
        k3 = hessian_cache_key("abc", 0, 1, 2, 1e3, 1e-7, "guided")
        assert k1 == k2 and k1 != k3

    def test_store_load_roundtrip(self, tmp_path, toy_problem):
        model, data = toy_problem
        calib = calibrate(model, data)
        part = ChannelPartition.consecutive(calib[1].gradZ.shape[1], 4)
        hset = guided_hessians(calib[1], part, layer_idx=1)
        cache = HessianCache(tmp_path)
        key = hessian_cache_key(model_hash(model), data.seed, 1, 4, 1e3, 1e-7, "guided")
        cache.store(key, hset)
        back = cache.load(key)
        assert back is not None
        assert back.partition.groups == hset.partition.groups
        assert back.lambdas == hset.lambdas
        for a, b in zip(hset.hessians, back.hessians):
            npt.assert_array_equal(a, b)

    def test_missing_key_returns_none(self, tmp_path):
        assert HessianCache(tmp_path).load("nope") is None
