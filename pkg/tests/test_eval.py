"""Linear probe, k-NN with brute-force oracle, MINE mutual information."""

import numpy as np
import pytest
import torch

from latentviews.evaluation import (MineConfig, ProbeConfig, embed_images, knn_accuracy,
                                    knn_eval, linear_probe, linear_probe_embeddings,
                                    mine_estimate)
from latentviews.modelzoo import BlobGenerator, ConvEncoder

FAST_MINE = MineConfig(steps=600, batch=128, eval_every=60, hidden=64)


def gauss_pairs(rho, n, seed):
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(n)
    v = rho * u + np.sqrt(1 - rho ** 2) * rng.standard_normal(n)
    return u, v


class TestLinearProbe:
    def test_one_hot_embeddings_are_separable(self, rng):
        labels = rng.integers(0, 4, size=200)
        z = np.eye(4)[labels]
        test_labels = rng.integers(0, 4, size=100)
        test_z = np.eye(4)[test_labels]
        acc = linear_probe_embeddings(z, labels, test_z, test_labels,
                                      ProbeConfig(epochs=100), seed=0)
        assert acc == 1.0

    def test_random_embeddings_hit_chance(self, rng):
        classes, n_test = 4, 1000
        train_z = rng.standard_normal((1000, 16))
        train_y = np.repeat(np.arange(classes), 250)
        test_z = rng.standard_normal((n_test, 16))
        test_y = np.repeat(np.arange(classes), n_test // classes)
        acc = linear_probe_embeddings(train_z, train_y, test_z, test_y,
                                      ProbeConfig(epochs=30), seed=0)
        p = 1.0 / classes
        sigma = np.sqrt(p * (1 - p) / n_test)
        assert abs(acc - p) <= 3 * sigma

    def test_single_class_rejected(self, rng):
        z = rng.standard_normal((10, 4))
        with pytest.raises(ValueError, match="two classes"):
            linear_probe_embeddings(z, np.zeros(10, dtype=int), z, np.zeros(10, dtype=int))

    def test_backbone_untouched(self, rng):
        enc = ConvEncoder((3, 8, 8), embed_dim=8, channels=(4,))
        before = enc.parameter_vector()
        images = torch.as_tensor(rng.random((20, 3, 8, 8)))
        labels = rng.integers(0, 2, size=20)
        linear_probe(enc, images, labels, images, labels, ProbeConfig(epochs=3), seed=0)
        np.testing.assert_array_equal(enc.parameter_vector(), before)


class TestKnn:
    def test_unanimous_duplicated_neighbors(self):
        v = np.array([[1.0, 0.0]])
        train_z = np.concatenate([np.repeat(v, 5, axis=0),
                                  np.repeat([[0.0, 1.0]], 3, axis=0)])
        train_y = np.array([7] * 5 + [3] * 3)
        acc = knn_accuracy(train_z, train_y, v, np.array([7]), k=5)
        assert acc == 1.0

    def test_matches_bruteforce_oracle(self, rng):
        from oracles import oracle_knn as oracle

        for trial in range(20):
            k_dim = 6
            train_z = rng.standard_normal((150, k_dim))
            train_z /= np.linalg.norm(train_z, axis=1, keepdims=True)
            test_z = rng.standard_normal((50, k_dim))
            test_z /= np.linalg.norm(test_z, axis=1, keepdims=True)
            train_y = rng.integers(0, 4, size=150)
            test_y = rng.integers(0, 4, size=50)
            got = knn_accuracy(train_z, train_y, test_z, test_y, k=5)
            want = oracle(train_z, train_y, test_z, test_y, k=5)
            assert got == want

    def test_tie_break_by_smallest_training_index(self):
        # two classes, two votes each at identical distances: the class
        # holding the smallest train index among the neighbors wins
        train_z = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
        train_y = np.array([9, 4, 4, 9])
        acc = knn_accuracy(train_z, train_y, np.array([[1.0, 0.0]]), np.array([9]), k=4)
        assert acc == 1.0  # index 0 belongs to class 9

    def test_self_match(self, rng):
        z = rng.standard_normal((30, 5))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        y = rng.integers(0, 3, size=30)
        assert knn_accuracy(z, y, z, y, k=1) == 1.0

    def test_k_too_large_rejected(self, rng):
        z = rng.standard_normal((4, 3))
        with pytest.raises(ValueError, match="exceeds"):
            knn_accuracy(z, np.arange(4), z, np.arange(4), k=5)

    def test_encoder_wrapper(self, rng):
        gen = BlobGenerator(12, (3, 16, 16))
        enc = ConvEncoder((3, 16, 16), embed_dim=8, channels=(4, 8))
        with torch.no_grad():
            images = gen(torch.as_tensor(rng.standard_normal((30, 12))))
        labels = rng.integers(0, 3, size=30)
        acc = knn_eval(enc, images, labels, images[:10], labels[:10], k=3)
        assert 0.0 <= acc <= 1.0


class TestMine:
    def test_gaussian_rho09_oracle(self):
        # analytic MI of a rho-correlated Gaussian pair: -log(1 - rho^2)/2
        u, v = gauss_pairs(0.9, 20000, seed=0)
        est = mine_estimate(u, v, MineConfig(), seed=0)
        true = -0.5 * np.log(1 - 0.81)
        assert abs(est - true) / true <= 0.15

    def test_independent_pairs_near_zero(self):
        rng = np.random.default_rng(5)
        est = mine_estimate(rng.standard_normal(20000), rng.standard_normal(20000),
                            FAST_MINE, seed=0)
        assert est <= 0.05

    def test_monotone_in_correlation(self):
        means = []
        for rho in (0.3, 0.6, 0.9):
            ests = [mine_estimate(*gauss_pairs(rho, 6000, seed), FAST_MINE, seed=seed)
                    for seed in range(5)]
            means.append(np.mean(ests))
        assert means[0] < means[1] < means[2]

    def test_too_few_pairs_rejected(self, rng):
        with pytest.raises(ValueError, match="1000"):
            mine_estimate(rng.standard_normal(100), rng.standard_normal(100))

    def test_divergence_guard_aborts(self):
        u, v = gauss_pairs(0.9, 2000, seed=1)
        cfg = MineConfig(steps=50, divergence_bound=1e-9)
        with pytest.raises(RuntimeError, match="diverged"):
            mine_estimate(u, v, cfg, seed=0)

    def test_estimate_is_clamped_nonnegative(self):
        rng = np.random.default_rng(9)
        cfg = MineConfig(steps=120, eval_every=40, batch=128, hidden=32)
        est = mine_estimate(rng.standard_normal(1500), rng.standard_normal(1500),
                            cfg, seed=3)
        assert est >= 0.0


def test_embed_images_chunks_consistent(rng):
    enc = ConvEncoder((3, 8, 8), embed_dim=6, channels=(4,))
    images = torch.as_tensor(rng.random((10, 3, 8, 8)))
    full = embed_images(enc, images, batch_size=256)
    chunked = embed_images(enc, images, batch_size=3)
    assert torch.allclose(full, chunked, atol=1e-12)
