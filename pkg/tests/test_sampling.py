"""
Tests for support sampling, unlabeled batches and view generation.
"""

import unittest

import numpy as np

from src.core.exceptions import EmptyUnlabeledSet, InvalidViewCount, MissingClass
from src.core.schemas import ViewConfig
from src.data.datasets import LabeledSet, UnlabeledSet
from src.engine.sampling import (
    DOMAIN_SOURCE, DOMAIN_TARGET, generate_views, sample_support, sample_unlabeled
)


def labeled(n_per_class, n_classes, first_id, d=2, seed=0):
    labels = np.repeat(np.arange(n_classes), n_per_class)
    X = np.random.default_rng(seed).normal(size=(labels.size, d))
    return LabeledSet(first_id + np.arange(labels.size), X, labels)


class TestSupportSampling(unittest.TestCase):
    def setUp(self):
        self.source = labeled(5, 3, 0)
        self.target = labeled(1, 3, 1000)

    def test_counts_and_order(self):
        support = sample_support(self.source, self.target, 1, np.random.default_rng(0), 3)
        self.assertEqual(len(support), 6)
        np.testing.assert_array_equal(support.labels, [0, 1, 2, 0, 1, 2])
        np.testing.assert_array_equal(support.domains, [DOMAIN_SOURCE] * 3 + [DOMAIN_TARGET] * 3)

    def test_same_seed_same_batch(self):
        a = sample_support(self.source, self.target, 4, np.random.default_rng(1), 3)
        b = sample_support(self.source, self.target, 4, np.random.default_rng(1), 3)
        np.testing.assert_array_equal(a.ids, b.ids)
        np.testing.assert_array_equal(a.X, b.X)

    def test_one_shot_target_drawn_with_replacement(self):
        support = sample_support(self.source, self.target, 4, np.random.default_rng(2), 3)
        target_rows = support.domains == DOMAIN_TARGET
        for c in range(3):
            ids = support.ids[target_rows & (support.labels == c)]
            self.assertEqual(ids.size, 4)
            self.assertEqual(len(set(ids.tolist())), 1)

    def test_labels_agree_with_source_rows(self):
        support = sample_support(self.source, self.target, 3, np.random.default_rng(3), 3)
        for sample_id, label, x in zip(support.ids, support.labels, support.X):
            pool = self.source if sample_id < 1000 else self.target
            row = int(np.flatnonzero(pool.ids == sample_id)[0])
            self.assertEqual(pool.labels[row], label)
            np.testing.assert_array_equal(pool.X[row], x)

    def test_missing_class(self):
        target = LabeledSet(np.array([1000, 1001]), np.zeros((2, 2)), np.array([0, 1]))
        with self.assertRaises(MissingClass):
            sample_support(self.source, target, 1, np.random.default_rng(0), 3)


class TestUnlabeledSampling(unittest.TestCase):
    def setUp(self):
        self.unlabeled = UnlabeledSet(np.arange(100, 120), np.arange(40, dtype=np.float64).reshape(20, 2))

    def test_full_batch_is_a_permutation(self):
        batch = sample_unlabeled(self.unlabeled, 20, np.random.default_rng(0))
        self.assertEqual(sorted(batch.ids.tolist()), list(range(100, 120)))

    def test_ids_match_rows(self):
        batch = sample_unlabeled(self.unlabeled, 7, np.random.default_rng(1))
        for sample_id, x in zip(batch.ids, batch.X):
            np.testing.assert_array_equal(x, self.unlabeled.X[sample_id - 100])

    def test_small_set_sampled_with_replacement(self):
        batch = sample_unlabeled(self.unlabeled, 50, np.random.default_rng(2))
        self.assertEqual(batch.ids.size, 50)

    def test_same_seed_same_batch(self):
        a = sample_unlabeled(self.unlabeled, 8, np.random.default_rng(3))
        b = sample_unlabeled(self.unlabeled, 8, np.random.default_rng(3))
        np.testing.assert_array_equal(a.ids, b.ids)

    def test_uniform_frequencies(self):
        rng = np.random.default_rng(4)
        counts = np.zeros(20)
        n_batches = 25_000
        for _ in range(n_batches):
            batch = sample_unlabeled(self.unlabeled, 4, rng)
            np.add.at(counts, batch.ids - 100, 1)
        draws = 4 * n_batches
        expected = draws / 20
        sigma = np.sqrt(draws * (1 / 20) * (1 - 1 / 20))
        self.assertTrue(np.all(np.abs(counts - expected) < 4 * sigma), counts)

    def test_empty(self):
        with self.assertRaises(EmptyUnlabeledSet):
            sample_unlabeled(UnlabeledSet(np.zeros(0, dtype=np.int64), np.zeros((0, 2))), 4,
                             np.random.default_rng(0))


class TestViews(unittest.TestCase):
    def test_identity_configuration(self):
        x = np.array([[1.0, -2.0, 3.0]])
        cfg = ViewConfig(n_local=3, global_noise_sigma=0.0, local_mask_fraction=0.0, local_noise_sigma=0.0)
        views = generate_views(x, cfg, np.random.default_rng(0))
        for view in np.concatenate([views.global_views, views.local_views]):
            np.testing.assert_array_equal(view, x)

    def test_local_masking_count(self):
        x = np.full((5, 4), 7.0)
        cfg = ViewConfig(n_local=4, local_mask_fraction=0.5, local_noise_sigma=0.0)
        views = generate_views(x, cfg, np.random.default_rng(1))
        self.assertEqual(views.n_local, 4)
        np.testing.assert_array_equal(np.count_nonzero(views.local_views == 0.0, axis=2), 2)

    def test_masking_count_ignores_float_noise(self):
        # 0.07 * 100 evaluates to 7.000000000000001
        x = np.ones((3, 100))
        cfg = ViewConfig(n_local=2, local_mask_fraction=0.07, local_noise_sigma=0.0)
        views = generate_views(x, cfg, np.random.default_rng(4))
        np.testing.assert_array_equal(np.count_nonzero(views.local_views == 0.0, axis=2), 7)
        cfg = ViewConfig(n_local=1, local_mask_fraction=0.071, local_noise_sigma=0.0)
        views = generate_views(x, cfg, np.random.default_rng(4))
        np.testing.assert_array_equal(np.count_nonzero(views.local_views == 0.0, axis=2), 8)

    def test_same_seed_bit_identical(self):
        x = np.random.default_rng(2).normal(size=(6, 3))
        a = generate_views(x, ViewConfig(), np.random.default_rng(5))
        b = generate_views(x, ViewConfig(), np.random.default_rng(5))
        np.testing.assert_array_equal(a.global_views, b.global_views)
        np.testing.assert_array_equal(a.local_views, b.local_views)

    def test_views_differ_and_input_untouched(self):
        x = np.random.default_rng(3).normal(size=(2, 3))
        original = x.copy()
        views = generate_views(x, ViewConfig(), np.random.default_rng(6))
        self.assertFalse(np.array_equal(views.global_views[0], views.global_views[1]))
        np.testing.assert_array_equal(x, original)

    def test_view_count(self):
        with self.assertRaises(InvalidViewCount):
            generate_views(np.zeros((1, 2)), ViewConfig(n_global=3), np.random.default_rng(0))


if __name__ == '__main__':
    unittest.main()
