"""
Tests for soft pseudo-labels, the EMA store and the injection/removal state
machine, including a from-scratch replay oracle over random trajectories.
"""

import csv
import unittest

import numpy as np
import pytest

from src.core.exceptions import InconsistentState, InvalidThreshold
from src.data.datasets import LabeledSet
from src.engine.pseudo_labels import (
    InjectionDecision, LabeledTargetSet, PseudoLabelStore, SoftPseudoLabeler, apply_update,
    compute_soft_pseudo_labels, decide, export_store_csv, select_injections, select_removals
)
from src.numerics import core_math
from src.numerics.gradcheck import central_difference


def originals(n_classes: int, first_id: int = 0) -> LabeledSet:
    ids = np.arange(first_id, first_id + n_classes, dtype=np.int64)
    return LabeledSet(ids, np.zeros((n_classes, 2)), np.arange(n_classes, dtype=np.int64))


def store_with(entries, n_classes=2, rho=0.7) -> PseudoLabelStore:
    store = PseudoLabelStore(n_classes, rho=rho)
    for sample_id, vector in entries.items():
        store.ema_update(sample_id, np.asarray(vector, dtype=np.float64))
    return store


class TestSoftPseudoLabels(unittest.TestCase):
    def test_two_support_samples(self):
        support = np.array([[0.9, np.sqrt(1 - 0.81)], [0.1, np.sqrt(0.99)]])
        out = compute_soft_pseudo_labels(np.array([[1.0, 0.0]]), support, [0, 1], 2, 0.7)
        expected = core_math.softmax_tau(np.array([0.9, 0.1]), 0.7)
        np.testing.assert_allclose(out[0], expected, atol=1e-12)
        self.assertAlmostEqual(out[0, 0], 0.759, delta=1e-3)

    def test_low_temperature_copies_matching_support_label(self):
        support = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
        out = compute_soft_pseudo_labels(np.array([[0.0, 2.0]]), support, [0, 2, 1], 3, 0.01)
        np.testing.assert_allclose(out[0], [0.0, 0.0, 1.0], atol=1e-12)

    def test_equidistant_sample_gets_uniform_label(self):
        support = np.array([[1.0, 0.0], [-1.0, 0.0]])
        out = compute_soft_pseudo_labels(np.array([[0.0, 1.0]]), support, [0, 1], 2, 0.5)
        np.testing.assert_allclose(out[0], [0.5, 0.5], atol=1e-12)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(30)
        labeler = SoftPseudoLabeler(3)
        Z_u, Z_sup = rng.normal(size=(2, 4)), rng.normal(size=(6, 4))
        labels = [0, 1, 2, 0, 1, 2]
        weights = rng.normal(size=(2, 3))
        _, cache = labeler.forward(Z_u, Z_sup, labels, 0.5)
        dZ_u, dZ_sup = labeler.backward(cache, weights)

        def f_u(z):
            return float(np.sum(weights * labeler.forward(z, Z_sup, labels, 0.5)[0]))

        def f_sup(z):
            return float(np.sum(weights * labeler.forward(Z_u, z, labels, 0.5)[0]))

        np.testing.assert_allclose(dZ_u, central_difference(f_u, Z_u, 1e-6), atol=1e-7)
        np.testing.assert_allclose(dZ_sup, central_difference(f_sup, Z_sup, 1e-6), atol=1e-7)


class TestStore(unittest.TestCase):
    def test_first_visit_stores_vector(self):
        store = PseudoLabelStore(3, rho=0.7)
        p = np.array([0.2, 0.5, 0.3])
        np.testing.assert_array_equal(store.ema_update(7, p), p)

    def test_membership_confidence_and_class(self):
        store = store_with({4: [0.1, 0.7, 0.2]}, n_classes=3)
        self.assertIn(4, store)
        self.assertNotIn(5, store)
        self.assertAlmostEqual(store.confidence(4), 0.7)
        self.assertEqual(store.predicted_class(4), 1)
        with self.assertRaises(KeyError):
            store.confidence(5)

    def test_ema_blend(self):
        store = store_with({1: [0.5, 0.5]})
        np.testing.assert_allclose(store.ema_update(1, np.array([0.9, 0.1])), [0.78, 0.22], atol=1e-12)

    def test_rho_one_keeps_latest_exactly(self):
        rng = np.random.default_rng(31)
        store = PseudoLabelStore(4, rho=1.0)
        for _ in range(50):
            p = rng.dirichlet(np.ones(4))
            store.ema_update(3, p)
            np.testing.assert_array_equal(store.get(3), p)

    def test_without_ema_equals_rho_one(self):
        rng = np.random.default_rng(32)
        a, b = PseudoLabelStore(3, rho=0.4, use_ema=False), PseudoLabelStore(3, rho=1.0)
        for _ in range(30):
            sample_id, p = int(rng.integers(0, 5)), rng.dirichlet(np.ones(3))
            a.ema_update(sample_id, p)
            b.ema_update(sample_id, p)
        for sample_id in b.entries:
            np.testing.assert_array_equal(a.get(sample_id), b.get(sample_id))

    def test_simplex_conservation_over_compositions(self):
        rng = np.random.default_rng(33)
        total = 0
        while total < 100_000:
            C = int(rng.integers(2, 11))
            n = 5000
            logits = rng.normal(scale=rng.uniform(0.1, 10.0), size=(n, C))
            soft = core_math.softmax_tau(logits, rng.uniform(0.05, 2.0))
            sharp = core_math.sharpen(soft, rng.uniform(0.05, 1.0))
            np.testing.assert_array_equal(np.argmax(sharp, axis=1), np.argmax(soft, axis=1))

            store = PseudoLabelStore(C, rho=float(rng.choice([1.0, 0.9, 0.7, 0.5, 0.3, 0.1])))
            ids = rng.integers(0, 200, size=n)
            store.update_batch(ids, sharp)
            entries = np.array(list(store.entries.values()))
            np.testing.assert_allclose(entries.sum(axis=1), 1.0, atol=1e-9)
            self.assertTrue(np.all(entries >= 0.0) and np.all(entries <= 1.0 + 1e-12))
            total += n

    def test_invalid_rho(self):
        with self.assertRaises(ValueError):
            PseudoLabelStore(2, rho=0.0)


class TestSelection(unittest.TestCase):
    def test_injection_threshold(self):
        store = store_with({10: [0.95, 0.05], 11: [0.6, 0.4]})
        self.assertEqual(select_injections(store, [10, 11, 12], 0.9), [(10, 0)])
        self.assertEqual(select_injections(PseudoLabelStore(2), [10, 11], 0.9), [])

    def test_injection_boundary_is_inclusive(self):
        store = store_with({10: [0.95, 0.05]})
        self.assertEqual(select_injections(store, [10], 1.0), [])
        store.ema_update(11, np.array([0.0, 1.0]))
        self.assertEqual(select_injections(store, [10, 11], 1.0), [(11, 1)])

    def test_selection_agrees_with_store_confidence(self):
        rng = np.random.default_rng(8)
        store = PseudoLabelStore(4)
        for sample_id in range(0, 40, 2):
            store.ema_update(sample_id, rng.dirichlet(np.ones(4) * 0.3))
        selected = dict(select_injections(store, range(40), 0.6))
        expected = {i: store.predicted_class(i) for i in range(40) if i in store and store.confidence(i) >= 0.6}
        self.assertEqual(selected, expected)

    def test_argmax_ties_go_to_lowest_class(self):
        store = store_with({4: [0.45, 0.45, 0.1]}, n_classes=3)
        self.assertEqual(select_injections(store, [4], 0.4), [(4, 0)])

    def test_invalid_threshold(self):
        with self.assertRaises(InvalidThreshold):
            select_injections(PseudoLabelStore(2), [], 0.0)
        with self.assertRaises(InvalidThreshold):
            select_injections(PseudoLabelStore(2), [], 1.5)

    def test_removals(self):
        target = LabeledTargetSet(originals(2))
        store = store_with({10: [0.7, 0.3], 11: [0.2, 0.8]})
        self.assertEqual(select_removals(target, store, 0.8), [])

        target = LabeledTargetSet(originals(2), {10: 0, 11: 1})
        self.assertEqual(select_removals(target, store, 0.8), [(10, 0)])

    def test_removal_boundary_is_strict(self):
        target = LabeledTargetSet(originals(2), {10: 0})
        self.assertEqual(select_removals(target, store_with({10: [0.8, 0.2]}), 0.8), [])

    def test_injected_sample_without_entry(self):
        target = LabeledTargetSet(originals(2), {10: 0})
        with self.assertRaises(InconsistentState):
            select_removals(target, PseudoLabelStore(2), 0.8)

    def test_monotone_in_gamma(self):
        rng = np.random.default_rng(34)
        store = PseudoLabelStore(4)
        for sample_id in range(100, 160):
            store.ema_update(sample_id, rng.dirichlet(np.full(4, 0.3)))
        target = LabeledTargetSet(originals(4), {i: 0 for i in range(100, 160, 3)})
        previous_inject, previous_remove = None, None
        for gamma in (0.3, 0.5, 0.7, 0.8, 0.9, 1.0):
            inject = {i for i, _ in select_injections(store, range(100, 160), gamma)}
            remove = {i for i, _ in select_removals(target, store, gamma)}
            self.assertFalse(inject & remove)
            if previous_inject is not None:
                self.assertLessEqual(inject, previous_inject)
                self.assertGreaterEqual(remove, previous_remove)
            previous_inject, previous_remove = inject, remove


class TestApplyUpdate(unittest.TestCase):
    def setUp(self):
        self.target = LabeledTargetSet(originals(3))

    def test_warmup_leaves_set_unchanged(self):
        decision = InjectionDecision(inject=[(10, 1)], remove=[], epoch=0)
        self.assertIs(apply_update(self.target, decision, 0, 5), self.target)

    def test_injection_after_warmup(self):
        decision = InjectionDecision(inject=[(10, 1)], remove=[], epoch=5)
        updated = apply_update(self.target, decision, 5, 5)
        self.assertEqual(len(updated), len(self.target) + 1)
        self.assertEqual(updated.members()[10], 1)

    def test_inject_then_remove_restores_membership(self):
        injected = apply_update(self.target, InjectionDecision(inject=[(10, 1)]), 5, 5)
        removed = apply_update(injected, InjectionDecision(remove=[(10, 1)]), 6, 5)
        self.assertEqual(removed.membership_key(), self.target.membership_key())

    def test_reapplying_a_decision_is_a_no_op(self):
        decision = InjectionDecision(inject=[(10, 1), (11, 0)], remove=[])
        once = apply_update(self.target, decision, 5, 5)
        twice = apply_update(once, decision, 5, 5)
        self.assertEqual(once.membership_key(), twice.membership_key())

    def test_originals_cannot_be_injected(self):
        with self.assertRaises(InconsistentState):
            apply_update(self.target, InjectionDecision(inject=[(0, 1)]), 5, 5)

    def test_reselected_sample_takes_new_label(self):
        first = apply_update(self.target, InjectionDecision(inject=[(10, 1)]), 5, 5)
        second = apply_update(first, InjectionDecision(inject=[(10, 2)]), 6, 5)
        self.assertEqual(second.injected, {10: 2})


def replay_oracle(events, original_ids, gamma, warmup, removal_enabled, rho, n_epochs):
    """Membership after every epoch, recomputing the store from all events so far"""
    history = []
    injected = {}
    for epoch in range(n_epochs):
        store = {}
        for event_epoch, sample_id, vector in events:
            if event_epoch > epoch:
                break
            old = store.get(sample_id)
            store[sample_id] = vector if old is None else rho * vector + (1.0 - rho) * old
        if epoch >= warmup:
            inject = {i: int(np.argmax(v)) for i, v in store.items() if np.max(v) >= gamma}
            remove = ({i for i in injected if np.max(store[i]) < gamma} if removal_enabled else set())
            injected = {i: y for i, y in injected.items() if i not in remove}
            injected.update(inject)
        members = {i: y for i, y in original_ids.items()}
        members.update(injected)
        history.append(tuple(sorted(members.items())))
    return history


class TestStateMachineReplay(unittest.TestCase):
    def test_matches_replay_oracle_on_random_trajectories(self):
        rng = np.random.default_rng(35)
        for _ in range(1000):
            C = int(rng.integers(2, 11))
            gamma = float(rng.choice([0.7, 0.8, 0.9]))
            warmup = int(rng.integers(0, 6))
            rho = float(rng.choice([1.0, 0.9, 0.7, 0.5, 0.3, 0.1]))
            removal_enabled = bool(rng.integers(0, 2))
            n_epochs = int(rng.integers(1, 9))
            unlabeled_ids = list(range(100, 100 + int(rng.integers(1, 9))))

            original = originals(C)
            original_labels = {int(i): int(y) for i, y in zip(original.ids, original.labels)}
            store = PseudoLabelStore(C, rho=rho)
            target = LabeledTargetSet(original)
            events = []
            engine_history = []
            for epoch in range(n_epochs):
                visited = rng.choice(unlabeled_ids, size=int(rng.integers(0, len(unlabeled_ids) + 1)))
                for sample_id in visited:
                    vector = core_math.sharpen(rng.dirichlet(np.full(C, 0.5)), 0.3)
                    events.append((epoch, int(sample_id), vector))
                    store.ema_update(int(sample_id), vector)
                decision = decide(store, unlabeled_ids, target, gamma, epoch, removal_enabled)
                self.assertFalse({i for i, _ in decision.inject} & {i for i, _ in decision.remove})
                target = apply_update(target, decision, epoch, warmup)
                engine_history.append(target.membership_key())

                self.assertTrue(target.original_ids <= set(target.members()))
                if epoch < warmup:
                    self.assertEqual(target.membership_key(), tuple(sorted(original_labels.items())))

            expected = replay_oracle(events, original_labels, gamma, warmup, removal_enabled, rho, n_epochs)
            self.assertEqual(engine_history, expected)


def test_export_store_csv(tmp_path):
    store = store_with({10: [0.9, 0.1], 11: [0.3, 0.7]})
    target = LabeledTargetSet(originals(2), {10: 0})
    path = tmp_path / 'pseudo_labels.csv'
    export_store_csv(store, target, path)

    with open(path, newline='') as f:
        rows = list(csv.reader(f))
    assert rows[0] == ['id', 'p0', 'p1', 'injected', 'assigned_label']
    assert rows[1] == ['10', '0.9', '0.1', '1', '0']
    assert rows[2] == ['11', '0.3', '0.7', '0', '-1']


def test_to_labeled_set_appends_injected_rows(bundle):
    target = LabeledTargetSet(bundle.target_labeled)
    first_unlabeled = int(bundle.target_unlabeled.ids[0])
    target = apply_update(target, InjectionDecision(inject=[(first_unlabeled, 2)]), 0, 0)
    labeled = target.to_labeled_set(bundle.target_unlabeled)
    assert len(labeled) == len(bundle.target_labeled) + 1
    assert labeled.ids[-1] == first_unlabeled
    assert labeled.labels[-1] == 2
    np.testing.assert_array_equal(labeled.X[-1], bundle.target_unlabeled.X[0])


@pytest.mark.parametrize('gamma', [0.7, 0.8, 0.9])
def test_nothing_injected_when_confidences_are_low(gamma):
    store = store_with({i: [0.55, 0.45] for i in range(100, 110)})
    target = LabeledTargetSet(originals(2))
    decision = decide(store, range(100, 110), target, gamma, epoch=5)
    assert decision.inject == []
    assert apply_update(target, decision, 5, 0).membership_key() == target.membership_key()
