#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
test_reward
----------------------------------

Tests for the multi-tower reward model.
"""
import math
import unittest

import numpy as np

from sessrec.config import RewardConfig
from sessrec.numerics import ContractError, Tensor, finite_diff_check
from sessrec.reward import (
    auc, evaluate_reward_model, predict_session, reward_batch, rm_loss, score_session,
    train_reward_model,
)
from tests.fixtures import toy_reward_model, toy_simulation


class TestRewardModel(unittest.TestCase):
    def setUp(self):
        self.embeddings = np.random.default_rng(0).normal(size=(20, 8))
        self.model = toy_reward_model(seed=1)

    def test_prediction_shape(self):
        batch = reward_batch(self.embeddings, [[1, 2, 3], [4]], [[5, 6, 7], [8, 9, 10]])
        predictions = self.model(batch).data
        self.assertEqual(predictions.shape, (2, 4))
        self.assertTrue(np.all((predictions > 0) & (predictions < 1)))

    def test_empty_history_placeholder(self):
        batch = reward_batch(self.embeddings, [[]], [[2, 3]])
        self.assertEqual(batch.history.shape, (1, 1, 8))
        self.assertTrue(batch.history_mask[0, 0])
        session = self.embeddings[[2, 3]]
        expected = self.model.item_projection(
            Tensor(np.concatenate([session, np.zeros_like(session)], axis=-1)[None])).data
        self.assertTrue(np.allclose(self.model.target_aware_encode(batch).data, expected))

    def test_session_order_does_not_matter(self):
        forward = reward_batch(self.embeddings, [[1, 2]], [[3, 4, 5]])
        backward = reward_batch(self.embeddings, [[1, 2]], [[5, 3, 4]])
        fused = self.model.session_fuse(self.model.target_aware_encode(forward))
        self.assertEqual(fused.shape, (1, 3, 8))
        first = self.model.predict_rewards(fused).data
        second = self.model(backward).data
        self.assertTrue(np.allclose(first, second))

    def test_history_order_does_not_matter(self):
        first = reward_batch(self.embeddings, [[1, 2, 3]], [[4, 5]])
        second = reward_batch(self.embeddings, [[3, 1, 2]], [[4, 5]])
        self.assertTrue(np.allclose(self.model.target_aware_encode(first).data,
                                    self.model.target_aware_encode(second).data))

    def test_fuse_single_item_is_value_projection(self):
        encoded = self.model.target_aware_encode(reward_batch(self.embeddings, [[1, 2]], [[3]]))
        fused = self.model.session_fuse(encoded).data
        self.assertTrue(np.allclose(fused, self.model.value(encoded).data))

    def test_fuse_with_zero_values(self):
        self.model.value.weight.data[...] = 0.0
        encoded = self.model.target_aware_encode(
            reward_batch(self.embeddings, [[1, 2]], [[3, 4, 5]]))
        self.assertTrue(np.all(self.model.session_fuse(encoded).data == 0.0))

    def test_fuse_attends_to_every_item(self):
        base = self.model.target_aware_encode(reward_batch(self.embeddings, [[1]], [[3, 4, 5]]))
        for j, replacement in enumerate((10, 11, 12)):
            session = [3, 4, 5]
            session[j] = replacement
            other = self.model.target_aware_encode(reward_batch(self.embeddings, [[1]], [session]))
            a = self.model.session_fuse(base).data[0]
            b = self.model.session_fuse(other).data[0]
            for position in range(3):
                self.assertFalse(np.allclose(a[position], b[position]), (j, position))

    def test_item_dimension_checked(self):
        other = np.zeros((20, 5))
        with self.assertRaises(ContractError):
            self.model(reward_batch(other, [[1]], [[2, 3]]))

    def test_sessions_share_length(self):
        with self.assertRaises(ContractError):
            reward_batch(self.embeddings, [[1], [2]], [[3, 4], [5]])

    def test_score_uses_weights(self):
        history, session = [1, 2], [3, 4, 5]
        rewards = predict_session(self.model, self.embeddings, history, session)
        score = score_session(self.model, self.embeddings, history, session)
        self.assertAlmostEqual(score, float(np.dot(rewards, self.model.weights)))
        self.assertAlmostEqual(float(self.model.weights.sum()), 1.0)

    def test_loss_at_half(self):
        loss = rm_loss(Tensor(np.full((3, 4), 0.5)), np.ones((3, 4)))
        self.assertAlmostEqual(loss.item(), 4 * math.log(2))
        with self.assertRaises(ContractError):
            rm_loss(Tensor(np.full((3, 4), 0.5)), np.ones((3, 3)))

    def test_gradients(self):
        batch = reward_batch(self.embeddings, [[1, 2, 3], []], [[5, 6], [8, 9]])
        labels = [[1, 0, 0, 1], [0, 1, 0, 0]]

        def loss():
            return rm_loss(self.model(batch), labels)

        report = finite_diff_check(loss, self.model.parameters(), tolerance=1e-4, max_coords=4,
                                   rng=np.random.default_rng(0))
        self.assertTrue(report.passed, report)


class TestAUC(unittest.TestCase):
    def test_perfect_and_reversed(self):
        self.assertEqual(auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]), 1.0)
        self.assertEqual(auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]), 0.0)

    def test_ties_count_half(self):
        self.assertEqual(auc([0.5, 0.5], [0, 1]), 0.5)

    def test_single_class(self):
        self.assertIsNone(auc([0.1, 0.3], [1, 1]))


class TestTraining(unittest.TestCase):
    def test_loss_decreases(self):
        catalog, _, logs = toy_simulation(seed=2)
        _, report = train_reward_model(catalog.embeddings, logs, _config(steps=100), seed=0)
        self.assertEqual(len(report.curve), 100)
        self.assertLess(np.mean(report.curve[-10:]), np.mean(report.curve[:10]))

    def test_evaluation(self):
        catalog, _, logs = toy_simulation(seed=3)
        model = toy_reward_model()
        aucs, rho = evaluate_reward_model(model, catalog.embeddings, logs,
                                          np.arange(len(logs), dtype=float))
        self.assertEqual(sorted(aucs), ['ltr', 'swt', 'vtr', 'wtr'])
        self.assertTrue(-1.0 <= rho <= 1.0)

    def test_no_logs(self):
        with self.assertRaises(ContractError):
            train_reward_model(np.zeros((3, 8)), [], _config())


def _config(**overrides):
    values = dict(dim=8, tower_hidden=8, steps=10, batch_size=32, learning_rate=1e-2)
    values.update(overrides)
    return RewardConfig(**values)


if __name__ == '__main__':
    import sys
    sys.exit(unittest.main())
