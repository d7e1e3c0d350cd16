#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
test_align
----------------------------------

Tests for preference pair selection, the DPO objective and IPA training.
"""
import math
import unittest

import numpy as np

from sessrec.align import (
    PreferencePair, ScoredResponse, dpo_loss, evaluate_xtr, ipa_train, select_pair, snapshot,
)
from sessrec.config import ConfigError, EvalConfig, IPAConfig, TrainConfig
from sessrec.model import build_examples, continue_ntp
from sessrec.numerics import Tape, finite_diff_check
from sessrec.tokenizer import build_item_index, fit_residual_stack
from sessrec.utils import rng_stream
from tests.fixtures import random_examples, toy_model, toy_reward_model, toy_simulation


def _scored(rewards, log_probs=None, sessions=None):
    log_probs = log_probs or [0.0] * len(rewards)
    sessions = sessions or [[(i, 0)] for i in range(len(rewards))]
    return [ScoredResponse(s, None, r, lp) for s, r, lp in zip(sessions, rewards, log_probs)]


def _pairs(count, seed=0):
    pairs = []
    for i, e in enumerate(random_examples(2 * count, seed=seed)[::2]):
        loser = random_examples(1, seed=seed + 100 + i)[0].session
        pairs.append(PreferencePair(e.user_id, e.history, e.history_items, e.session, loser,
                                    None, None, 1.0, 0.0))
    return pairs


def _same_state(first, second):
    other = second.state_dict()
    return all(np.array_equal(v, other[k]) for k, v in first.state_dict().items())


class TestPairSelection(unittest.TestCase):
    def test_best_and_worst(self):
        winner, loser = select_pair(_scored([0.9, 0.1, 0.5]))
        self.assertEqual((winner.reward, loser.reward), (0.9, 0.1))

    def test_reward_ties_use_log_prob(self):
        winner, loser = select_pair(_scored([0.5, 0.5, 0.5], [-3.0, -1.0, -2.0]))
        self.assertEqual((winner.log_prob, loser.log_prob), (-1.0, -3.0))

    def test_full_ties_use_position(self):
        winner, loser = select_pair(_scored([0.5, 0.5, 0.5]))
        self.assertEqual((winner.session, loser.session), ([(0, 0)], [(2, 0)]))

    def test_identical_sessions(self):
        self.assertIsNone(select_pair(_scored([0.9, 0.1], sessions=[[(1, 1)], [(1, 1)]])))
        self.assertIsNone(select_pair(_scored([0.9])))

    def test_monotone_reward_transform(self):
        rewards = [0.2, 0.7, 0.4, 0.1]
        plain = select_pair(_scored(rewards))
        squashed = select_pair(_scored([math.exp(3 * r) for r in rewards]))
        self.assertEqual([s.session for s in plain], [s.session for s in squashed])


class TestDPO(unittest.TestCase):
    def setUp(self):
        self.model = toy_model(seed=1)
        self.pairs = _pairs(3)

    def test_policy_equal_to_reference(self):
        reference = snapshot(self.model)
        for beta in (0.01, 0.1, 1.0):
            loss = dpo_loss(self.model, reference, self.pairs, beta).item()
            self.assertAlmostEqual(loss, math.log(2), places=12)

    def test_snapshot_is_frozen(self):
        reference = snapshot(self.model)
        self.assertFalse(any(p.requires_grad for p in reference.parameters()))
        self.assertTrue(_same_state(reference, self.model))

    def test_no_pairs(self):
        with self.assertRaises(ValueError):
            dpo_loss(self.model, snapshot(self.model), [])

    def test_step_on_gradient_lowers_loss(self):
        reference = snapshot(self.model)
        with Tape() as tape:
            loss = dpo_loss(self.model, reference, self.pairs, 1.0)
        tape.backward(loss)
        for p in self.model.parameters():
            p.data = p.data - 1e-3 * p.grad
            p.zero_grad()
        self.assertLess(dpo_loss(self.model, reference, self.pairs, 1.0).item(), math.log(2))

    def test_gradients(self):
        reference = snapshot(self.model)
        rng = np.random.default_rng(0)
        for p in self.model.parameters():
            p.data = p.data + 0.01 * rng.normal(size=p.shape)

        def loss():
            return dpo_loss(self.model, reference, self.pairs, 0.5)

        report = finite_diff_check(loss, self.model.parameters(), tolerance=1e-4, max_coords=2,
                                   rng=np.random.default_rng(1))
        self.assertTrue(report.passed, report)


class TestIPA(unittest.TestCase):
    def setUp(self):
        self.catalog, self.users, logs = toy_simulation(seed=1, session_size=2)
        stack = fit_residual_stack(self.catalog.embeddings, 8, 2, seed=1)
        self.index = build_item_index(self.catalog.item_ids, self.catalog.embeddings, stack)
        self.examples = build_examples(logs, self.index)
        self.rm = toy_reward_model()
        self.train_config = TrainConfig(batch_size=4)

    def _ipa(self, model, **overrides):
        values = dict(responses=4, r_dpo=1.0, epochs=1, samples_per_epoch=4,
                      learning_rate=1e-3)
        values.update(overrides)
        return ipa_train(model, self.rm, self.examples, self.catalog.embeddings, self.index,
                         IPAConfig(**values), self.train_config, seed=3)

    def _plain_ntp(self, model, epochs, samples):
        rng = rng_stream(3, 'ipa-train')
        for _ in range(epochs):
            continue_ntp(model, self.examples, self.train_config, samples, rng,
                         learning_rate=1e-3)

    def test_no_dpo_is_plain_ntp(self):
        aligned, plain = toy_model(seed=2), toy_model(seed=2)
        result = self._ipa(aligned, r_dpo=0.0, epochs=2, samples_per_epoch=6)
        self._plain_ntp(plain, 2, 6)
        self.assertTrue(_same_state(aligned, plain))
        self.assertEqual([row['pairs'] for row in result.metrics], [0, 0])
        self.assertIsNone(result.metrics[0]['dpo_loss'])

    def test_zero_lambda_is_plain_ntp(self):
        aligned, plain = toy_model(seed=2), toy_model(seed=2)
        result = self._ipa(aligned, lam=0.0)
        self._plain_ntp(plain, 1, 4)
        self.assertTrue(_same_state(aligned, plain))
        self.assertGreater(result.metrics[0]['pairs'], 0)

    def test_snapshots(self):
        model = toy_model(seed=2)
        initial = snapshot(model)
        result = self._ipa(model, epochs=2)
        self.assertEqual(len(result.snapshots), 3)
        self.assertTrue(_same_state(result.snapshots[0], initial))
        self.assertTrue(_same_state(result.snapshots[-1], model))
        self.assertFalse(_same_state(result.snapshots[1], initial))
        for pair in result.pairs:
            self.assertGreaterEqual(pair.winner_reward, pair.loser_reward)
            self.assertNotEqual(pair.winner, pair.loser)

    def test_missing_reward_model(self):
        with self.assertRaises(ConfigError):
            ipa_train(toy_model(), None, self.examples, self.catalog.embeddings, self.index)

    def test_invalid_ratio(self):
        with self.assertRaises(ConfigError):
            self._ipa(toy_model(), r_dpo=1.5)

    def test_evaluation_table(self):
        users = [u for u in self.users[:3]]
        table = evaluate_xtr(toy_model(seed=2), self.rm, users, self.catalog, self.index,
                             EvalConfig(users=3, top_n=1, beam_size=2))
        self.assertEqual(table['users'], 3)
        for target in ('swt', 'vtr', 'wtr', 'ltr'):
            self.assertAlmostEqual(table[target]['mean'], table[target]['max'])

    def test_evaluation_with_neutral_reward_model(self):
        for tower in self.rm.towers.values():
            tower.out.weight.data[...] = 0.0
            tower.out.bias.data[...] = 0.0
        table = evaluate_xtr(toy_model(seed=2), self.rm, self.users[:2], self.catalog,
                             self.index, EvalConfig(users=2, top_n=2, beam_size=3))
        for target in ('swt', 'vtr', 'wtr', 'ltr'):
            self.assertAlmostEqual(table[target]['mean'], 0.5)
            self.assertAlmostEqual(table[target]['max'], 0.5)
        self.assertAlmostEqual(table['rm_score'], 0.5)


if __name__ == '__main__':
    import sys
    sys.exit(unittest.main())
