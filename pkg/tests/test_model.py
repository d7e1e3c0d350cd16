#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
test_model
----------------------------------

Tests for the encoder-decoder, the mixture-of-experts layer and NTP training.
"""
import math
import unittest

import numpy as np

from sessrec.config import ConfigError, TrainConfig
from sessrec.model import (
    MoEFeedForward, build_decoder_tokens, evaluate_ntp, moe_ffn, ntp_loss, sequence_log_prob,
    train_seed_model,
)
from sessrec.numerics import ContractError, Tensor, finite_diff_check, softmax
from sessrec.perf import FlopCounter
from tests.fixtures import random_examples, toy_model, toy_model_config


class TestDecoderTokens(unittest.TestCase):
    def test_layout(self):
        session = [(1, 2, 3)] * 5
        inputs, targets, mask = build_decoder_tokens(session, 64, 3)
        self.assertEqual(len(inputs), 20)
        self.assertEqual(int(mask.sum()), 15)
        self.assertEqual(inputs[:4].tolist(), [192, 1, 66, 131])
        self.assertEqual(targets[:4].tolist(), [1, 66, 131, 192])

    def test_split_on_bos_recovers_session(self):
        K, L = 8, 3
        rng = np.random.default_rng(0)
        session = [tuple(int(c) for c in rng.integers(0, K, size=L)) for _ in range(4)]
        inputs, _, _ = build_decoder_tokens(session, K, L)
        bos = L * K
        starts = np.flatnonzero(inputs == bos).tolist()
        self.assertEqual(starts, [0, 4, 8, 12])
        recovered = [tuple(int(t) - j * K for j, t in enumerate(inputs[s + 1:s + 1 + L]))
                     for s in starts]
        self.assertEqual(recovered, session)

    def test_wrong_code_count(self):
        with self.assertRaises(ContractError):
            build_decoder_tokens([(1, 2)], 64, 3)

    def test_vocabulary(self):
        config = toy_model_config(K=8, L=3)
        self.assertEqual(config.vocab_size, 25)
        self.assertEqual(config.bos, 24)


class TestMixtureOfExperts(unittest.TestCase):
    def setUp(self):
        self.hidden = Tensor(np.random.default_rng(0).normal(size=(12, 16)))

    def test_invalid_k(self):
        with self.assertRaises(ConfigError):
            MoEFeedForward(16, 8, 4, 5, np.random.default_rng(0))
        with self.assertRaises(ConfigError):
            MoEFeedForward(16, 8, 4, 0, np.random.default_rng(0))

    def test_active_expert_count(self):
        moe = MoEFeedForward(16, 8, 8, 3, np.random.default_rng(1))
        gate, mask = moe.gates(self.hidden)
        self.assertEqual((gate.data > 0).sum(axis=1).tolist(), [3] * 12)
        self.assertEqual(mask.sum(axis=1).tolist(), [3] * 12)

    def test_kept_gates_are_not_renormalised(self):
        moe = MoEFeedForward(16, 8, 6, 2, np.random.default_rng(2))
        gate, mask = moe.gates(self.hidden)
        full = softmax(self.hidden @ moe.expert_embeddings, axis=-1).data
        self.assertTrue(np.allclose(gate.data, full * mask))
        self.assertTrue(np.all(gate.data.sum(axis=1) < 1.0))

    def test_ties_pick_lower_index(self):
        moe = MoEFeedForward(16, 8, 4, 2, np.random.default_rng(1))
        moe.expert_embeddings.data[...] = 0.0
        _, mask = moe.gates(self.hidden)
        self.assertEqual(mask.tolist(), [[1.0, 1.0, 0.0, 0.0]] * 12)

    def test_expert_flops_scale_with_k(self):
        counts = {}
        for k in (2, 8):
            moe = MoEFeedForward(16, 8, 8, k, np.random.default_rng(1))
            with FlopCounter() as counter:
                moe_ffn(self.hidden, moe)
            counts[k] = counter.counts['moe-experts']
        self.assertAlmostEqual(counts[2] / counts[8], 2 / 8.0)

    def test_usage_counts(self):
        moe = MoEFeedForward(16, 8, 4, 2, np.random.default_rng(1))
        moe.mix(self.hidden)
        self.assertEqual(int(moe.usage.sum()), 24)
        moe.reset_usage()
        self.assertEqual(int(moe.usage.sum()), 0)


class TestGenerativeRecommender(unittest.TestCase):
    def setUp(self):
        self.model = toy_model(seed=1)
        self.examples = random_examples(6, seed=2)
        self.histories = [e.history for e in self.examples]
        self.sessions = [e.session for e in self.examples]

    def test_untrained_loss_near_uniform(self):
        loss = ntp_loss(self.model, self.histories, self.sessions).item()
        self.assertAlmostEqual(loss, math.log(8), delta=0.05)

    def test_gradients(self):
        histories = self.histories[:3] + [[]]
        sessions = self.sessions[:4]

        def loss():
            return ntp_loss(self.model, histories, sessions)

        report = finite_diff_check(loss, self.model.parameters(), tolerance=1e-4, max_coords=2,
                                   rng=np.random.default_rng(0))
        self.assertTrue(report.passed, report)

    def test_sequence_log_prob_matches_loss(self):
        for history, session in zip(self.histories, self.sessions):
            loss = ntp_loss(self.model, [history], [session]).item()
            log_prob = sequence_log_prob(self.model, [history], [session]).data[0]
            self.assertAlmostEqual(log_prob, -loss * 2 * 2, places=9)

    def test_empty_history(self):
        encoded = self.model.encode([[]])
        self.assertEqual(encoded.states.shape, (1, 1, 16))
        self.assertTrue(np.all(np.isfinite(encoded.states.data)))

    def test_padding_does_not_leak(self):
        short = [(1, 2)]
        long = [(3, 4), (5, 6), (7, 0)]
        alone = self.model.encode([short]).states.data[0, :2]
        batched = self.model.encode([short, long]).states.data[0, :2]
        self.assertTrue(np.allclose(alone, batched, atol=1e-10))

    def test_decoder_is_causal(self):
        bos = self.model.config.bos
        encoded = self.model.encode([[(1, 2), (3, 4)]])
        first = np.array([[bos, 1, 10, bos, 3, 12]])
        second = np.array([[bos, 1, 10, bos, 5, 14]])
        a = self.model.decode(encoded, first).data[0]
        b = self.model.decode(encoded, second).data[0]
        self.assertTrue(np.allclose(a[:4], b[:4], rtol=0, atol=1e-12))
        self.assertFalse(np.allclose(a[4:], b[4:]))

    def test_logits_depend_on_history(self):
        bos = np.array([[self.model.config.bos]])
        logits = []
        for history in ([(1, 2), (3, 4)], [(6, 0), (7, 5)]):
            hidden = self.model.decode(self.model.encode([history]), bos)
            logits.append(self.model.level_logits(hidden, 0).data)
        self.assertFalse(np.allclose(logits[0], logits[1]))

    def test_history_truncated_to_recent_items(self):
        history = [(i % 8, 0) for i in range(7)]
        self.assertEqual(len(self.model.history_tokens(history)), 4 * 2)
        self.assertEqual(self.model.history_tokens(history)[-2:], [6, 8])

    def test_session_shape_checked(self):
        with self.assertRaises(ContractError):
            ntp_loss(self.model, [[]], [[(0, 0)]])
        with self.assertRaises(IndexError):
            ntp_loss(self.model, [[]], [[(0, 8), (0, 0)]])

    def test_gate_usage(self):
        self.model.reset_gate_usage()
        ntp_loss(self.model, self.histories, self.sessions)
        tokens = len(self.sessions) * 2 * 3
        for usage in self.model.gate_usage():
            self.assertEqual(sum(usage), tokens * 2)


class TestTraining(unittest.TestCase):
    def test_zero_steps_returns_init(self):
        examples = random_examples(4)
        result = train_seed_model(examples, toy_model_config(), steps=0, seed=5)
        fresh = toy_model(seed=5).state_dict()
        for name, value in result.model.state_dict().items():
            self.assertTrue(np.array_equal(value, fresh[name]))
        self.assertEqual(result.curve, [])

    def test_loss_decreases(self):
        examples = random_examples(8, seed=3)
        model = toy_model(seed=0)
        before = evaluate_ntp(model, examples)
        config = TrainConfig(steps=40, batch_size=8, learning_rate=1e-2, log_every=10)
        result = train_seed_model(examples, train_config=config, seed=0, heldout=examples,
                                  model=model)
        self.assertLess(evaluate_ntp(result.model, examples), before)
        self.assertEqual([p.step for p in result.curve], [10, 20, 30, 40])

    def test_no_examples(self):
        with self.assertRaises(ContractError):
            train_seed_model([], toy_model_config(), steps=1)

    def test_same_seed_same_model(self):
        examples = random_examples(6, seed=1)
        config = TrainConfig(steps=3, batch_size=4)
        first = train_seed_model(examples, toy_model_config(), config, seed=2).model
        second = train_seed_model(examples, toy_model_config(), config, seed=2).model
        for name, value in first.state_dict().items():
            self.assertTrue(np.array_equal(value, second.state_dict()[name]))


if __name__ == '__main__':
    import sys
    sys.exit(unittest.main())
