#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
test_simulator
----------------------------------

Tests for the synthetic catalog, users and the feedback oracle.
"""
import unittest

import numpy as np

from sessrec.config import SimulatorConfig
from sessrec.numerics import ContractError
from sessrec.simulator import (
    SyntheticCatalog, SyntheticUser, affinity, generate_catalog, generate_training_logs,
    generate_users, is_high_quality, item_rates, label_rates, sample_history,
    session_value_from_feedback, simulate_session_feedback, true_session_value,
)


def _user(preference, history=()):
    return SyntheticUser(0, preference, np.ones(4), list(history))


class TestCatalog(unittest.TestCase):
    def test_same_seed_same_catalog(self):
        first = generate_catalog(100, 8, 5, seed=3)
        second = generate_catalog(100, 8, 5, seed=3)
        self.assertTrue(np.array_equal(first.embeddings, second.embeddings))
        self.assertTrue(np.array_equal(first.labels, second.labels))

    def test_single_cluster(self):
        catalog = generate_catalog(10, 4, 1)
        self.assertEqual(set(catalog.labels.tolist()), {0})
        self.assertEqual(catalog.embeddings.shape, (10, 4))

    def test_cluster_sizes_are_even(self):
        catalog = generate_catalog(100, 4, 4)
        self.assertEqual(np.bincount(catalog.labels).tolist(), [25] * 4)

    def test_too_few_items(self):
        with self.assertRaises(ValueError):
            generate_catalog(3, 4, 5)

    def test_unknown_item(self):
        catalog = generate_catalog(10, 4, 2)
        with self.assertRaises(ContractError):
            catalog.vectors([3, 10])


class TestUsers(unittest.TestCase):
    def setUp(self):
        self.catalog = generate_catalog(400, 32, 4, seed=1)

    def test_empty_history(self):
        users = generate_users(self.catalog, 3, 0, seed=0)
        self.assertEqual([u.history for u in users], [[], [], []])

    def test_same_seed_same_users(self):
        first = generate_users(self.catalog, 5, 6, seed=2)
        second = generate_users(self.catalog, 5, 6, seed=2)
        for a, b in zip(first, second):
            self.assertEqual(a.history, b.history)
            self.assertTrue(np.array_equal(a.preference, b.preference))

    def test_target_weights_range(self):
        weights = np.array([u.weights for u in generate_users(self.catalog, 200, 0, seed=3)])
        self.assertEqual(weights.shape, (200, 4))
        self.assertTrue(np.all((weights >= 0.5) & (weights < 1.5)))
        self.assertGreater(weights.std(), 0.2)

    def test_history_follows_preference(self):
        rng = np.random.default_rng(0)
        history = sample_history(self.catalog, self.catalog.centers[0], 40, rng)
        own = np.mean(self.catalog.labels[history] == 0)
        self.assertGreater(own, 0.5)
        self.assertEqual(len(set(history)), 40)


class TestFeedback(unittest.TestCase):
    def setUp(self):
        self.config = SimulatorConfig()
        self.catalog = generate_catalog(200, 16, 8, seed=5)
        self.user = generate_users(self.catalog, 1, 4, seed=5)[0]

    def test_orthogonal_user_watches_half(self):
        rates = item_rates(self.catalog, _user(np.zeros(16)), [0, 1, 2])
        self.assertTrue(np.allclose(rates.watch, 0.5))

    def test_same_seed_same_feedback(self):
        session = [3, 4, 5, 6, 7]
        first = simulate_session_feedback(self.catalog, self.user, session, seed=9)
        second = simulate_session_feedback(self.catalog, self.user, session, seed=9)
        self.assertEqual(first.labels, second.labels)
        self.assertTrue(np.array_equal(first.watch_times, second.watch_times))

    def test_top_affinity_session_watched_longer(self):
        scores = affinity(self.catalog, self.user.preference)
        best = np.argsort(-scores)[:5].tolist()
        rng = np.random.default_rng(0)
        top_time = random_time = 0.0
        for _ in range(1000):
            random_session = rng.choice(len(self.catalog), size=5, replace=False).tolist()
            top_time += simulate_session_feedback(
                self.catalog, self.user, best, rng).watch_times.sum()
            random_time += simulate_session_feedback(
                self.catalog, self.user, random_session, rng).watch_times.sum()
        self.assertGreater(top_time, random_time)

    def test_monte_carlo_matches_closed_form(self):
        session = [10, 20, 30, 40, 50]
        rng = np.random.default_rng(1)
        values = np.array([
            session_value_from_feedback(
                simulate_session_feedback(self.catalog, self.user, session, rng, self.config),
                self.config)
            for _ in range(10000)])
        expected = true_session_value(self.catalog, self.user, session, self.config)
        se = values.std() / np.sqrt(len(values))
        self.assertLess(abs(values.mean() - expected), 4 * se)

    def test_value_grows_with_affinity(self):
        embeddings = [[t, 0.0] for t in np.linspace(-1.0, 1.0, 5)] + [[0.0, 1.0], [0.0, -1.0]]
        catalog = SyntheticCatalog(embeddings, np.zeros(7), np.zeros((1, 2)))
        user = _user([4.0, 0.0])
        values = [true_session_value(catalog, user, [i, 5, 6]) for i in range(5)]
        self.assertEqual(values, sorted(values))
        self.assertLess(values[0], values[-1])

    def test_repeated_item_session(self):
        value = true_session_value(self.catalog, self.user, [0] * 5)
        self.assertTrue(np.isfinite(value))

    def test_session_of_one_item(self):
        feedback = simulate_session_feedback(self.catalog, self.user, [0], seed=1)
        self.assertEqual(feedback.labels.vtr, int(feedback.watched[0]))


class TestLogs(unittest.TestCase):
    def setUp(self):
        self.catalog = generate_catalog(150, 8, 5, seed=2)
        self.users = generate_users(self.catalog, 40, 5, seed=2)

    def test_same_seed_same_logs(self):
        first = generate_training_logs(self.catalog, self.users, 2, 'random', seed=4)
        second = generate_training_logs(self.catalog, self.users, 2, 'random', seed=4)
        self.assertEqual([(log.session, log.labels) for log in first],
                         [(log.session, log.labels) for log in second])

    def test_quality_filter(self):
        logs = generate_training_logs(self.catalog, self.users, 3, 'affinity-greedy', seed=4,
                                      quality_filter=True)
        self.assertTrue(all(is_high_quality(log.labels) for log in logs))

    def test_unknown_policy(self):
        with self.assertRaises(ValueError):
            generate_training_logs(self.catalog, self.users, 1, 'oracle')

    def test_label_rates_match_expectation(self):
        users = generate_users(self.catalog, 400, 3, seed=6)
        logs = generate_training_logs(self.catalog, users, 5, 'random', seed=6)
        rates = label_rates(logs)
        by_id = {u.user_id: u for u in users}
        for target, rate_key in (('ltr', 'like'), ('wtr', 'follow')):
            probs = []
            for log in logs:
                r = item_rates(self.catalog, by_id[log.user_id], log.session)
                probs.append(1.0 - np.prod(1.0 - r.watch * getattr(r, rate_key)))
            probs = np.array(probs)
            se = np.sqrt(np.sum(probs * (1 - probs))) / len(probs)
            self.assertLess(abs(rates[target] - probs.mean()), 4 * se + 1e-12)

    def test_label_rates_of_nothing(self):
        self.assertEqual(label_rates([]), {'swt': None, 'vtr': None, 'wtr': None, 'ltr': None})


if __name__ == '__main__':
    import sys
    sys.exit(unittest.main())
