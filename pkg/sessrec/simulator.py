"""Synthetic catalog, users and feedback acting as a ground-truth oracle.

Generative rules, with affinity ``a = <preference, embedding> / d``:

* watch probability ``sigmoid(watch_slope * w_vtr * a + watch_offset)``; with the zero
  default offset a user orthogonal to an item watches it with probability 0.5;
* watch time, given a watch, is exponential with mean
  ``base_watch_time * exp(time_slope * w_swt * a)``;
* like and follow, given a watch, are Bernoulli with
  ``sigmoid(slope * w * a + offset)``, the negative offsets keeping them sparse.

Session labels: ``vtr`` needs ``min(min_effective_watches, m)`` watched items, ``swt`` a
total watch time of at least ``swt_threshold_fraction * m * base_watch_time``, ``ltr``
and ``wtr`` any like or follow.
"""
from collections import namedtuple

import numpy as np
from scipy.special import expit, softmax

from sessrec import constants
from .config import SimulatorConfig
from .numerics import ContractError
from .tokenizer import ItemEmbedding
from .utils import rng_stream, verbose_print

SessionLabels = namedtuple('SessionLabels', constants.TARGETS)
Feedback = namedtuple('Feedback', ('labels', 'watch_times', 'watched', 'likes', 'follows'))
InteractionLog = namedtuple(
    'InteractionLog', ('user_id', 'history', 'session', 'labels', 'watch_times'))


class SyntheticCatalog:
    def __init__(self, embeddings, labels, centers, seed=0, noise=constants.DEFAULT_CLUSTER_NOISE):
        self.embeddings = np.asarray(embeddings, dtype=float)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.centers = np.asarray(centers, dtype=float)
        self.item_ids = np.arange(len(self.embeddings))
        self.seed = seed
        self.noise = noise

    def __len__(self):
        return len(self.embeddings)

    @property
    def dim(self):
        return self.embeddings.shape[1]

    @property
    def items(self):
        return [ItemEmbedding(int(i), e) for i, e in zip(self.item_ids, self.embeddings)]

    def vectors(self, item_ids):
        item_ids = np.asarray(item_ids, dtype=np.int64)
        if item_ids.size and (item_ids.min() < 0 or item_ids.max() >= len(self)):
            raise ContractError('unknown item in {}'.format(item_ids.tolist()))
        return self.embeddings[item_ids]


class SyntheticUser:
    def __init__(self, user_id, preference, weights, history):
        self.user_id = user_id
        self.preference = np.asarray(preference, dtype=float)
        self.weights = np.asarray(weights, dtype=float)
        self.history = [int(i) for i in history]

    def weight(self, target):
        return self.weights[constants.TARGETS.index(target)]

    def __repr__(self):
        return 'SyntheticUser({}, history={})'.format(self.user_id, len(self.history))


def generate_catalog(num_items, d, num_clusters, seed=0, noise=constants.DEFAULT_CLUSTER_NOISE):
    if num_items < num_clusters:
        raise ValueError('numItems ({}) must be >= numClusters ({})'.format(
            num_items, num_clusters))
    rng = rng_stream(seed, 'catalog')
    centers = rng.standard_normal((num_clusters, d))
    labels = rng.permutation(np.arange(num_items) % num_clusters)
    embeddings = centers[labels] + noise * rng.standard_normal((num_items, d))
    return SyntheticCatalog(embeddings, labels, centers, seed=seed, noise=noise)


def affinity(catalog, preference, items=None):
    vectors = catalog.embeddings if items is None else catalog.vectors(items)
    return vectors @ preference / catalog.dim


def sample_history(catalog, preference, length, rng, temperature=constants.HISTORY_TEMPERATURE):
    if length == 0:
        return []
    p = softmax(affinity(catalog, preference) / temperature)
    return rng.choice(len(catalog), size=length, replace=False, p=p).tolist()


def generate_users(catalog, num_users, history_length, seed=0, config=None):
    config = config or SimulatorConfig()
    if history_length < 0:
        raise ValueError('historyLength must be >= 0, got {}'.format(history_length))
    rng = rng_stream(seed, 'users')
    users = []
    for user_id in range(num_users):
        center = catalog.centers[rng.integers(len(catalog.centers))]
        preference = center + config.preference_noise * rng.standard_normal(catalog.dim)
        weights = rng.uniform(0.5, 1.5, size=len(constants.TARGETS))
        history = sample_history(catalog, preference, history_length, rng,
                                 config.history_temperature)
        users.append(SyntheticUser(user_id, preference, weights, history))
    return users


ItemRates = namedtuple('ItemRates', ('watch', 'mean_time', 'like', 'follow'))


def item_rates(catalog, user, session, config=None):
    """Per-item watch probability, conditional mean watch time and like/follow rates."""
    config = config or SimulatorConfig()
    a = affinity(catalog, user.preference, session)
    w = dict(zip(constants.TARGETS, user.weights))
    return ItemRates(
        watch=expit(config.watch_slope * w['vtr'] * a + config.watch_offset),
        mean_time=config.base_watch_time * np.exp(config.time_slope * w['swt'] * a),
        like=expit(config.like_slope * w['ltr'] * a + config.like_offset),
        follow=expit(config.follow_slope * w['wtr'] * a + config.follow_offset),
    )


def session_labels(watched, watch_times, likes, follows, config=None):
    config = config or SimulatorConfig()
    m = len(watched)
    needed = min(config.min_effective_watches, m)
    threshold = config.swt_threshold_fraction * m * config.base_watch_time
    return SessionLabels(
        swt=int(np.sum(watch_times) >= threshold),
        vtr=int(np.sum(watched) >= needed),
        wtr=int(np.any(follows)),
        ltr=int(np.any(likes)),
    )


def is_high_quality(labels):
    return any(labels)


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return rng_stream(seed, 'feedback')


def simulate_session_feedback(catalog, user, session, seed=0, config=None):
    """Sample one response of ``user`` to ``session``; an int seed makes it reproducible."""
    config = config or SimulatorConfig()
    rng = _rng(seed)
    rates = item_rates(catalog, user, session, config)
    m = len(rates.watch)
    watched = rng.random(m) < rates.watch
    watch_times = np.where(watched, rng.exponential(rates.mean_time), 0.0)
    likes = watched & (rng.random(m) < rates.like)
    follows = watched & (rng.random(m) < rates.follow)
    labels = session_labels(watched, watch_times, likes, follows, config)
    return Feedback(labels, watch_times, watched, likes, follows)


def _value(components, config):
    return float(np.dot(config.value_weights, components))


def session_value_from_feedback(feedback, config=None):
    config = config or SimulatorConfig()
    m = len(feedback.watched)
    return _value((
        feedback.watch_times.sum() / (m * config.base_watch_time),
        feedback.watched.mean(),
        float(feedback.follows.any()),
        float(feedback.likes.any()),
    ), config)


def true_session_value(catalog, user, session, config=None):
    """Closed-form expectation of ``session_value_from_feedback``."""
    config = config or SimulatorConfig()
    rates = item_rates(catalog, user, session, config)
    m = len(rates.watch)
    return _value((
        np.sum(rates.watch * rates.mean_time) / (m * config.base_watch_time),
        rates.watch.mean(),
        1.0 - np.prod(1.0 - rates.watch * rates.follow),
        1.0 - np.prod(1.0 - rates.watch * rates.like),
    ), config)


def compose_session(catalog, user, session_size, policy, rng, config=None):
    config = config or SimulatorConfig()
    if policy == 'random':
        return rng.choice(len(catalog), size=session_size, replace=False).tolist()
    if policy == 'affinity-greedy':
        p = softmax(affinity(catalog, user.preference) / config.logging_temperature)
        return rng.choice(len(catalog), size=session_size, replace=False, p=p).tolist()
    raise ValueError('Unknown logging policy: {}. Options: {}'.format(
        policy, ', '.join(constants.LOGGING_POLICIES)))


def generate_training_logs(catalog, users, sessions_per_user, policy='affinity-greedy', seed=0,
                           session_size=constants.DEFAULT_SESSION_SIZE, quality_filter=False,
                           config=None):
    config = config or SimulatorConfig()
    rng = rng_stream(seed, 'logs')
    logs = []
    dropped = 0
    for user in users:
        for _ in range(sessions_per_user):
            session = compose_session(catalog, user, session_size, policy, rng, config)
            feedback = simulate_session_feedback(catalog, user, session, rng, config)
            if quality_filter and not is_high_quality(feedback.labels):
                dropped += 1
                continue
            logs.append(InteractionLog(user.user_id, list(user.history), session,
                                       feedback.labels, feedback.watch_times))
    verbose_print('Generated {} logs ({} dropped by the quality filter)'.format(
        len(logs), dropped))
    return logs


def label_rates(logs):
    if not logs:
        return {t: None for t in constants.TARGETS}
    labels = np.array([log.labels for log in logs], dtype=float)
    return dict(zip(constants.TARGETS, labels.mean(axis=0).tolist()))
