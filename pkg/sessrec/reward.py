"""Multi-tower session reward model over raw item embeddings.

A session is scored from its items' embeddings, each one mixed with a target-attention
summary of the user's history and a pooled user vector, fused by self-attention over the
session and read out by one sigmoid tower per target (swt, vtr, wtr, ltr).
"""
from collections import namedtuple

import numpy as np
from scipy.special import softmax as np_softmax
from scipy.stats import rankdata, spearmanr

from sessrec import constants
from .config import RewardConfig
from .numerics import (
    Adam, ContractError, Linear, Module, Tape, Tensor, binary_cross_entropy, concatenate,
    gelu, sigmoid, softmax, swapaxes,
)
from .perf import running_time
from .utils import mean_or_none, rng_stream, verbose_print

RewardVector = namedtuple('RewardVector', constants.TARGETS)
RewardBatch = namedtuple('RewardBatch', ('history', 'history_mask', 'session'))
RMReport = namedtuple('RMReport', ('curve', 'auc', 'spearman'))


def reward_batch(embeddings, histories, sessions):
    """Stack item vectors; an empty history becomes one masked-in zero row."""
    embeddings = np.asarray(embeddings, dtype=float)
    d = embeddings.shape[1]
    width = max(1, max(len(h) for h in histories))
    history = np.zeros((len(histories), width, d))
    mask = np.zeros((len(histories), width), dtype=bool)
    for b, items in enumerate(histories):
        history[b, :len(items)] = embeddings[list(items)]
        mask[b, :max(1, len(items))] = True
    lengths = {len(s) for s in sessions}
    if len(lengths) != 1:
        raise ContractError('sessions in a batch must share their length, got {}'.format(
            sorted(lengths)))
    session = np.stack([embeddings[list(s)] for s in sessions])
    return RewardBatch(history, mask, session)


class Tower(Module):
    def __init__(self, dim, hidden, rng, name='tower'):
        self.hidden = Linear(dim, hidden, rng, name=name + '.hidden')
        self.out = Linear(hidden, 1, rng, name=name + '.out')

    def forward(self, x):
        return sigmoid(self.out(gelu(self.hidden(x))))


class RewardModel(Module):
    def __init__(self, item_dim, config=None, seed=0):
        config = config or RewardConfig()
        config.validate()
        rng = rng_stream(seed, 'rm-init')
        d = config.dim
        self.item_dim = item_dim
        self.user_projection = Linear(item_dim, d, rng, bias=False, name='user')
        self.item_projection = Linear(2 * item_dim, d, rng, name='item')
        self.query = Linear(d, d, rng, bias=False, name='fuse.query')
        self.key = Linear(d, d, rng, bias=False, name='fuse.key')
        self.value = Linear(d, d, rng, bias=False, name='fuse.value')
        self.towers = {t: Tower(d, config.tower_hidden, rng, name='tower.' + t)
                       for t in constants.TARGETS}
        weights = np.asarray(config.target_weights, dtype=float)
        self._weights = weights / weights.sum()

    def target_aware_encode(self, batch):
        """Per-item representations e_i, shape [B, m, d_rm]."""
        if batch.session.shape[-1] != self.item_dim:
            raise ContractError('item dimension {} != reward model dimension {}'.format(
                batch.session.shape[-1], self.item_dim))
        mask = batch.history_mask[..., None]
        pooled = (batch.history * mask).sum(axis=1) / mask.sum(axis=1)
        user = self.user_projection(Tensor(pooled))
        scores = batch.session @ np.swapaxes(batch.history, 1, 2) / np.sqrt(self.item_dim)
        scores = np.where(batch.history_mask[:, None, :], scores, constants.MASK_VALUE)
        attended = np_softmax(scores, axis=-1) @ batch.history
        items = concatenate([Tensor(batch.session), Tensor(batch.session * attended)], axis=-1)
        return self.item_projection(items) + user.reshape(user.shape[0], 1, user.shape[1])

    def session_fuse(self, encoded):
        q, k, v = self.query(encoded), self.key(encoded), self.value(encoded)
        scores = (q @ swapaxes(k, -1, -2)) * (1.0 / np.sqrt(q.shape[-1]))
        return softmax(scores, axis=-1) @ v

    def predict_rewards(self, fused):
        """Tower probabilities, shape [B, 4] in target order."""
        pooled = fused.sum(axis=1)
        return concatenate([self.towers[t](pooled) for t in constants.TARGETS], axis=-1)

    def forward(self, batch):
        return self.predict_rewards(self.session_fuse(self.target_aware_encode(batch)))

    def score(self, batch):
        """Weighted combination of the tower outputs, shape [B]."""
        return self(batch).data @ self._weights

    @property
    def weights(self):
        return self._weights.copy()


def rm_loss(predictions, labels):
    """Sum over targets of binary cross-entropy, averaged over the batch."""
    labels = np.asarray(labels, dtype=float)
    if labels.shape != predictions.shape:
        raise ContractError('labels {} do not match predictions {}'.format(
            labels.shape, predictions.shape))
    return binary_cross_entropy(predictions, labels).sum(axis=1).mean()


def score_session(model, embeddings, history, session):
    return float(model.score(reward_batch(embeddings, [history], [session]))[0])


def predict_session(model, embeddings, history, session):
    return RewardVector(*model(reward_batch(embeddings, [history], [session])).data[0].tolist())


def auc(scores, labels):
    """Area under the ROC curve through the rank-sum statistic; None for one class only."""
    labels = np.asarray(labels, dtype=bool)
    positives, negatives = labels.sum(), (~labels).sum()
    if not positives or not negatives:
        return None
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - positives * (positives + 1) / 2.0) /
                 (positives * negatives))


def predict_logs(model, embeddings, logs, batch_size=256):
    out = []
    for start in range(0, len(logs), batch_size):
        chunk = logs[start:start + batch_size]
        batch = reward_batch(embeddings, [entry.history for entry in chunk],
                             [entry.session for entry in chunk])
        out.append(model(batch).data)
    return np.concatenate(out) if out else np.zeros((0, len(constants.TARGETS)))


def evaluate_reward_model(model, embeddings, logs, true_values=None):
    predictions = predict_logs(model, embeddings, logs)
    labels = np.array([entry.labels for entry in logs], dtype=float)
    aucs = {t: auc(predictions[:, i], labels[:, i]) for i, t in enumerate(constants.TARGETS)}
    rho = None
    if true_values is not None and len(logs) > 1:
        rho = float(spearmanr(predictions @ model.weights, true_values)[0])
    return aucs, rho


def train_reward_model(embeddings, logs, config=None, steps=None, seed=0, heldout=None,
                       heldout_values=None, model=None):
    """Adam on ``rm_loss`` over minibatches of logged sessions and their labels."""
    config = config or RewardConfig()
    steps = config.steps if steps is None else steps
    if not logs:
        raise ContractError('no reward model training logs')
    model = model or RewardModel(np.shape(embeddings)[1], config, seed=seed)
    rng = rng_stream(seed, 'rm-train')
    optimizer = Adam(model.parameters(), config.learning_rate)
    curve = []
    with running_time('Reward model training'):
        for step in range(1, steps + 1):
            idx = rng.integers(0, len(logs), size=min(config.batch_size, len(logs)))
            chunk = [logs[i] for i in idx]
            batch = reward_batch(embeddings, [entry.history for entry in chunk],
                                 [entry.session for entry in chunk])
            with Tape() as tape:
                loss = rm_loss(model(batch), [entry.labels for entry in chunk])
            tape.backward(loss)
            optimizer.step()
            curve.append(loss.item())
            if step % constants.DEFAULT_LOG_EVERY == 0:
                verbose_print('rm step {}: loss {:.4f}'.format(
                    step, mean_or_none(curve[-constants.DEFAULT_LOG_EVERY:])))
    aucs, rho = evaluate_reward_model(model, embeddings, heldout, heldout_values) \
        if heldout else ({t: None for t in constants.TARGETS}, None)
    return model, RMReport(curve, aucs, rho)
