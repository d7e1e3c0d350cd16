"""Iterative preference alignment of the generator against the reward model.

Each epoch samples responses from a frozen snapshot of the policy, picks the best and
worst by reward, and mixes a DPO term into the NTP objective for a random fraction of
the samples. The snapshot is both the sampler and the DPO reference, and is refreshed
at epoch end.
"""
import copy
from collections import OrderedDict, namedtuple
from multiprocessing import Pool

import numpy as np

from sessrec import constants
from .beam import beam_search_session, generate_responses, report_duplicates
from .config import ConfigError, EvalConfig, IPAConfig, TrainConfig
from .model import epoch_batches, example_batch, ntp_loss, sequence_log_prob
from .numerics import Adam, Tape, log_sigmoid
from .perf import running_time
from .reward import reward_batch
from .simulator import SimulatorConfig, true_session_value
from .utils import mean_or_none, rng_stream, verbose_print, warn

ScoredResponse = namedtuple('ScoredResponse', ('session', 'items', 'reward', 'log_prob'))
PreferencePair = namedtuple('PreferencePair', (
    'user_id', 'history', 'history_items', 'winner', 'loser', 'winner_items', 'loser_items',
    'winner_reward', 'loser_reward'))
IPAResult = namedtuple('IPAResult', ('snapshots', 'metrics', 'pairs'))
EPOCH_METRICS = ('epoch', 'ntp_loss', 'dpo_loss', 'pairs', 'skipped', 'winner_reward',
                 'loser_reward', 'reward_margin', 'implicit_accuracy')


def snapshot(model):
    """Frozen deep copy: its parameters never record on a tape."""
    frozen = copy.deepcopy(model)
    for p in frozen.parameters():
        p.requires_grad = False
    return frozen


def resolve_session(session, item_index):
    items = [item_index.resolve(code) for code in session]
    if any(i is None for i in items):
        return None
    return items


def score_responses(rm, embeddings, history_items, hypotheses, item_index):
    resolved = [(h, resolve_session(h.session, item_index)) for h in hypotheses]
    resolved = [(h, items) for h, items in resolved if items is not None]
    if not resolved:
        return []
    batch = reward_batch(embeddings, [history_items] * len(resolved),
                         [items for _, items in resolved])
    rewards = rm.score(batch)
    return [ScoredResponse(h.session, items, float(r), h.log_prob)
            for (h, items), r in zip(resolved, rewards)]


def select_pair(scored):
    """(winner, loser) by reward; ties go to the higher and lower log-prob respectively,
    then to the first and last sample. None when both are the same session."""
    if len(scored) < 2:
        return None
    order = range(len(scored))
    best = max(order, key=lambda i: (scored[i].reward, scored[i].log_prob, -i))
    worst = min(order, key=lambda i: (scored[i].reward, scored[i].log_prob, -i))
    if scored[best].session == scored[worst].session:
        return None
    return scored[best], scored[worst]


def build_pair(reference, rm, example, embeddings, item_index, config, rng=None):
    hypotheses = generate_responses(reference, example.history, config.responses, item_index,
                                    mode=config.sampling, rng=rng,
                                    temperature=config.temperature, use_cache=config.kv_cache)
    report_duplicates(hypotheses, example.user_id)
    scored = score_responses(rm, embeddings, example.history_items, hypotheses, item_index)
    if len(scored) < 2:
        warn('user {}: only {} valid responses, skipping DPO'.format(
            example.user_id, len(scored)))
        return None
    chosen = select_pair(scored)
    if chosen is None:
        warn('user {}: responses are indistinguishable, skipping DPO'.format(example.user_id))
        return None
    winner, loser = chosen
    return PreferencePair(example.user_id, example.history, example.history_items,
                          winner.session, loser.session, winner.items, loser.items,
                          winner.reward, loser.reward)


def dpo_margins(policy, reference, pairs, beta):
    """beta * ((log pi_w - log ref_w) - (log pi_l - log ref_l)) per pair."""
    histories = [p.history for p in pairs]
    winners = [p.winner for p in pairs]
    losers = [p.loser for p in pairs]
    ref_w = sequence_log_prob(reference, histories, winners).data
    ref_l = sequence_log_prob(reference, histories, losers).data
    pol_w = sequence_log_prob(policy, histories, winners)
    pol_l = sequence_log_prob(policy, histories, losers)
    return ((pol_w - ref_w) - (pol_l - ref_l)) * beta


def dpo_loss(policy, reference, pairs, beta=constants.DEFAULT_BETA):
    """Mean of ``-log sigmoid(margin)`` over the pairs."""
    if not pairs:
        raise ValueError('dpo loss needs at least one pair')
    return -log_sigmoid(dpo_margins(policy, reference, pairs, beta)).mean()


def _check(rm, config):
    if rm is None:
        raise ConfigError('IPA needs a trained reward model')
    config.validate()


def ipa_train(model, rm, examples, embeddings, item_index, config=None, train_config=None,
              seed=0, on_epoch=None):
    """Run ``config.epochs`` IPA epochs in place on ``model``.

    Returns the snapshots M_0..M_T, one metrics row per epoch and every pair used.
    """
    config = config or IPAConfig()
    train_config = train_config or TrainConfig()
    _check(rm, config)
    if not examples:
        raise ConfigError('IPA needs training examples')
    dpo_rng = rng_stream(seed, 'ipa-dpo')
    train_rng = rng_stream(seed, 'ipa-train')
    sample_rng = rng_stream(seed, 'sampling')
    snapshots = [snapshot(model)]
    metrics = []
    all_pairs = []
    optimizer = Adam(model.parameters(), config.learning_rate, train_config.beta1,
                     train_config.beta2, train_config.eps)
    for epoch in range(1, config.epochs + 1):
        reference = snapshots[-1]
        ntp_losses, dpo_losses, margins = [], [], []
        pairs_used, skipped = [], 0
        with running_time('IPA epoch %d' % epoch):
            for idx in epoch_batches(train_rng, len(examples), config.samples_per_epoch,
                                     train_config.batch_size):
                batch = [examples[i] for i in idx]
                draws = dpo_rng.random(len(batch)) < config.r_dpo
                pairs = []
                for example in (e for e, d in zip(batch, draws) if d):
                    pair = build_pair(reference, rm, example, embeddings, item_index, config,
                                      sample_rng)
                    if pair is None:
                        skipped += 1
                    else:
                        pairs.append(pair)
                with Tape() as tape:
                    loss = ntp_loss(model, *example_batch(batch))
                    ntp_losses.append(loss.item())
                    if pairs:
                        margin = dpo_margins(model, reference, pairs, config.beta)
                        dpo = -log_sigmoid(margin).mean()
                        dpo_losses.append(dpo.item())
                        margins.extend(margin.data.tolist())
                        loss = loss + dpo * config.lam
                tape.backward(loss)
                optimizer.step()
                pairs_used.extend(pairs)
        row = OrderedDict([
            ('epoch', epoch),
            ('ntp_loss', mean_or_none(ntp_losses)),
            ('dpo_loss', mean_or_none(dpo_losses)),
            ('pairs', len(pairs_used)),
            ('skipped', skipped),
            ('winner_reward', mean_or_none(p.winner_reward for p in pairs_used)),
            ('loser_reward', mean_or_none(p.loser_reward for p in pairs_used)),
            ('reward_margin', mean_or_none(p.winner_reward - p.loser_reward for p in pairs_used)),
            ('implicit_accuracy', mean_or_none(float(m > 0) for m in margins)),
        ])
        verbose_print('IPA epoch {}: ntp {} dpo {} pairs {} skipped {}'.format(
            epoch, row['ntp_loss'], row['dpo_loss'], row['pairs'], skipped))
        metrics.append(row)
        all_pairs.extend(pairs_used)
        snapshots.append(snapshot(model))
        if on_epoch is not None:
            on_epoch(epoch, model)
    return IPAResult(snapshots, metrics, all_pairs)


# evaluation

_shared = {}


def _init_worker(state):
    _shared.update(state)


def _evaluate_user(user_index):
    s = _shared
    user = s['users'][user_index]
    history = [s['item_index'].codes_by_item[i] for i in user.history]
    result = beam_search_session(s['model'], history, s['eval'].beam_size, s['item_index'],
                                 use_cache=s['eval'].kv_cache)
    scored = []
    for h in result.hypotheses[:s['eval'].top_n]:
        items = resolve_session(h.session, s['item_index'])
        if items is not None:
            scored.append(items)
    if not scored:
        return None
    batch = reward_batch(s['catalog'].embeddings, [user.history] * len(scored), scored)
    predictions = s['rm'](batch).data
    value = true_session_value(s['catalog'], user, scored[0], s['simulator'])
    return predictions, float(predictions[0] @ s['rm'].weights), value


def evaluate_xtr(model, rm, users, catalog, item_index, eval_config=None, simulator_config=None,
                 threads=1):
    """Per-target mean and per-user max of RM predictions over the top-N generated sessions.

    Also reports the mean RM score and the mean true value of every user's top-1 session.
    """
    eval_config = eval_config or EvalConfig()
    eval_config.validate()
    state = {
        'model': model, 'rm': rm, 'users': users, 'catalog': catalog,
        'item_index': item_index, 'eval': eval_config,
        'simulator': simulator_config or SimulatorConfig(),
    }
    with running_time('xtr evaluation'):
        if threads > 1:
            with Pool(threads, initializer=_init_worker, initargs=(state,)) as pool:
                results = pool.map(_evaluate_user, range(len(users)))
        else:
            _init_worker(state)
            results = [_evaluate_user(i) for i in range(len(users))]
    results = [r for r in results if r is not None]
    if not results:
        raise ValueError('no user produced a valid session')
    table = OrderedDict()
    for i, target in enumerate(constants.TARGETS):
        table[target] = OrderedDict([
            ('mean', float(np.mean(np.concatenate([p[:, i] for p, _, _ in results])))),
            ('max', float(np.mean([p[:, i].max() for p, _, _ in results]))),
        ])
    table['rm_score'] = float(np.mean([s for _, s, _ in results]))
    table['true_value'] = float(np.mean([v for _, _, v in results]))
    table['users'] = len(results)
    return table
