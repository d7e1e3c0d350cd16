"""Trie-constrained decoding of whole sessions."""
from collections import Counter, namedtuple

import numpy as np
from scipy.special import logsumexp, softmax

from .numerics import ContractError, Tensor
from .utils import warn

Hypothesis = namedtuple('Hypothesis', ('session', 'log_prob'))
BeamResult = namedtuple('BeamResult', ('hypotheses', 'exhausted'))


def _level_log_softmax(model, hidden, level):
    logits = model.level_logits(Tensor(hidden), level).data
    return logits - logsumexp(logits, axis=-1, keepdims=True)


def _copy_cache(cache):
    return [{'self': dict(layer['self']), 'cross': dict(layer['cross'])} for layer in cache]


class _Decoder:
    """Incremental decoding state shared by beam search and sampling.

    Every hypothesis is decoded on its own, one token per call, so each row goes through
    the same matrix shapes whether or not a cache is kept. Without a cache the prefix is
    replayed into a fresh one at every step; with one only the tokens appended since the
    previous step are fed. Both give bitwise-identical hidden states.
    """

    def __init__(self, model, history, use_cache):
        self.model = model
        self.encoded = model.encode([history])
        self.tokens = np.full((1, 1), model.config.bos, dtype=np.int64)
        self.caches = [model.new_cache()] if use_cache else None
        self.fed = 0

    def _feed(self, cache, row, start):
        for t in range(start, len(row)):
            hidden = self.model.decode(self.encoded, row[None, t:t + 1], cache=cache, start=t)
        return hidden.data[0, -1]

    def last_hidden(self):
        if self.caches is None:
            rows = [self._feed(self.model.new_cache(), row, 0) for row in self.tokens]
        else:
            rows = [self._feed(cache, row, self.fed)
                    for cache, row in zip(self.caches, self.tokens)]
        self.fed = self.tokens.shape[1]
        return np.stack(rows)

    def reorder(self, parents):
        self.tokens = self.tokens[parents]
        if self.caches is not None:
            self.caches = [_copy_cache(self.caches[p]) for p in parents]

    def append(self, tokens):
        self.tokens = np.concatenate([self.tokens, np.asarray(tokens)[:, None]], axis=1)


def _allowed(item_index, prefixes, K):
    if item_index is None:
        return np.ones((len(prefixes), K), dtype=bool)
    return np.stack([item_index.allowed_mask(p, K) for p in prefixes])


def _steps(model, session_size):
    cfg = model.config
    m = cfg.session_size if session_size is None else session_size
    if not 1 <= m <= cfg.session_size:
        raise ContractError('session size must be in [1, {}], got {}'.format(
            cfg.session_size, m))
    return m, cfg.codebook_size, cfg.codebook_levels


def beam_search_session(model, history, beam_size, item_index=None, session_size=None,
                        use_cache=False):
    """Best ``beam_size`` sessions by summed level-slice log-probability.

    Continuations outside ``item_index`` are dropped before ranking; candidate ties go to
    the lower beam, then the lower code. ``exhausted`` is set when fewer than
    ``beam_size`` valid sequences exist.
    """
    if beam_size < 1:
        raise ValueError('beam size must be >= 1, got {}'.format(beam_size))
    m, K, L = _steps(model, session_size)
    state = _Decoder(model, history, use_cache)
    sessions = [[]]
    prefixes = [()]
    scores = np.zeros(1)
    for step in range(m * L):
        item, level = divmod(step, L)
        if level == 0 and item > 0:
            state.append(np.full(len(sessions), model.config.bos))
        log_p = _level_log_softmax(model, state.last_hidden(), level)
        log_p = np.where(_allowed(item_index, prefixes, K), log_p, -np.inf)
        candidates = scores[:, None] + log_p
        beams, codes = np.nonzero(np.isfinite(candidates))
        if not len(beams):
            return BeamResult([], True)
        values = candidates[beams, codes]
        order = np.lexsort((codes, beams, -values))[:beam_size]
        beams, codes, scores = beams[order], codes[order], values[order]
        state.reorder(beams)
        state.append(level * K + codes)
        finished = level == L - 1
        new_sessions, new_prefixes = [], []
        for b, c in zip(beams, codes):
            prefix = prefixes[b] + (int(c),)
            if finished:
                new_sessions.append(sessions[b] + [prefix])
                new_prefixes.append(())
            else:
                new_sessions.append(sessions[b])
                new_prefixes.append(prefix)
        sessions, prefixes = new_sessions, new_prefixes
    hypotheses = [Hypothesis(s, float(v)) for s, v in zip(sessions, scores)]
    return BeamResult(hypotheses, len(hypotheses) < beam_size)


def sample_sessions(model, history, count, item_index=None, rng=None, temperature=1.0,
                    session_size=None, use_cache=False):
    """``count`` independent temperature samples, deduplicated, best log-prob first.

    Reported log-probabilities are the untempered level-slice ones.
    """
    if temperature <= 0:
        raise ValueError('temperature must be positive, got {}'.format(temperature))
    rng = rng or np.random.default_rng(0)
    m, K, L = _steps(model, session_size)
    state = _Decoder(model, history, use_cache)
    state.reorder(np.zeros(count, dtype=np.int64))
    sessions = [[] for _ in range(count)]
    prefixes = [()] * count
    scores = np.zeros(count)
    alive = np.ones(count, dtype=bool)
    for step in range(m * L):
        item, level = divmod(step, L)
        if level == 0 and item > 0:
            state.append(np.full(count, model.config.bos))
        log_p = _level_log_softmax(model, state.last_hidden(), level)
        allowed = _allowed(item_index, prefixes, K)
        alive &= allowed.any(axis=1)
        tempered = np.where(allowed, log_p / temperature, -np.inf)
        tempered[~alive] = 0.0
        probs = softmax(tempered, axis=1)
        codes = np.array([rng.choice(K, p=p) for p in probs])
        scores = scores + log_p[np.arange(count), codes]
        state.append(level * K + codes)
        for b, c in enumerate(codes):
            prefix = prefixes[b] + (int(c),)
            if level == L - 1:
                sessions[b] = sessions[b] + [prefix]
                prefixes[b] = ()
            else:
                prefixes[b] = prefix
    seen = set()
    hypotheses = []
    for b in np.argsort(-scores, kind='stable'):
        key = tuple(sessions[b])
        if not alive[b] or key in seen:
            continue
        seen.add(key)
        hypotheses.append(Hypothesis(sessions[b], float(scores[b])))
    return hypotheses


def generate_responses(model, history, count, item_index=None, mode='beam', rng=None,
                       temperature=1.0, use_cache=False):
    if mode == 'beam':
        return beam_search_session(model, history, count, item_index,
                                   use_cache=use_cache).hypotheses
    if mode == 'temperature':
        return sample_sessions(model, history, count, item_index, rng, temperature,
                               use_cache=use_cache)
    raise ValueError('Unknown sampling mode: {}'.format(mode))


def duplicate_items(session):
    """Semantic IDs occurring more than once within one session."""
    return sorted(code for code, n in Counter(tuple(c) for c in session).items() if n > 1)


def report_duplicates(hypotheses, user_id=None):
    dup = sum(1 for h in hypotheses if duplicate_items(h.session))
    if dup:
        warn('{} of {} generated sessions{} repeat an item'.format(
            dup, len(hypotheses), '' if user_id is None else ' for user %s' % user_id))
    return dup


def prediction_entropy_report(model, histories, item_index=None, batch_size=64):
    """Mean entropy (nats) of each level's distribution along the greedy first item."""
    K, L = model.config.codebook_size, model.config.codebook_levels
    if not histories:
        raise ValueError('entropy report needs at least one history')
    totals = np.zeros(L)
    for start in range(0, len(histories), batch_size):
        chunk = histories[start:start + batch_size]
        encoded = model.encode(chunk)
        tokens = np.full((len(chunk), 1), model.config.bos, dtype=np.int64)
        prefixes = [()] * len(chunk)
        for level in range(L):
            hidden = model.decode(encoded, tokens).data[:, -1, :]
            log_p = _level_log_softmax(model, hidden, level)
            totals[level] -= (np.exp(log_p) * log_p).sum()
            masked = np.where(_allowed(item_index, prefixes, K), log_p, -np.inf)
            codes = np.argmax(masked, axis=1)
            tokens = np.concatenate([tokens, (level * K + codes)[:, None]], axis=1)
            prefixes = [p + (int(c),) for p, c in zip(prefixes, codes)]
    return (totals / len(histories)).tolist()


def check_entropy_ordering(entropies, slack=1e-6):
    """Soft check that entropy does not grow with depth; warns and returns False if it does."""
    ok = all(b <= a + slack for a, b in zip(entropies, entropies[1:]))
    if not ok:
        warn('prediction entropy is not non-increasing across levels: {}'.format(
            ', '.join('%.4f' % e for e in entropies)))
    return ok
