"""MoE encoder-decoder generating a session of semantic IDs.

Token layout: level ``j`` (0-based) code ``c`` is token ``j * K + c`` and ``BOS = L * K``.
The decoder input of a session is ``[BOS, s_1^1 .. s_1^L, BOS, s_2^1 ..]``; the hidden
state at ``i * (L + 1) + j`` predicts level ``j`` of item ``i`` from that level's slice of
the output head only.
"""
from collections import namedtuple

import numpy as np

from sessrec import constants
from .config import ConfigError, ModelConfig, TrainConfig
from .numerics import (
    Adam, ContractError, Embedding, LayerNorm, Linear, Module, Parameter, Tape, Tensor,
    concatenate, cross_entropy_from_logits, gelu, index_add, init_normal, log_softmax,
    softmax, swapaxes,
)
from .perf import flop_tag, running_time
from .utils import rng_stream, verbose_print

Example = namedtuple(
    'Example', ('user_id', 'history_items', 'history', 'session_items', 'session'))
EncoderOutput = namedtuple('EncoderOutput', ('states', 'bias'))
TrainResult = namedtuple('TrainResult', ('model', 'curve', 'gate_usage'))
CurvePoint = namedtuple('CurvePoint', ('step', 'train_loss', 'heldout_loss'))


class FeedForward(Module):
    def __init__(self, d_model, hidden, rng, name='ffn'):
        self.up = Linear(d_model, hidden, rng, name=name + '.up')
        self.down = Linear(hidden, d_model, rng, name=name + '.down')

    def forward(self, x):
        return self.down(gelu(self.up(x)))


class MultiHeadAttention(Module):
    def __init__(self, d_model, num_heads, rng, name='attn'):
        self.num_heads = num_heads
        self.head_dim = d_model // num_heads
        self.query = Linear(d_model, d_model, rng, name=name + '.query')
        self.key = Linear(d_model, d_model, rng, name=name + '.key')
        self.value = Linear(d_model, d_model, rng, name=name + '.value')
        self.out = Linear(d_model, d_model, rng, name=name + '.out')

    def _split(self, x):
        B, T, _ = x.shape
        return x.reshape(B, T, self.num_heads, self.head_dim).transpose(0, 2, 1, 3)

    def _merge(self, x):
        B, _, T, _ = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B, T, self.num_heads * self.head_dim)

    def _keys_values(self, source):
        return self._split(self.key(source)), self._split(self.value(source))

    def forward(self, x, memory=None, bias=None, cache=None):
        """Attend from ``x`` to ``memory`` (self-attention when it is None).

        ``cache`` is an inference-only dict: for cross-attention it keeps the projected
        memory, for self-attention it grows with every call.
        """
        q = self._split(self.query(x))
        if memory is not None:
            if cache is not None and 'k' in cache:
                k, v = cache['k'], cache['v']
            else:
                k, v = self._keys_values(memory)
                if cache is not None:
                    cache['k'], cache['v'] = k, v
        else:
            k, v = self._keys_values(x)
            if cache is not None:
                if 'k' in cache:
                    k = Tensor(np.concatenate([cache['k'].data, k.data], axis=2))
                    v = Tensor(np.concatenate([cache['v'].data, v.data], axis=2))
                cache['k'], cache['v'] = k, v
        scores = (q @ swapaxes(k, -1, -2)) * (1.0 / np.sqrt(self.head_dim))
        if bias is not None:
            scores = scores + bias
        return self.out(self._merge(softmax(scores, axis=-1) @ v))


class MoEFeedForward(Module):
    """Top-``k_active`` mixture of ``n_experts`` feed-forward experts.

    Gate scores are ``softmax(h @ expert_embeddings)``; the kept scores are not
    renormalised. Exact score ties go to the lower expert index.
    """

    def __init__(self, d_model, hidden, n_experts, k_active, rng, name='moe'):
        if not 1 <= k_active <= n_experts:
            raise ConfigError('K_MoE must be in [1, N_MoE={}], got {}'.format(
                n_experts, k_active))
        self.k_active = k_active
        self.expert_embeddings = Parameter(init_normal(rng, (d_model, n_experts), d_model),
                                           name=name + '.expert_embeddings')
        self.experts = [FeedForward(d_model, hidden, rng, name='{}.expert{}'.format(name, i))
                        for i in range(n_experts)]
        self._usage = np.zeros(n_experts, dtype=np.int64)

    @property
    def usage(self):
        return self._usage.copy()

    def reset_usage(self):
        self._usage[:] = 0

    def gates(self, flat):
        scores = softmax(flat @ self.expert_embeddings, axis=-1)
        top = np.argsort(-scores.data, axis=1, kind='stable')[:, :self.k_active]
        mask = np.zeros(scores.shape)
        np.put_along_axis(mask, top, 1.0, axis=1)
        return scores * mask, mask

    def mix(self, hidden):
        """The gated expert sum, without the residual."""
        shape = hidden.shape
        flat = hidden.reshape(-1, shape[-1])
        gate, mask = self.gates(flat)
        out = None
        for i, expert in enumerate(self.experts):
            rows = np.flatnonzero(mask[:, i])
            self._usage[i] += len(rows)
            if not len(rows):
                continue
            with flop_tag('moe-experts'):
                y = expert(flat[rows])
            part = index_add(flat.shape[0], rows, y * gate[rows, i:i + 1])
            out = part if out is None else out + part
        return out.reshape(shape)

    def forward(self, hidden):
        return self.mix(hidden) + hidden


def moe_ffn(hidden, moe):
    return moe(hidden)


class EncoderLayer(Module):
    def __init__(self, d_model, num_heads, hidden, rng, name='encoder'):
        self.attn_norm = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, num_heads, rng, name=name + '.attn')
        self.ffn_norm = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, hidden, rng, name=name + '.ffn')

    def forward(self, x, bias):
        x = x + self.attn(self.attn_norm(x), bias=bias)
        return x + self.ffn(self.ffn_norm(x))


class DecoderLayer(Module):
    def __init__(self, config, rng, name='decoder'):
        d = config.d_model
        self.self_norm = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, config.num_heads, rng, name=name + '.self')
        self.cross_norm = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, config.num_heads, rng, name=name + '.cross')
        self.moe_norm = LayerNorm(d)
        self.moe = MoEFeedForward(d, config.ffn_hidden, config.n_moe, config.k_moe, rng,
                                  name=name + '.moe')

    def forward(self, x, memory, self_bias, memory_bias, cache=None):
        x = x + self.self_attn(self.self_norm(x), bias=self_bias,
                               cache=None if cache is None else cache['self'])
        x = x + self.cross_attn(self.cross_norm(x), memory=memory, bias=memory_bias,
                                cache=None if cache is None else cache['cross'])
        return x + self.moe.mix(self.moe_norm(x))


def _padding_bias(mask):
    return np.where(mask, 0.0, constants.MASK_VALUE)[:, None, None, :]


def _causal_bias(start, count):
    """Bias for ``count`` queries at positions ``start..`` over keys ``0..start+count-1``."""
    q = np.arange(start, start + count)[:, None]
    k = np.arange(start + count)[None, :]
    return np.where(k <= q, 0.0, constants.MASK_VALUE)[None, None]


class GenerativeRecommender(Module):
    def __init__(self, config=None, seed=0):
        config = config or ModelConfig()
        config.validate()
        self._config = config
        rng = rng_stream(seed, 'init')
        d = config.d_model
        self.token_embedding = Embedding(config.vocab_size, d, rng, name='tokens')
        self.placeholder = Parameter(init_normal(rng, (1, d)), name='placeholder')
        self.encoder_positions = Parameter(
            init_normal(rng, (config.max_history * config.codebook_levels, d)),
            name='encoder_positions')
        self.decoder_positions = Parameter(
            init_normal(rng, (config.session_size * (config.codebook_levels + 1), d)),
            name='decoder_positions')
        self.encoder_layers = [EncoderLayer(d, config.num_heads, config.ffn_hidden, rng,
                                            name='encoder%d' % i)
                               for i in range(config.encoder_layers)]
        self.encoder_norm = LayerNorm(d)
        self.decoder_layers = [DecoderLayer(config, rng, name='decoder%d' % i)
                               for i in range(config.decoder_layers)]
        self.decoder_norm = LayerNorm(d)
        self.head = Linear(d, config.vocab_size, rng, name='head')
        self.head.weight.data = init_normal(rng, self.head.weight.shape).astype(
            self.head.weight.data.dtype)

    @property
    def config(self):
        return self._config

    @property
    def moe_layers(self):
        return [layer.moe for layer in self.decoder_layers]

    def gate_usage(self):
        return [moe.usage.tolist() for moe in self.moe_layers]

    def reset_gate_usage(self):
        for moe in self.moe_layers:
            moe.reset_usage()

    # encoder

    def history_tokens(self, history):
        """Flat token ids of the most recent ``max_history`` items."""
        cfg = self._config
        recent = list(history)[-cfg.max_history:] if cfg.max_history else []
        offsets = np.arange(cfg.codebook_levels) * cfg.codebook_size
        tokens = []
        for code in recent:
            if len(code) != cfg.codebook_levels:
                raise ContractError('history item has {} codes, expected {}'.format(
                    len(code), cfg.codebook_levels))
            tokens.extend((np.asarray(code) + offsets).tolist())
        return tokens

    def encode(self, histories):
        """Encode a batch of histories (lists of semantic IDs, most recent last)."""
        rows = [self.history_tokens(h) for h in histories]
        width = max(1, max(len(r) for r in rows))
        tokens = np.zeros((len(rows), width), dtype=np.int64)
        mask = np.zeros((len(rows), width), dtype=bool)
        empty = np.zeros((len(rows), width, 1))
        for b, row in enumerate(rows):
            tokens[b, :len(row)] = row
            mask[b, :len(row)] = True
            if not row:
                mask[b, 0] = True
                empty[b, 0, 0] = 1.0
        x = self.token_embedding(tokens)
        if empty.any():
            x = x * (1.0 - empty) + self.placeholder * empty
        x = x + self.encoder_positions[:width]
        bias = _padding_bias(mask)
        for layer in self.encoder_layers:
            x = layer(x, bias)
        return EncoderOutput(self.encoder_norm(x), bias)

    # decoder

    def decode(self, encoded, tokens, cache=None, start=0):
        """Hidden states for decoder input ``tokens`` [B, T] placed at ``start..``."""
        tokens = np.asarray(tokens, dtype=np.int64)
        count = tokens.shape[1]
        x = self.token_embedding(tokens) + self.decoder_positions[start:start + count]
        self_bias = _causal_bias(start, count)
        for i, layer in enumerate(self.decoder_layers):
            x = layer(x, encoded.states, self_bias, encoded.bias,
                      cache=None if cache is None else cache[i])
        return self.decoder_norm(x)

    def new_cache(self):
        return [{'self': {}, 'cross': {}} for _ in self.decoder_layers]

    def level_logits(self, hidden, level):
        K = self._config.codebook_size
        cols = slice(level * K, (level + 1) * K)
        return hidden @ self.head.weight[:, cols] + self.head.bias[cols]


def build_decoder_tokens(session, K, L):
    """Decoder input, shifted targets and the semantic-target mask of one session."""
    inputs = []
    for code in session:
        if len(code) != L:
            raise ContractError('session item has {} codes, expected {}'.format(len(code), L))
        inputs.append(L * K)
        inputs.extend(j * K + int(c) for j, c in enumerate(code))
    targets = inputs[1:] + [L * K]
    mask = [t != L * K for t in targets]
    return np.array(inputs), np.array(targets), np.array(mask)


def _session_codes(model, sessions):
    cfg = model.config
    codes = np.asarray(sessions, dtype=np.int64)
    if codes.ndim != 3 or codes.shape[1:] != (cfg.session_size, cfg.codebook_levels):
        raise ContractError('sessions must be [B, {}, {}] codes, got shape {}'.format(
            cfg.session_size, cfg.codebook_levels, codes.shape))
    if codes.min() < 0 or codes.max() >= cfg.codebook_size:
        raise IndexError('code outside [0, {})'.format(cfg.codebook_size))
    return codes


def _decoder_hidden(model, histories, codes):
    cfg = model.config
    inputs = np.stack([build_decoder_tokens(s, cfg.codebook_size, cfg.codebook_levels)[0]
                       for s in codes])
    return model.decode(model.encode(histories), inputs)


def level_log_probs(model, histories, sessions):
    """Per level ``j`` the [B, m, K] log-softmax over that level's slice."""
    codes = _session_codes(model, sessions)
    hidden = _decoder_hidden(model, histories, codes)
    L = model.config.codebook_levels
    return codes, [log_softmax(model.level_logits(hidden[:, j::L + 1, :], j), axis=-1)
                   for j in range(L)]


def ntp_loss(model, histories, sessions):
    """Mean cross-entropy over the m * L semantic targets of every session."""
    codes = _session_codes(model, sessions)
    hidden = _decoder_hidden(model, histories, codes)
    K, L = model.config.codebook_size, model.config.codebook_levels
    logits = concatenate([model.level_logits(hidden[:, j::L + 1, :], j).reshape(-1, K)
                          for j in range(L)], axis=0)
    targets = np.concatenate([codes[:, :, j].reshape(-1) for j in range(L)])
    return cross_entropy_from_logits(logits, targets)


def sequence_log_prob(model, histories, sessions):
    """Summed level-slice log-probability of each session, shape [B]."""
    codes, per_level = level_log_probs(model, histories, sessions)
    B, m, _ = codes.shape
    rows = np.arange(B)[:, None]
    cols = np.arange(m)[None, :]
    total = None
    for j, lp in enumerate(per_level):
        picked = lp[rows, cols, codes[:, :, j]].sum(axis=1)
        total = picked if total is None else total + picked
    return total


def example_batch(examples):
    return [e.history for e in examples], [e.session for e in examples]


def ntp_step(model, examples, optimizer):
    with Tape() as tape:
        loss = ntp_loss(model, *example_batch(examples))
    tape.backward(loss)
    optimizer.step()
    return loss.item()


def evaluate_ntp(model, examples, batch_size=constants.DEFAULT_BATCH_SIZE):
    if not examples:
        return None
    total = 0.0
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        total += ntp_loss(model, *example_batch(chunk)).item() * len(chunk)
    return total / len(examples)


def epoch_batches(rng, num_examples, num_samples, batch_size):
    """Minibatch index arrays covering ``num_samples`` draws with replacement."""
    for start in range(0, num_samples, batch_size):
        yield rng.integers(0, num_examples, size=min(batch_size, num_samples - start))


def continue_ntp(model, examples, train_config, num_samples, rng, learning_rate=None):
    """Plain NTP updates over ``num_samples`` examples, batched like IPA."""
    optimizer = Adam(model.parameters(), learning_rate or train_config.learning_rate,
                     train_config.beta1, train_config.beta2, train_config.eps)
    losses = []
    for idx in epoch_batches(rng, len(examples), num_samples, train_config.batch_size):
        losses.append(ntp_step(model, [examples[i] for i in idx], optimizer))
    return losses


def train_seed_model(examples, config=None, train_config=None, steps=None, seed=0,
                     heldout=None, model=None):
    """Minibatch Adam on the NTP loss; zero steps returns the initialisation."""
    train_config = train_config or TrainConfig()
    steps = train_config.steps if steps is None else steps
    model = model or GenerativeRecommender(config, seed=seed)
    if not examples:
        raise ContractError('no training examples')
    rng = rng_stream(seed, 'train')
    optimizer = Adam(model.parameters(), train_config.learning_rate, train_config.beta1,
                     train_config.beta2, train_config.eps)
    held = list(heldout[:4 * train_config.batch_size]) if heldout else None
    model.reset_gate_usage()
    curve = []
    with running_time('Seed model training'):
        for step in range(1, steps + 1):
            idx = rng.integers(0, len(examples), size=min(train_config.batch_size, len(examples)))
            loss = ntp_step(model, [examples[i] for i in idx], optimizer)
            if step % train_config.log_every == 0 or step == steps:
                held_loss = evaluate_ntp(model, held, train_config.batch_size) if held else None
                curve.append(CurvePoint(step, loss, held_loss))
                verbose_print('step {}: train {:.4f} heldout {}'.format(
                    step, loss, 'n/a' if held_loss is None else '{:.4f}'.format(held_loss)))
    return TrainResult(model, curve, model.gate_usage())


def build_examples(logs, item_index):
    """Attach semantic IDs to logged (history, session) pairs."""
    codes = item_index.codes_by_item
    return [Example(log.user_id, list(log.history), [codes[i] for i in log.history],
                    list(log.session), [codes[i] for i in log.session])
            for log in logs]
