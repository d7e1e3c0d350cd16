"""Toy-sized objects shared by the test modules."""
import itertools

import numpy as np

from sessrec.config import ModelConfig, RewardConfig, SimulatorConfig
from sessrec.model import Example, GenerativeRecommender
from sessrec.reward import RewardModel
from sessrec.simulator import generate_catalog, generate_training_logs, generate_users
from sessrec.tokenizer import ItemIndex


def toy_model_config(K=8, L=2, m=2, **overrides):
    values = dict(d_model=16, encoder_layers=2, decoder_layers=2, num_heads=2, ffn_hidden=16,
                  n_moe=4, k_moe=2, max_history=4, session_size=m, codebook_size=K,
                  codebook_levels=L)
    values.update(overrides)
    return ModelConfig(**values)


def toy_model(seed=0, **kwargs):
    return GenerativeRecommender(toy_model_config(**kwargs), seed=seed)


def full_index(K, L):
    """Index with one item per possible semantic ID."""
    codes = list(itertools.product(range(K), repeat=L))
    return ItemIndex(list(range(len(codes))), codes, L)


def random_examples(count, K=8, L=2, m=2, max_history=4, seed=0):
    rng = np.random.default_rng(seed)
    examples = []
    for i in range(count):
        n = int(rng.integers(0, max_history + 1))
        history = [tuple(int(c) for c in rng.integers(0, K, size=L)) for _ in range(n)]
        session = [tuple(int(c) for c in rng.integers(0, K, size=L)) for _ in range(m)]
        examples.append(Example(i, list(range(n)), history, list(range(m)), session))
    return examples


def toy_simulation(seed=0, num_items=80, dim=8, clusters=4, users=24, history=4, sessions=3,
                   session_size=3, quality_filter=False):
    config = SimulatorConfig(num_items=num_items, dim=dim, num_clusters=clusters,
                             num_users=users, history_length=history)
    catalog = generate_catalog(num_items, dim, clusters, seed)
    people = generate_users(catalog, users, history, seed, config)
    logs = generate_training_logs(catalog, people, sessions, 'random', seed, session_size,
                                  quality_filter, config)
    return catalog, people, logs


def toy_reward_model(item_dim=8, seed=0, **overrides):
    values = dict(dim=8, tower_hidden=8, steps=10, batch_size=8, learning_rate=1e-2)
    values.update(overrides)
    return RewardModel(item_dim, RewardConfig(**values), seed=seed)
