"""Run configuration: nested dataclasses read from and echoed to YAML."""
import dataclasses
import hashlib
from dataclasses import dataclass, field

import yaml

from sessrec import constants
from .utils import plain


class ConfigError(ValueError):
    pass


@dataclass
class SimulatorConfig:
    num_items: int = constants.DEFAULT_NUM_ITEMS
    dim: int = constants.DEFAULT_DIM
    num_clusters: int = constants.DEFAULT_NUM_CLUSTERS
    cluster_noise: float = constants.DEFAULT_CLUSTER_NOISE
    num_users: int = constants.DEFAULT_NUM_USERS
    history_length: int = constants.DEFAULT_HISTORY_LENGTH
    sessions_per_user: int = constants.DEFAULT_SESSIONS_PER_USER
    policy: str = constants.LOGGING_POLICIES[0]
    quality_filter: bool = True
    preference_noise: float = constants.PREFERENCE_NOISE
    history_temperature: float = constants.HISTORY_TEMPERATURE
    logging_temperature: float = constants.LOGGING_TEMPERATURE
    base_watch_time: float = constants.BASE_WATCH_TIME
    watch_slope: float = constants.WATCH_SLOPE
    watch_offset: float = constants.WATCH_OFFSET
    time_slope: float = constants.TIME_SLOPE
    like_slope: float = constants.LIKE_SLOPE
    like_offset: float = constants.LIKE_OFFSET
    follow_slope: float = constants.FOLLOW_SLOPE
    follow_offset: float = constants.FOLLOW_OFFSET
    min_effective_watches: int = constants.MIN_EFFECTIVE_WATCHES
    swt_threshold_fraction: float = constants.SWT_THRESHOLD_FRACTION
    value_weights: tuple = constants.DEFAULT_VALUE_WEIGHTS

    def validate(self):
        if self.num_items < self.num_clusters:
            raise ConfigError('num_items ({}) < num_clusters ({})'.format(
                self.num_items, self.num_clusters))
        if self.history_length < 0:
            raise ConfigError('history_length must be >= 0')
        if self.policy not in constants.LOGGING_POLICIES:
            raise ConfigError('Unknown logging policy: {}. Options: {}'.format(
                self.policy, ', '.join(constants.LOGGING_POLICIES)))
        if len(self.value_weights) != len(constants.TARGETS):
            raise ConfigError('value_weights needs {} entries'.format(len(constants.TARGETS)))


@dataclass
class TokenizerConfig:
    K: int = constants.DEFAULT_K
    L: int = constants.DEFAULT_L
    max_iters: int = constants.KMEANS_MAX_ITERS

    def validate(self):
        if self.K < 1 or self.L < 1:
            raise ConfigError('K and L must be positive, got K={} L={}'.format(self.K, self.L))


@dataclass
class ModelConfig:
    d_model: int = constants.DEFAULT_D_MODEL
    encoder_layers: int = constants.DEFAULT_ENCODER_LAYERS
    decoder_layers: int = constants.DEFAULT_DECODER_LAYERS
    num_heads: int = constants.DEFAULT_HEADS
    ffn_hidden: int = constants.DEFAULT_FFN_HIDDEN
    n_moe: int = constants.DEFAULT_N_MOE
    k_moe: int = constants.DEFAULT_K_MOE
    max_history: int = constants.DEFAULT_MAX_HISTORY
    session_size: int = constants.DEFAULT_SESSION_SIZE
    codebook_size: int = constants.DEFAULT_K
    codebook_levels: int = constants.DEFAULT_L

    @property
    def vocab_size(self):
        # every level owns K tokens, plus one BOS
        return self.codebook_levels * self.codebook_size + 1

    @property
    def bos(self):
        return self.codebook_levels * self.codebook_size

    def validate(self):
        if not 1 <= self.k_moe <= self.n_moe:
            raise ConfigError('k_moe must be in [1, n_moe={}], got {}'.format(
                self.n_moe, self.k_moe))
        if self.d_model % self.num_heads:
            raise ConfigError('d_model ({}) is not divisible by num_heads ({})'.format(
                self.d_model, self.num_heads))
        if self.session_size < 1 or self.max_history < 1:
            raise ConfigError('session_size and max_history must be positive')


@dataclass
class TrainConfig:
    steps: int = constants.DEFAULT_TRAIN_STEPS
    batch_size: int = constants.DEFAULT_BATCH_SIZE
    learning_rate: float = constants.ADAM_LEARNING_RATE
    beta1: float = constants.ADAM_BETA1
    beta2: float = constants.ADAM_BETA2
    eps: float = constants.ADAM_EPS
    log_every: int = constants.DEFAULT_LOG_EVERY
    holdout_fraction: float = constants.DEFAULT_HOLDOUT_FRACTION
    scaling_widths: tuple = constants.SCALING_SWEEP

    def validate(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError('steps must be >= 0 and batch_size >= 1')
        if not 0 <= self.holdout_fraction < 1:
            raise ConfigError('holdout_fraction must be in [0, 1)')
        if not self.scaling_widths or min(self.scaling_widths) < 1:
            raise ConfigError('scaling_widths needs at least one positive width')


@dataclass
class RewardConfig:
    dim: int = constants.DEFAULT_RM_DIM
    tower_hidden: int = constants.DEFAULT_RM_TOWER_HIDDEN
    steps: int = constants.DEFAULT_RM_STEPS
    batch_size: int = constants.DEFAULT_RM_BATCH_SIZE
    learning_rate: float = constants.DEFAULT_RM_LEARNING_RATE
    target_weights: tuple = constants.DEFAULT_TARGET_WEIGHTS

    def validate(self):
        if len(self.target_weights) != len(constants.TARGETS):
            raise ConfigError('target_weights needs {} entries'.format(len(constants.TARGETS)))
        if min(self.target_weights) < 0 or sum(self.target_weights) <= 0:
            raise ConfigError('target_weights must be non-negative with a positive sum')


@dataclass
class IPAConfig:
    responses: int = constants.DEFAULT_RESPONSES
    r_dpo: float = constants.DEFAULT_R_DPO
    beta: float = constants.DEFAULT_BETA
    lam: float = constants.DEFAULT_LAMBDA
    epochs: int = constants.DEFAULT_EPOCHS
    samples_per_epoch: int = constants.DEFAULT_SAMPLES_PER_EPOCH
    learning_rate: float = constants.DEFAULT_IPA_LEARNING_RATE
    sampling: str = constants.SAMPLING_MODES[0]
    temperature: float = constants.DEFAULT_SAMPLING_TEMPERATURE
    kv_cache: bool = False
    dump_pairs: bool = True
    rdpo_sweep: tuple = constants.RDPO_SWEEP

    def validate(self):
        if self.responses < 2:
            raise ConfigError('responses must be >= 2, got {}'.format(self.responses))
        if not 0.0 <= self.r_dpo <= 1.0:
            raise ConfigError('r_dpo must be in [0, 1], got {}'.format(self.r_dpo))
        if not self.rdpo_sweep or not all(0.0 <= r <= 1.0 for r in self.rdpo_sweep):
            raise ConfigError('rdpo_sweep needs ratios in [0, 1], got {}'.format(
                list(self.rdpo_sweep)))
        if self.beta <= 0:
            raise ConfigError('beta must be positive, got {}'.format(self.beta))
        if self.sampling not in constants.SAMPLING_MODES:
            raise ConfigError('Unknown sampling mode: {}. Options: {}'.format(
                self.sampling, ', '.join(constants.SAMPLING_MODES)))


@dataclass
class EvalConfig:
    users: int = constants.DEFAULT_EVAL_USERS
    top_n: int = constants.DEFAULT_TOP_N
    beam_size: int = constants.DEFAULT_BEAM_SIZE
    kv_cache: bool = False

    def validate(self):
        if self.top_n < 1 or self.beam_size < self.top_n:
            raise ConfigError('Need 1 <= top_n <= beam_size, got top_n={} beam_size={}'.format(
                self.top_n, self.beam_size))


SECTIONS = (
    ('simulator', SimulatorConfig),
    ('tokenizer', TokenizerConfig),
    ('model', ModelConfig),
    ('train', TrainConfig),
    ('reward', RewardConfig),
    ('ipa', IPAConfig),
    ('eval', EvalConfig),
)
SCALARS = ('seed', 'out', 'threads', 'precision')


@dataclass
class RunConfig:
    seed: int = 0
    out: str = 'run'
    threads: int = 1
    precision: str = constants.DEFAULT_PRECISION
    simulator: SimulatorConfig = field(default_factory=SimulatorConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    ipa: IPAConfig = field(default_factory=IPAConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def resolve(self):
        """Copy the tokenizer shape into the model section and validate every section."""
        self.model.codebook_size = self.tokenizer.K
        self.model.codebook_levels = self.tokenizer.L
        for name, _ in SECTIONS:
            getattr(self, name).validate()
        if self.precision not in ('32', '64'):
            raise ConfigError('precision must be 32 or 64, got {}'.format(self.precision))
        return self

    def to_dict(self):
        return plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        unknown = set(data) - set(SCALARS) - {name for name, _ in SECTIONS}
        if unknown:
            raise ConfigError('Unknown config keys: {}'.format(', '.join(sorted(unknown))))
        kwargs = {k: data[k] for k in SCALARS if k in data}
        if 'precision' in kwargs:
            kwargs['precision'] = str(kwargs['precision'])
        for name, section in SECTIONS:
            kwargs[name] = _section(section, name, data.get(name))
        return cls(**kwargs)

    @classmethod
    def preset(cls, name):
        if name == 'desk':
            return cls()
        if name == 'large':
            return cls.from_dict(constants.LARGE_DEFAULTS)
        raise ConfigError('Unknown preset: {}. Options: desk, large'.format(name))

    def update(self, overrides):
        """Apply a partial mapping on top of this config."""
        merged = self.to_dict()
        for key, value in (overrides or {}).items():
            if isinstance(value, dict) and isinstance(merged.get(key), dict):
                merged[key].update(value)
            else:
                merged[key] = value
        return RunConfig.from_dict(merged)


def _section(section, name, values):
    values = dict(values or {})
    known = {f.name: f for f in dataclasses.fields(section)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError('Unknown keys in {} section: {}'.format(
            name, ', '.join(sorted(unknown))))
    for key, value in values.items():
        if isinstance(value, list):
            values[key] = tuple(value)
    try:
        return section(**values)
    except TypeError as e:
        raise ConfigError('Invalid {} section: {}'.format(name, e))


def load_config(fname, base=None):
    with open(fname) as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ConfigError('{}: top level must be a mapping'.format(fname))
    if base is None:
        return RunConfig.from_dict(data)
    return base.update(data)


def dump_config(config, fname):
    with open(fname, 'w') as f:
        yaml.dump(config.to_dict(), f, indent=4, default_flow_style=False)


def config_hash(model_config):
    canonical = yaml.dump(plain(dataclasses.asdict(model_config)), default_flow_style=False,
                          sort_keys=True)
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()
