import math

VERBOSE = True
PLOT_LOG_SCALE = False
DEBUG_NUMERICS = False
FORMAT_VERSION = 1

# numerics
DEFAULT_PRECISION = '64'
ADAM_LEARNING_RATE = 2e-4
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
FD_STEP = 1e-5
FD_FLOOR = 1e-4
LAYER_NORM_EPS = 1e-5
INIT_SCALE = 0.02

# tokenizer
DEFAULT_K = 64
DEFAULT_L = 3
KMEANS_MAX_ITERS = 100

# simulator
DEFAULT_NUM_ITEMS = 5000
DEFAULT_DIM = 32
DEFAULT_NUM_CLUSTERS = 64
DEFAULT_CLUSTER_NOISE = 0.3
DEFAULT_NUM_USERS = 2000
DEFAULT_HISTORY_LENGTH = 32
DEFAULT_SESSIONS_PER_USER = 4
PREFERENCE_NOISE = 0.5
HISTORY_TEMPERATURE = 0.2
LOGGING_TEMPERATURE = 0.1
BASE_WATCH_TIME = 1.0
WATCH_SLOPE = 4.0
WATCH_OFFSET = 0.0
TIME_SLOPE = 1.0
LIKE_SLOPE = 4.0
LIKE_OFFSET = math.log(0.1 / 0.9)
FOLLOW_SLOPE = 4.0
FOLLOW_OFFSET = math.log(0.02 / 0.98)
MIN_EFFECTIVE_WATCHES = 5
SWT_THRESHOLD_FRACTION = 0.5
DEFAULT_VALUE_WEIGHTS = (0.25, 0.25, 0.25, 0.25)
LOGGING_POLICIES = ('affinity-greedy', 'random')

# genmodel
DEFAULT_SESSION_SIZE = 5
DEFAULT_MAX_HISTORY = 32
DEFAULT_D_MODEL = 64
DEFAULT_ENCODER_LAYERS = 2
DEFAULT_DECODER_LAYERS = 2
DEFAULT_HEADS = 4
DEFAULT_FFN_HIDDEN = 128
DEFAULT_N_MOE = 8
DEFAULT_K_MOE = 2
DEFAULT_BATCH_SIZE = 32
DEFAULT_TRAIN_STEPS = 10000
DEFAULT_LOG_EVERY = 100
DEFAULT_HOLDOUT_FRACTION = 0.1
MASK_VALUE = -1e9

# reward
DEFAULT_RM_DIM = 32
DEFAULT_RM_TOWER_HIDDEN = 32
DEFAULT_RM_STEPS = 3000
TARGETS = ('swt', 'vtr', 'wtr', 'ltr')
DEFAULT_TARGET_WEIGHTS = (0.25, 0.25, 0.25, 0.25)
DEFAULT_RM_BATCH_SIZE = 64
DEFAULT_RM_LEARNING_RATE = 1e-3

# align
DEFAULT_RESPONSES = 16
DEFAULT_R_DPO = 0.05
DEFAULT_BETA = 0.1
DEFAULT_LAMBDA = 1.0
DEFAULT_EPOCHS = 3
DEFAULT_SAMPLES_PER_EPOCH = 4096
DEFAULT_IPA_LEARNING_RATE = 1e-4
DEFAULT_SAMPLING_TEMPERATURE = 1.0
SAMPLING_MODES = ('beam', 'temperature')
RDPO_SWEEP = (0.01, 0.02, 0.05, 0.1)
SCALING_SWEEP = (32, 64, 128)

# evaluation
DEFAULT_EVAL_USERS = 500
DEFAULT_TOP_N = 16
DEFAULT_BEAM_SIZE = 16

LARGE_DEFAULTS = {
    'tokenizer': {'K': 8192, 'L': 3},
    'model': {'n_moe': 24, 'k_moe': 2, 'session_size': 5, 'max_history': 256},
    'train': {'learning_rate': 2e-4},
    'ipa': {'responses': 128, 'r_dpo': 0.01},
    'eval': {'beam_size': 128},
}

try:
    from multiprocessing import cpu_count

    DEFAULT_THREAD_COUNT = cpu_count()
except NotImplementedError:
    DEFAULT_THREAD_COUNT = 2
