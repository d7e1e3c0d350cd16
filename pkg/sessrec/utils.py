import sys
import zlib

import numpy as np

from sessrec import constants


def verbose_print(message):
    if not constants.VERBOSE:
        return
    sys.stderr.write(message + "\n")


def warn(message):
    sys.stderr.write('Warning: ' + message + "\n")


def rng_stream(seed, name):
    """Independent generator for the named substream of a root seed.

    The state is integer-only (PCG64 seeded through a SeedSequence), so streams are
    reproducible across platforms.
    """
    entropy = [int(seed) & 0xffffffff, zlib.crc32(name.encode('utf-8'))]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def mean_or_none(values):
    values = list(values)
    if not values:
        return None
    return float(sum(values) / len(values))


def plain(value):
    """Nested dicts, sequences and numpy values as plain YAML-safe Python objects."""
    if isinstance(value, dict):
        return {str(k): plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [plain(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return value
