import csv
from collections import OrderedDict, namedtuple
from os import path

import numpy as np
import yaml

from sessrec import __version__, constants
from .numerics import IntegrityError, load_container, precision_name, save_container
from .simulator import InteractionLog, SessionLabels, SyntheticCatalog, SyntheticUser
from .tokenizer import Codebook, CodebookStack
from .utils import plain, verbose_print

GenerationRecord = namedtuple(
    'GenerationRecord', ('user_id', 'rank', 'session', 'items', 'log_prob', 'score'))

class InvalidFormatException(Exception):
    def __init__(self, fname, detail=None):
        self.fname = fname
        self.detail = detail

    def __str__(self):
        msg = 'Unable to parse %s. Unsupported format.' % self.fname
        if self.detail:
            msg += ' (%s)' % self.detail
        return msg


class MissingArtifactError(FileNotFoundError):
    def __init__(self, fname, producer=None):
        super().__init__(fname)
        self.fname = fname
        self.producer = producer

    def __str__(self):
        msg = 'Missing required file %s.' % self.fname
        if self.producer:
            msg += ' Run "sessrec %s" first.' % self.producer
        return msg


def require(fname, producer=None):
    if not path.exists(fname):
        raise MissingArtifactError(fname, producer)
    return fname


# delimited text

def _floats(values):
    return ','.join(repr(float(v)) for v in values)


def _ints(values):
    return ','.join(str(int(v)) for v in values)


def _parse_floats(text):
    return [float(v) for v in text.split(',')] if text else []


def _parse_ints(text):
    return [int(v) for v in text.split(',')] if text else []


def _write_table(fname, kind, rows, meta=None):
    with open(fname, 'w') as f:
        f.write('#format:{}\n'.format(kind))
        f.write('#version:{}\n'.format(constants.FORMAT_VERSION))
        f.write('#tool:sessrec {}\n'.format(__version__))
        for k, v in (meta or {}).items():
            f.write('#{}:{}\n'.format(k, v))
        for row in rows:
            f.write('\t'.join(row) + '\n')


def _read_table(fname, kind):
    meta = OrderedDict()
    rows = []
    with open(require(fname)) as f:
        for line in f:
            if line[0] == '#':
                k, _, v = line[1:].strip().partition(':')
                meta[k] = v
            elif line.strip():
                rows.append(line.rstrip('\n').split('\t'))
    if meta.get('format') != kind:
        raise InvalidFormatException(fname, 'expected a {} file'.format(kind))
    if meta.get('version') != str(constants.FORMAT_VERSION):
        raise InvalidFormatException(fname, 'unsupported version {}'.format(meta.get('version')))
    return rows, meta


def save_catalog(catalog, fname):
    meta = OrderedDict([('dim', catalog.dim), ('seed', catalog.seed),
                        ('noise', repr(catalog.noise))])
    for k, center in enumerate(catalog.centers):
        meta['center_%d' % k] = _floats(center)
    rows = ([str(i), str(label), _floats(e)]
            for i, label, e in zip(catalog.item_ids, catalog.labels, catalog.embeddings))
    _write_table(fname, 'catalog', rows, meta)


def load_catalog(fname):
    rows, meta = _read_table(fname, 'catalog')
    try:
        centers = [_parse_floats(meta['center_%d' % k])
                   for k in range(sum(1 for key in meta if key.startswith('center_')))]
        ids = [int(r[0]) for r in rows]
        labels = [int(r[1]) for r in rows]
        embeddings = [_parse_floats(r[2]) for r in rows]
        if ids != list(range(len(ids))):
            raise InvalidFormatException(fname, 'item ids must be 0..n-1 in order')
        return SyntheticCatalog(embeddings, labels, centers, seed=int(meta['seed']),
                                noise=float(meta['noise']))
    except (KeyError, IndexError, ValueError) as e:
        raise InvalidFormatException(fname, e)


def save_users(users, fname):
    rows = ([str(u.user_id), _floats(u.weights), _floats(u.preference), _ints(u.history)]
            for u in users)
    _write_table(fname, 'users', rows, {'targets': ','.join(constants.TARGETS)})


def load_users(fname):
    rows, _ = _read_table(fname, 'users')
    try:
        return [SyntheticUser(int(r[0]), _parse_floats(r[2]), _parse_floats(r[1]),
                              _parse_ints(r[3]) if len(r) > 3 else [])
                for r in rows]
    except (IndexError, ValueError) as e:
        raise InvalidFormatException(fname, e)


def save_logs(logs, fname, meta=None):
    rows = ([str(log.user_id), _ints(log.history), _ints(log.session), _ints(log.labels),
             _floats(log.watch_times)]
            for log in logs)
    _write_table(fname, 'logs', rows, meta)


def load_logs(fname):
    rows, _ = _read_table(fname, 'logs')
    try:
        return [InteractionLog(int(r[0]), _parse_ints(r[1]), _parse_ints(r[2]),
                               SessionLabels(*_parse_ints(r[3])), np.array(_parse_floats(r[4])))
                for r in rows]
    except (IndexError, ValueError, TypeError) as e:
        raise InvalidFormatException(fname, e)


def _codes(session):
    return '|'.join('-'.join(str(c) for c in code) for code in session)


def _parse_codes(text):
    return [tuple(int(c) for c in code.split('-')) for code in text.split('|')]


def save_generation(records, fname):
    rows = ([str(r.user_id), str(r.rank), _codes(r.session), _ints(r.items), repr(r.log_prob),
             '' if r.score is None else repr(r.score)]
            for r in records)
    _write_table(fname, 'generation', rows)


def load_generation(fname):
    rows, _ = _read_table(fname, 'generation')
    try:
        return [GenerationRecord(int(r[0]), int(r[1]), _parse_codes(r[2]), _parse_ints(r[3]),
                                 float(r[4]), float(r[5]) if len(r) > 5 and r[5] else None)
                for r in rows]
    except (IndexError, ValueError) as e:
        raise InvalidFormatException(fname, e)


def save_pairs(pairs, fname):
    rows = ([str(p.user_id), _ints(p.history_items), _codes(p.winner), _codes(p.loser),
             repr(p.winner_reward), repr(p.loser_reward)]
            for p in pairs)
    _write_table(fname, 'pairs', rows)


# binary artifacts

def save_codebook(stack, fname):
    arrays = OrderedDict(('level_%d' % cb.level, cb.centroids) for cb in stack.levels)
    header = {'kind': 'codebook', 'K': stack.K, 'L': stack.L, 'd': stack.d, 'seed': stack.seed,
              'report': stack.report}
    save_container(fname, arrays, header)


def load_codebook(fname):
    arrays, header = load_container(require(fname, 'fit-tokenizer'))
    if header.get('kind') != 'codebook':
        raise InvalidFormatException(fname, 'not a codebook')
    levels = [Codebook(level, arrays['level_%d' % level]) for level in range(1, header['L'] + 1)]
    return CodebookStack(levels, seed=header['seed'], report=header.get('report'))


def save_checkpoint(model, fname, config_hash, kind='model', extra=None):
    header = {'kind': kind, 'config_hash': config_hash, 'precision': precision_name(),
              'tool': 'sessrec %s' % __version__}
    header.update(extra or {})
    return save_container(fname, model.state_dict(), header)


def load_checkpoint(model, fname, config_hash=None, force=False, producer=None):
    """Load parameters into ``model``; a config-hash mismatch fails unless ``force``."""
    arrays, header = load_container(require(fname, producer))
    if config_hash is not None and header.get('config_hash') != config_hash:
        if not force:
            raise IntegrityError(fname, 'config hash {} does not match {}'.format(
                header.get('config_hash'), config_hash))
        verbose_print('Loading {} despite config hash mismatch (forced).'.format(fname))
    model.load_state_dict(arrays)
    return header


# summaries

def write_yaml(data, fname):
    with open(fname, 'w') as f:
        yaml.dump(plain(data), f, indent=4, default_flow_style=False)


def read_yaml(fname, producer=None):
    with open(require(fname, producer)) as f:
        return yaml.safe_load(f)


def print_output(data, silent=False):
    data = plain(data)
    if not silent:
        print(yaml.dump(data, indent=4, default_flow_style=False))
    return data


def write_csv(fname, header, rows):
    with open(fname, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow(['' if v is None else v for v in row])


def read_csv(fname, producer=None):
    with open(require(fname, producer), newline='') as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise InvalidFormatException(fname, 'empty file')
        return header, [row for row in reader]
