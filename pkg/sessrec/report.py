"""Metric tables and curve series of a run directory."""
from collections import OrderedDict, namedtuple
from glob import glob
from os import path

import matplotlib
import matplotlib.pyplot as plt
import numpy as np
import pystache

from sessrec import constants
from .data import read_csv, read_yaml, write_yaml
from .utils import verbose_print

TEMPLATES = path.join(path.dirname(__file__), 'templates')
CSV_TEMPLATE = path.join(TEMPLATES, 'csv.tpl')
HTML_TEMPLATE = path.join(TEMPLATES, 'html.tpl')
XTR_COLUMNS = ['{}_{}'.format(t, s) for t in constants.TARGETS for s in ('mean', 'max')]

MetricsReport = namedtuple('MetricsReport', ('table', 'oracle', 'curves', 'entropy', 'timings'))


def format_table(header, titles, lines, template_file, round_floats=4):
    def format_val(val):
        if round_floats and type(val) is float:
            val = round(val, round_floats)
        return val

    data = {
        'header': [
            {'value': format_val(titles.get(h, h)), 'first': i == 0, 'last': i == len(header) - 1}
            for i, h in enumerate(header)
        ],
        'body': [
            {'line': [
                {'value': format_val(line.get(k)), 'first': i == 0, 'last': i == len(header) - 1}
                for i, k in enumerate(header)
            ]} for line in lines
        ],
    }
    with open(template_file) as f:
        return pystache.render(f.read(), data)


def xtr_lines(models):
    lines = []
    for name, table in models.items():
        line = OrderedDict([('model', name)])
        for target in constants.TARGETS:
            for stat in ('mean', 'max'):
                line['{}_{}'.format(target, stat)] = float(table[target][stat])
        lines.append(line)
    return lines


def average_runs(lines, key='model', columns=None):
    """Mean and sample std (``<column>_std``) of each numeric column per ``key`` value.

    Runs missing a column are left out of that column; a single run has std 0.
    """
    groups = OrderedDict()
    for line in lines:
        groups.setdefault(line[key], []).append(line)
    averaged = []
    for name, runs in groups.items():
        out = OrderedDict([(key, name), ('runs', len(runs))])
        for column in columns or [c for c in runs[0] if c != key]:
            values = np.array([r[column] for r in runs if _is_number(r.get(column))], dtype=float)
            if not len(values):
                continue
            out[column] = float(values.mean())
            out[column + '_std'] = float(values.std(ddof=1)) if len(values) > 1 else 0.0
        averaged.append(out)
    return averaged


def _is_number(value):
    return isinstance(value, (int, float, np.number)) and not isinstance(value, bool)


def write_table(fname_base, header, lines, titles=None):
    titles = titles or {}
    with open(fname_base + '.csv', 'w') as f:
        f.write(format_table(header, titles, lines, CSV_TEMPLATE))
    with open(fname_base + '.html', 'w') as f:
        f.write(format_table(header, titles, lines, HTML_TEMPLATE))


def _csv_series(fname):
    header, rows = read_csv(fname)
    return OrderedDict((h, [r[i] for r in rows]) for i, h in enumerate(header))


def report_metrics(run_dir, plot=False):
    """Render ``xtr_table.csv``/``.html`` and ``metrics_report.yml`` from evaluation artifacts.

    Curves are the ``*_curve.csv`` series already in ``run_dir``; rerunning gives the
    same files.
    """
    evaluation = read_yaml(path.join(run_dir, 'evaluation.yml'), 'evaluate') or {}
    models = evaluation.get('models') or {}
    if not models:
        raise ValueError('Empty evaluation set in {}; nothing to report.'.format(run_dir))
    lines = xtr_lines(models)
    write_table(path.join(run_dir, 'xtr_table'), ['model'] + XTR_COLUMNS, lines)
    oracle = OrderedDict(
        (name, OrderedDict((k, table.get(k)) for k in ('rm_score', 'true_value', 'users')))
        for name, table in models.items())
    curves = sorted(path.basename(f) for f in glob(path.join(run_dir, '*_curve.csv')))
    entropy = None
    if path.exists(path.join(run_dir, 'entropy.csv')):
        entropy = _csv_series(path.join(run_dir, 'entropy.csv'))
    timings = None
    if path.exists(path.join(run_dir, 'timings.csv')):
        timings = _csv_series(path.join(run_dir, 'timings.csv'))
    pairs = None
    if path.exists(path.join(run_dir, 'ipa_metrics.csv')):
        pairs = _csv_series(path.join(run_dir, 'ipa_metrics.csv'))
    write_yaml({
        'columns': ['model'] + XTR_COLUMNS,
        'table': lines,
        'oracle': oracle,
        'curves': curves,
        'entropy': entropy,
        'ipa': pairs,
        'timings': timings,
    }, path.join(run_dir, 'metrics_report.yml'))
    verbose_print('Report written to {}'.format(run_dir))
    if plot:
        plot_curves(run_dir)
    return MetricsReport(lines, oracle, curves, entropy, timings)


def plot_curves(run_dir, log_scale=constants.PLOT_LOG_SCALE):
    """Save one PNG per loss curve next to its CSV."""
    matplotlib.use('Agg')
    for fname in sorted(glob(path.join(run_dir, '*_curve.csv'))):
        series = _csv_series(fname)
        keys = list(series)
        steps = [float(v) for v in series[keys[0]]]
        plt.figure()
        if log_scale:
            plt.yscale('log')
        for key in keys[1:]:
            points = [(s, float(v)) for s, v in zip(steps, series[key]) if v != '']
            if points:
                plt.plot([p[0] for p in points], [p[1] for p in points], label=key)
        plt.xlabel(keys[0])
        plt.legend()
        plt.savefig(fname[:-len('.csv')] + '.png')
        plt.close()
