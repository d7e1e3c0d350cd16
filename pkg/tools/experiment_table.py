#! /usr/bin/env python
import argparse
from glob import glob
from os import path

from sessrec.data import read_csv, read_yaml
from sessrec.report import (
    CSV_TEMPLATE, HTML_TEMPLATE, XTR_COLUMNS, average_runs, format_table, xtr_lines,
)

EXTRA_COLUMNS = ['rm_score', 'true_value']
SWEEPS = ('scaling', 'rdpo')


def _run_dirs(pattern, fname):
    return [path.dirname(f) for f in sorted(glob(path.join(pattern, fname)))]


def parse_evaluations(pattern):
    """One line per (run directory, model) from every ``evaluation.yml`` found."""
    lines = []
    for run_dir in _run_dirs(pattern, 'evaluation.yml'):
        config = read_yaml(path.join(run_dir, 'config.yml')) or {}
        models = (read_yaml(path.join(run_dir, 'evaluation.yml')) or {}).get('models') or {}
        for line in xtr_lines(models):
            table = models[line['model']]
            for key in EXTRA_COLUMNS:
                line[key] = table.get(key)
            line['run'] = path.basename(run_dir)
            line['seed'] = config.get('seed')
            lines.append(line)
    return lines


def parse_sweep(pattern, name):
    """Rows of ``<name>.csv`` from every run directory, and the sweep's columns."""
    lines, columns = [], None
    for run_dir in _run_dirs(pattern, name + '.csv'):
        header, rows = read_csv(path.join(run_dir, name + '.csv'))
        columns = columns or header
        for row in rows:
            line = {h: float(v) if v != '' else None for h, v in zip(header, row)}
            line['run'] = path.basename(run_dir)
            lines.append(line)
    return lines, columns or []


def main(args):
    if args.table == 'evaluation':
        lines = parse_evaluations(args.path)
        key, columns = 'model', XTR_COLUMNS + EXTRA_COLUMNS
        header = ['run', 'seed', key] + columns
    else:
        lines, sweep_columns = parse_sweep(args.path, args.table)
        if not sweep_columns:
            raise SystemExit('No {} table under {}'.format(args.table, args.path))
        key, columns = sweep_columns[0], sweep_columns[1:]
        header = ['run', key] + columns
    if not lines:
        raise SystemExit('No {} table under {}'.format(args.table, args.path))

    titles = {
        'rm_score': 'RM Score',
        'true_value': 'True Value',
        'heldout_loss': 'Held-out Loss',
    }

    if args.average:
        lines = average_runs(lines, key, columns)
        header = [key, 'runs'] + [c + s for c in columns for s in ('', '_std')]

    format_templates = {
        'html': HTML_TEMPLATE,
        'csv': CSV_TEMPLATE,
    }

    print(format_table(
        header,
        titles,
        sorted(lines, key=lambda x: (x[key], x.get('run') or '')),
        template_file=format_templates[args.format],
    ))


if __name__ == '__main__':
    parser = argparse.ArgumentParser(description='Collect result tables of several runs')
    parser.add_argument('path', help='Glob of run directories, e.g. "runs/seed*"')
    parser.add_argument('-t', '--table', default='evaluation', choices=('evaluation',) + SWEEPS,
                        help='evaluation.yml, scaling.csv or rdpo.csv')
    parser.add_argument('-f', '--format', default='csv', choices=('csv', 'html'),
                        help='Table format')
    parser.add_argument('-a', '--average', action='store_true',
                        help='Mean and std per model (or per sweep value) over the runs')
    args = parser.parse_args()
    main(args)
