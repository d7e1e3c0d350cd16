#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
test_cli
----------------------------------

End-to-end runs of the command line on a toy configuration.
"""
import os
import shutil
import tempfile
import unittest

from sessrec.config import RunConfig, dump_config
from sessrec.data import load_generation, read_csv, read_yaml
from sessrec.sessrec import (
    EXIT_INTEGRITY, EXIT_MISSING, EXIT_USAGE, build_parser, resolve_config, run,
)

TOY_CONFIG = """\
simulator:
    num_items: 60
    dim: 8
    num_clusters: 4
    num_users: 20
    history_length: 4
    sessions_per_user: 2
    quality_filter: false
tokenizer:
    K: 4
    L: 2
    max_iters: 10
model:
    d_model: 16
    encoder_layers: 1
    decoder_layers: 1
    num_heads: 2
    ffn_hidden: 16
    n_moe: 4
    k_moe: 2
    max_history: 4
    session_size: 2
train:
    steps: 2
    batch_size: 4
    log_every: 1
    holdout_fraction: 0.25
    scaling_widths: [8, 16]
reward:
    dim: 8
    tower_hidden: 8
    steps: 2
    batch_size: 8
ipa:
    responses: 4
    r_dpo: 0.5
    epochs: 1
    samples_per_epoch: 8
    rdpo_sweep: [0.0, 0.5]
eval:
    users: 3
    top_n: 2
    beam_size: 4
"""


class TestCommandLine(unittest.TestCase):
    def setUp(self):
        self.dir = tempfile.mkdtemp()
        self.out = os.path.join(self.dir, 'run')
        self.config = os.path.join(self.dir, 'toy.yml')
        with open(self.config, 'w') as f:
            f.write(TOY_CONFIG)

    def tearDown(self):
        shutil.rmtree(self.dir)

    def sessrec(self, *argv):
        return run(list(argv) + ['--out', self.out, '--config', self.config, '--quiet',
                                 '--seed', '11'])

    def path(self, name):
        return os.path.join(self.out, name)

    def test_unknown_command(self):
        with self.assertRaises(SystemExit) as ctx:
            build_parser().parse_args(['bogus'])
        self.assertEqual(ctx.exception.code, EXIT_USAGE)

    def test_missing_prerequisite(self):
        self.assertEqual(self.sessrec('fit-tokenizer'), EXIT_MISSING)
        self.assertEqual(self.sessrec('train-seed'), EXIT_MISSING)

    def test_bad_config(self):
        with open(self.config, 'a') as f:
            f.write('unknown_section: 1\n')
        self.assertEqual(self.sessrec('simulate'), EXIT_USAGE)

    def test_explicit_preset_wins_over_run_config(self):
        os.makedirs(self.out)
        dump_config(RunConfig(seed=5), self.path('config.yml'))
        parser = build_parser()
        continued = resolve_config(parser.parse_args(['simulate', '--out', self.out]))
        self.assertEqual(continued.seed, 5)
        self.assertEqual(continued.tokenizer.K, RunConfig().tokenizer.K)
        replaced = resolve_config(parser.parse_args(['simulate', '--out', self.out,
                                                     '--preset', 'large']))
        self.assertEqual(replaced.seed, 0)
        self.assertEqual(replaced.tokenizer.K, 8192)

    def test_sweeps(self):
        for command in ('simulate', 'fit-tokenizer', 'train-seed', 'train-rm',
                        'sweep-scaling', 'sweep-rdpo'):
            self.assertEqual(self.sessrec(command), 0, command)
        header, rows = read_csv(self.path('scaling.csv'))
        self.assertEqual(header, ['d_model', 'parameters', 'heldout_loss'])
        self.assertEqual([int(r[0]) for r in rows], [8, 16])
        self.assertLess(int(rows[0][1]), int(rows[1][1]))
        header, rows = read_csv(self.path('rdpo.csv'))
        self.assertEqual(header[0], 'r_dpo')
        self.assertEqual([float(r[0]) for r in rows], [0.0, 0.5])
        self.assertTrue(all(len(r) == len(header) for r in rows))

    def test_pipeline(self):
        for command in ('simulate', 'fit-tokenizer', 'train-seed', 'train-rm', 'align-ipa',
                        'evaluate', 'entropy-report', 'generate', 'score', 'report'):
            self.assertEqual(self.sessrec(command), 0, command)
        for name in ('config.yml', 'catalog.tsv', 'users.tsv', 'logs.tsv', 'codebook.npz',
                     'tokenizer_report.yml', 'seed_model.npz', 'seed_curve.csv',
                     'reward_model.npz', 'rm_curve.csv', 'aligned_model.npz', 'ipa_metrics.csv',
                     'evaluation.yml', 'xtr_table.csv', 'xtr_table.html', 'metrics_report.yml',
                     'entropy.csv', 'generation_scored.tsv', 'timings.csv'):
            self.assertTrue(os.path.exists(self.path(name)), name)
        evaluation = read_yaml(self.path('evaluation.yml'))
        self.assertEqual(sorted(evaluation['models']), ['aligned', 'seed'])
        self.assertEqual(read_yaml(self.path('config.yml'))['seed'], 11)
        records = load_generation(self.path('generation_scored.tsv'))
        self.assertTrue(records)
        self.assertTrue(all(r.score is not None for r in records))

        with open(self.path('seed_model.npz'), 'wb') as f:
            f.write(b'corrupted')
        self.assertEqual(self.sessrec('evaluate'), EXIT_INTEGRITY)


if __name__ == '__main__':
    import sys
    sys.exit(unittest.main())
