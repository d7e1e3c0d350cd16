import argparse
import copy
import math
import sys
from os import makedirs, path

import numpy as np

from sessrec import version_string

from . import constants, perf
from .align import EPOCH_METRICS, evaluate_xtr, ipa_train
from .beam import (
    beam_search_session, check_entropy_ordering, prediction_entropy_report, report_duplicates,
)
from .config import ConfigError, RunConfig, config_hash, dump_config, load_config
from .data import (
    GenerationRecord, IntegrityError, InvalidFormatException, MissingArtifactError, load_catalog,
    load_checkpoint, load_codebook, load_generation, load_logs, load_users, print_output,
    read_csv, require, save_catalog, save_checkpoint, save_codebook, save_generation, save_logs,
    save_pairs, save_users, write_csv, write_yaml,
)
from .model import GenerativeRecommender, build_examples, evaluate_ntp, train_seed_model
from .numerics import set_precision
from .perf import running_time, running_time_decorator
from .report import report_metrics
from .reward import RewardModel, reward_batch, train_reward_model
from .simulator import (
    generate_catalog, generate_training_logs, generate_users, label_rates, true_session_value,
)
from .tokenizer import build_item_index, cluster_purity, fit_residual_stack
from .utils import rng_stream, verbose_print

EXIT_USAGE = 1
EXIT_MISSING = 2
EXIT_INTEGRITY = 3

COMMANDS = (
    'simulate', 'fit-tokenizer', 'train-seed', 'train-rm', 'align-ipa', 'evaluate',
    'entropy-report', 'sweep-scaling', 'sweep-rdpo', 'generate', 'score', 'report',
)


class RunDirectory:
    """Artifacts of one run directory, loaded on demand with their producing command."""

    def __init__(self, out, config):
        self.out = out
        self.config = config
        self._cache = {}

    def path(self, name):
        return path.join(self.out, name)

    def _load(self, key, loader):
        if key not in self._cache:
            self._cache[key] = loader()
        return self._cache[key]

    def catalog(self):
        return self._load('catalog', lambda: load_catalog(
            require(self.path('catalog.tsv'), 'simulate')))

    def users(self):
        return self._load('users', lambda: load_users(require(self.path('users.tsv'), 'simulate')))

    def logs(self):
        return self._load('logs', lambda: load_logs(require(self.path('logs.tsv'), 'simulate')))

    def codebook(self):
        return self._load('codebook', lambda: load_codebook(self.path('codebook.npz')))

    def item_index(self):
        return self._load('index', lambda: build_item_index(
            self.catalog().item_ids, self.catalog().embeddings, self.codebook()))

    def split(self):
        """Held-out user ids: a seeded share of all users, also the evaluation sample."""
        def compute():
            ids = [u.user_id for u in self.users()]
            order = rng_stream(self.config.seed, 'eval').permutation(len(ids))
            count = int(round(len(ids) * self.config.train.holdout_fraction))
            return [ids[i] for i in order[:count]]
        return self._load('split', compute)

    def log_split(self):
        heldout = set(self.split())
        logs = self.logs()
        return ([log for log in logs if log.user_id not in heldout],
                [log for log in logs if log.user_id in heldout])

    def examples(self):
        def compute():
            train, held = self.log_split()
            index = self.item_index()
            return build_examples(train, index), build_examples(held, index)
        return self._load('examples', compute)

    def eval_users(self):
        by_id = {u.user_id: u for u in self.users()}
        ids = self.split() or sorted(by_id)
        return [by_id[i] for i in ids[:self.config.eval.users]]

    def model_hash(self):
        return config_hash(self.config.model)

    def generator(self, name, force=False):
        model = GenerativeRecommender(copy.deepcopy(self.config.model), seed=self.config.seed)
        producer = 'train-seed' if name == 'seed_model' else 'align-ipa'
        load_checkpoint(model, self.path(name + '.npz'), self.model_hash(), force, producer)
        return model

    def reward_model(self, force=False):
        rm = RewardModel(self.catalog().dim, self.config.reward, seed=self.config.seed)
        load_checkpoint(rm, self.path('reward_model.npz'), config_hash(self.config.reward), force,
                        'train-rm')
        return rm


def simulate(run, args):
    cfg = run.config
    sim = cfg.simulator
    catalog = generate_catalog(sim.num_items, sim.dim, sim.num_clusters, cfg.seed,
                               sim.cluster_noise)
    users = generate_users(catalog, sim.num_users, sim.history_length, cfg.seed, sim)
    logs = generate_training_logs(catalog, users, sim.sessions_per_user, sim.policy, cfg.seed,
                                  cfg.model.session_size, sim.quality_filter, sim)
    save_catalog(catalog, run.path('catalog.tsv'))
    save_users(users, run.path('users.tsv'))
    save_logs(logs, run.path('logs.tsv'), {'policy': sim.policy, 'seed': cfg.seed})
    return {'items': len(catalog), 'users': len(users), 'logs': len(logs),
            'label_rates': label_rates(logs)}


def fit_tokenizer(run, args):
    cfg = run.config
    catalog = run.catalog()
    stack = fit_residual_stack(catalog.items, cfg.tokenizer.K, cfg.tokenizer.L, cfg.seed,
                               cfg.tokenizer.max_iters)
    save_codebook(stack, run.path('codebook.npz'))
    index = build_item_index(catalog.item_ids, catalog.embeddings, stack)
    codes = np.array([index.codes_by_item[i] for i in catalog.item_ids])
    report = {
        'K': stack.K, 'L': stack.L,
        'residual_norms': stack.report['residual_norms'],
        'iterations': stack.report['iterations'],
        'converged': stack.report['converged'],
        'min_cluster_size': [min(s) for s in stack.report['cluster_sizes']],
        'max_cluster_size': [max(s) for s in stack.report['cluster_sizes']],
        'collisions': index.collision_report(),
        'level1_purity': cluster_purity(codes[:, 0], catalog.labels),
    }
    write_yaml(report, run.path('tokenizer_report.yml'))
    return report


def train_seed(run, args):
    cfg = run.config
    train, heldout = run.examples()
    result = train_seed_model(train, copy.deepcopy(cfg.model), cfg.train, args.steps, cfg.seed,
                              heldout)
    save_checkpoint(result.model, run.path('seed_model.npz'), run.model_hash(), 'seed_model')
    write_csv(run.path('seed_curve.csv'), ['step', 'train_loss', 'heldout_loss'], result.curve)
    heldout_loss = evaluate_ntp(result.model, heldout, cfg.train.batch_size)
    return {'heldout_loss': heldout_loss, 'uniform_loss': math.log(cfg.tokenizer.K),
            'train_examples': len(train), 'heldout_examples': len(heldout),
            'gate_usage': result.gate_usage}


def train_rm(run, args):
    cfg = run.config
    catalog = run.catalog()
    train_logs, heldout_logs = run.log_split()
    users = {u.user_id: u for u in run.users()}
    values = [true_session_value(catalog, users[log.user_id], log.session, cfg.simulator)
              for log in heldout_logs]
    rm, report = train_reward_model(catalog.embeddings, train_logs, cfg.reward, args.steps,
                                    cfg.seed, heldout_logs, values)
    save_checkpoint(rm, run.path('reward_model.npz'), config_hash(cfg.reward), 'reward_model')
    write_csv(run.path('rm_curve.csv'), ['step', 'train_loss'], enumerate(report.curve, 1))
    summary = {'auc': report.auc, 'spearman': report.spearman}
    write_yaml(summary, run.path('rm_report.yml'))
    return summary


def _align(run, model, rm, ipa_config):
    cfg = run.config
    train, _ = run.examples()
    return ipa_train(model, rm, train, run.catalog().embeddings, run.item_index(), ipa_config,
                     cfg.train, cfg.seed)


def align_ipa(run, args):
    model = run.generator('seed_model', args.force)
    rm = run.reward_model(args.force)
    result = _align(run, model, rm, run.config.ipa)
    save_checkpoint(model, run.path('aligned_model.npz'), run.model_hash(), 'aligned_model')
    write_csv(run.path('ipa_metrics.csv'), EPOCH_METRICS,
              ([row[k] for k in EPOCH_METRICS] for row in result.metrics))
    if run.config.ipa.dump_pairs:
        save_pairs(result.pairs, run.path('pairs.tsv'))
    return {'epochs': result.metrics}


def _evaluate(run, model, rm):
    cfg = run.config
    return evaluate_xtr(model, rm, run.eval_users(), run.catalog(), run.item_index(), cfg.eval,
                        cfg.simulator, cfg.threads)


def evaluate(run, args):
    rm = run.reward_model(args.force)
    models = {'seed': _evaluate(run, run.generator('seed_model', args.force), rm)}
    if path.exists(run.path('aligned_model.npz')):
        models['aligned'] = _evaluate(run, run.generator('aligned_model', args.force), rm)
    evaluation = {'models': models, 'top_n': run.config.eval.top_n,
                  'beam_size': run.config.eval.beam_size}
    write_yaml(evaluation, run.path('evaluation.yml'))
    report_metrics(run.out, plot=args.plot)
    return evaluation


def entropy_report(run, args):
    model = run.generator(args.model, args.force)
    index = run.item_index()
    histories = [[index.codes_by_item[i] for i in u.history] for u in run.eval_users()]
    entropies = prediction_entropy_report(model, histories, index)
    write_csv(run.path('entropy.csv'), ['level', 'entropy'], enumerate(entropies, 1))
    return {'entropy': entropies, 'non_increasing': check_entropy_ordering(entropies)}


def sweep_scaling(run, args):
    cfg = run.config
    train, heldout = run.examples()
    rows = []
    for d_model in cfg.train.scaling_widths:
        model_config = copy.deepcopy(cfg.model)
        model_config.d_model = d_model
        model_config.ffn_hidden = 2 * d_model
        with running_time('Scaling run d_model=%d' % d_model):
            result = train_seed_model(train, model_config, cfg.train, args.steps, cfg.seed,
                                      heldout)
        rows.append([d_model, result.model.num_parameters(),
                     evaluate_ntp(result.model, heldout, cfg.train.batch_size)])
    write_csv(run.path('scaling.csv'), ['d_model', 'parameters', 'heldout_loss'], rows)
    return {'scaling': rows}


def sweep_rdpo(run, args):
    rm = run.reward_model(args.force)
    seed_model = run.generator('seed_model', args.force)
    header = ['r_dpo'] + ['{}_mean'.format(t) for t in constants.TARGETS] + [
        'rm_score', 'true_value']
    rows = []
    for ratio in run.config.ipa.rdpo_sweep:
        model = copy.deepcopy(seed_model)
        ipa_config = copy.deepcopy(run.config.ipa)
        ipa_config.r_dpo = ratio
        with running_time('IPA run r_dpo=%g' % ratio):
            _align(run, model, rm, ipa_config)
        table = _evaluate(run, model, rm)
        rows.append([ratio] + [table[t]['mean'] for t in constants.TARGETS] +
                    [table['rm_score'], table['true_value']])
    write_csv(run.path('rdpo.csv'), header, rows)
    return {'rdpo': rows}


def generate(run, args):
    model = run.generator(args.model, args.force)
    index = run.item_index()
    records = []
    for user in run.eval_users():
        history = [index.codes_by_item[i] for i in user.history]
        result = beam_search_session(model, history, run.config.eval.beam_size, index,
                                     use_cache=run.config.eval.kv_cache)
        hypotheses = result.hypotheses[:run.config.eval.top_n]
        report_duplicates(hypotheses, user.user_id)
        for rank, h in enumerate(hypotheses, 1):
            records.append(GenerationRecord(user.user_id, rank, h.session,
                                            [index.resolve(c) for c in h.session], h.log_prob,
                                            None))
    save_generation(records, run.path('generation.tsv'))
    return {'records': len(records)}


def score(run, args):
    rm = run.reward_model(args.force)
    embeddings = run.catalog().embeddings
    users = {u.user_id: u for u in run.users()}
    records = load_generation(require(run.path('generation.tsv'), 'generate'))
    scored = []
    for r in records:
        value = rm.score(reward_batch(embeddings, [users[r.user_id].history], [r.items]))[0]
        scored.append(r._replace(score=float(value)))
    save_generation(scored, run.path('generation_scored.tsv'))
    return {'records': len(scored)}


def report(run, args):
    result = report_metrics(run.out, plot=args.plot)
    return {'table': result.table, 'oracle': result.oracle}


HANDLERS = {
    'simulate': simulate,
    'fit-tokenizer': fit_tokenizer,
    'train-seed': train_seed,
    'train-rm': train_rm,
    'align-ipa': align_ipa,
    'evaluate': evaluate,
    'entropy-report': entropy_report,
    'sweep-scaling': sweep_scaling,
    'sweep-rdpo': sweep_rdpo,
    'generate': generate,
    'score': score,
    'report': report,
}


def resolve_config(args):
    """Preset (or the run's echoed ``config.yml``), then ``--config``, then the flags.

    An explicit ``--preset`` wins over the echoed config of an existing run directory.
    """
    config = RunConfig.preset(args.preset or 'desk')
    echoed = path.join(args.out or config.out, 'config.yml')
    if path.exists(echoed):
        if args.preset:
            verbose_print('Preset {} replaces the config of {}.'.format(args.preset, echoed))
        else:
            verbose_print('Continuing with {}.'.format(echoed))
            config = load_config(echoed)
    if args.config:
        config = load_config(args.config, base=config)
    overrides = {k: getattr(args, k) for k in ('seed', 'out', 'threads')
                 if getattr(args, k) is not None}
    return config.update(overrides).resolve()


def _save_timings(run, command):
    fname = run.path('timings.csv')
    rows = read_csv(fname)[1] if path.exists(fname) else []
    rows = [r for r in rows if r[0] != command]
    rows.extend([command, label, seconds] for label, seconds in perf.timings.items())
    write_csv(fname, ['command', 'label', 'seconds'], rows)


@running_time_decorator
def main(args):
    if args.quiet:
        constants.VERBOSE = False
    perf.timings.clear()
    config = resolve_config(args)
    set_precision(config.precision)
    makedirs(config.out, exist_ok=True)
    run = RunDirectory(config.out, config)
    dump_config(config, run.path('config.yml'))
    verbose_print('Running {} in {} (seed {}).'.format(args.command, config.out, config.seed))
    with running_time(args.command):
        result = HANDLERS[args.command](run, args)
    _save_timings(run, args.command)
    print_output(result, silent=args.quiet)
    return result


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write('%s: error: %s\n' % (self.prog, message))
        sys.exit(EXIT_USAGE)


def build_parser():
    parser = ArgumentParser(description='Session-wise generative recommendation with preference '
                                        'alignment on a simulated environment.')
    parser.add_argument('-v', '--version', action='version', version=version_string,
                        help='Print version and exit.')
    parser.add_argument('command', choices=COMMANDS, help='Pipeline step to run.')
    parser.add_argument('-s', '--seed', type=int, help='Root seed of every random stream.')
    parser.add_argument('-c', '--config', type=str, help='YAML config applied over the preset.')
    parser.add_argument('-o', '--out', type=str, help='Run directory.')
    parser.add_argument('-T', '--threads', type=int,
                        help='Parallel evaluation workers (1 runs inline, max {}).'.format(
                            constants.DEFAULT_THREAD_COUNT))
    parser.add_argument('-f', '--force', action='store_true',
                        help='Load checkpoints despite a config hash mismatch.')
    parser.add_argument('-q', '--quiet', action='store_true', help='No progress output.')
    parser.add_argument('-p', '--preset', choices=('desk', 'large'),
                        help='Default scale before --config is applied (desk unless '
                             'the run directory already has a config.yml).')
    parser.add_argument('--steps', type=int, help='Override training steps.')
    parser.add_argument('-m', '--model', choices=('seed_model', 'aligned_model'),
                        default='seed_model', help='Generator used by generate/entropy-report.')
    parser.add_argument('--plot', action='store_true', help='Plot loss curves to PNG.')
    return parser


def run(argv=None):
    args = build_parser().parse_args(argv)
    try:
        main(args)
    except MissingArtifactError as e:
        sys.stderr.write('Error: %s\n' % e)
        return EXIT_MISSING
    except IntegrityError as e:
        sys.stderr.write('Error: %s\n' % e)
        return EXIT_INTEGRITY
    except (ConfigError, InvalidFormatException) as e:
        sys.stderr.write('Error: %s\n' % e)
        return EXIT_USAGE
    return 0


if __name__ == '__main__':
    sys.exit(run())
