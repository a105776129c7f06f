""" This module contains the command line front end of the Sequence-Density-Workbench.

**Description:**

    The control class ties the package together. Every subcommand reads one JSON
    experiment config (see SDW.config) and writes its results below the output root
    (environment variable SDW_OUTPUT_ROOT, default ``runs``).
    The main functions implemented are:
        1. cmd_synth()   generate a synthetic dataset and its manifest
        2. cmd_train()   train one model (checkpoints, logs, report of the best model)
        3. cmd_eval()    score a trained run on a split
        4. cmd_table()   render reports as comparison tables
        5. cmd_oracle()  run the verification oracles
        6. cmd_sweep()   write (and optionally run) the alpha/beta grid

Exit codes: 0 success, 1 other workbench error, 2 config error, 3 training aborted,
4 oracle failure.

"""

import argparse
import glob
import json
import logging
import os
import shutil
import subprocess
import sys

from SDW.config import ExperimentConfig, load_config, output_root as default_output_root, save_config
from SDW.data_log import plot_metrics
from SDW.datasets import split_dataset, synth_generate, write_manifest
from SDW.errors import (ConfigError, ModelError, NonFiniteError, OracleFailure, TrainingAborted,
                        WorkbenchError)
from SDW.evaluation import EvalReport, results_table, runtime_report, test_loglik
from SDW.models import load_checkpoint
from SDW.oracle import run_oracle_suite
from SDW.training import RunState, alpha_beta_grid, train_run

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_ABORTED = 3
EXIT_ORACLE = 4


# EMBEDDING ExperimentControl CLASS --------------------------------------------------

class ExperimentControl(object):
    """This class implements the subcommands of the workbench """

    def __init__(self, output_root=None):
        ''' Constructor for this class. '''
        self.__output_root = output_root or default_output_root()  # run-directory root
        self.__checkpoint = 'best.pt'                    # checkpoint scored by eval

    @property
    def output_root(self):
        return self.__output_root

    def cmd_synth(self, cfg, out_dir=None, force=False):
        """Writes the synthetic dataset of ``cfg`` with its train/valid/test manifest.

        Args:
            cfg: ExperimentConfig with a synthetic dataset section.
            out_dir: target directory. Default: <output root>/data/<dataset name>.
            force: overwrite an existing directory.
        Returns: path of the manifest.

        """
        if cfg.dataset.source != 'synthetic':
            raise ConfigError(['synth needs a synthetic dataset section, got source %r' % cfg.dataset.source])
        out_dir = out_dir or os.path.join(self.__output_root, 'data', cfg.dataset.name)
        if os.path.isdir(out_dir) and os.listdir(out_dir):
            if not force:
                raise WorkbenchError('%s exists; use --force to overwrite' % out_dir)
            shutil.rmtree(out_dir)
        os.makedirs(out_dir, exist_ok=True)
        spec = cfg.synthetic_spec()
        splits = split_dataset(synth_generate(spec), tuple(cfg.dataset.split), cfg.seed)
        path = write_manifest(out_dir, splits, meta={'synthetic': spec.to_dict(), 'seed': cfg.seed,
                                                     'split': list(cfg.dataset.split)})
        logger.info('synthetic dataset written to %s', out_dir)
        return path

    def cmd_train(self, cfg, run_dir=None, plot=False):
        """Runs train_run; returns (run directory, RunState)."""
        run_dir = run_dir or os.path.join(self.__output_root, cfg.name)
        state = train_run(cfg, run_dir)
        if plot:
            plot_metrics(os.path.join(run_dir, 'metrics.jsonl'),
                         validation=os.path.join(run_dir, 'validation.jsonl'))
        return run_dir, state

    def cmd_eval(self, run_dir, split='test', convention=None, bound=None, k=None, noise_seed=None, csv=False):
        """Scores the best checkpoint of ``run_dir`` on ``split`` and writes the report."""
        path = os.path.join(run_dir, self.__checkpoint)
        if not os.path.isfile(path):
            raise ModelError('missing checkpoint %s' % path)
        with open(os.path.join(run_dir, 'config.json'), encoding='utf-8') as f:
            cfg = ExperimentConfig.from_dict(json.load(f))
        model, _ = load_checkpoint(path)
        data = cfg.build_datasets().splits[split]
        if k is not None and bound is None:
            bound = 'multi-sample'
        bound = bound or cfg.eval.bound
        k = k or cfg.eval.k
        convention = convention or cfg.eval.convention
        state = self._load_state(run_dir)
        report = test_loglik(model, data, convention, bound=bound, k=k,
                             noise_seed=cfg.eval.noise_seed if noise_seed is None else noise_seed,
                             model_id=cfg.name, dataset_id='%s/%s' % (cfg.dataset.name, split),
                             expected_convention=cfg.dataset.convention, seed=cfg.seed,
                             train_hours=state.hours if state else None)
        stem = os.path.join(run_dir, 'eval-%s-%s' % (split, report.bound.replace('(', '').replace(')', '')))
        report.save(stem + '.json')
        if csv:
            with open(stem + '.csv', 'w', encoding='utf-8') as f:
                f.write(results_table([report]).to_csv())
        print('%s on %s: %s %s = %.4f nats' % (report.model_id, report.dataset_id, report.bound,
                                               report.convention, report.score))
        return report

    def cmd_table(self, patterns, csv=False, out_dir='.', runtime=False, references=False):
        """Renders every report matching ``patterns`` (files or globs) as one table."""
        files = sorted({p for pattern in patterns for p in glob.glob(pattern)})
        if not files:
            raise WorkbenchError('no reports match %s' % ' '.join(patterns))
        if runtime:
            runs = [s for s in (self._load_state(os.path.dirname(p)) for p in files) if s is not None]
            table = runtime_report(runs, references=references)
        else:
            table = results_table([EvalReport.load(p) for p in files])
        print(table.to_text())
        if csv:
            path = os.path.join(out_dir, 'runtime.csv' if runtime else 'table.csv')
            with open(path, 'w', encoding='utf-8') as f:
                f.write(table.to_csv())
            logger.info('table written to %s', path)
        return table

    def cmd_oracle(self, seed=0, out=None):
        """Runs the oracle suite; raises OracleFailure when a check fails."""
        summary = run_oracle_suite(seed)
        text = json.dumps(summary.to_dict(), indent=2, sort_keys=True, default=float)
        if out:
            with open(out, 'w', encoding='utf-8') as f:
                f.write(text + '\n')
        print(text)
        if not summary.passed:
            failed = [c['name'] for c in summary.checks if not c['passed']]
            raise OracleFailure('oracle checks failed: %s' % ', '.join(failed))
        return summary

    def cmd_sweep(self, cfg, out_dir=None, run=False):
        """Writes one config per alpha/beta cell; with ``run`` trains each in its own process."""
        out_dir = out_dir or os.path.join(self.__output_root, 'sweeps', cfg.name)
        os.makedirs(out_dir, exist_ok=True)
        paths = [save_config(cell, os.path.join(out_dir, '%s.json' % cell.name)) for cell in alpha_beta_grid(cfg)]
        if run:
            for path in paths:
                logger.info('launching %s', path)
                subprocess.run([sys.executable, '-m', 'SDW.control', 'train', '--config', path], check=True)
        return paths

    def _load_state(self, run_dir):
        path = os.path.join(run_dir, 'state.json')
        if not os.path.isfile(path):
            return None
        with open(path, encoding='utf-8') as f:
            d = json.load(f)
        return RunState(name=d['name'], family=d['family'], update=d['update'], seconds=d['seconds'],
                        final_score=d.get('final_score'))


# EMBEDDING main ---------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog='SequenceWorkbench',
                                     description='Density estimation workbench for multivariate sequences.')
    parser.add_argument('--verbose', '-v', action='count', default=0, help='-v info, -vv debug')
    sub = parser.add_subparsers(dest='command', required=True)

    synth = sub.add_parser('synth', help='generate a synthetic dataset')
    synth.add_argument('--config', required=True)
    synth.add_argument('--seed', type=int)
    synth.add_argument('--out')
    synth.add_argument('--force', action='store_true')

    train = sub.add_parser('train', help='train one model')
    train.add_argument('--config', required=True)
    train.add_argument('--seed', type=int)
    train.add_argument('--out', help='run directory')
    train.add_argument('--plot', action='store_true')

    evaluate = sub.add_parser('eval', help='score a trained run')
    evaluate.add_argument('run_dir')
    evaluate.add_argument('--split', default='test', choices=('train', 'valid', 'test'))
    evaluate.add_argument('--convention', choices=('sequence-average', 'frame-average', 'step-average'))
    evaluate.add_argument('--bound', choices=('exact', 'elbo', 'multi-sample'))
    evaluate.add_argument('--k', type=int)
    evaluate.add_argument('--seed', type=int, help='noise seed')
    evaluate.add_argument('--csv', action='store_true')

    table = sub.add_parser('table', help='render reports as a table')
    table.add_argument('reports', nargs='+', help='report files or globs')
    table.add_argument('--csv', action='store_true')
    table.add_argument('--out', default='.')
    table.add_argument('--runtime', action='store_true', help='training-time table from state.json')
    table.add_argument('--references', action='store_true', help='append published timings')

    oracle = sub.add_parser('oracle', help='run the verification oracles')
    oracle.add_argument('--seed', type=int, default=0)
    oracle.add_argument('--out')

    sweep = sub.add_parser('sweep', help='alpha/beta grid of a config')
    sweep.add_argument('--config', required=True)
    sweep.add_argument('--seed', type=int)
    sweep.add_argument('--out')
    sweep.add_argument('--run', action='store_true')
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format='%(asctime)s %(name)s %(levelname)s: %(message)s')
    control = ExperimentControl()
    try:
        if args.command == 'synth':
            control.cmd_synth(load_config(args.config, args.seed), args.out, args.force)
        elif args.command == 'train':
            control.cmd_train(load_config(args.config, args.seed), args.out, args.plot)
        elif args.command == 'eval':
            control.cmd_eval(args.run_dir, args.split, args.convention, args.bound, args.k, args.seed, args.csv)
        elif args.command == 'table':
            control.cmd_table(args.reports, args.csv, args.out, args.runtime, args.references)
        elif args.command == 'oracle':
            control.cmd_oracle(args.seed, args.out)
        elif args.command == 'sweep':
            control.cmd_sweep(load_config(args.config, args.seed), args.out, args.run)
    except ConfigError as e:
        logger.error('%s', e)
        print(str(e), file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAborted, NonFiniteError) as e:
        checkpoint = getattr(e, 'checkpoint', None)
        print('ERROR training aborted: %s (last good checkpoint: %s)' % (e, checkpoint), file=sys.stderr)
        return EXIT_ABORTED
    except OracleFailure as e:
        print('ERROR %s' % e, file=sys.stderr)
        return EXIT_ORACLE
    except WorkbenchError as e:
        print('ERROR %s' % e, file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
