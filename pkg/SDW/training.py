""" This module contains classes and functions to train the models of the Sequence-Density-Workbench.

**Description:**

    train_run() executes one experiment config:
        1. seeds torch and builds the datasets and the model (double precision)
        2. runs exactly ``total_updates`` Adam updates on a deterministic batch stream,
           with the cosine learning-rate schedule and, for stochastic families, the
           annealed ELBO (plus the z-forcing auxiliary term when alpha or beta > 0)
        3. validates every ``validate_every`` updates and keeps the best checkpoint
        4. logs every update to metrics.jsonl and the wall-clock time to wallclock.csv
        5. writes the final checkpoint and the EvalReport of the best model

A run is a pure function of (config, seed) on a fixed platform: the metrics log holds
no timestamps and every random draw comes from a generator seeded by the config.

"""

import json
import logging
import math
import os
import subprocess
import time
from dataclasses import asdict, dataclass, fields, replace

import torch
from tqdm import tqdm

from SDW.data_log import MetricsLog, WallClockLog
from SDW.datasets import BatchStream, PrefetchThread
from SDW.errors import ConfigError, NonFiniteError, TrainingAborted
from SDW.evaluation import test_loglik
from SDW.models import build_model, count_parameters, load_checkpoint, save_checkpoint
from SDW.objectives import AUX_GRID, elbo_loss, kl_anneal_coeff, mle_loss, zforcing_aux_loss

logger = logging.getLogger(__name__)

WALLCLOCK_EVERY = 1000


@dataclass
class TrainHyper:
    lr: float = 1e-3                  # base learning rate
    final_lr: float = 1e-6            # learning rate at the last update
    total_updates: int = 1000         # parameter updates, not epochs
    batch_size: int = 32
    kl_start: float = 0.2
    kl_increment: float = 5e-5        # per update
    alpha: float = 0.0                # auxiliary loss, generative path
    beta: float = 0.0                 # auxiliary loss, inference path
    clip: float = 1.0                 # gradient-norm clip (None: off)
    validate_every: int = 500
    n_samples: int = 1                # ELBO draws per step
    prefetch: int = 0                 # background batch queue depth (0: off)
    progress: bool = False            # tqdm progress bar

    def problems(self):
        found = []
        if not (self.lr > 0 and self.final_lr > 0):
            found.append('learning rates must be > 0')
        if not isinstance(self.total_updates, int) or self.total_updates < 1:
            found.append('total_updates must be an integer >= 1')
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            found.append('batch_size must be an integer >= 1')
        if self.alpha < 0 or self.beta < 0:
            found.append('alpha and beta must be >= 0')
        if not 0 <= self.kl_start <= 1 or self.kl_increment < 0:
            found.append('kl_start must lie in [0, 1] and kl_increment be >= 0')
        if self.clip is not None and not self.clip > 0:
            found.append('clip must be > 0 or null')
        if not isinstance(self.validate_every, int) or self.validate_every < 1:
            found.append('validate_every must be an integer >= 1')
        if not isinstance(self.n_samples, int) or self.n_samples < 1:
            found.append('n_samples must be an integer >= 1')
        if not isinstance(self.prefetch, int) or self.prefetch < 0:
            found.append('prefetch must be an integer >= 0')
        return found

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(['unknown train keys %s' % sorted(unknown)])
        return cls(**d)


@dataclass
class RunState:
    """Bookkeeping of one run. ``optimizer`` holds the Adam moment accumulators."""
    name: str = 'run'
    family: str = None
    update: int = 0
    best_score: float = -math.inf
    best_update: int = None
    seconds: float = 0.0
    last_good: str = None
    final_score: float = None
    optimizer: object = None

    @property
    def hours(self):
        return self.seconds / 3600.0

    def advance(self, update, seconds):
        if update < self.update or seconds < 0:
            raise ValueError('run state only moves forward')
        self.update = update
        self.seconds += seconds

    def to_dict(self):
        return {'name': self.name, 'family': self.family, 'update': self.update,
                'best_score': self.best_score if math.isfinite(self.best_score) else None,
                'best_update': self.best_update, 'seconds': self.seconds, 'hours': self.hours,
                'last_good': self.last_good, 'final_score': self.final_score}


# EMBEDDING SCHEDULE AND OPTIMIZER ---------------------------------------------------

def cosine_lr(update, hyper):
    """lr_final + (lr_base - lr_final) * (1 + cos(pi * update / total)) / 2.

    Written as a convex combination so both endpoints are exact. Updates past the
    end are clamped to the final rate.
    """
    u = min(max(int(update), 0), hyper.total_updates)
    w = 0.5 * (1.0 - math.cos(math.pi * u / hyper.total_updates))
    return hyper.final_lr * w + hyper.lr * (1.0 - w)


def make_optimizer(model, hyper):
    """Adam with beta1 = 0.9, beta2 = 0.999, eps = 1e-8."""
    return torch.optim.Adam(model.parameters(), lr=hyper.lr, betas=(0.9, 0.999), eps=1e-8)


def adam_update(optimizer, lr, clip=None):
    """One bias-corrected Adam step at learning rate ``lr`` on the stored gradients.

    Raises NonFiniteError (before touching parameters or moments) when a gradient
    holds NaN or Inf. Returns the gradient norm before clipping (None without clip).
    """
    params = [p for group in optimizer.param_groups for p in group['params'] if p.grad is not None]
    for index, p in enumerate(params):
        if not bool(torch.isfinite(p.grad).all()):
            raise NonFiniteError('non-finite gradient in parameter tensor %d of shape %s'
                                 % (index, tuple(p.shape)))
    norm = None
    if clip is not None:
        norm = float(torch.nn.utils.clip_grad_norm_(params, clip))
    for group in optimizer.param_groups:
        group['lr'] = lr
    optimizer.step()
    return norm


# EMBEDDING OBJECTIVE PER BATCH ------------------------------------------------------

def batch_objective(model, batch, update, hyper, generator=None):
    """ObjectiveBreakdown of one batch (averaged over ``n_samples`` ELBO draws)."""
    x = torch.as_tensor(batch.steps, dtype=torch.float64)
    mask = torch.as_tensor(batch.mask, dtype=torch.float64)
    if not model.stochastic:
        return mle_loss(model(x, mask), x, mask)
    n = hyper.n_samples
    if n > 1:
        x, mask = x.repeat(n, 1, 1), mask.repeat(n, 1)
    result = model(x, mask, mode='posterior', generator=generator)
    aux = None
    if model.cfg.srnn_variant == 'z-forcing':
        aux = zforcing_aux_loss(result.latent, result.latent.backward, hyper.alpha, hyper.beta,
                                model.backbone.aux, mask)
    coeff = kl_anneal_coeff(update, hyper.kl_start, hyper.kl_increment)
    breakdown = elbo_loss(result, x, coeff, mask, aux=aux)
    return breakdown.scaled(1.0 / n) if n > 1 else breakdown


def validation_score(model, data, experiment):
    """Mean per-step log-likelihood (or ELBO) on ``data`` with the evaluation noise seed."""
    report = test_loglik(model, data, 'step-average', bound='elbo' if model.stochastic else 'exact',
                         noise_seed=experiment.eval.noise_seed)
    return report.score


def code_version():
    """Short git revision of the working tree, or 'unknown'."""
    try:
        out = subprocess.run(['git', 'rev-parse', '--short', 'HEAD'], capture_output=True, text=True,
                             cwd=os.path.dirname(os.path.abspath(__file__)), timeout=5)
        return out.stdout.strip() or 'unknown'
    except (OSError, subprocess.SubprocessError):
        return 'unknown'


# EMBEDDING train_run ----------------------------------------------------------------

def _write_json(path, payload):
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write('\n')


def train_run(experiment, run_dir):
    """Trains the model of ``experiment`` (an ExperimentConfig) inside ``run_dir``.

    Returns: RunState

    """
    found = experiment.problems()
    if found:
        raise ConfigError(found)
    hyper = experiment.train
    os.makedirs(run_dir, exist_ok=True)
    torch.manual_seed(experiment.seed)
    bundle = experiment.build_datasets()
    model = build_model(experiment.model, bundle.element_kind)
    optimizer = make_optimizer(model, hyper)
    generator = torch.Generator().manual_seed(experiment.seed)
    logger.info('%s: %s with %d parameters, %d training sequences', experiment.name, model.family,
                count_parameters(model), len(bundle.splits['train']))

    _write_json(os.path.join(run_dir, 'config.json'), experiment.to_dict())
    meta = {'config_hash': experiment.hash(), 'seed': experiment.seed, 'code_version': code_version(),
            'parameter_count': count_parameters(model), 'family': model.family,
            'element_kind': list(bundle.element_kind), 'statistics': bundle.statistics,
            'permutation': bundle.permutation, 'clip': hyper.clip,
            'leak_split': model.emitter.split.to_dict() if model.family == 'DELTA-RNN' else None}
    _write_json(os.path.join(run_dir, 'metadata.json'), meta)

    metrics = MetricsLog(run_dir)
    validation = MetricsLog(run_dir, 'validation.jsonl')
    wallclock = WallClockLog(run_dir)
    state = RunState(name=experiment.name, family=model.family, optimizer=optimizer)
    paths = {name: os.path.join(run_dir, '%s.pt' % name) for name in ('best', 'last', 'final')}
    ckpt_meta = {'config_hash': meta['config_hash'], 'seed': experiment.seed}

    batches = iter(BatchStream(bundle.splits['train'], hyper.batch_size, experiment.seed))
    prefetch = None
    if hyper.prefetch:
        prefetch = PrefetchThread(batches, depth=hyper.prefetch)
        prefetch.start()
        next_batch = prefetch.get
    else:
        next_batch = lambda: next(batches)
    valid = bundle.splits['valid'] or bundle.splits['train']

    try:
        tic = time.perf_counter()
        for u in tqdm(range(hyper.total_updates), disable=not hyper.progress, desc=experiment.name):
            batch = next_batch()
            breakdown = batch_objective(model, batch, u, hyper, generator)
            steps = float(batch.mask.sum())
            loss = -breakdown.total / steps
            if not bool(torch.isfinite(loss)):
                raise TrainingAborted('non-finite loss at update %d' % u, checkpoint=state.last_good)
            optimizer.zero_grad()
            loss.backward()
            lr = cosine_lr(u, hyper)
            try:
                adam_update(optimizer, lr, hyper.clip)
            except NonFiniteError as e:
                raise TrainingAborted('update %d: %s' % (u, e), checkpoint=state.last_good)
            record = breakdown.as_record()
            record.update({'update': u + 1, 'lr': lr, 'loss': loss.item()})
            metrics.append(record)
            toc = time.perf_counter()
            state.advance(u + 1, toc - tic)
            tic = toc

            done = state.update == hyper.total_updates
            if state.update % hyper.validate_every == 0 or done:
                score = validation_score(model, valid, experiment)
                validation.append({'update': state.update, 'score': score})
                save_checkpoint(model, paths['last'], dict(ckpt_meta, update=state.update))
                state.last_good = paths['last']
                if score > state.best_score or state.best_update is None:
                    state.best_score, state.best_update = score, state.update
                    save_checkpoint(model, paths['best'], dict(ckpt_meta, update=state.update, score=score))
            if state.update % WALLCLOCK_EVERY == 0 or done:
                wallclock.log_time(state.update, state.seconds)
            tic = time.perf_counter()
    finally:
        if prefetch is not None:
            prefetch.stop()
        metrics.close()
        validation.close()
        wallclock.close()

    save_checkpoint(model, paths['final'], dict(ckpt_meta, update=state.update))
    best, _ = load_checkpoint(paths['best'])
    test = bundle.splits['test'] or valid
    report = test_loglik(best, test, experiment.eval.convention, bound=experiment.eval.bound,
                         k=experiment.eval.k, noise_seed=experiment.eval.noise_seed,
                         model_id=experiment.name, dataset_id=experiment.dataset.name,
                         expected_convention=experiment.dataset.convention, seed=experiment.seed,
                         train_hours=state.hours)
    report.save(os.path.join(run_dir, 'report.json'))
    state.final_score = report.score
    _write_json(os.path.join(run_dir, 'state.json'), state.to_dict())
    logger.info('%s finished: %d updates in %.2fh, best update %s, %s score %.4f', experiment.name,
                state.update, state.hours, state.best_update, report.bound, report.score)
    return state


def alpha_beta_grid(experiment, values=AUX_GRID):
    """The auxiliary-loss search grid: one config per (alpha, beta) in values x values."""
    grid = []
    for alpha in values:
        for beta in values:
            grid.append(replace(experiment, name='%s-a%g-b%g' % (experiment.name, alpha, beta),
                                train=replace(experiment.train, alpha=alpha, beta=beta)))
    return grid
