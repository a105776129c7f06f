""" This module contains classes and functions to score trained models on held-out data and to
render the comparison tables.

**Description:**

    Scores are log-likelihoods in nats under one of three reporting conventions:
        1. sequence-average   mean over sequences of the total sequence log-probability
        2. frame-average      total log-probability / total number of frames
        3. step-average       total log-probability / total number of steps
    Every score carries its bound kind: ``exact`` for the deterministic families,
    ``elbo`` (closed-form KL, fixed noise seed) or ``multi-sample(k)`` for the
    stochastic ones. Tables mark bound cells with a leading ">=".

"""

import csv
import io
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import torch

from SDW.distributions import diag_gauss_logpdf
from SDW.errors import ModelError, ReportError
from SDW.models import FAMILIES, as_batch, count_parameters
from SDW.objectives import elbo_loss, mle_loss

logger = logging.getLogger(__name__)

CONVENTIONS = ('sequence-average', 'frame-average', 'step-average')
DEFAULT_K = 64
BOUND_MARKER = '≥ '
BOUND_KINDS = ('exact', 'elbo', 'multi-sample')


# EMBEDDING EvalReport CLASS ---------------------------------------------------------

@dataclass
class EvalReport:
    model_id: str
    dataset_id: str
    convention: str
    score: float
    bound: str                       # exact | elbo | multi-sample(k)
    parameter_count: int = 0
    train_hours: float = None
    seed: int = 0
    family: str = None
    total: float = None
    n_sequences: int = 0
    n_steps: int = 0
    n_frames: int = 0
    convention_flagged: bool = False

    def __post_init__(self):
        if self.convention not in CONVENTIONS:
            raise ReportError('unknown convention %r' % (self.convention,))
        if not math.isfinite(self.score):
            raise ReportError('%s on %s: score is not finite' % (self.model_id, self.dataset_id))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def save(self, path):
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write('\n')
        return path

    @classmethod
    def load(cls, path):
        with open(path, encoding='utf-8') as f:
            return cls.from_dict(json.load(f))


def log_mean_exp(values, dim=0):
    """log(mean(exp(values))) along ``dim`` without overflow."""
    values = torch.as_tensor(values, dtype=torch.float64)
    return torch.logsumexp(values, dim=dim) - math.log(values.shape[dim])


def aggregate(totals, n_frames, n_steps, convention):
    """Reduces per-sequence totals under a reporting convention (exactly rounded sums)."""
    if convention not in CONVENTIONS:
        raise ReportError('unknown convention %r' % (convention,))
    total = math.fsum(totals)
    if convention == 'sequence-average':
        return total / len(totals)
    if convention == 'frame-average':
        return total / n_frames
    return total / n_steps


# EMBEDDING SCORING ------------------------------------------------------------------

def multi_sample_bound(model, seq, k, generator=None, noise=None):
    """log (1/k) sum_j p(x, z_j) / q(z_j | x) over k posterior draws of the whole latent path.

    k = 1 is the single-draw ELBO with the sampled KL (elbo_loss(analytic_kl=False))
    under the same noise.
    """
    if not model.stochastic:
        raise ModelError('multi_sample_bound needs a stochastic family, got %s' % model.family)
    if not isinstance(k, int) or k < 1:
        raise ModelError('k must be an integer >= 1, got %r' % (k,))
    x = as_batch(seq)
    if x.shape[0] != 1:
        raise ModelError('multi_sample_bound scores one sequence at a time')
    xk = x.expand(k, -1, -1).contiguous()
    with torch.no_grad():
        result = model(xk, mode='posterior', noise=noise, generator=generator)
        latent = result.latent
        log_w = (result.step_logprob(xk).sum(1)
                 + diag_gauss_logpdf(latent.prior, latent.z).sum(1)
                 - diag_gauss_logpdf(latent.posterior, latent.z).sum(1))
    return float(log_mean_exp(log_w, 0))


def sequence_logprob(model, seq, bound='exact', k=DEFAULT_K, noise_seed=0):
    """Total log-probability (or bound) of one sequence, in nats."""
    x = as_batch(seq)
    if bound == 'exact':
        with torch.no_grad():
            return float(mle_loss(model(x), x).total)
    generator = torch.Generator().manual_seed(int(noise_seed))
    if bound == 'elbo':
        with torch.no_grad():
            return float(elbo_loss(model(x, mode='posterior', generator=generator), x, 1.0).total)
    return multi_sample_bound(model, x, k, generator=generator)


def parse_bound(bound, k=DEFAULT_K):
    """'multi-sample(16)' -> ('multi-sample', 16); other kinds keep ``k``."""
    if bound is None:
        return None, k
    if bound.startswith('multi-sample(') and bound.endswith(')'):
        return 'multi-sample', int(bound[len('multi-sample('):-1])
    if bound not in BOUND_KINDS:
        raise ReportError('bound must be one of %s, got %r' % (BOUND_KINDS, bound))
    return bound, k


def resolve_bound(model, bound, k=DEFAULT_K):
    """exact for deterministic families; elbo or multi-sample(k) for stochastic ones."""
    bound, k = parse_bound(bound, k)
    if not model.stochastic:
        if bound not in (None, 'exact'):
            logger.warning('%s is deterministic: scoring the exact likelihood instead of %s', model.family, bound)
        return 'exact'
    if bound in (None, 'elbo'):
        return 'elbo'
    if bound == 'exact':
        raise ModelError('%s has no exact likelihood; declare elbo or multi-sample' % model.family)
    return 'multi-sample(%d)' % k


def test_loglik(model, data, convention, bound=None, k=DEFAULT_K, noise_seed=0, model_id=None,
                dataset_id='test', expected_convention=None, seed=0, train_hours=None):
    """Scores every sequence of ``data`` and reduces under ``convention``.

    Sequences are scored one at a time with the same noise seed, so the score does not
    depend on batch size or order.

    Args:
        model: SequenceModel.
        data: list of StepSequence (width-1 sequences for the flat families).
        convention: sequence-average | frame-average | step-average.
        bound: None/exact/elbo/multi-sample; stochastic families default to elbo.
        expected_convention: the dataset's customary convention; a mismatch is logged
            and flagged on the report, not refused.

    Returns: EvalReport

    """
    if convention not in CONVENTIONS:
        raise ReportError('unknown convention %r' % (convention,))
    if not data:
        raise ReportError('cannot score an empty dataset')
    kind = resolve_bound(model, bound, k)
    _, k = parse_bound(kind, k)
    flagged = expected_convention is not None and expected_convention != convention
    if flagged:
        logger.warning('%s: scoring with %s, the dataset convention is %s', dataset_id, convention,
                       expected_convention)
    was_training = model.training
    model.eval()
    totals = [sequence_logprob(model, seq, kind.split('(')[0], k, noise_seed) for seq in data]
    model.train(was_training)
    n_frames = sum(seq.T * seq.L for seq in data)
    n_steps = n_frames // model.frames_per_step if model.cfg.flat else sum(seq.T for seq in data)
    return EvalReport(model_id or model.family, dataset_id, convention,
                      aggregate(totals, n_frames, n_steps, convention), kind,
                      count_parameters(model), train_hours, seed, model.family, math.fsum(totals),
                      len(data), int(n_steps), int(n_frames), flagged)


test_loglik.__test__ = False


# EMBEDDING TABLES -------------------------------------------------------------------

def _family_rank(name):
    base = (name or '').split(' ')[0]
    return FAMILIES.index(base) if base in FAMILIES else len(FAMILIES)


@dataclass
class ResultsTable:
    headers: list
    rows: list = field(default_factory=list)

    def to_text(self):
        cells = [self.headers] + self.rows
        widths = [max(len(str(row[c])) for row in cells) for c in range(len(self.headers))]
        lines = [' | '.join(str(v).ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells]
        lines.insert(1, '-+-'.join('-' * w for w in widths))
        return '\n'.join(lines) + '\n'

    def to_csv(self):
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator='\n')
        writer.writerow(self.headers)
        writer.writerows(self.rows)
        return buffer.getvalue()

    @classmethod
    def from_csv(cls, text):
        rows = list(csv.reader(io.StringIO(text)))
        return cls(rows[0], rows[1:])


def format_score(report):
    marker = '' if report.bound == 'exact' else BOUND_MARKER
    return '%s%.4f' % (marker, report.score)


def results_table(reports):
    """One row per model, one column per dataset (header names the convention).

    Raises ReportError when a column mixes conventions or a cell is reported twice.
    """
    columns = {}
    for report in reports:
        columns.setdefault(report.dataset_id, {}).setdefault(report.convention, []).append(report)
    for dataset, by_convention in columns.items():
        if len(by_convention) > 1:
            offending = ', '.join('%s (%s)' % (r.model_id, r.convention)
                                  for rs in by_convention.values() for r in rs)
            raise ReportError('mixed conventions in column %s: %s' % (dataset, offending))
    datasets = sorted(columns)
    models = sorted({r.model_id for r in reports}, key=lambda m: (_family_rank(m), m))
    cells = {}
    for report in reports:
        key = (report.model_id, report.dataset_id)
        if key in cells:
            raise ReportError('%s on %s reported twice' % key)
        cells[key] = format_score(report)
    headers = ['Model'] + ['%s (%s)' % (d, next(iter(columns[d]))) for d in datasets]
    rows = [[m] + [cells.get((m, d), '-') for d in datasets] for m in models]
    return ResultsTable(headers, rows)


def runtime_report(runs, references=False):
    """Training time and final score per run, in family order (stable for ties).

    Args:
        runs: list of RunState (name, family, hours, final_score).
        references: append the published timings as non-normative anchor rows.

    Returns: ResultsTable

    """
    ordered = sorted(runs, key=lambda r: _family_rank(r.family))
    rows = [[r.name, r.family, '%.2fh' % r.hours,
             '%.4f' % r.final_score if r.final_score is not None else '-'] for r in ordered]
    if references:
        for model_id, hours, score in REFERENCE_TIMES:
            rows.append(['reference', model_id, '%.2fh' % hours, '%.0f' % score])
    return ResultsTable(['Run', 'Model', 'Training time', 'Log-likelihood'], rows)


@dataclass
class PairCheck:
    a: str
    b: str
    count_a: int
    count_b: int
    relative_difference: float
    passed: bool


def param_match_check(models, tolerance):
    """Pairwise relative parameter-count difference |a - b| / max(a, b) <= tolerance.

    Args:
        models: dict name -> model (or parameter count).
        tolerance: allowed fraction, e.g. 0.02.

    Returns: list of PairCheck, one per unordered pair.

    """
    counts = {name: m if isinstance(m, int) else count_parameters(m) for name, m in models.items()}
    checks = []
    for a, b in itertools.combinations(sorted(counts, key=lambda n: (_family_rank(n), n)), 2):
        ca, cb = counts[a], counts[b]
        rel = abs(ca - cb) / max(ca, cb) if max(ca, cb) else 0.0
        checks.append(PairCheck(a, b, ca, cb, rel, rel <= tolerance))
        if rel > tolerance:
            logger.warning('parameter counts of %s (%d) and %s (%d) differ by %.2f%%', a, ca, b, cb, 100 * rel)
    return checks


# EMBEDDING REFERENCE RESULTS --------------------------------------------------------
# Published numbers, kept as non-normative comparison anchors.

DATASET_CONVENTIONS = {
    'TIMIT': 'sequence-average', 'VCTK': 'frame-average', 'Blizzard': 'sequence-average',
    'Muse': 'step-average', 'Nottingham': 'step-average', 'IAM-OnDB': 'sequence-average',
    'Perm-TIMIT': 'sequence-average',
    'TIMIT-stride50': 'sequence-average', 'VCTK-stride50': 'frame-average', 'Blizzard-stride50': 'sequence-average',
    'TIMIT-stride200': 'sequence-average', 'VCTK-stride200': 'frame-average', 'Blizzard-stride200': 'sequence-average',
}

REFERENCE_SCORES = {
    'F-RNN': {'TIMIT': 32745, 'VCTK': 0.786, 'Blizzard': 7610, 'Muse': -6.991, 'Nottingham': -3.400,
              'IAM-OnDB': 1397, 'Perm-TIMIT': 25679},
    'F-SRNN': {'TIMIT': 69296, 'VCTK': 2.383, 'Blizzard': 15258, 'Muse': -6.438, 'Nottingham': -2.811,
               'IAM-OnDB': 1402, 'Perm-TIMIT': 67613},
    'DELTA-RNN (random)': {'TIMIT': 66453, 'VCTK': 2.199, 'Blizzard': 14585, 'Muse': -6.252,
                           'Nottingham': -2.834, 'Perm-TIMIT': 61103},
    'DELTA-RNN (U=2)': {'TIMIT': 70900, 'VCTK': 2.027, 'Blizzard': 15306},
    'DELTA-RNN (U=3)': {'TIMIT': 72067, 'VCTK': 2.262, 'Blizzard': 15284},
    'DELTA-RNN (V=50)': {'TIMIT': 66122, 'VCTK': 2.199, 'Blizzard': 14389},
    'DELTA-RNN (V=75)': {'TIMIT': 66453, 'VCTK': 2.120, 'Blizzard': 14585},
    'RNN-FLAT': {'TIMIT': 117721, 'VCTK': 3.2173, 'Blizzard': 22714, 'Muse': -5.251, 'Nottingham': -2.180,
                 'Perm-TIMIT': 15763, 'TIMIT-stride50': 20655, 'VCTK-stride50': 0.668,
                 'Blizzard-stride50': 4607, 'TIMIT-stride200': 4124, 'VCTK-stride200': 0.177,
                 'Blizzard-stride200': -320},
    'SRNN-FLAT': {'TIMIT': 109284, 'VCTK': 3.2062, 'Blizzard': 22290, 'Muse': -5.616, 'Nottingham': -2.324,
                  'Perm-TIMIT': 14278, 'TIMIT-stride50': 14469, 'VCTK-stride50': 0.605,
                  'Blizzard-stride50': 3603, 'TIMIT-stride200': -1137, 'VCTK-stride200': 0.0187,
                  'Blizzard-stride200': -1231},
    'RNN-HIER': {'TIMIT': 109641, 'VCTK': 3.1822, 'Blizzard': 21950, 'Muse': -5.161, 'Nottingham': -2.028,
                 'IAM-OnDB': 1440, 'Perm-TIMIT': 95161},
    'SRNN-HIER': {'TIMIT': 107912, 'VCTK': 3.1423, 'Blizzard': 21845, 'Muse': -5.483, 'Nottingham': -2.065,
                  'IAM-OnDB': 1395, 'Perm-TIMIT': 94402},
}

REFERENCE_TIMES = (
    ('F-RNN', 0.54, 32745), ('F-SRNN', 0.94, 69296), ('DELTA-RNN', 0.90, 66453),
    ('RNN-HIER', 9.92, 109641), ('SRNN-HIER', 12.52, 107912), ('RNN-FLAT', 37.48, 117721),
    ('SRNN-FLAT', 42.26, 109284), ('RNN-HIER (input 1000)', 1.7, 101713),
)


def reference_results():
    """Published scores as EvalReports (stochastic families carry the elbo bound kind)."""
    reports = []
    for model_id, scores in REFERENCE_SCORES.items():
        family = model_id.split(' ')[0]
        bound = 'elbo' if family in ('F-SRNN', 'SRNN-FLAT', 'SRNN-HIER') else 'exact'
        for dataset, score in scores.items():
            reports.append(EvalReport(model_id, dataset, DATASET_CONVENTIONS[dataset], float(score), bound,
                                      family=family))
    return reports
