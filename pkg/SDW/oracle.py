""" This module contains the brute-force and analytic verifiers of the Sequence-Density-Workbench.

**Description:**

    The oracles compute the same quantities as the rest of the package along separate
    code paths (scipy / math instead of torch.distributions where feasible):
        1. finite_diff_grad()          central differences against autograd
        2. quadrature_norm()           trapezoid integral of a 1-D head density
        3. monte_carlo_kl()            sampled KL against the closed form
        4. enumerate_exact_loglik()    exact marginal likelihood of a discrete-latent
                                       surrogate, by summing over every latent path
        5. prop1_convergence()         the delta-posterior gap under sigma halving
        6. step_is_causal()            bitwise invariance of emission parameters under
                                       perturbation of entries they may not depend on
    run_oracle_suite() runs all of them on toy sizes and returns a JSON-serialisable
    pass/fail summary.

"""

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import integrate, stats
from scipy.special import logsumexp, softmax

from SDW.datasets import BINARY, CONTINUOUS, FrameSequence, reshape_multiframe, stride_subsample
from SDW.distributions import DiagGaussianParams, GaussianMixtureParams, gauss_kl, gmm_logpdf
from SDW.errors import OracleFailure
from SDW.models import FAMILIES, ModelConfig, as_batch, build_model
from SDW.objectives import delta_equivalence_elbo, elbo_loss, kl_anneal_coeff, mle_loss, zforcing_aux_loss
from SDW.training import TrainHyper, cosine_lr

logger = logging.getLogger(__name__)

MAX_PATHS = 4096
HALF_LOG_TWO_PI = 0.5 * math.log(2.0 * math.pi)


# EMBEDDING GRADIENTS ----------------------------------------------------------------

def finite_diff_grad(fn, params, eps=1e-6, floor=1e-8):
    """Max relative error between autograd and central differences.

    Args:
        fn: callable returning a scalar tensor computed from ``params``.
        params: list of leaf tensors with requires_grad.
        eps: step, in [1e-7, 1e-3].
        floor: smallest denominator of the relative error.

    Returns: max over coordinates of |a - n| / max(|a|, |n|, floor).

    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError('eps must lie in [1e-7, 1e-3], got %r' % (eps,))
    params = list(params)
    value = fn()
    if not bool(torch.isfinite(value)):
        raise OracleFailure('objective is not finite')
    analytic = torch.autograd.grad(value, params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat = p.view(-1)
            g = torch.zeros_like(p) if g is None else g
            g = g.reshape(-1)
            for i in range(flat.numel()):
                keep = float(flat[i])
                flat[i] = keep + eps
                plus = float(fn())
                flat[i] = keep - eps
                minus = float(fn())
                flat[i] = keep
                if not (math.isfinite(plus) and math.isfinite(minus)):
                    raise OracleFailure('objective is not finite under perturbation')
                numeric = (plus - minus) / (2.0 * eps)
                a = float(g[i])
                worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
    return worst


# EMBEDDING DENSITIES ----------------------------------------------------------------

def direct_normal_logpdf(x, mu, sigma):
    return -0.5 * ((x - mu) / sigma) ** 2 - math.log(sigma) - HALF_LOG_TWO_PI


def direct_gmm_logpdf(x, weights, means, scales):
    """Scalar mixture log-density with a compensated log-sum-exp."""
    terms = [math.log(w) + direct_normal_logpdf(x, m, s) for w, m, s in zip(weights, means, scales) if w > 0]
    top = max(terms)
    return top + math.log(math.fsum(math.exp(t - top) for t in terms))


def quadrature_norm(head, grid):
    """Trapezoid integral of exp(log-density) of a 1-D head over ``grid``.

    Args:
        head: GaussianMixtureParams with batch shape () or DiagGaussianParams of dim 1.
        grid: increasing 1-D array.

    Raises: OracleFailure when more than 1e-4 of the mass lies beyond the grid.

    """
    grid = np.asarray(grid, dtype=np.float64)
    if isinstance(head, GaussianMixtureParams):
        weights = softmax(head.logits.detach().numpy())
        means = head.means.detach().numpy()
        scales = np.exp(head.log_scales.detach().numpy())
        logpdf = gmm_logpdf(head, torch.as_tensor(grid)).detach().numpy()
    else:
        weights = np.ones(1)
        means = head.mean.detach().numpy().reshape(1)
        scales = head.scale.detach().numpy().reshape(1)
        logpdf = head.distribution().log_prob(torch.as_tensor(grid)[:, None]).sum(-1).detach().numpy()
    outside = float(np.sum(weights * (stats.norm.cdf(grid[0], means, scales) + stats.norm.sf(grid[-1], means, scales))))
    if outside > 1e-4:
        raise OracleFailure('grid too narrow: %.3g of the mass lies beyond [%g, %g]' % (outside, grid[0], grid[-1]))
    return float(integrate.trapezoid(np.exp(logpdf), grid))


def monte_carlo_kl(q, p, n=100000, seed=0):
    """Sampled KL(q || p) between diagonal Gaussians given as (mean, log_scale) arrays.

    Returns: (estimate, standard error)

    """
    q_mean, q_log = (np.asarray(a, dtype=np.float64) for a in q)
    p_mean, p_log = (np.asarray(a, dtype=np.float64) for a in p)
    rng = np.random.default_rng(seed)
    z = q_mean + np.exp(q_log) * rng.standard_normal((int(n),) + q_mean.shape)
    ratio = (stats.norm.logpdf(z, q_mean, np.exp(q_log)) - stats.norm.logpdf(z, p_mean, np.exp(p_log))).sum(-1)
    return float(ratio.mean()), float(ratio.std(ddof=1) / math.sqrt(n))


# EMBEDDING SURROGATE ----------------------------------------------------------------

@dataclass
class SurrogateModel:
    """Discrete-latent sequence model: z_t on ``grid`` (G points) with a Markov prior,
    x_t | z_t Gaussian (mean w z_t + b, std ``scale``) or Bernoulli (logit w z_t + b)."""
    grid: np.ndarray
    initial: np.ndarray
    transition: np.ndarray
    weights: np.ndarray
    bias: np.ndarray
    emission: str = 'gaussian'
    scale: float = 1.0

    @property
    def G(self):
        return int(self.grid.size)

    def emission_logpdf(self, x_t, g):
        loc = self.weights * self.grid[g] + self.bias
        if self.emission == 'gaussian':
            return math.fsum(direct_normal_logpdf(v, m, self.scale) for v, m in zip(x_t, loc))
        # log sigmoid(l) for 1, log sigmoid(-l) for 0
        return math.fsum(-np.logaddexp(0.0, -l if v == 1 else l) for v, l in zip(x_t, loc))

    def joint_logpdf(self, x, path):
        terms = [math.log(self.initial[path[0]])]
        terms += [math.log(self.transition[a, b]) for a, b in zip(path[:-1], path[1:])]
        terms += [self.emission_logpdf(x_t, g) for x_t, g in zip(x, path)]
        return math.fsum(terms)

    def sample(self, T, rng):
        g = rng.choice(self.G, p=self.initial)
        xs = []
        for t in range(T):
            if t:
                g = rng.choice(self.G, p=self.transition[g])
            loc = self.weights * self.grid[g] + self.bias
            if self.emission == 'gaussian':
                xs.append(loc + self.scale * rng.standard_normal(loc.size))
            else:
                xs.append((rng.random(loc.size) < 1.0 / (1.0 + np.exp(-loc))).astype(np.float64))
        return np.array(xs)


def random_surrogate(rng, G=4, D=2, emission='gaussian'):
    """Draws a surrogate with normalised random categorical weights."""
    if not 1 <= G <= 8:
        raise ValueError('G must lie in [1, 8]')
    initial = rng.dirichlet(np.ones(G))
    transition = rng.dirichlet(np.ones(G), size=G)
    return SurrogateModel(np.linspace(-1.5, 1.5, G) if G > 1 else np.zeros(1), initial, transition,
                          rng.normal(0.0, 1.5, D), rng.normal(0.0, 0.5, D), emission, float(rng.uniform(0.5, 1.5)))


def _paths(s, T):
    if s.G ** T > MAX_PATHS:
        raise OracleFailure('state space too large: %d^%d latent paths' % (s.G, T))
    return list(itertools.product(range(s.G), repeat=T))


def _log_sum_exp(terms):
    top = max(terms)
    return top + math.log(math.fsum(math.exp(t - top) for t in terms))


def enumerate_exact_loglik(s, x):
    """log sum over all G^T latent paths of p(x, z)."""
    x = np.asarray(x, dtype=np.float64)
    return _log_sum_exp([s.joint_logpdf(x, path) for path in _paths(s, len(x))])


def true_posterior(s, x):
    """p(z | x) as an array of shape (G,) * T."""
    x = np.asarray(x, dtype=np.float64)
    paths = _paths(s, len(x))
    log_joint = np.array([s.joint_logpdf(x, path) for path in paths])
    post = np.exp(log_joint - enumerate_exact_loglik(s, x))
    return post.reshape((s.G,) * len(x))


def mean_field_posterior(rng, G, T):
    """Product of independent random categoricals, as a full (G,) * T array."""
    out = np.ones(())
    for _ in range(T):
        out = np.multiply.outer(out, rng.dirichlet(np.ones(G)))
    return out


def surrogate_elbo(s, x, posterior):
    """sum_z q(z) [log p(x, z) - log q(z)] over the paths with q(z) > 0."""
    x = np.asarray(x, dtype=np.float64)
    q = np.asarray(posterior, dtype=np.float64).reshape(-1)
    terms = [qz * (s.joint_logpdf(x, path) - math.log(qz))
             for path, qz in zip(_paths(s, len(x)), q) if qz > 0]
    return math.fsum(terms)


def surrogate_multi_sample_bound(s, x, posterior, k, rng):
    """log (1/k) sum_j p(x, z_j) / q(z_j), z_j drawn from the posterior array."""
    if k < 1:
        raise ValueError('k must be >= 1')
    x = np.asarray(x, dtype=np.float64)
    q = np.asarray(posterior, dtype=np.float64).reshape(-1)
    paths = _paths(s, len(x))
    draws = rng.choice(len(paths), size=k, p=q / q.sum())
    log_w = [s.joint_logpdf(x, paths[j]) - math.log(q[j]) for j in draws]
    return float(logsumexp(log_w) - math.log(k))


# EMBEDDING DELTA-POSTERIOR CONVERGENCE ----------------------------------------------

@dataclass
class ConvergenceTable:
    sigmas: list
    gaps: list
    ratios: list
    cancellation: list
    smooth: bool = True

    @property
    def passed(self):
        return all(3.0 <= r <= 5.0 for r in self.ratios) and max(self.cancellation) <= 1e-10

    def to_dict(self):
        return {'sigmas': self.sigmas, 'gaps': self.gaps, 'ratios': self.ratios,
                'cancellation': self.cancellation, 'smooth': self.smooth, 'passed': self.passed}


def prop1_convergence(model, seq, sigmas, n_nodes=8):
    """Gap |ELBO - delta objective| per step for each sigma, and successive gap ratios.

    The toy is flagged non-smooth when a part-a mixture scale is below twice the
    largest sigma (the small-sigma expansion does not hold there yet).
    """
    sigmas = [float(s) for s in sigmas]
    if not sigmas or min(sigmas) <= 0 or any(a <= b for a, b in zip(sigmas, sigmas[1:])):
        raise ValueError('sigmas must be positive and strictly decreasing')
    results = [delta_equivalence_elbo(model, seq, s, n_nodes) for s in sigmas]
    gaps = [r.gap for r in results]
    ratios = [a / b if b > 0 else math.inf for a, b in zip(gaps, gaps[1:])]
    with torch.no_grad():
        features, _, _ = model.backbone(as_batch(seq))
        heads = model.emitter.part_a(features)
        min_scale = float(heads.gmm.log_scales.exp().min()) if heads.gmm is not None else math.inf
    smooth = min_scale >= 2 * sigmas[0]
    if not smooth:
        logger.warning('part-a mixture scale %.3g is below twice sigma %.3g: toy densities are not smooth '
                       'at this resolution', min_scale, sigmas[0])
    return ConvergenceTable(sigmas, gaps, ratios, [r.cancellation for r in results], smooth)


# EMBEDDING CAUSALITY ----------------------------------------------------------------

def _element_params(heads, b, t, i):
    """Parameter tensors of element i at (b, t)."""
    if heads.kinds[i] == CONTINUOUS:
        j = heads.continuous_index.index(i)
        return [heads.gmm.logits[b, t, j], heads.gmm.means[b, t, j], heads.gmm.log_scales[b, t, j]]
    j = heads.binary_index.index(i)
    return [heads.bernoulli.logits[b, t, j]]


def _perturb(x, kinds, where, delta):
    out = x.clone()
    for (t, i) in where:
        if kinds[i] == BINARY:
            out[:, t, i] = 1.0 - out[:, t, i]
        else:
            out[:, t, i] = out[:, t, i] + delta
    return out


def step_is_causal(model, x, t, element=None, mode='prior', noise=None, delta=0.5):
    """True when the emission parameters of step t are bitwise unchanged after
    perturbing every later step and every element of step t that is drawn in the
    same or a later sampling block.

    Stochastic families are checked with fixed ``noise`` (prior mode by default).
    """
    x = torch.as_tensor(x, dtype=torch.float64)
    B, T, L = x.shape
    if noise is None and model.stochastic:
        noise = torch.randn((B, T, model.cfg.latent_dim), generator=torch.Generator().manual_seed(0),
                            dtype=torch.float64)
    blocks = model.emitter.sampling_blocks(L)
    rank = {i: k for k, block in enumerate(blocks) for i in block}
    with torch.no_grad():
        base = model(x, mode=mode, noise=noise).heads
        for i in ([element] if element is not None else range(L)):
            where = [(s, j) for s in range(t + 1, T) for j in range(L)]
            where += [(t, j) for j in range(L) if rank[j] >= rank[i]]
            moved = model(_perturb(x, model.element_kind, where, delta), mode=mode, noise=noise).heads
            for b in range(B):
                for p, q in zip(_element_params(base, b, t, i), _element_params(moved, b, t, i)):
                    if not torch.equal(p, q):
                        return False
    return True


def check_causality(model, x, mode='prior', noise=None):
    return all(step_is_causal(model, x, t, mode=mode, noise=noise) for t in range(x.shape[1]))


# EMBEDDING TOY MODELS ---------------------------------------------------------------

def toy_config(family, width=8, latent_dim=2, n_components=2, L=4, **overrides):
    cfg = ModelConfig(family=family, width=width, emit_width=width, n_components=n_components,
                      latent_dim=latent_dim if family in ('F-SRNN', 'SRNN-HIER', 'SRNN-FLAT') else None,
                      leak={'scheme': 'interleave', 'U': 2} if family == 'DELTA-RNN' else None)
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


def toy_model(family, element_kind=(CONTINUOUS,) * 4, seed=0, **overrides):
    torch.manual_seed(seed)
    return build_model(toy_config(family, L=len(element_kind), **overrides), element_kind)


def toy_batch(model, T=3, B=2, seed=0):
    """Random (B, T', L') input matching the model (flat families see T * frames_per_step frames)."""
    rng = np.random.default_rng(seed)
    n = T * model.frames_per_step if model.cfg.flat else T
    x = rng.standard_normal((B, n, model.L))
    for i, kind in enumerate(model.element_kind):
        if kind == BINARY:
            x[..., i] = (x[..., i] > 0).astype(np.float64)
    return torch.as_tensor(x)


def training_objective(model, x, noise=None, alpha=0.0, beta=0.0, frozen=None):
    """The scalar each family is trained on (fixed noise for stochastic families).

    ``frozen`` holds the auxiliary-loss targets fixed (see zforcing_aux_loss).
    """
    if not model.stochastic:
        return mle_loss(model(x), x).total
    result = model(x, mode='posterior', noise=noise)
    aux = None
    if model.cfg.srnn_variant == 'z-forcing':
        aux = zforcing_aux_loss(result.latent, result.latent.backward, alpha, beta, model.backbone.aux,
                                frozen=frozen)
    return elbo_loss(result, x, 1.0, aux=aux).total


def aux_targets(model, x, noise):
    """(z, backward states) of an unperturbed posterior pass, or None."""
    if not model.stochastic or model.cfg.srnn_variant != 'z-forcing':
        return None
    with torch.no_grad():
        latent = model(x, mode='posterior', noise=noise).latent
    return latent.z.clone(), latent.backward.clone()


def gradient_check(model, x, seed=0, alpha=0.005, beta=0.005, eps=1e-6, floor=1e-4):
    noise = None
    if model.stochastic:
        noise = torch.randn((x.shape[0], x.shape[1], model.cfg.latent_dim),
                            generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    frozen = aux_targets(model, x, noise)
    return finite_diff_grad(lambda: training_objective(model, x, noise, alpha, beta, frozen),
                            list(model.parameters()), eps=eps, floor=floor)


# EMBEDDING SUITE --------------------------------------------------------------------

@dataclass
class OracleSummary:
    checks: list = field(default_factory=list)

    def add(self, name, passed, **detail):
        self.checks.append(dict(detail, name=name, passed=bool(passed)))
        logger.info('oracle %-28s %s', name, 'pass' if passed else 'FAIL')

    @property
    def passed(self):
        return all(c['passed'] for c in self.checks)

    def to_dict(self):
        return {'passed': self.passed, 'checks': self.checks}


def run_oracle_suite(seed=0, n_surrogates=100):
    """Runs every oracle at toy sizes. Returns an OracleSummary."""
    summary = OracleSummary()
    rng = np.random.default_rng(seed)

    # gradients and causality, every family
    for family in FAMILIES:
        kinds = (CONTINUOUS,) * 4
        model = toy_model(family, kinds, seed=seed)
        x = toy_batch(model, seed=seed)
        err = gradient_check(model, x, seed=seed)
        summary.add('gradient/%s' % family, err <= 1e-4, max_relative_error=err)
        summary.add('causality/%s' % family, check_causality(model, x))
    mixed = toy_model('RNN-HIER', (BINARY, CONTINUOUS, CONTINUOUS), seed=seed)
    summary.add('causality/RNN-HIER-mixed', check_causality(mixed, toy_batch(mixed, seed=seed)))

    # distributions
    grid = np.linspace(-8.0, 8.0, 10000)
    one = GaussianMixtureParams(torch.zeros(1, dtype=torch.float64), torch.zeros(1, dtype=torch.float64),
                                torch.zeros(1, dtype=torch.float64))
    norm = quadrature_norm(one, grid)
    summary.add('quadrature/standard-normal', abs(norm - 1.0) <= 1e-6, integral=norm)
    mix = GaussianMixtureParams(torch.as_tensor(rng.normal(size=3)), torch.as_tensor(rng.uniform(-1, 1, 3)),
                                torch.as_tensor(rng.uniform(-0.5, 0.3, 3)))
    norm = quadrature_norm(mix, np.linspace(-12.0, 12.0, 20001))
    summary.add('quadrature/gmm-3', abs(norm - 1.0) <= 1e-3, integral=norm)
    q = (rng.normal(size=3), rng.uniform(-0.5, 0.5, 3))
    p = (rng.normal(size=3), rng.uniform(-0.5, 0.5, 3))
    closed = float(gauss_kl(DiagGaussianParams(*map(torch.as_tensor, q)), DiagGaussianParams(*map(torch.as_tensor, p))))
    estimate, stderr = monte_carlo_kl(q, p, 100000, seed)
    summary.add('kl/monte-carlo', abs(estimate - closed) <= 3 * stderr, closed=closed, estimate=estimate,
                stderr=stderr)
    spot = float(gmm_logpdf(one, 0.0))
    shift = float(gauss_kl(DiagGaussianParams(torch.ones(1, dtype=torch.float64), torch.zeros(1, dtype=torch.float64)),
                           DiagGaussianParams(torch.zeros(1, dtype=torch.float64), torch.zeros(1, dtype=torch.float64))))
    summary.add('spot-values', abs(spot + 0.9189385332046727) <= 1e-7 and abs(shift - 0.5) <= 1e-7,
                logpdf=spot, kl=shift)

    # bound tightness on enumerable surrogates
    worst, worst_true = -math.inf, 0.0
    for _ in range(n_surrogates):
        s = random_surrogate(rng, G=int(rng.integers(1, 5)), D=2,
                             emission='gaussian' if rng.random() < 0.5 else 'bernoulli')
        T = int(rng.integers(1, 5))
        x = s.sample(T, rng)
        exact = enumerate_exact_loglik(s, x)
        worst = max(worst, surrogate_elbo(s, x, mean_field_posterior(rng, s.G, T)) - exact)
        worst_true = max(worst_true, abs(surrogate_elbo(s, x, true_posterior(s, x)) - exact))
    summary.add('elbo-tightness', worst <= 1e-9 and worst_true <= 1e-9, max_excess=worst,
                max_true_posterior_error=worst_true)

    # delta-posterior equivalence
    delta = toy_model('DELTA-RNN', seed=seed)
    with torch.no_grad():
        for param in delta.emitter.parameters():
            param.mul_(0.3)
    x = toy_batch(delta, seed=seed)
    table = prop1_convergence(delta, x, [0.1, 0.05, 0.025])
    small = delta_equivalence_elbo(delta, x, 1e-3)
    detail = table.to_dict()
    detail['table_passed'] = detail.pop('passed')
    summary.add('delta-posterior', table.passed and small.gap < 1e-3, small_sigma_gap=small.gap, **detail)

    # protocol constants
    hyper = TrainHyper(total_updates=1000)
    frames = FrameSequence(rng.standard_normal(8000))
    protocol = (kl_anneal_coeff(16000) == 1.0 and cosine_lr(0, hyper) == 1e-3
                and cosine_lr(hyper.total_updates, hyper) == 1e-6
                and reshape_multiframe(frames, 200, 40)[0].T == 40
                and np.array_equal(stride_subsample(frames, 1).frames, frames.frames))
    summary.add('protocol-constants', protocol)
    return summary
