""" This module contains the training objectives of the Sequence-Density-Workbench.

**Description:**

    1. mle_loss()        exact log-likelihood of a deterministic family
    2. elbo_loss()       single-draw evidence lower bound of a stochastic family,
                         closed-form KL, annealing coefficient on the KL term only
    3. kl_anneal_coeff() 0.2 -> 1.0 in steps of 5e-5 per parameter update
    4. zforcing_aux_loss() auxiliary prediction of the backward states from z_t
    5. delta_equivalence_elbo() the ELBO of an SRNN with a delta-like posterior
                         on the leaked subset, next to the delta-RNN objective

Every objective returns log-likelihood-like quantities in nats (larger is better);
the trainer negates them.

"""

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
from numpy.polynomial.hermite_e import hermegauss
from torch.distributions import Normal

from SDW.datasets import BINARY
from SDW.distributions import diag_gauss_logpdf, gauss_kl
from SDW.errors import ObjectiveError
from SDW.models import as_batch

logger = logging.getLogger(__name__)

KL_START = 0.2
KL_INCREMENT = 5e-5
AUX_GRID = (0.0, 0.0025, 0.005)


@dataclass
class ObjectiveBreakdown:
    """total = sum(recon) - coeff * sum(kl) + aux. ``recon`` and ``kl`` are (B, T),
    padded steps hold zeros. ``kl`` stores the divergence itself (>= 0 in closed form)."""
    total: torch.Tensor
    recon: torch.Tensor
    kl: torch.Tensor
    coeff: float = 0.0
    aux: torch.Tensor = None

    @property
    def elbo(self):
        """Unannealed bound without the auxiliary term."""
        return self.recon.sum() - self.kl.sum()

    def scaled(self, factor):
        aux = self.aux * factor if self.aux is not None else None
        return ObjectiveBreakdown(self.total * factor, self.recon * factor, self.kl * factor, self.coeff, aux)

    def as_record(self):
        """Plain floats for the metrics log."""
        scalar = lambda t: t.detach().sum().item()
        return {'total': scalar(self.total), 'recon': scalar(self.recon), 'kl': scalar(self.kl),
                'coeff': float(self.coeff), 'aux': scalar(self.aux) if self.aux is not None else 0.0}


def _mask_of(result, mask):
    return result.mask if mask is None else torch.as_tensor(mask, dtype=torch.float64)


def mle_loss(result, seq, mask=None):
    """sum_t log p(x_t | x_<t) of a deterministic forward result."""
    if result.latent is not None:
        raise ObjectiveError('mle_loss applied to a stochastic forward result; use elbo_loss')
    x = as_batch(seq)
    mask = _mask_of(result, mask)
    recon = result.element_logprob(x).sum(-1)
    if mask is not None:
        recon = recon * mask
    zero = torch.zeros_like(recon)
    return ObjectiveBreakdown(recon.sum(), recon, zero, 0.0, torch.zeros((), dtype=recon.dtype))


def elbo_loss(result, seq, kl_coeff=1.0, mask=None, analytic_kl=True, aux=None):
    """Single-draw ELBO: sum_t [log p(x_t | z_<=t, x_<t) - kl_coeff * KL(q_t || p_t)].

    Args:
        result: posterior-mode ForwardResult of a stochastic family.
        seq: the sequence (or batch) the result was computed on.
        kl_coeff: annealing coefficient in [0, 1], applied to the KL term only.
        analytic_kl: closed-form KL (training); False uses the sampled log-ratio
            log q(z) - log p(z) at the drawn z.
        aux: auxiliary term added to the total (see zforcing_aux_loss).

    """
    latent = result.latent
    if latent is None:
        raise ObjectiveError('elbo_loss needs a stochastic forward result (no latent trace)')
    if latent.posterior is None:
        raise ObjectiveError('elbo_loss needs a posterior-mode forward result')
    if not 0.0 <= kl_coeff <= 1.0:
        raise ObjectiveError('kl_coeff must lie in [0, 1], got %r' % (kl_coeff,))
    x = as_batch(seq)
    mask = _mask_of(result, mask)
    recon = result.element_logprob(x).sum(-1)
    if analytic_kl:
        kl = gauss_kl(latent.posterior, latent.prior)
    else:
        kl = diag_gauss_logpdf(latent.posterior, latent.z) - diag_gauss_logpdf(latent.prior, latent.z)
    if mask is not None:
        recon = recon * mask
        kl = kl * mask
    if aux is None:
        aux = torch.zeros((), dtype=recon.dtype)
    total = recon.sum() - kl_coeff * kl.sum() + aux
    return ObjectiveBreakdown(total, recon, kl, kl_coeff, aux)


def kl_anneal_coeff(update, start=KL_START, increment=KL_INCREMENT):
    """min(1, start + increment * update); reaches 1.0 at update 16,000 with the defaults."""
    if update < 0:
        raise ObjectiveError('update index must be >= 0')
    return min(1.0, round(start + increment * update, 12))


def zforcing_aux_loss(latent, backward_states, alpha, beta, head, mask=None, frozen=None):
    """Auxiliary log-likelihood of the backward states v<-_t given z_t.

    The generative path (weight ``alpha``) treats the backward states as fixed
    targets, the inference path (weight ``beta``) treats z_t as fixed. Both weights
    zero gives an exact zero with no graph attached.

    Args:
        latent: LatentTrace of a z-forcing forward pass in posterior mode.
        backward_states: (B, T, W) backward states.
        head: AuxiliaryHead mapping z_t to a Gaussian over v<-_t.
        frozen: optional (z, backward states) constants used in place of the
            stop-gradient copies. Taken from an unperturbed pass, they turn the loss
            into a plain function of the parameters whose gradient at that point is
            the training gradient.

    """
    if latent is None or latent.variant != 'z-forcing':
        raise ObjectiveError('the auxiliary loss is defined for the z-forcing variant only')
    if backward_states is None:
        raise ObjectiveError('the auxiliary loss needs backward states (posterior mode)')
    if alpha < 0 or beta < 0:
        raise ObjectiveError('alpha and beta must be >= 0')
    if alpha == 0 and beta == 0:
        return torch.zeros((), dtype=latent.z.dtype)
    if frozen is None:
        fixed_z, fixed_v = latent.z.detach(), backward_states.detach()
    else:
        fixed_z, fixed_v = (torch.as_tensor(t, dtype=latent.z.dtype).detach() for t in frozen)
    generative = diag_gauss_logpdf(head(latent.z), fixed_v)
    inference = diag_gauss_logpdf(head(fixed_z), backward_states)
    if mask is not None:
        mask = torch.as_tensor(mask, dtype=generative.dtype)
        generative = generative * mask
        inference = inference * mask
    return alpha * generative.sum() + beta * inference.sum()


# EMBEDDING DELTA EQUIVALENCE --------------------------------------------------------

@dataclass
class DeltaEquivalence:
    sigma: float
    elbo: float
    delta_objective: float
    cancellation: float     # max over steps of |E_q log N(x^a; z, s^2 I) + H(q)|
    n_steps: int

    @property
    def gap(self):
        """|elbo - delta_objective| in nats per step."""
        return abs(self.elbo - self.delta_objective) / self.n_steps


def hermite_grid(dim, n_nodes):
    """Tensor-product Gauss-Hermite rule for expectations under N(0, I_dim)."""
    nodes, weights = hermegauss(n_nodes)
    weights = weights / math.sqrt(2.0 * math.pi)
    points = np.stack(np.meshgrid(*[nodes] * dim, indexing='ij'), axis=-1).reshape(-1, dim)
    mass = np.prod(np.stack(np.meshgrid(*[weights] * dim, indexing='ij'), axis=-1), axis=-1).reshape(-1)
    return torch.as_tensor(points), torch.as_tensor(mass)


def delta_equivalence_elbo(model, seq, sigma, n_nodes=8):
    """ELBO of the SRNN built from a DELTA-RNN, and the DELTA-RNN objective.

    The SRNN has prior p(z_t | x_<t) equal to the part-a heads, posterior
    N(x_t^a, sigma^2 I), decoder N(x_t^a; z_t, sigma^2 I) for the leaked subset and the
    part-b heads conditioned on (x_<t, z_t) for the rest. Expectations over q are
    taken with a Gauss-Hermite rule; the leaked-block reconstruction and the posterior
    entropy are kept apart so their cancellation can be checked.

    Returns: DeltaEquivalence

    """
    if not sigma > 0:
        raise ObjectiveError('sigma must be > 0, got %r' % (sigma,))
    if model.family != 'DELTA-RNN':
        raise ObjectiveError('delta_equivalence_elbo needs a DELTA-RNN, got %s' % model.family)
    emitter = model.emitter
    a, b = list(emitter.split.a_indices), list(emitter.split.b_indices)
    if any(model.element_kind[i] == BINARY for i in a):
        raise ObjectiveError('the leaked subset must be continuous to carry a Gaussian posterior')
    x = as_batch(seq)
    d = len(a)
    with torch.no_grad():
        features, _, _ = model.backbone(x)
        xa, xb = x[..., a], x[..., b]
        delta = emitter.part_a(features).log_prob(xa).sum(-1) + emitter.part_b(features, xa).log_prob(xb).sum(-1)

        points, mass = hermite_grid(d, n_nodes)
        n = mass.numel()
        z = xa.unsqueeze(0) + sigma * points[:, None, None, :]
        expect = lambda values: (values * mass[:, None, None]).sum(0)
        feats = features.unsqueeze(0).expand((n,) + tuple(features.shape))
        prior_term = expect(emitter.part_a(features).log_prob(z).sum(-1))
        recon_b = expect(emitter.part_b(feats, z).log_prob(xb.unsqueeze(0).expand((n,) + tuple(xb.shape))).sum(-1))
        scale = torch.full_like(xa, sigma)
        recon_a = expect(Normal(z, scale.unsqueeze(0)).log_prob(xa.unsqueeze(0)).sum(-1))
        entropy = Normal(xa, scale).entropy().sum(-1)
        kl = -entropy - prior_term
        elbo = recon_a + recon_b - kl
    cancellation = float((recon_a + entropy).abs().max())
    return DeltaEquivalence(float(sigma), float(elbo.sum()), float(delta.sum()), cancellation,
                            int(x.shape[0] * x.shape[1]))
