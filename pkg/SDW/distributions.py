""" This module contains the parametric distribution heads and latent-variable primitives.

**Description:**

    Output elements are modelled by a Gaussian mixture (continuous elements) or a
    Bernoulli (binary elements, always parameterised by logits); latent variables by
    diagonal Gaussians. The log-densities, the closed-form KL divergence and the
    reparameterised sample are thin wrappers around ``torch.distributions`` that add
    the input checks the models rely on. All functions are pure.

    ``ElementHeads`` bundles the heads of the L elements of one step (or of a batch of
    steps) when the elements have mixed kinds, e.g. the pen state and the coordinates
    of a handwriting trajectory.

"""

from dataclasses import dataclass

import numpy as np
import torch
from torch.distributions import Bernoulli, Categorical, MixtureSameFamily, Normal, kl_divergence

from SDW.datasets import BINARY, CONTINUOUS
from SDW.errors import DataFormatError, ModelError

DEFAULT_COMPONENTS = 20     # shared mixture size for every family
LOG_SCALE_CLAMP = 7.0       # log-scales live in [-7, 7]


@dataclass
class GaussianMixtureParams:
    """Per element: K mixture logits, K means, K log-scales (last dimension is K)."""
    logits: torch.Tensor
    means: torch.Tensor
    log_scales: torch.Tensor

    @property
    def K(self):
        return int(self.logits.shape[-1])

    @property
    def weights(self):
        return torch.softmax(self.logits, dim=-1)

    def distribution(self):
        return MixtureSameFamily(Categorical(logits=self.logits, validate_args=False),
                                 Normal(self.means, self.log_scales.exp(), validate_args=False),
                                 validate_args=False)

    def map(self, fn):
        return GaussianMixtureParams(fn(self.logits), fn(self.means), fn(self.log_scales))


@dataclass
class DiagGaussianParams:
    """Mean vector and log-scale vector (last dimension is the latent dimension)."""
    mean: torch.Tensor
    log_scale: torch.Tensor

    @property
    def dim(self):
        return int(self.mean.shape[-1])

    @property
    def scale(self):
        return self.log_scale.exp()

    def distribution(self):
        return Normal(self.mean, self.scale, validate_args=False)

    def map(self, fn):
        return DiagGaussianParams(fn(self.mean), fn(self.log_scale))


@dataclass
class BernoulliParams:
    logits: torch.Tensor

    @property
    def probs(self):
        return torch.sigmoid(self.logits)

    def map(self, fn):
        return BernoulliParams(fn(self.logits))


def _as_tensor(x, like):
    return torch.as_tensor(x, dtype=like.dtype, device=like.device)


def gmm_logpdf(params, x):
    """log sum_k w_k N(x; mu_k, sigma_k^2), evaluated with log-sum-exp.

    Args:
        params: GaussianMixtureParams with batch shape matching ``x``.
        x: real value(s).

    Returns: tensor of log-densities, shape of ``x``.

    """
    x = _as_tensor(x, params.means)
    if not bool(torch.isfinite(x).all()):
        raise DataFormatError('non-finite value passed to gmm_logpdf')
    return params.distribution().log_prob(x)


def bernoulli_logpmf(params, x):
    """log sigmoid(logit) for x = 1, log(1 - sigmoid(logit)) for x = 0, stable in the logit."""
    x = _as_tensor(x, params.logits)
    if not bool(((x == 0) | (x == 1)).all()):
        raise DataFormatError('bernoulli_logpmf needs values in {0, 1}')
    return Bernoulli(logits=params.logits, validate_args=False).log_prob(x)


def diag_gauss_logpdf(params, z):
    """Sum over dimensions of univariate normal log-densities."""
    z = _as_tensor(z, params.mean)
    if z.shape[-1:] != params.mean.shape[-1:]:
        raise ModelError('dimension mismatch: z has %d, params have %d'
                         % (z.shape[-1] if z.dim() else 0, params.dim))
    return params.distribution().log_prob(z).sum(-1)


def gauss_kl(q, p):
    """Closed-form KL(q || p) between diagonal Gaussians, summed over dimensions (nats)."""
    if q.mean.shape[-1:] != p.mean.shape[-1:]:
        raise ModelError('dimension mismatch: q has %d, p has %d' % (q.dim, p.dim))
    return kl_divergence(q.distribution(), p.distribution()).sum(-1)


def reparam_sample(params, noise):
    """z = mu + sigma * noise; differentiable with respect to the parameters."""
    noise = _as_tensor(noise, params.mean)
    if noise.shape[-1:] != params.mean.shape[-1:]:
        raise ModelError('noise dimension %d does not match latent dimension %d'
                         % (noise.shape[-1], params.dim))
    return params.mean + params.scale * noise


def heads_from_raw(kinds, raw_continuous=None, raw_binary=None, clamp=LOG_SCALE_CLAMP):
    """Splits raw network outputs into heads.

    Args:
        kinds: element kinds of the L elements.
        raw_continuous: (..., Lc, 3K) for the continuous elements, in order.
        raw_binary: (..., Lb) logits for the binary elements, in order.

    Returns: ElementHeads

    """
    gmm = bern = None
    if raw_continuous is not None:
        logits, means, log_scales = raw_continuous.chunk(3, dim=-1)
        gmm = GaussianMixtureParams(logits, means, log_scales.clamp(-clamp, clamp))
    if raw_binary is not None:
        bern = BernoulliParams(raw_binary)
    return ElementHeads(tuple(kinds), gmm, bern)


# EMBEDDING ElementHeads CLASS -------------------------------------------------------

@dataclass
class ElementHeads:
    """Heads of L elements with possibly mixed kinds.

    ``gmm`` covers the continuous positions in index order, shape (..., Lc, K);
    ``bernoulli`` covers the binary positions, shape (..., Lb).
    """
    kinds: tuple
    gmm: GaussianMixtureParams = None
    bernoulli: BernoulliParams = None

    @property
    def L(self):
        return len(self.kinds)

    @property
    def continuous_index(self):
        return [i for i, k in enumerate(self.kinds) if k == CONTINUOUS]

    @property
    def binary_index(self):
        return [i for i, k in enumerate(self.kinds) if k == BINARY]

    def _assemble(self, pieces, positions):
        out = torch.cat(pieces, dim=-1)
        if positions != sorted(positions):
            out = out[..., [int(i) for i in np.argsort(positions)]]
        return out

    def log_prob(self, x):
        """Per-element log-probabilities, shape (..., L)."""
        if x.shape[-1] != self.L:
            raise ModelError('step has %d elements, heads cover %d' % (x.shape[-1], self.L))
        pieces, positions = [], []
        if self.gmm is not None:
            cont = self.continuous_index
            pieces.append(gmm_logpdf(self.gmm, x[..., cont]))
            positions += cont
        if self.bernoulli is not None:
            binary = self.binary_index
            pieces.append(bernoulli_logpmf(self.bernoulli, x[..., binary]))
            positions += binary
        return self._assemble(pieces, positions)

    def sample(self, generator=None):
        """Draws one value per element, shape (..., L)."""
        pieces, positions = [], []
        if self.gmm is not None:
            gmm = self.gmm
            weights = gmm.weights
            flat = weights.reshape(-1, gmm.K)
            comp = torch.multinomial(flat, 1, generator=generator).reshape(weights.shape[:-1] + (1,))
            mean = gmm.means.gather(-1, comp).squeeze(-1)
            scale = gmm.log_scales.gather(-1, comp).squeeze(-1).exp()
            noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
            pieces.append(mean + scale * noise)
            positions += self.continuous_index
        if self.bernoulli is not None:
            pieces.append(torch.bernoulli(self.bernoulli.probs, generator=generator))
            positions += self.binary_index
        return self._assemble(pieces, positions)

    def index(self, idx):
        """Applies the same leading-dimension index to every parameter tensor."""
        return ElementHeads(self.kinds,
                            self.gmm.map(lambda a: a[idx]) if self.gmm is not None else None,
                            self.bernoulli.map(lambda a: a[idx]) if self.bernoulli is not None else None)

    def tensors(self):
        out = []
        if self.gmm is not None:
            out += [self.gmm.logits, self.gmm.means, self.gmm.log_scales]
        if self.bernoulli is not None:
            out.append(self.bernoulli.logits)
        return out

    @classmethod
    def merge(cls, parts, kinds):
        """Combines heads produced for disjoint index subsets.

        Args:
            parts: list of (ElementHeads, global indices of its elements).
            kinds: element kinds of the full step.

        """
        cont_pos, bin_pos, gmms, berns = [], [], [], []
        for heads, index in parts:
            cont_pos += [index[j] for j in heads.continuous_index]
            bin_pos += [index[j] for j in heads.binary_index]
            if heads.gmm is not None:
                gmms.append(heads.gmm)
            if heads.bernoulli is not None:
                berns.append(heads.bernoulli)
        gmm = bern = None
        if gmms:
            order = [int(i) for i in np.argsort(cont_pos)]
            gmm = GaussianMixtureParams(*[torch.cat([getattr(g, name) for g in gmms], dim=-2)[..., order, :]
                                          for name in ('logits', 'means', 'log_scales')])
        if berns:
            order = [int(i) for i in np.argsort(bin_pos)]
            bern = BernoulliParams(torch.cat([b.logits for b in berns], dim=-1)[..., order])
        return cls(tuple(kinds), gmm, bern)


def step_logprob(heads, x_t):
    """log-probability of a step: the sum of its element log-probabilities."""
    x_t = torch.as_tensor(x_t, dtype=heads.tensors()[0].dtype)
    if x_t.shape[-1] != heads.L:
        raise ModelError('step has %d elements, %d heads given' % (x_t.shape[-1], heads.L))
    return heads.log_prob(x_t).sum(-1)


def head_sample(heads, generator=None):
    return heads.sample(generator)
