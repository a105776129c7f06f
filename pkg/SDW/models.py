""" This module contains the model zoo of the Sequence-Density-Workbench.

**Description:**

    Every model is a high-level recurrence over the steps of a sequence (the backbone)
    followed by an output distribution over the L elements of each step (the emitter).
    The backbone is either deterministic (h_t = f(x_<t)) or stochastic (one Gaussian
    latent z_t per step, with a backward recurrence for the posterior). The emitter
    decides how the step distribution is decomposed:
        1. factorized       all elements independent given the high-level state
        2. leaked           delta-RNN: x_t^a given history, x_t^b given history and x_t^a
        3. recurrent / masked low-level decoder   full auto-regressive chain inside the step
    The seven families are the combinations used in the experiments:

        F-RNN      deterministic + factorized      F-SRNN     stochastic + factorized
        DELTA-RNN  deterministic + leaked
        RNN-HIER   deterministic + low-level       SRNN-HIER  stochastic + low-level
        RNN-FLAT   deterministic + factorized on the flattened (width-1) sequence
        SRNN-FLAT  stochastic + factorized on the flattened (width-1) sequence

All models run in double precision. ``ForwardResult`` is the common output contract.

"""

import json
import logging
import os
from dataclasses import asdict, dataclass, fields, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from SDW.datasets import BINARY, CONTINUOUS, FrameSequence, StepSequence, make_leak_split
from SDW.distributions import (DEFAULT_COMPONENTS, LOG_SCALE_CLAMP, DiagGaussianParams,
                               ElementHeads, head_sample, heads_from_raw, reparam_sample)
from SDW.errors import ModelError, TransformError

logger = logging.getLogger(__name__)

FAMILIES = ('F-RNN', 'F-SRNN', 'DELTA-RNN', 'RNN-HIER', 'SRNN-HIER', 'RNN-FLAT', 'SRNN-FLAT')
STOCHASTIC_FAMILIES = ('F-SRNN', 'SRNN-HIER', 'SRNN-FLAT')
HIER_FAMILIES = ('RNN-HIER', 'SRNN-HIER')
FLAT_FAMILIES = ('RNN-FLAT', 'SRNN-FLAT')
CELLS = ('lstm', 'gru', 'tanh')
SRNN_VARIANTS = ('z-forcing', 'simplified')
LOW_DECODERS = ('recurrent', 'masked')
DEFAULT_LATENT = 8


# EMBEDDING ModelConfig CLASS --------------------------------------------------------

@dataclass
class ModelConfig:
    """Architecture of one model. Widths are free knobs, matched across families by
    ``match_parameter_count``."""
    family: str = 'F-RNN'
    cell: str = 'lstm'                     # lstm | gru | tanh
    width: int = 64                        # recurrent state width
    emit_width: int = 64                   # emission MLP / low-level decoder width
    latent_dim: int = None                 # stochastic families only
    leak: dict = None                      # DELTA-RNN: {'scheme': 'interleave', 'U': 2} or {'scheme': 'random', 'V': 4, 'seed': 0}
    low_decoder: str = None                # hier families: recurrent | masked (None: by data kind)
    n_components: int = DEFAULT_COMPONENTS
    srnn_variant: str = 'z-forcing'        # z-forcing | simplified
    log_scale_clamp: float = LOG_SCALE_CLAMP

    @property
    def stochastic(self):
        return self.family in STOCHASTIC_FAMILIES

    @property
    def flat(self):
        return self.family in FLAT_FAMILIES

    def leak_split(self, L):
        leak = self.leak or {}
        return make_leak_split(L, leak.get('scheme'), U=leak.get('U'), V=leak.get('V'),
                               seed=leak.get('seed', 0))

    def resolved(self, element_kind):
        """Fills data-dependent defaults (low-level decoder kind)."""
        if self.family in HIER_FAMILIES and self.low_decoder is None:
            single_continuous = set(element_kind) == {CONTINUOUS}
            return replace(self, low_decoder='recurrent' if single_continuous else 'masked')
        return self

    def problems(self, element_kind=None):
        """Returns every violated invariant (empty list when valid)."""
        found = []
        if self.family not in FAMILIES:
            return ['model family must be one of %s, got %r' % (FAMILIES, self.family)]
        if self.cell not in CELLS:
            found.append('cell must be one of %s' % (CELLS,))
        for name in ('width', 'emit_width', 'n_components'):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                found.append('%s must be a positive integer' % name)
        if self.stochastic:
            if not isinstance(self.latent_dim, int) or self.latent_dim < 1:
                found.append('%s needs latent_dim >= 1' % self.family)
            if self.srnn_variant not in SRNN_VARIANTS:
                found.append('srnn_variant must be one of %s' % (SRNN_VARIANTS,))
        elif self.latent_dim is not None:
            found.append('%s is deterministic and takes no latent_dim' % self.family)
        if self.family in HIER_FAMILIES and self.low_decoder not in LOW_DECODERS + (None,):
            found.append('low_decoder must be one of %s' % (LOW_DECODERS,))
        if element_kind is None:
            return found
        L = len(element_kind)
        if self.family == 'DELTA-RNN':
            try:
                self.leak_split(L)
            except TransformError as e:
                found.append('DELTA-RNN leak split: %s' % e)
        if self.flat and len(set(element_kind)) != 1:
            found.append('flat model not applicable: %s needs single-typed steps' % self.family)
        if self.family in HIER_FAMILIES and self.resolved(element_kind).low_decoder == 'recurrent' \
                and len(set(element_kind)) != 1:
            found.append('recurrent low-level decoder ties its head across elements and needs single-typed steps')
        return found

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ModelError('unknown model config keys %s' % sorted(unknown))
        return cls(**d)


# EMBEDDING TRACES -------------------------------------------------------------------

@dataclass
class LatentTrace:
    """Per-step prior/posterior parameters, the sampled z_t and the noise used.
    ``posterior`` and ``backward`` are None in prior mode."""
    prior: DiagGaussianParams
    posterior: DiagGaussianParams
    z: torch.Tensor
    noise: torch.Tensor
    backward: torch.Tensor = None
    variant: str = 'z-forcing'


@dataclass
class HiddenTrace:
    high: torch.Tensor                 # emission context per step
    forward: torch.Tensor = None       # forward states feeding step t (v_{t-1})
    backward: torch.Tensor = None      # backward states v<-_t (posterior mode)
    low: torch.Tensor = None           # low-level states g_{t,i} (recurrent hier)


@dataclass
class ForwardResult:
    heads: ElementHeads
    latent: LatentTrace = None
    hidden: HiddenTrace = None
    mask: torch.Tensor = None

    def element_logprob(self, x):
        """(B, T, L) element log-probabilities (padding not masked)."""
        return self.heads.log_prob(x)

    def step_logprob(self, x):
        """(B, T) step log-probabilities with padded steps set to zero."""
        out = self.element_logprob(x).sum(-1)
        if self.mask is not None:
            out = out * self.mask
        return out


# EMBEDDING BUILDING BLOCKS ----------------------------------------------------------

class Recurrence(nn.Module):
    """LSTM/GRU/tanh recurrence with a learned initial state."""

    def __init__(self, cell, input_size, width):
        super().__init__()
        rnn_class = {'lstm': nn.LSTM, 'gru': nn.GRU, 'tanh': nn.RNN}[cell]
        self.rnn = rnn_class(input_size, width, batch_first=True)
        self.h0 = nn.Parameter(torch.zeros(width))
        self.c0 = nn.Parameter(torch.zeros(width)) if cell == 'lstm' else None

    def initial_state(self, batch):
        h = self.h0.expand(1, batch, -1).contiguous()
        if self.c0 is None:
            return h
        return h, self.c0.expand(1, batch, -1).contiguous()

    def forward(self, inputs, state=None):
        """Returns (outputs, state); outputs[:, t] is the state after consuming inputs[:, t]."""
        if state is None:
            state = self.initial_state(inputs.shape[0])
        return self.rnn(inputs, state)

    def contexts(self, inputs):
        """States before consuming each input: the initial state, then outputs[:, :-1]."""
        out, _ = self.forward(inputs)
        first = self.h0.expand(inputs.shape[0], 1, -1)
        return torch.cat([first, out[:, :-1]], dim=1)


def _mlp(in_features, width):
    return nn.Sequential(nn.Linear(in_features, width), nn.Tanh())


class GaussianLayer(nn.Module):
    """Two-layer map to a diagonal Gaussian (latent prior / posterior)."""

    def __init__(self, in_features, width, dim, clamp=LOG_SCALE_CLAMP):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_features, width), nn.Tanh(), nn.Linear(width, 2 * dim))
        self.clamp = clamp

    def forward(self, h):
        mean, log_scale = self.net(h).chunk(2, dim=-1)
        return DiagGaussianParams(mean, log_scale.clamp(-self.clamp, self.clamp))


class AuxiliaryHead(nn.Module):
    """Single affine map plus nonlinearity from z_t to a Gaussian over v<-_t."""

    def __init__(self, latent_dim, state_width, clamp=LOG_SCALE_CLAMP):
        super().__init__()
        self.affine = nn.Linear(latent_dim, 2 * state_width)
        self.clamp = clamp

    def forward(self, z):
        mean, log_scale = self.affine(z).chunk(2, dim=-1)
        return DiagGaussianParams(torch.tanh(mean), log_scale.clamp(-self.clamp, self.clamp))


class HeadProjection(nn.Module):
    """Affine map from a feature vector to the heads of a block of elements."""

    def __init__(self, in_features, element_kind, n_components, clamp=LOG_SCALE_CLAMP):
        super().__init__()
        self.element_kind = tuple(element_kind)
        self.n_continuous = sum(k == CONTINUOUS for k in self.element_kind)
        self.n_binary = sum(k == BINARY for k in self.element_kind)
        self.K = n_components
        self.clamp = clamp
        self.continuous = nn.Linear(in_features, self.n_continuous * 3 * n_components) if self.n_continuous else None
        self.binary = nn.Linear(in_features, self.n_binary) if self.n_binary else None

    def forward(self, h):
        raw_c = raw_b = None
        if self.continuous is not None:
            raw_c = self.continuous(h).reshape(h.shape[:-1] + (self.n_continuous, 3 * self.K))
        if self.binary is not None:
            raw_b = self.binary(h)
        return heads_from_raw(self.element_kind, raw_c, raw_b, self.clamp)


class TiedHeadProjection(nn.Module):
    """One affine head shared by every element position of single-typed steps."""

    def __init__(self, in_features, element_kind, n_components, clamp=LOG_SCALE_CLAMP):
        super().__init__()
        self.element_kind = tuple(element_kind)
        self.kind = self.element_kind[0]
        self.K = n_components
        self.clamp = clamp
        self.affine = nn.Linear(in_features, 3 * n_components if self.kind == CONTINUOUS else 1)

    def forward(self, g):
        raw = self.affine(g)
        if self.kind == CONTINUOUS:
            return heads_from_raw(self.element_kind, raw_continuous=raw, clamp=self.clamp)
        return heads_from_raw(self.element_kind, raw_binary=raw.squeeze(-1), clamp=self.clamp)


class MaskedLinear(nn.Linear):
    """Linear layer whose weight is multiplied by a fixed 0/1 connectivity mask."""

    def __init__(self, in_features, out_features, mask):
        super().__init__(in_features, out_features)
        self.register_buffer('mask', torch.as_tensor(np.asarray(mask, dtype=np.float64)))

    def forward(self, x):
        return F.linear(x, self.mask.to(self.weight.dtype) * self.weight, self.bias)


# EMBEDDING BACKBONES ----------------------------------------------------------------

def _reverse_padded(x, lengths):
    """Reverses every sequence of a padded batch inside its own length."""
    B, T = x.shape[:2]
    idx = torch.arange(T).expand(B, T)
    rev = lengths[:, None] - 1 - idx
    rev = torch.where(rev >= 0, rev, idx)
    return x.gather(1, rev[..., None].expand_as(x))


def _stack_params(items):
    return DiagGaussianParams(torch.stack([p.mean for p in items], 1),
                              torch.stack([p.log_scale for p in items], 1))


class DeterministicBackbone(nn.Module):
    """h_t = f(x_<t); step 1 sees the learned initial state only."""

    def __init__(self, L, cfg):
        super().__init__()
        self.rnn = Recurrence(cfg.cell, L, cfg.width)
        self.features_dim = cfg.width

    def forward(self, x, mask=None, mode='posterior', noise=None, generator=None):
        ctx = self.rnn.contexts(x)
        return ctx, None, HiddenTrace(high=ctx, forward=ctx)


class StochasticBackbone(nn.Module):
    """Stochastic recurrence with one Gaussian latent per step.

    z-forcing:  v->_t = RNN([x_t, z_t], v->_{t-1}); prior p(z_t | v->_{t-1});
                posterior q(z_t | v->_{t-1}, v<-_t); emission context [v->_{t-1}, z_t].
    simplified: v->_t = RNN(x_t, v->_{t-1}) without z; same prior/posterior;
                emission context h_t = RNN([v->_{t-1}, z_t], h_{t-1}).
    Both use v<-_t = RNN(x_t, v<-_{t+1}) for the backward states.
    """

    def __init__(self, L, cfg):
        super().__init__()
        W, Z = cfg.width, cfg.latent_dim
        self.variant = cfg.srnn_variant
        self.latent_dim = Z
        self.backward_rnn = Recurrence(cfg.cell, L, W)
        self.prior = GaussianLayer(W, W, Z, cfg.log_scale_clamp)
        self.posterior = GaussianLayer(2 * W, W, Z, cfg.log_scale_clamp)
        if self.variant == 'z-forcing':
            self.forward_rnn = Recurrence(cfg.cell, L + Z, W)
            self.aux = AuxiliaryHead(Z, W, cfg.log_scale_clamp)
            self.features_dim = W + Z
        else:
            self.forward_rnn = Recurrence(cfg.cell, L, W)
            self.output_rnn = Recurrence(cfg.cell, W + Z, W)
            self.aux = None
            self.features_dim = W

    def backward_states(self, x, mask=None):
        if mask is None:
            lengths = torch.full((x.shape[0],), x.shape[1], dtype=torch.long)
        else:
            lengths = mask.sum(1).long()
        out, _ = self.backward_rnn(_reverse_padded(x, lengths))
        return _reverse_padded(out, lengths)

    def forward(self, x, mask=None, mode='posterior', noise=None, generator=None):
        if mode not in ('posterior', 'prior'):
            raise ModelError('mode must be posterior or prior, got %r' % (mode,))
        B, T, _ = x.shape
        if noise is None:
            noise = torch.randn((B, T, self.latent_dim), generator=generator, dtype=x.dtype)
        elif noise.shape != (B, T, self.latent_dim):
            raise ModelError('noise must have shape %s' % ((B, T, self.latent_dim),))
        vb = self.backward_states(x, mask) if mode == 'posterior' else None
        if self.variant == 'z-forcing':
            state = self.forward_rnn.initial_state(B)
            v_prev = self.forward_rnn.h0.expand(B, -1)
            priors, posts, zs, feats, ctxs = [], [], [], [], []
            for t in range(T):
                prior = self.prior(v_prev)
                if vb is not None:
                    post = self.posterior(torch.cat([v_prev, vb[:, t]], dim=-1))
                    z = reparam_sample(post, noise[:, t])
                    posts.append(post)
                else:
                    z = reparam_sample(prior, noise[:, t])
                priors.append(prior)
                zs.append(z)
                ctxs.append(v_prev)
                feats.append(torch.cat([v_prev, z], dim=-1))
                out, state = self.forward_rnn(torch.cat([x[:, t], z], dim=-1)[:, None], state)
                v_prev = out[:, 0]
            prior = _stack_params(priors)
            post = _stack_params(posts) if posts else None
            z = torch.stack(zs, 1)
            features = torch.stack(feats, 1)
            v_ctx = torch.stack(ctxs, 1)
        else:
            v_ctx = self.forward_rnn.contexts(x)
            prior = self.prior(v_ctx)
            post = self.posterior(torch.cat([v_ctx, vb], dim=-1)) if vb is not None else None
            z = reparam_sample(post if post is not None else prior, noise)
            features, _ = self.output_rnn(torch.cat([v_ctx, z], dim=-1))
        latent = LatentTrace(prior, post, z, noise, vb, self.variant)
        return features, latent, HiddenTrace(high=features, forward=v_ctx, backward=vb)


# EMBEDDING EMITTERS -----------------------------------------------------------------

class FactorizedEmitter(nn.Module):
    """All L element heads from the step context; siblings never seen."""

    def __init__(self, in_features, element_kind, cfg):
        super().__init__()
        self.mlp = _mlp(in_features, cfg.emit_width)
        self.heads = HeadProjection(cfg.emit_width, element_kind, cfg.n_components, cfg.log_scale_clamp)

    def sampling_blocks(self, L):
        return [list(range(L))]

    def forward(self, features, x):
        return self.heads(self.mlp(features)), None


class LeakedEmitter(nn.Module):
    """Part a from the context; part b from the context and a projection of x_t^a."""

    def __init__(self, in_features, element_kind, split, cfg):
        super().__init__()
        self.split = split
        self.element_kind = tuple(element_kind)
        kinds_a = [element_kind[i] for i in split.a_indices]
        kinds_b = [element_kind[i] for i in split.b_indices]
        self.mlp_a = _mlp(in_features, cfg.emit_width)
        self.heads_a = HeadProjection(cfg.emit_width, kinds_a, cfg.n_components, cfg.log_scale_clamp)
        self.leak = _mlp(len(split.a_indices), cfg.emit_width)
        self.mlp_b = _mlp(in_features + cfg.emit_width, cfg.emit_width)
        self.heads_b = HeadProjection(cfg.emit_width, kinds_b, cfg.n_components, cfg.log_scale_clamp)

    def sampling_blocks(self, L):
        return [list(self.split.a_indices), list(self.split.b_indices)]

    def part_a(self, features):
        return self.heads_a(self.mlp_a(features))

    def part_b(self, features, leaked):
        return self.heads_b(self.mlp_b(torch.cat([features, self.leak(leaked)], dim=-1)))

    def forward(self, features, x):
        a = self.part_a(features)
        b = self.part_b(features, x[..., list(self.split.a_indices)])
        merged = ElementHeads.merge([(a, self.split.a_indices), (b, self.split.b_indices)], self.element_kind)
        return merged, None


class RecurrentLowDecoder(nn.Module):
    """g_{t,i} = RNN([x_{t,i-1}, h_t], g_{t,i-1}), with x_{t,0} = 0."""

    def __init__(self, in_features, element_kind, cfg):
        super().__init__()
        self.rnn = Recurrence(cfg.cell, 1 + in_features, cfg.emit_width)
        self.heads = TiedHeadProjection(cfg.emit_width, element_kind, cfg.n_components, cfg.log_scale_clamp)

    def sampling_blocks(self, L):
        return [[i] for i in range(L)]

    def forward(self, features, x):
        B, T, L = x.shape
        shifted = torch.cat([x.new_zeros(B, T, 1), x[..., :-1]], dim=-1)
        inputs = torch.cat([shifted.unsqueeze(-1), features.unsqueeze(2).expand(B, T, L, features.shape[-1])], -1)
        g, _ = self.rnn(inputs.reshape(B * T, L, -1))
        g = g.reshape(B, T, L, -1)
        return self.heads(g), g


class MaskedLowDecoder(nn.Module):
    """Causally masked MLP over the elements of a step (natural order).

    Input degrees: x_{t,i} has degree i (1-based), the step context degree 0. A hidden
    unit of degree m sees inputs of degree <= m; the outputs of element i see hidden
    units of degree < i, so element i reads only x_{t,<i} and the context.
    """

    def __init__(self, in_features, element_kind, cfg):
        super().__init__()
        kinds = tuple(element_kind)
        L, H, K = len(kinds), cfg.emit_width, cfg.n_components
        self.element_kind = kinds
        self.K = K
        self.clamp = cfg.log_scale_clamp
        cont = [i for i, k in enumerate(kinds) if k == CONTINUOUS]
        binary = [i for i, k in enumerate(kinds) if k == BINARY]
        self.n_continuous = len(cont)
        in_degree = np.concatenate([np.arange(1, L + 1), np.zeros(in_features)])
        hidden_degree = np.arange(H) % L
        out_degree = np.concatenate([np.repeat(np.array(cont, dtype=int) + 1, 3 * K),
                                     np.array(binary, dtype=int) + 1])
        self.hidden = MaskedLinear(L + in_features, H, hidden_degree[:, None] >= in_degree[None, :])
        self.out = MaskedLinear(H, out_degree.size, out_degree[:, None] > hidden_degree[None, :])

    def sampling_blocks(self, L):
        return [[i] for i in range(L)]

    def forward(self, features, x):
        raw = self.out(torch.tanh(self.hidden(torch.cat([x, features], dim=-1))))
        split = self.n_continuous * 3 * self.K
        raw_c = raw[..., :split].reshape(raw.shape[:-1] + (self.n_continuous, 3 * self.K)) if split else None
        raw_b = raw[..., split:] if raw.shape[-1] > split else None
        return heads_from_raw(self.element_kind, raw_c, raw_b, self.clamp), None


# EMBEDDING SequenceModel CLASS ------------------------------------------------------

class SequenceModel(nn.Module):
    """A backbone plus an emitter, built from a ModelConfig and the element kinds of the
    data. Flat families are built from the kinds of the original step and run on the
    width-1 flattened sequence; ``frames_per_step`` keeps the original width."""

    def __init__(self, cfg, element_kind):
        super().__init__()
        element_kind = tuple(element_kind)
        found = cfg.problems(element_kind)
        if found:
            raise ModelError('; '.join(found))
        cfg = cfg.resolved(element_kind)
        self.cfg = cfg
        self.frames_per_step = len(element_kind)
        self.element_kind = element_kind[:1] if cfg.flat else element_kind
        L = len(self.element_kind)
        if cfg.stochastic:
            self.backbone = StochasticBackbone(L, cfg)
        else:
            self.backbone = DeterministicBackbone(L, cfg)
        features = self.backbone.features_dim
        if cfg.family == 'DELTA-RNN':
            self.emitter = LeakedEmitter(features, self.element_kind, cfg.leak_split(L), cfg)
        elif cfg.family in HIER_FAMILIES and cfg.low_decoder == 'recurrent':
            self.emitter = RecurrentLowDecoder(features, self.element_kind, cfg)
        elif cfg.family in HIER_FAMILIES:
            self.emitter = MaskedLowDecoder(features, self.element_kind, cfg)
        else:
            self.emitter = FactorizedEmitter(features, self.element_kind, cfg)
        self.double()

    @property
    def family(self):
        return self.cfg.family

    @property
    def stochastic(self):
        return self.cfg.stochastic

    @property
    def L(self):
        return len(self.element_kind)

    def forward(self, x, mask=None, mode='posterior', noise=None, generator=None):
        x = torch.as_tensor(x, dtype=torch.float64)
        if x.dim() != 3 or x.shape[-1] != self.L:
            raise ModelError('%s expects input of shape (B, T, %d), got %s'
                             % (self.family, self.L, tuple(x.shape)))
        if mask is not None:
            mask = torch.as_tensor(mask, dtype=torch.float64)
        features, latent, hidden = self.backbone(x, mask, mode, noise, generator)
        heads, low = self.emitter(features, x)
        hidden.low = low
        return ForwardResult(heads, latent, hidden, mask)


def build_model(cfg, element_kind):
    """Constructs the model for ``cfg`` on data with the given step element kinds."""
    return SequenceModel(cfg, element_kind)


# EMBEDDING FORWARD OPERATIONS -------------------------------------------------------

def as_batch(seq):
    """StepSequence / (T, L) array / (B, T, L) tensor -> (B, T, L) float64 tensor."""
    if isinstance(seq, StepSequence):
        seq = seq.steps
    x = torch.as_tensor(np.asarray(seq) if not torch.is_tensor(seq) else seq, dtype=torch.float64)
    return x[None] if x.dim() == 2 else x


def _require(model, families):
    if model.family not in families:
        raise ModelError('expected a model of family %s, got %s' % ('/'.join(families), model.family))


def frnn_forward(model, seq, mask=None):
    _require(model, ('F-RNN',))
    return model(as_batch(seq), mask)


def fsrnn_forward(model, seq, mode='posterior', noise=None, generator=None, mask=None):
    _require(model, ('F-SRNN',))
    return model(as_batch(seq), mask, mode, noise, generator)


def delta_rnn_forward(model, seq, mask=None):
    _require(model, ('DELTA-RNN',))
    x = as_batch(seq)
    if x.shape[-1] != model.emitter.split.L:
        raise ModelError('leak split covers %d elements, step has %d' % (model.emitter.split.L, x.shape[-1]))
    return model(x, mask)


def hier_forward(model, seq, mode='posterior', noise=None, generator=None, mask=None):
    _require(model, HIER_FAMILIES)
    return model(as_batch(seq), mask, mode, noise, generator)


def flat_forward(model, frames, mode='posterior', noise=None, generator=None, mask=None):
    """Runs a flat model on frames: a FrameSequence, a (N,) array or a (B, N) tensor."""
    _require(model, FLAT_FAMILIES)
    if isinstance(frames, FrameSequence):
        frames = frames.frames
    x = torch.as_tensor(np.asarray(frames) if not torch.is_tensor(frames) else frames, dtype=torch.float64)
    if x.dim() == 1:
        x = x[None]
    return model(x.unsqueeze(-1), mask, mode, noise, generator)


def generate(model, T, seed=0):
    """Ancestral sampling of T steps (stochastic families sample z from the prior).

    Each block of elements is drawn from a fresh forward pass on the partially filled
    sequence; causality makes the not-yet-drawn entries irrelevant.

    Returns: StepSequence of shape T x L (original step width for flat families).

    """
    generator = torch.Generator().manual_seed(int(seed))
    n = T * model.frames_per_step if model.cfg.flat else T
    was_training = model.training
    model.eval()
    with torch.no_grad():
        x = torch.zeros(1, n, model.L, dtype=torch.float64)
        noise = None
        if model.stochastic:
            noise = torch.randn((1, n, model.cfg.latent_dim), generator=generator, dtype=torch.float64)
        for t in range(n):
            for block in model.emitter.sampling_blocks(model.L):
                result = model(x, mode='prior', noise=noise)
                draw = head_sample(result.heads.index((0, t)), generator)
                x[0, t, block] = draw[block]
    model.train(was_training)
    steps = x[0].numpy().reshape(T, -1)
    kinds = model.element_kind * model.frames_per_step if model.cfg.flat else model.element_kind
    return StepSequence(steps, kinds, source='generated:%s:%d' % (model.family, seed))


# EMBEDDING PARAMETER ACCOUNTING -----------------------------------------------------

def count_parameters(model):
    """Total number of scalar parameters, heads included."""
    return int(sum(p.numel() for p in model.parameters()))


def match_parameter_count(cfg, element_kind, target, max_width=1024):
    """Tunes ``width`` and ``emit_width`` so the parameter count is as close as possible
    to ``target``: the largest width with emit_width = width that stays below the
    target, then the emission width that brings the count closest to it."""

    def count(width, emit):
        return count_parameters(SequenceModel(replace(cfg, width=width, emit_width=emit), element_kind))

    def largest(lo, hi, fn):
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if fn(mid) <= target:
                lo = mid
            else:
                hi = mid - 1
        return lo

    if count(2, 2) > target:
        logger.warning('%s: target %d is below the smallest model (%d)', cfg.family, target, count(2, 2))
        return replace(cfg, width=2, emit_width=2)
    width = largest(2, max_width, lambda w: count(w, w))
    emit = largest(width, 8 * max_width, lambda e: count(width, e))
    if abs(count(width, emit + 1) - target) < abs(count(width, emit) - target):
        emit += 1
    return replace(cfg, width=width, emit_width=emit)


def default_family_configs(element_kind, target, base=None):
    """The seven families (those applicable to ``element_kind``) matched to ``target``."""
    base = base or ModelConfig()
    L = len(element_kind)
    out = {}
    for family in FAMILIES:
        cfg = replace(base, family=family, latent_dim=None, leak=None)
        if cfg.stochastic:
            cfg = replace(cfg, latent_dim=base.latent_dim or DEFAULT_LATENT)
        if family == 'DELTA-RNN':
            if L < 2:
                continue
            cfg = replace(cfg, leak={'scheme': 'random', 'V': L // 2, 'seed': 0})
        if cfg.problems(element_kind):
            logger.info('%s not applicable to element kinds %s', family, sorted(set(element_kind)))
            continue
        out[family] = match_parameter_count(cfg, element_kind, target)
    return out


# Non-normative reference sizes (millions of parameters) per family and data domain.
REFERENCE_PARAMETER_COUNTS = {
    'speech': {'F-RNN': 17.41, 'F-SRNN': 17.53, 'DELTA-RNN': 18.57, 'RNN-FLAT': 16.86,
               'SRNN-FLAT': 16.93, 'RNN-HIER': 17.28, 'SRNN-HIER': 17.25},
    'midi': {'F-RNN': 0.57, 'F-SRNN': 2.28, 'DELTA-RNN': 0.71, 'RNN-FLAT': 1.58,
             'SRNN-FLAT': 2.24, 'RNN-HIER': 1.87, 'SRNN-HIER': 3.05},
    'handwriting': {'F-RNN': 0.93, 'F-SRNN': 1.17, 'RNN-HIER': 0.97, 'SRNN-HIER': 1.02},
}


# EMBEDDING CHECKPOINTS --------------------------------------------------------------

def save_checkpoint(model, path, meta=None):
    """Writes the parameter blob (``torch.save``) and a JSON sidecar ``<path>.json``."""
    torch.save(model.state_dict(), path)
    sidecar = dict(meta or {})
    sidecar.update({'model': model.cfg.to_dict(), 'element_kind': list(model.element_kind * model.frames_per_step
                                                                       if model.cfg.flat else model.element_kind),
                    'parameter_count': count_parameters(model)})
    with open(path + '.json', 'w', encoding='utf-8') as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write('\n')
    return path


def load_checkpoint(path):
    """Returns (model, sidecar dict)."""
    if not os.path.isfile(path) or not os.path.isfile(path + '.json'):
        raise ModelError('missing checkpoint %s' % path)
    with open(path + '.json', encoding='utf-8') as f:
        sidecar = json.load(f)
    model = SequenceModel(ModelConfig.from_dict(sidecar['model']), tuple(sidecar['element_kind']))
    model.load_state_dict(torch.load(path))
    return model, sidecar
