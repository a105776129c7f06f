"""Test the embedding objectives module (SDW.objectives).
Annealing schedule, exact and variational objectives, the z-forcing
auxiliary term and the delta-posterior equivalence.
"""

import math
import warnings

import numpy as np
import pytest
import torch

import SDW
from SDW.objectives import *
from SDW.datasets import BINARY, CONTINUOUS
from SDW.errors import ObjectiveError
from SDW.models import ModelConfig, build_model

C4 = (CONTINUOUS,) * 4


def _model(family, kinds=C4, seed=0, **overrides):
    options = dict(family=family, width=8, emit_width=8, n_components=2)
    if family in ('F-SRNN', 'SRNN-HIER', 'SRNN-FLAT'):
        options['latent_dim'] = 2
    if family == 'DELTA-RNN':
        options['leak'] = {'scheme': 'interleave', 'U': 2}
    options.update(overrides)
    torch.manual_seed(seed)
    return build_model(ModelConfig(**options), kinds)


def _data(B=2, T=3, L=4, seed=0):
    return torch.as_tensor(np.random.default_rng(seed).standard_normal((B, T, L)))


def test_kl_anneal_coeff():
    """0.2 at the start, 1.0 from update 16000 on"""
    assert kl_anneal_coeff(0) == 0.2
    assert kl_anneal_coeff(8000) == 0.6
    assert kl_anneal_coeff(16000) == 1.0
    assert kl_anneal_coeff(10 ** 6) == 1.0
    values = [kl_anneal_coeff(u) for u in range(0, 20000, 250)]
    assert values == sorted(values)
    with pytest.raises(ObjectiveError):
        kl_anneal_coeff(-1)


def test_mle_loss_sums_step_logprobs():
    model = _model('F-RNN')
    x = _data()
    result = model(x)
    out = mle_loss(result, x)
    assert float(out.total) == pytest.approx(float(result.element_logprob(x).sum()), abs=1e-10)
    assert float(out.kl.sum()) == 0.0
    with pytest.raises(ObjectiveError):
        mle_loss(_model('F-SRNN')(x), x)


def test_elbo_loss_parts():
    """total = recon - coeff * kl with a non-negative closed-form KL"""
    model = _model('F-SRNN')
    x = _data()
    result = model(x, generator=torch.Generator().manual_seed(0))
    out = elbo_loss(result, x, kl_coeff=0.5)
    assert bool((out.kl >= 0).all())
    assert out.total.item() == pytest.approx((out.recon.sum() - 0.5 * out.kl.sum()).item(), abs=1e-10)
    assert out.elbo.item() == pytest.approx((out.recon.sum() - out.kl.sum()).item(), abs=1e-10)
    assert out.total.requires_grad
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        record = out.as_record()
    assert set(record) == {'total', 'recon', 'kl', 'coeff', 'aux'}
    assert record['coeff'] == 0.5
    assert record['total'] == pytest.approx(float(out.total.detach()), abs=1e-10)
    with pytest.raises(ObjectiveError):
        elbo_loss(result, x, kl_coeff=1.5)
    with pytest.raises(ObjectiveError):
        elbo_loss(model(x, mode='prior'), x)
    with pytest.raises(ObjectiveError):
        elbo_loss(_model('F-RNN')(x), x)


def test_sampled_kl_averages_to_the_closed_form():
    """The per-draw log-ratio is an unbiased estimate of the closed-form KL given the history"""
    model = _model('F-SRNN')
    x = _data(B=1).expand(4000, -1, -1).clone()
    with torch.no_grad():
        result = model(x, generator=torch.Generator().manual_seed(3))
        closed = elbo_loss(result, x).kl
        sampled = elbo_loss(result, x, analytic_kl=False).kl
    diff = sampled - closed
    stderr = diff.std(0) / math.sqrt(diff.shape[0])
    assert bool((diff.mean(0).abs() <= 5 * stderr + 1e-9).all())


def test_zforcing_aux_loss_paths():
    """alpha reaches the posterior through z; beta stops at z and reaches the backward recurrence"""
    model = _model('F-SRNN')
    x = _data()
    backbone = model.backbone
    zero = zforcing_aux_loss(model(x).latent, model(x).latent.backward, 0.0, 0.0, backbone.aux)
    assert float(zero) == 0.0 and not zero.requires_grad

    result = model(x)
    loss = zforcing_aux_loss(result.latent, result.latent.backward, 0.0, 1.0, backbone.aux)
    loss.backward()
    assert all(p.grad is None for p in backbone.posterior.parameters())
    assert any(p.grad is not None for p in backbone.backward_rnn.parameters())

    model.zero_grad(set_to_none=True)
    result = model(x)
    loss = zforcing_aux_loss(result.latent, result.latent.backward, 1.0, 0.0, backbone.aux)
    loss.backward()
    assert any(p.grad is not None for p in backbone.posterior.parameters())
    assert all(p.grad is None for p in backbone.prior.parameters())


def test_zforcing_aux_loss_refuses_other_variants():
    model = _model('F-SRNN', srnn_variant='simplified')
    x = _data()
    result = model(x)
    with pytest.raises(ObjectiveError):
        zforcing_aux_loss(result.latent, result.latent.backward, 0.005, 0.005, None)
    zf = _model('F-SRNN')
    with pytest.raises(ObjectiveError):
        zforcing_aux_loss(zf(x, mode='prior').latent, None, 0.005, 0.005, zf.backbone.aux)


def test_hermite_grid_moments():
    points, mass = hermite_grid(2, 8)
    assert points.shape == (64, 2)
    assert float(mass.sum()) == pytest.approx(1.0, abs=1e-12)
    assert float((mass[:, None] * points ** 2).sum(0)[0]) == pytest.approx(1.0, abs=1e-12)


def test_delta_equivalence_cancels_and_converges():
    """The leaked reconstruction cancels the entropy; the gap shrinks with sigma"""
    model = _model('DELTA-RNN')
    x = _data()
    coarse = delta_equivalence_elbo(model, x, 0.1)
    fine = delta_equivalence_elbo(model, x, 0.01)
    assert coarse.cancellation <= 1e-10
    assert fine.cancellation <= 1e-10
    assert fine.gap < coarse.gap
    assert fine.n_steps == 6


def test_delta_equivalence_preconditions():
    x = _data()
    with pytest.raises(ObjectiveError):
        delta_equivalence_elbo(_model('F-RNN'), x, 0.1)
    with pytest.raises(ObjectiveError):
        delta_equivalence_elbo(_model('DELTA-RNN'), x, 0.0)
    mixed = _model('DELTA-RNN', kinds=(BINARY, CONTINUOUS, CONTINUOUS, CONTINUOUS))
    with pytest.raises(ObjectiveError):
        delta_equivalence_elbo(mixed, x, 0.1)


if __name__ == "__main__":

    test_kl_anneal_coeff()
    test_elbo_loss_parts()
    test_delta_equivalence_cancels_and_converges()
