"""Test the embedding oracle module (SDW.oracle).
The verifiers are checked on cases with known answers before they are
trusted to judge the models.
"""

import json

import numpy as np
import pytest
import torch
from scipy import stats

import SDW
from SDW.oracle import *
from SDW.datasets import BINARY, CONTINUOUS
from SDW.distributions import DiagGaussianParams, GaussianMixtureParams, gauss_kl
from SDW.errors import OracleFailure
from SDW.models import FAMILIES


def _zeros(n=1):
    return torch.zeros(n, dtype=torch.float64)


def test_finite_diff_grad_on_a_cubic():
    x = torch.tensor([0.5, -1.0, 2.0], dtype=torch.float64, requires_grad=True)
    assert finite_diff_grad(lambda: (x ** 3).sum(), [x]) <= 1e-6
    assert x.tolist() == [0.5, -1.0, 2.0]
    with pytest.raises(ValueError):
        finite_diff_grad(lambda: (x ** 3).sum(), [x], eps=1e-2)


def test_finite_diff_grad_catches_a_wrong_gradient():
    x = torch.tensor([1.0, 2.0], dtype=torch.float64, requires_grad=True)

    class Doubled(torch.autograd.Function):
        @staticmethod
        def forward(ctx, v):
            ctx.save_for_backward(v)
            return (v ** 2).sum()

        @staticmethod
        def backward(ctx, grad):
            v, = ctx.saved_tensors
            return 4 * v * grad

    assert finite_diff_grad(lambda: Doubled.apply(x), [x]) == pytest.approx(0.5, abs=1e-6)


def test_direct_densities_match_scipy():
    assert direct_normal_logpdf(0.3, -0.2, 1.7) == pytest.approx(stats.norm.logpdf(0.3, -0.2, 1.7), abs=1e-12)
    mix = np.log(0.25 * stats.norm.pdf(1.0, 0.0, 1.0) + 0.75 * stats.norm.pdf(1.0, 2.0, 0.5))
    assert direct_gmm_logpdf(1.0, [0.25, 0.75], [0.0, 2.0], [1.0, 0.5]) == pytest.approx(mix, abs=1e-12)


def test_quadrature_norm():
    """Mixtures and single Gaussians integrate to one; a narrow grid is refused"""
    one = GaussianMixtureParams(_zeros(), _zeros(), _zeros())
    assert quadrature_norm(one, np.linspace(-8.0, 8.0, 10000)) == pytest.approx(1.0, abs=1e-6)
    mix = GaussianMixtureParams(torch.tensor([0.3, -1.0], dtype=torch.float64),
                                torch.tensor([-1.0, 1.5], dtype=torch.float64),
                                torch.tensor([-0.5, 0.2], dtype=torch.float64))
    assert quadrature_norm(mix, np.linspace(-12.0, 12.0, 20001)) == pytest.approx(1.0, abs=1e-3)
    gauss = DiagGaussianParams(torch.tensor([0.5], dtype=torch.float64), torch.tensor([-0.3], dtype=torch.float64))
    assert quadrature_norm(gauss, np.linspace(-10.0, 10.0, 20001)) == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(OracleFailure):
        quadrature_norm(one, np.linspace(-1.0, 1.0, 100))


def test_monte_carlo_kl_agrees_with_the_closed_form():
    q = (np.array([0.2, -0.4, 1.0]), np.array([0.1, -0.2, 0.0]))
    p = (np.array([-0.3, 0.5, 0.0]), np.array([0.3, 0.2, -0.1]))
    closed = float(gauss_kl(DiagGaussianParams(*map(torch.as_tensor, q)),
                            DiagGaussianParams(*map(torch.as_tensor, p))))
    estimate, stderr = monte_carlo_kl(q, p, 100000, seed=0)
    assert stderr > 0
    assert abs(estimate - closed) <= 4 * stderr


def test_single_state_surrogate_is_a_plain_gaussian():
    """G = 1: the marginal is the emission density itself"""
    s = random_surrogate(np.random.default_rng(0), G=1, D=2)
    x = np.array([[0.1, -0.3], [1.2, 0.4]])
    loc = s.weights * s.grid[0] + s.bias
    expected = float(stats.norm.logpdf(x, loc, s.scale).sum())
    assert enumerate_exact_loglik(s, x) == pytest.approx(expected, abs=1e-10)


@pytest.mark.parametrize('emission', ['gaussian', 'bernoulli'])
def test_surrogate_bounds(emission):
    """Mean-field ELBO never exceeds the exact value; the true posterior is tight"""
    rng = np.random.default_rng(1)
    for _ in range(10):
        s = random_surrogate(rng, G=3, D=2, emission=emission)
        x = s.sample(3, rng)
        exact = enumerate_exact_loglik(s, x)
        post = true_posterior(s, x)
        assert post.shape == (3, 3, 3)
        assert float(post.sum()) == pytest.approx(1.0, abs=1e-12)
        assert surrogate_elbo(s, x, mean_field_posterior(rng, 3, 3)) <= exact + 1e-9
        assert surrogate_elbo(s, x, post) == pytest.approx(exact, abs=1e-9)
        assert surrogate_multi_sample_bound(s, x, post, 8, rng) == pytest.approx(exact, abs=1e-9)


def test_surrogate_refuses_large_state_spaces():
    s = random_surrogate(np.random.default_rng(2), G=8, D=1)
    with pytest.raises(OracleFailure):
        enumerate_exact_loglik(s, np.zeros((5, 1)))
    with pytest.raises(ValueError):
        random_surrogate(np.random.default_rng(2), G=9)


@pytest.mark.parametrize('family', FAMILIES)
def test_every_family_is_causal(family):
    model = toy_model(family)
    assert check_causality(model, toy_batch(model))


def test_mixed_hierarchical_model_is_causal():
    model = toy_model('RNN-HIER', (BINARY, CONTINUOUS, CONTINUOUS), seed=1)
    assert check_causality(model, toy_batch(model, seed=1))


@pytest.mark.parametrize('family', FAMILIES)
def test_gradient_check(family):
    """Training objective of every family, auxiliary weights at 0.005"""
    model = toy_model(family)
    assert gradient_check(model, toy_batch(model)) <= 1e-4


@pytest.mark.parametrize('family', ['F-SRNN', 'SRNN-HIER', 'SRNN-FLAT'])
def test_auxiliary_term_matches_finite_differences(family):
    """Frozen targets give the training gradient and a function finite differences agree with"""
    model = toy_model(family)
    x = toy_batch(model)
    noise = torch.randn((x.shape[0], x.shape[1], 2), generator=torch.Generator().manual_seed(1),
                        dtype=torch.float64)
    frozen = aux_targets(model, x, noise)
    params = list(model.parameters())

    def aux(targets):
        result = model(x, mode='posterior', noise=noise)
        return zforcing_aux_loss(result.latent, result.latent.backward, 0.005, 0.005, model.backbone.aux,
                                 frozen=targets)

    trained = torch.autograd.grad(aux(None), params, allow_unused=True)
    checked = torch.autograd.grad(aux(frozen), params, allow_unused=True)
    for a, b in zip(trained, checked):
        assert (a is None) == (b is None)
        if a is not None:
            assert torch.allclose(a, b, rtol=0.0, atol=1e-12)
    assert float(aux(frozen)) == pytest.approx(float(aux(None)), abs=1e-12)
    assert finite_diff_grad(lambda: aux(frozen), params, floor=1e-4) <= 1e-4


def test_aux_targets_only_for_z_forcing():
    assert aux_targets(toy_model('F-RNN'), toy_batch(toy_model('F-RNN')), None) is None
    simplified = toy_model('F-SRNN', srnn_variant='simplified')
    assert aux_targets(simplified, toy_batch(simplified), None) is None


def test_delta_convergence_table():
    model = toy_model('DELTA-RNN')
    with torch.no_grad():
        for param in model.emitter.parameters():
            param.mul_(0.3)
    table = prop1_convergence(model, toy_batch(model), [0.1, 0.05, 0.025])
    assert len(table.ratios) == 2
    assert table.gaps == sorted(table.gaps, reverse=True)
    assert max(table.cancellation) <= 1e-10
    assert json.loads(json.dumps(table.to_dict()))['sigmas'] == [0.1, 0.05, 0.025]
    with pytest.raises(ValueError):
        prop1_convergence(model, toy_batch(model), [0.05, 0.1])


def test_oracle_summary():
    summary = OracleSummary()
    summary.add('one', True, value=1.0)
    assert summary.passed
    summary.add('two', False)
    assert not summary.passed
    assert summary.to_dict()['checks'][1] == {'name': 'two', 'passed': False}


def test_run_oracle_suite_passes():
    summary = run_oracle_suite(seed=0, n_surrogates=5)
    names = {c['name'] for c in summary.checks}
    assert {'gradient/%s' % f for f in FAMILIES} <= names
    assert {'causality/%s' % f for f in FAMILIES} <= names
    assert [c['name'] for c in summary.checks if not c['passed']] == []
    assert summary.passed
    delta = [c for c in summary.checks if c['name'] == 'delta-posterior'][0]
    assert delta['table_passed'] is True
    assert json.loads(json.dumps(summary.to_dict(), default=float))['passed'] is True


if __name__ == "__main__":

    test_finite_diff_grad_on_a_cubic()
    test_quadrature_norm()
    test_surrogate_bounds('gaussian')
