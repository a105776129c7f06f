"""Test the embedding models module (SDW.models).
Config validation, forward shapes of every family, the within-step
dependency structure of the emitters, sampling, parameter matching and
checkpoints. All models are tiny (width 8, two mixture components).
"""

import numpy as np
import pytest
import torch

import SDW
from SDW.models import *
from SDW.datasets import BINARY, CONTINUOUS, FrameSequence, StepSequence
from SDW.errors import ModelError
from SDW.evaluation import param_match_check

C4 = (CONTINUOUS,) * 4
MIXED = (BINARY, CONTINUOUS, CONTINUOUS)


def _cfg(family, **overrides):
    options = dict(family=family, width=8, emit_width=8, n_components=2)
    if family in STOCHASTIC_FAMILIES:
        options['latent_dim'] = 2
    if family == 'DELTA-RNN':
        options['leak'] = {'scheme': 'interleave', 'U': 2}
    options.update(overrides)
    return ModelConfig(**options)


def _model(family, kinds=C4, seed=0, **overrides):
    torch.manual_seed(seed)
    return build_model(_cfg(family, **overrides), kinds)


def _data(kinds, B=2, T=4, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((B, T, len(kinds)))
    for i, kind in enumerate(kinds):
        if kind == BINARY:
            x[..., i] = rng.integers(0, 2, (B, T))
    return torch.as_tensor(x)


def _heads_logprob(model, x, kinds, noise=None):
    """Element log-probabilities of a fixed reference point; depends on the heads only."""
    y = torch.zeros_like(x)
    result = model(x, mode='prior', noise=noise)
    return result.heads.log_prob(y).detach()


def test_config_problems():
    """Invalid combinations are reported, valid ones are not"""
    assert _cfg('F-RNN').problems(C4) == []
    assert ModelConfig(family='X').problems()
    assert _cfg('F-SRNN', latent_dim=None).problems(C4)
    assert _cfg('F-RNN', latent_dim=3).problems(C4)
    assert _cfg('DELTA-RNN', leak={'scheme': 'random', 'V': 4}).problems(C4)
    assert any('flat model not applicable' in p for p in _cfg('RNN-FLAT').problems(MIXED))
    assert _cfg('RNN-HIER', low_decoder='recurrent').problems(MIXED)
    assert _cfg('RNN-HIER').problems(MIXED) == []


def test_low_decoder_defaults_by_data_kind():
    assert _cfg('RNN-HIER').resolved(C4).low_decoder == 'recurrent'
    assert _cfg('RNN-HIER').resolved(MIXED).low_decoder == 'masked'
    assert _cfg('F-RNN').resolved(MIXED).low_decoder is None


def test_config_dict_round_trip():
    cfg = _cfg('DELTA-RNN')
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ModelError):
        ModelConfig.from_dict(dict(cfg.to_dict(), bogus=1))


def test_invalid_model_is_refused():
    with pytest.raises(ModelError, match='flat model not applicable'):
        build_model(_cfg('SRNN-FLAT'), MIXED)


@pytest.mark.parametrize('family', FAMILIES)
def test_forward_shapes(family):
    """Heads cover every element of every step; the step log-probabilities are finite"""
    model = _model(family)
    x = _data(C4)
    if model.cfg.flat:
        x = x.reshape(2, -1, 1)
    result = model(x)
    assert result.element_logprob(x).shape == x.shape
    assert torch.isfinite(result.step_logprob(x)).all()
    if model.stochastic:
        assert result.latent.posterior.mean.shape == (x.shape[0], x.shape[1], 2)
        assert result.latent.backward is not None
    else:
        assert result.latent is None


def test_padded_steps_are_masked():
    model = _model('F-RNN')
    x = _data(C4)
    mask = torch.tensor([[1.0, 1.0, 1.0, 1.0], [1.0, 1.0, 0.0, 0.0]], dtype=torch.float64)
    out = model(x, mask).step_logprob(x)
    assert out[1, 2:].tolist() == [0.0, 0.0]


@pytest.mark.parametrize('family', ['F-RNN', 'RNN-FLAT', 'F-SRNN'])
def test_factorized_heads_ignore_the_current_step(family):
    """Changing x_t leaves the heads of steps <= t unchanged"""
    model = _model(family)
    x = _data(C4, T=4) if not model.cfg.flat else _data((CONTINUOUS,), T=8)
    noise = torch.zeros(2, x.shape[1], 2, dtype=torch.float64) if model.stochastic else None
    before = _heads_logprob(model, x, model.element_kind, noise)
    x2 = x.clone()
    x2[:, 2] += 0.5
    after = _heads_logprob(model, x2, model.element_kind, noise)
    assert torch.allclose(before[:, :3], after[:, :3], rtol=0, atol=1e-12)
    assert not torch.allclose(before[:, 3:], after[:, 3:])


def test_leaked_elements_condition_the_complement():
    """Part a of a step never sees x_t; part b sees x_t^a"""
    model = _model('DELTA-RNN')
    x = _data(C4)
    before = _heads_logprob(model, x, C4)
    x2 = x.clone()
    x2[:, 1, 0] += 0.5                      # element 0 is leaked under interleave(2)
    after = _heads_logprob(model, x2, C4)
    assert torch.allclose(before[:, :1], after[:, :1], rtol=0, atol=1e-12)
    assert torch.allclose(before[:, 1, [0, 2]], after[:, 1, [0, 2]], rtol=0, atol=1e-12)
    assert not torch.allclose(before[:, 1, [1, 3]], after[:, 1, [1, 3]])


@pytest.mark.parametrize('kinds,low_decoder', [(C4, 'recurrent'), (C4, 'masked'), (MIXED, 'masked')])
def test_low_level_decoder_is_causal_inside_the_step(kinds, low_decoder):
    """Element i of step t reads x_{t,<i} only"""
    model = _model('RNN-HIER', kinds, low_decoder=low_decoder)
    x = _data(kinds)
    before = _heads_logprob(model, x, kinds)
    x2 = x.clone()
    x2[:, 1, 1] += 0.5
    after = _heads_logprob(model, x2, kinds)
    assert torch.allclose(before[:, 0], after[:, 0], rtol=0, atol=1e-12)
    assert torch.allclose(before[:, 1, :2], after[:, 1, :2], rtol=0, atol=1e-12)
    assert not torch.allclose(before[:, 1, 2], after[:, 1, 2])


def test_stochastic_forward_validates_noise_and_mode():
    model = _model('SRNN-HIER')
    x = _data(C4)
    with pytest.raises(ModelError):
        model(x, noise=torch.zeros(2, 4, 3, dtype=torch.float64))
    with pytest.raises(ModelError):
        model(x, mode='smoothing')
    noise = torch.zeros(2, 4, 2, dtype=torch.float64)
    prior = model(x, mode='prior', noise=noise).latent
    assert prior.posterior is None
    assert torch.equal(prior.z, prior.prior.mean)


def test_simplified_variant_runs_without_auxiliary_head():
    model = _model('F-SRNN', srnn_variant='simplified')
    assert model.backbone.aux is None
    x = _data(C4)
    assert torch.isfinite(model(x).step_logprob(x)).all()


def test_family_specific_entry_points():
    """Each entry point accepts its own family and refuses the others"""
    x = _data(C4)
    assert frnn_forward(_model('F-RNN'), x).heads.L == 4
    assert delta_rnn_forward(_model('DELTA-RNN'), x).heads.L == 4
    assert fsrnn_forward(_model('F-SRNN'), x).latent is not None
    assert hier_forward(_model('SRNN-HIER'), x).latent is not None
    flat = flat_forward(_model('RNN-FLAT'), FrameSequence(np.arange(8.0) / 8))
    assert flat.heads.L == 1
    with pytest.raises(ModelError):
        delta_rnn_forward(_model('F-RNN'), x)
    with pytest.raises(ModelError):
        flat_forward(_model('F-RNN'), np.zeros(8))


def test_generate_shapes_and_support():
    """Samples have the step shape of the data, binary elements stay binary"""
    model = _model('RNN-HIER', MIXED)
    seq = generate(model, 3, seed=1)
    assert isinstance(seq, StepSequence)
    assert (seq.T, seq.L) == (3, 3)
    assert set(seq.steps[:, 0].tolist()) <= {0.0, 1.0}
    assert np.array_equal(seq.steps, generate(model, 3, seed=1).steps)
    flat = generate(_model('SRNN-FLAT'), 2, seed=0)
    assert (flat.T, flat.L) == (2, 4)


def test_match_parameter_count():
    """Matched sizes land within 2% of the target and of each other"""
    target = 50000
    configs = default_family_configs(C4, target, ModelConfig(n_components=2))
    assert set(configs) == set(FAMILIES)
    models = {family: build_model(cfg, C4) for family, cfg in configs.items()}
    for family, model in models.items():
        assert abs(count_parameters(model) - target) / target <= 0.02, family
    checks = param_match_check(models, 0.02)
    assert len(checks) == 21
    assert all(c.passed for c in checks), [(c.a, c.b, c.relative_difference) for c in checks if not c.passed]
    assert configs['DELTA-RNN'].leak == {'scheme': 'random', 'V': 2, 'seed': 0}
    mixed = default_family_configs(MIXED, target, ModelConfig(n_components=2))
    assert 'RNN-FLAT' not in mixed and 'SRNN-FLAT' not in mixed


def test_checkpoint_round_trip(tmp_path):
    """A reloaded model gives the same heads"""
    model = _model('DELTA-RNN')
    path = save_checkpoint(model, str(tmp_path / 'best.pt'), {'update': 7})
    loaded, sidecar = load_checkpoint(path)
    assert sidecar['update'] == 7
    assert sidecar['parameter_count'] == count_parameters(model)
    x = _data(C4)
    assert torch.equal(model(x).element_logprob(x), loaded(x).element_logprob(x))
    with pytest.raises(ModelError, match='missing checkpoint'):
        load_checkpoint(str(tmp_path / 'nothing.pt'))


if __name__ == "__main__":

    test_config_problems()
    test_leaked_elements_condition_the_complement()
    test_match_parameter_count()
