import numpy as np
import pytest
import torch

from finet.appearancenet import (
    AppearanceStage,
    FixedFeatureExtractor,
    default_weights,
    gram,
    loss_appearance_total,
    loss_rec,
    sample_appearances,
    train_step_appearance,
)
from finet.config import Config
from finet.distributions import DiagonalGaussian, DimensionError
from finet.netcore import param_digest
from finet.stagedata import OutfitTensors
from finet.training import make_optimizer

from gradcheck import relative_errors
from oracles import gram_loop

TINY = Config(levels=2, base_channels=4, batch=4)


def test_extractor_structure():
    ex = FixedFeatureExtractor()
    feats = ex(torch.randn(2, 3, 64, 64))
    assert len(feats) == 6
    assert [f.shape[1] for f in feats] == [3, 8, 16, 32, 32, 32]
    assert [f.shape[-1] for f in feats] == [64, 64, 32, 16, 8, 4]
    assert all(torch.all(f >= 0) for f in feats[1:])


def test_extractor_is_frozen_and_seeded():
    a, b = FixedFeatureExtractor(seed=5), FixedFeatureExtractor(seed=5)
    assert list(a.parameters()) == []
    assert param_digest(a) == param_digest(b) != param_digest(FixedFeatureExtractor(seed=6))
    stage = AppearanceStage(TINY)
    trainable = {id(p) for p in stage.parameters()}
    assert not any(id(t) in trainable for t in stage.extractor.buffers())


def test_extractor_handles_odd_sizes():
    feats = FixedFeatureExtractor()(torch.randn(1, 3, 5, 5))
    assert all(f.shape[-1] >= 1 for f in feats)


@pytest.mark.parametrize("seed", range(10))
def test_gram_matches_double_loop(seed):
    # Integer-valued entries make every partial sum exact, so summation order cannot matter.
    rng = np.random.default_rng(seed)
    f = rng.integers(-9, 10, size=(rng.integers(1, 5), rng.integers(1, 7))).astype(np.float64)
    assert np.array_equal(gram(torch.from_numpy(f)).numpy(), gram_loop(f))


def test_rec_loss_zero_on_identical_images():
    x = torch.rand(2, 3, 16, 16) * 2 - 1
    assert loss_rec(x, x.clone(), FixedFeatureExtractor()).item() == 0.0


def test_rec_loss_positive_and_symmetric():
    ex = FixedFeatureExtractor()
    a, b = torch.rand(2, 3, 16, 16), torch.rand(2, 3, 16, 16)
    assert loss_rec(a, b, ex).item() > 0
    assert loss_rec(a, b, ex).item() == pytest.approx(loss_rec(b, a, ex).item(), rel=1e-6)


def test_rec_loss_pixel_term_only():
    ex = FixedFeatureExtractor()
    a, b = torch.zeros(1, 3, 4, 4), torch.full((1, 3, 4, 4), 0.5)
    lam = [1.0 / 48] + [0.0] * 5
    assert loss_rec(a, b, ex, lambdas=lam, gammas=[0.0] * 6).item() == pytest.approx(0.5)


def test_default_weights_normalise_per_sample():
    feats = FixedFeatureExtractor()(torch.randn(2, 3, 16, 16))
    lambdas, gammas = default_weights(feats)
    assert lambdas[0] == 1 / (3 * 16 * 16)
    assert gammas[0] == 0.0 and gammas[1] == 1 / (8 * 8 * 16 * 16)


def test_rec_loss_shape_mismatch():
    with pytest.raises(DimensionError):
        loss_rec(torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 4, 4), FixedFeatureExtractor())


def test_rec_loss_gradient():
    torch.manual_seed(1)
    ex = FixedFeatureExtractor().double()
    target = torch.rand(1, 3, 4, 4, dtype=torch.float64)
    x = torch.rand(1, 3, 4, 4)
    errs = relative_errors(lambda t: loss_rec(t, target.to(t.dtype), ex), [x], eps=1e-5)
    assert errs[0] <= 1e-2


def test_total_loss_adds_weighted_kl():
    ex = FixedFeatureExtractor()
    a, b = torch.rand(2, 3, 8, 8), torch.rand(2, 3, 8, 8)
    q = DiagonalGaussian(torch.randn(2, 8), torch.zeros(2, 8))
    assert loss_appearance_total(a, b, q, q, ex).item() == pytest.approx(loss_rec(a, b, ex).item())
    std = DiagonalGaussian.standard(8, (2,))
    assert torch.equal(loss_appearance_total(a, b, q, std, ex), loss_appearance_total(a, b, q, None, ex, standard_prior=True))


def test_train_step_updates_generator_and_encoders(small_dataset):
    data = OutfitTensors(small_dataset[:8])
    stage = AppearanceStage(TINY)
    names = ("generator", "appearance_encoder", "compat_encoder")
    before = {k: param_digest(getattr(stage, k)) for k in names}
    ex_before = param_digest(stage.extractor)
    metrics = train_step_appearance(stage, data.random_batch(4, torch.Generator()), make_optimizer(stage, TINY), torch.randn(4, 8))
    assert set(metrics) == {"rec_loss", "kl"}
    assert all(param_digest(getattr(stage, k)) != d for k, d in before.items())
    assert param_digest(stage.extractor) == ex_before


def test_sample_appearances_temperature_zero():
    stage = AppearanceStage(TINY)
    I_hat, p_a, x_c = torch.zeros(3, 64, 64), torch.zeros(11, 64, 64), torch.ones(12, 32, 32)
    out = sample_appearances(stage, I_hat, p_a, x_c, 3, temperature=0.0)
    assert out.shape == (3, 3, 64, 64) and torch.equal(out[0], out[2])
    assert out.abs().max() <= 1
