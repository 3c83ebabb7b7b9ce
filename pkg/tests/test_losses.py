import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oracles import gradient_relative_error, ssim_reference
from pfagan.losses import (FeatureExtractor, LossWeights, adv_loss_D, adv_loss_G, age_loss,
                           age_objective, identity_loss, ssim, total_G_loss)
from pfagan.networks import AgeEstimator


class FixedEstimator(torch.nn.Module):
    """Stand-in estimator returning preset logits regardless of the input."""

    def __init__(self, age_logits, group_logits):
        super().__init__()
        self.age_logits = torch.as_tensor(age_logits, dtype=torch.float64)
        self.group_logits = torch.as_tensor(group_logits, dtype=torch.float64)

    def forward(self, x):
        b = x.shape[0]
        age_logits = self.age_logits.expand(b, -1)
        ages = torch.arange(101, dtype=torch.float64)
        expected = (torch.softmax(age_logits, 1) * ages).sum(1)
        return expected, age_logits, self.group_logits.expand(b, -1)


def peaked(index, height=80.0, n=101):
    v = torch.zeros(n, dtype=torch.float64)
    v[index] = height
    return v


@pytest.mark.parametrize("scores, expected", [(torch.ones(2, 1, 3, 3), 0.0), (torch.zeros(4, 1, 2, 2), 0.5),
                                              (torch.tensor([0.5, 1.5]), 0.125)])
def test_adv_loss_G(scores, expected):
    assert adv_loss_G(scores).item() == expected


@pytest.mark.parametrize("real, fake, expected", [(1.0, 0.0, 0.0), (0.0, 1.0, 1.0), (0.5, 0.5, 0.25)])
def test_adv_loss_D(real, fake, expected):
    r = torch.full((3, 1, 2, 2), real)
    f = torch.full((3, 1, 2, 2), fake)
    assert adv_loss_D(r, f).item() == expected


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=20), st.lists(st.floats(-5, 5), min_size=1, max_size=20))
def test_adv_losses_non_negative(real, fake):
    r, f = torch.tensor(real, dtype=torch.float64), torch.tensor(fake, dtype=torch.float64)
    assert adv_loss_G(f).item() >= 0
    assert adv_loss_D(r, f).item() >= 0
    assert (adv_loss_G(f).item() == 0) == bool(torch.all(f == 1))


def test_age_loss_saturated_correct_prediction():
    est = FixedEstimator(peaked(30), peaked(1, n=4))
    loss = age_loss(torch.zeros(2, 3, 8, 8), [30.0, 30.0], [2, 2], est)
    assert loss.item() < 1e-6


def test_age_loss_uniform_logits():
    est = FixedEstimator(torch.zeros(101), torch.zeros(4))
    loss = age_loss(torch.zeros(3, 3, 8, 8), [50.0] * 3, [1, 2, 3], est)
    assert loss.item() == pytest.approx(math.log(4), abs=1e-12)


def test_age_loss_pure_regression_gap():
    est = FixedEstimator(peaked(50), peaked(0, n=4))
    loss = age_loss(torch.zeros(1, 3, 8, 8), [30.0], [1], est)
    assert loss.item() == pytest.approx(20.0, abs=1e-9)


def test_age_loss_reductions_and_terms():
    expected = torch.tensor([40.0, 50.0], dtype=torch.float64)
    logits = torch.zeros(2, 4, dtype=torch.float64)
    ce = math.log(4)
    assert age_objective(expected, logits, [43.0, 46.0], [1, 2]).item() == pytest.approx(3.5 + ce)
    assert age_objective(expected, logits, [43.0, 46.0], [1, 2], "batch_l2").item() == pytest.approx(5.0 + ce)
    assert age_objective(expected, logits, [0.0, 0.0], [1, 2], terms="classification_only").item() == pytest.approx(ce)


def test_age_loss_rejects_bad_group():
    est = FixedEstimator(torch.zeros(101), torch.zeros(4))
    with pytest.raises(ValueError):
        age_loss(torch.zeros(1, 3, 8, 8), [30.0], [5], est)


def test_ssim_self_is_one():
    x = torch.rand(2, 3, 16, 16, dtype=torch.float64) * 2 - 1
    assert torch.allclose(ssim(x, x), torch.ones(2, dtype=torch.float64), atol=1e-12)


def test_ssim_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(5):
        a, b = rng.uniform(-1, 1, (2, 3, 8, 8))
        got = ssim(torch.tensor(a)[None], torch.tensor(b)[None]).item()
        assert abs(got - ssim_reference(a, b)) < 1e-6


@pytest.fixture(scope="module")
def phi():
    return FeatureExtractor().double()


def test_identity_loss_identical_images(phi):
    x = torch.rand(2, 3, 64, 64, dtype=torch.float64) * 2 - 1
    total, parts = identity_loss(x, x.clone(), phi)
    assert total.item() == pytest.approx(0.0, abs=1e-12)
    assert all(v.item() == pytest.approx(0.0, abs=1e-12) for v in parts.values())


def test_identity_loss_constant_shift(phi):
    x = torch.rand(1, 3, 64, 64, dtype=torch.float64) * 1.5 - 0.9
    _, parts = identity_loss(x, x + 0.1, phi)
    assert parts["pixel"].item() == pytest.approx(0.1, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_identity_components_symmetric(seed):
    g = torch.Generator().manual_seed(seed)
    a = torch.rand(1, 3, 12, 12, generator=g, dtype=torch.float64) * 2 - 1
    b = torch.rand(1, 3, 12, 12, generator=g, dtype=torch.float64) * 2 - 1
    flat = torch.nn.Identity()
    _, ab = identity_loss(a, b, flat)
    _, ba = identity_loss(b, a, flat)
    assert ab["pixel"].item() == pytest.approx(ba["pixel"].item(), abs=1e-12)
    assert ab["ssim"].item() == pytest.approx(ba["ssim"].item(), abs=1e-12)


def test_identity_loss_combination():
    w = LossWeights(alpha_ssim=0.15, alpha_fea=0.025)
    a = torch.rand(1, 3, 12, 12, dtype=torch.float64)
    b = torch.rand(1, 3, 12, 12, dtype=torch.float64)
    total, p = identity_loss(a, b, torch.nn.Identity(), w)
    expected = 0.85 * p["pixel"] + 0.15 * p["ssim"] + 0.025 * p["feature"]
    assert total.item() == pytest.approx(expected.item(), abs=1e-14)
    assert p["feature"].item() == pytest.approx(((a - b) ** 2).mean().item(), abs=1e-14)


def test_identity_loss_shape_mismatch(phi):
    with pytest.raises(ValueError):
        identity_loss(torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 16, 16), phi)


def test_feature_extractor_is_deterministic_and_frozen():
    f1, f2 = FeatureExtractor(seed=3), FeatureExtractor(seed=3)
    x = torch.rand(2, 3, 64, 64)
    assert torch.equal(f1(x), f2(x))
    assert not any(p.requires_grad for p in f1.parameters())
    convs = [m for m in f1.modules() if isinstance(m, torch.nn.Conv2d)]
    assert len(convs) == 10
    assert f1(x).shape == (2, 128, 8, 8)


@pytest.mark.parametrize("parts, expected", [({"adv": 0, "age": 0, "ide": 0}, 0.0),
                                             ({"adv": 1, "age": 1, "ide": 1}, 100.42),
                                             ({"adv": 0.5, "age": 0, "ide": 0}, 50.0)])
def test_total_G_loss(parts, expected):
    assert total_G_loss(parts, LossWeights()) == expected


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lambda_adv=-1)
    with pytest.raises(ValueError):
        LossWeights(alpha_ssim=1.5)


def _patch():
    torch.manual_seed(0)
    return (torch.rand(2, 3, 8, 8, dtype=torch.float64) * 2 - 1).requires_grad_(True)


def test_gradcheck_adversarial_losses():
    s = _patch()
    other = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    assert gradient_relative_error(lambda: adv_loss_G(s), s) < 1e-3
    assert gradient_relative_error(lambda: adv_loss_D(other, s), s) < 1e-3


def test_gradcheck_identity_terms():
    x = _patch()
    ref = torch.rand(2, 3, 8, 8, dtype=torch.float64) * 2 - 1
    assert gradient_relative_error(lambda: (1 - ssim(x, ref)).mean(), x) < 1e-3
    phi = FeatureExtractor(layer=2).double()
    assert gradient_relative_error(lambda: ((phi(x) - phi(ref)) ** 2).mean(), x) < 1e-3


def test_gradcheck_age_loss():
    torch.manual_seed(0)
    A = AgeEstimator(4, 64).double().eval()
    x = (torch.rand(2, 3, 64, 64, dtype=torch.float64) * 2 - 1).requires_grad_(True)
    assert gradient_relative_error(lambda: age_loss(x, [35.0, 60.0], [2, 4], A), x) < 1e-3
