import numpy as np
import pytest
import torch

from oracles import gradient_relative_error, softmax_expectation
from pfagan.core import build_condition, build_gates
from pfagan.networks import (AgeEstimator, ConditionalGenerator, PatchDiscriminator,
                             ProgressiveGenerator, SubGenerator, dex_expectation, estimate_age,
                             generate, load_checkpoint, save_checkpoint, subgen_step)


def tiny_generator(n_groups=4, dtype=torch.float64, seed=0):
    torch.manual_seed(seed)
    return ProgressiveGenerator(n_groups, base_channels=2, n_residual=1).to(dtype)


@pytest.fixture
def x8():
    torch.manual_seed(1)
    return torch.rand(3, 3, 8, 8, dtype=torch.float64) * 2 - 1


def test_zero_gate_returns_input(x8):
    sub = SubGenerator(base_channels=2, n_residual=1).double()
    assert torch.equal(subgen_step(x8, sub, 0), x8)
    assert torch.equal(subgen_step(x8, sub, torch.zeros(3)), x8)


def test_zero_final_layer_is_identity(x8):
    sub = SubGenerator(base_channels=2, n_residual=1).double()
    with torch.no_grad():
        sub.final_layer.weight.zero_()
        sub.final_layer.bias.zero_()
    assert torch.equal(subgen_step(x8, sub, 1), x8)


def test_gate_one_adds_branch(x8):
    sub = SubGenerator(base_channels=2, n_residual=1).double()
    with torch.no_grad():
        branch = sub(x8)
    out = subgen_step(x8, sub, 1)
    assert torch.allclose(out, x8 + branch, rtol=0, atol=1e-12)


def test_per_row_gates_only_touch_engaged_rows(x8):
    sub = SubGenerator(base_channels=2, n_residual=1).double()
    out = subgen_step(x8, sub, torch.tensor([1, 0, 1]))
    assert torch.equal(out[1], x8[1])
    with torch.no_grad():
        engaged = x8[[0, 2]] + sub(x8[[0, 2]])
    assert torch.allclose(out[[0, 2]], engaged, atol=1e-12)


def test_generate_examples(x8):
    G = tiny_generator()
    g1, g2, g3 = G.subnets
    with torch.no_grad():
        assert torch.equal(generate(x8, (0, 0, 0), G), x8)
        x2 = x8 + g1(x8)
        x3 = x2 + g2(x2)
        expected = x8 + g1(x8) + g2(x2) + g3(x3)
        assert torch.allclose(generate(x8, (1, 1, 1), G), expected, atol=1e-12)
        assert torch.allclose(generate(x8, (0, 1, 0), G), x8 + g2(x8), atol=1e-12)


@pytest.mark.parametrize("n", [2, 3, 4, 5])
def test_sequential_fold_matches_generate(n, x8):
    G = tiny_generator(n)
    with torch.no_grad():
        for s in range(1, n + 1):
            for t in range(s, n + 1):
                fold = x8
                for i in range(s, t):
                    fold = subgen_step(fold, G.subnets[i - 1], 1)
                assert torch.equal(generate(x8, build_gates(s, t, n), G), fold)


def test_prefix_consistency(x8):
    G = tiny_generator()
    with torch.no_grad():
        for s in range(1, 5):
            for r in range(s, 5):
                for t in range(r, 5):
                    direct = generate(x8, build_gates(s, t, 4), G)
                    split = generate(generate(x8, build_gates(s, r, 4), G), build_gates(r, t, 4), G)
                    assert torch.equal(direct, split)


def test_bypassed_subnets_get_no_gradient(x8):
    G = tiny_generator()
    generate(x8, (0, 1, 0), G).sum().backward()
    assert all(p.grad is None for p in G.subnets[0].parameters())
    assert all(p.grad is None for p in G.subnets[2].parameters())
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in G.subnets[1].parameters())


def test_end_to_end_gradient_matches_finite_differences(x8):
    G = tiny_generator(3)
    torch.manual_seed(5)
    weight = torch.randn(3, 3, 8, 8, dtype=torch.float64)
    first = G.subnets[0].model[0][1].weight

    def loss():
        return (generate(x8, (1, 1), G) * weight).sum()

    assert gradient_relative_error(loss, first, n_coords=16) < 1e-3


@pytest.mark.parametrize("size", [64, 128])
def test_subgenerator_preserves_shape(size):
    sub = SubGenerator()
    with torch.no_grad():
        assert sub(torch.zeros(1, 3, size, size)).shape == (1, 3, size, size)


def test_resize_upsampling_preserves_shape():
    sub = SubGenerator(base_channels=4, n_residual=1, upsample="resize")
    with torch.no_grad():
        assert sub(torch.zeros(2, 3, 16, 16)).shape == (2, 3, 16, 16)


def test_generator_rejects_wrong_size_and_gates():
    G = ProgressiveGenerator(4, image_size=64, base_channels=2, n_residual=1)
    with pytest.raises(ValueError):
        G(torch.zeros(1, 3, 32, 32), (1, 1, 1))
    with pytest.raises(ValueError):
        G(torch.zeros(1, 3, 64, 64), (1, 1))


def test_discriminator_256_output_shape():
    D = PatchDiscriminator(4)
    with torch.no_grad():
        assert D(torch.zeros(1, 3, 256, 256), [2]).shape == (1, 1, 14, 14)


def test_discriminator_64_output_shape_and_batch():
    D = PatchDiscriminator(4)
    with torch.no_grad():
        out = D(torch.zeros(12, 3, 64, 64), [1, 2, 3, 4] * 3)
    # 64 -> 32 -> 16 -> 8 -> 4 -> 3 -> 2
    assert out.shape == (12, 1, 2, 2)


def test_discriminator_condition_mismatch():
    D = PatchDiscriminator(4)
    with pytest.raises(ValueError):
        D(torch.zeros(1, 3, 64, 64), cond=build_condition(2, 4, 64, 64))
    with torch.no_grad():
        ok = D(torch.zeros(1, 3, 64, 64), cond=build_condition(2, 4, D.condition_size(64), D.condition_size(64)))
    assert ok.shape == (1, 1, 2, 2)


def test_discriminator_layer_layout():
    D = PatchDiscriminator(4)
    convs = [m for m in D.modules() if isinstance(m, torch.nn.Conv2d)]
    assert [c.out_channels for c in convs] == [64, 128, 256, 512, 512, 1]
    assert [c.stride[0] for c in convs] == [2, 2, 2, 2, 1, 1]
    assert convs[1].in_channels == 64 + 4
    normed = [hasattr(c, "parametrizations") for c in convs]
    assert normed == [False, True, True, True, True, False]


def test_conditional_generator_input_channels():
    G = ConditionalGenerator(4, base_channels=2, n_residual=1)
    assert G.in_channels == 7
    with torch.no_grad():
        assert G(torch.zeros(2, 3, 8, 8), [2, 4]).shape == (2, 3, 8, 8)


def test_dex_uniform_logits_is_fifty():
    assert dex_expectation(torch.zeros(101, dtype=torch.float64)).item() == 50.0


def test_dex_dominant_logit():
    logits = torch.zeros(101, dtype=torch.float64)
    logits[30] = 60.0
    assert abs(dex_expectation(logits).item() - 30.0) < 1e-12


def test_dex_matches_scalar_loop():
    rng = np.random.default_rng(3)
    for _ in range(20):
        logits = rng.normal(0, 3, size=101)
        got = dex_expectation(torch.tensor(logits)).item()
        assert abs(got - softmax_expectation(logits.tolist())) < 1e-9


def test_age_estimator_heads():
    A = AgeEstimator(4, 64).eval()
    with torch.no_grad():
        age, age_logits, group_logits = estimate_age(torch.rand(5, 3, 64, 64) * 2 - 1, A)
    assert age_logits.shape == (5, 101)
    assert group_logits.shape == (5, 4)
    assert torch.all((age >= 0) & (age <= 100))
    probs = torch.softmax(age_logits.double(), 1).sum(1)
    assert torch.allclose(probs, torch.ones(5, dtype=torch.float64), atol=1e-6)
    assert A.group_head.weight.shape == (4, 101)


def test_checkpoint_round_trip(tmp_path):
    G = ProgressiveGenerator(4, image_size=64, base_channels=4, n_residual=1).eval()
    arch = {"n_groups": 4, "image_size": 64, "base_channels": 4, "n_residual": 1}
    path = save_checkpoint(G, tmp_path / "g.pt", arch, {"iteration": 7})
    assert (tmp_path / "g.json").is_file()
    G2, meta = load_checkpoint(path)
    assert meta["iteration"] == 7 and meta["kind"] == "progressive_generator"
    x = torch.rand(2, 3, 64, 64)
    with torch.no_grad():
        assert torch.equal(G(x, (1, 1, 0)), G2.eval()(x, (1, 1, 0)))
