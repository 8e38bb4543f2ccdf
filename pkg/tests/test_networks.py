import pytest
import torch

from singan_seg.networks import (
    DiscriminatorScale, GeneratorScale, count_parameters, init_stack, init_weights, layer_widths,
    to_array, to_tensor,
)
from singan_seg.pyramid import compute_scale_schedule


def _params(module):
    return torch.cat([p.detach().flatten() for p in module.parameters()])


def test_widths_doubling_rule():
    assert layer_widths(9, 32) == [32, 32, 32, 32, 64, 64, 64, 64, 128]
    assert layer_widths(13, 32)[-1] == 128


def test_same_seed_identical_init():
    s = compute_scale_schedule(250, 250)
    a, b = init_stack(s, seed=5), init_stack(s, seed=5)
    assert len(a.generators) == len(a.discriminators) == 9
    for ga, gb in zip(a.generators, b.generators):
        assert torch.equal(_params(ga), _params(gb))
    assert torch.equal(a.z_star, b.z_star)
    c = init_stack(s, seed=6)
    assert not torch.equal(_params(a.generators[0]), _params(c.generators[0]))


def test_generator_deterministic_and_bounded():
    g = GeneratorScale(16)
    init_weights(g, torch.Generator().manual_seed(0))
    z = torch.zeros(1, 4, 25, 25)
    out1, out2 = g(z, z), g(z, z)
    assert out1.shape == (1, 4, 25, 25)
    assert torch.equal(out1, out2)
    big = torch.full((1, 4, 25, 25), 5.0)
    assert g(big, big).abs().max() <= 1.0
    with pytest.raises(ValueError):
        g(z, torch.zeros(1, 4, 24, 25))


def test_generator_clamp_passes_gradient():
    g = GeneratorScale(8)
    prev = torch.full((1, 4, 12, 12), 3.0, requires_grad=True)
    g(torch.zeros_like(prev), prev).sum().backward()
    assert prev.grad.abs().sum() > 0


def test_discriminator_shapes_and_hygiene():
    d = DiscriminatorScale(16)
    init_weights(d, torch.Generator().manual_seed(1))
    assert d.receptive_field == 11
    x = torch.randn(1, 4, 25, 25, generator=torch.Generator().manual_seed(2))
    out = d(x)
    assert out.shape[-2:] == (15, 15)
    y = torch.randn(1, 4, 25, 25, generator=torch.Generator().manual_seed(3))
    assert d(x).mean() != d(y).mean()
    assert torch.isfinite(d(torch.full((1, 4, 25, 25), 0.7))).all()
    with pytest.raises(ValueError):
        d(torch.zeros(1, 4, 10, 30))


def test_eval_equals_train_mode():
    # normalization uses batch statistics in both modes
    g = GeneratorScale(8)
    x = torch.randn(1, 4, 20, 20)
    g.train()
    a = g(x, x)
    g.eval()
    assert torch.allclose(a, g(x, x))


def test_stack_reconstruction_shape_and_tensor_helpers():
    s = compute_scale_schedule(40, 40)
    stack = init_stack(s, width=8, seed=0)
    rec = stack.reconstruction()
    assert rec.shape == (1, 4, 40, 40)
    assert torch.equal(rec, stack.reconstruction())
    r1 = stack.run(s.num_scales - 1, 0, torch.Generator().manual_seed(1))
    r2 = stack.run(s.num_scales - 1, 0, torch.Generator().manual_seed(1))
    assert torch.equal(r1, r2)
    arr = to_array(rec)
    assert arr.shape == (40, 40, 4)
    assert torch.equal(to_tensor(arr), rec)
    assert count_parameters(stack.generators[0]) > 0
    with pytest.raises(ValueError):
        init_stack(s, width=4)
    with pytest.raises(ValueError):
        init_stack(s, width=8, norm="group")
