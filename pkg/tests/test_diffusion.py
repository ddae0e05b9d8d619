from __future__ import annotations

import math

import numpy as np
import pytest
import torch
from torch import nn

from raresynth.data import NEGATIVE, POSITIVE
from raresynth.diffusion import (
    POS_TOKEN,
    UNCOND_TOKEN,
    DiffusionTrainConfig,
    SamplerConfig,
    UNetSpec,
    build_noise_schedule,
    build_unet,
    count_parameters,
    diffusion_loss,
    forward_diffuse,
    generate_pool,
    guided_eps,
    pretrain_diffusion,
    sample_batch,
    sample_cfg,
    sampling_timesteps,
    to_data_space,
    to_model_space,
)
from raresynth.errors import InvalidArgument
from raresynth.rng import derive_seed, torch_generator

from conftest import TINY_SPEC, make_dataset

# -- schedule -----------------------------------------------------------------


def test_schedule_t2_endpoints():
    s = build_noise_schedule(2)
    np.testing.assert_allclose(s.beta, [1e-4, 2e-2], rtol=0, atol=1e-15)
    np.testing.assert_allclose(s.alpha_bar, [0.9999, 0.9999 * 0.98], rtol=1e-12)


@pytest.mark.parametrize("kind", ["linear", "cosine"])
def test_schedule_invariants(kind):
    s = build_noise_schedule(1000, kind)
    assert np.all(s.beta > 0) and np.all(s.beta < 1)
    np.testing.assert_array_equal(s.alpha, 1 - s.beta)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.alpha_bar[0] == s.alpha[0]
    assert np.all((s.alpha_bar > 0) & (s.alpha_bar < 1))
    # independent product, accumulated in extended precision
    prod = np.cumprod(s.alpha.astype(np.longdouble))
    np.testing.assert_allclose(s.alpha_bar, prod.astype(np.float64), rtol=1e-12)


def test_schedule_final_alpha_bar_small():
    assert build_noise_schedule(1000).alpha_bar[-1] < 0.01


def test_schedule_errors():
    with pytest.raises(InvalidArgument):
        build_noise_schedule(1)
    with pytest.raises(InvalidArgument):
        build_noise_schedule(10, "quadratic")


def test_model_space_roundtrip():
    x = torch.linspace(0, 1, 11)
    assert torch.allclose(to_data_space(to_model_space(x)), x)
    assert to_model_space(torch.tensor(0.0)) == -1 and to_model_space(torch.tensor(1.0)) == 1


# -- forward process ----------------------------------------------------------


def test_forward_zero_noise(sched):
    x0 = torch.rand(2, 1, 4, 4) * 2 - 1
    for t in (0, 500, 999):
        out = forward_diffuse(x0, t, torch.zeros_like(x0), sched)
        assert torch.allclose(out, math.sqrt(sched.alpha_bar[t]) * x0)


def test_forward_t0_close_to_x0(sched):
    x0 = torch.rand(3, 1, 8, 8, generator=torch_generator(1)) * 2 - 1
    eps = torch.randn(x0.shape, generator=torch_generator(0))
    assert (forward_diffuse(x0, 0, eps, sched) - x0).abs().max() < 0.05
    eps = eps.clamp(-2, 2)
    assert (forward_diffuse(x0, 0, eps, sched) - x0).abs().max() <= 0.0201


def test_forward_errors(sched):
    x0 = torch.zeros(1, 1, 4, 4)
    with pytest.raises(InvalidArgument):
        forward_diffuse(x0, 0, torch.zeros(1, 1, 4, 5), sched)
    with pytest.raises(InvalidArgument):
        forward_diffuse(x0, 1000, torch.zeros_like(x0), sched)


def test_forward_per_sample_t(sched):
    x0 = torch.ones(2, 1, 2, 2)
    out = forward_diffuse(x0, torch.tensor([0, 999]), torch.zeros_like(x0), sched)
    assert out[0, 0, 0, 0].item() == pytest.approx(math.sqrt(sched.alpha_bar[0]))
    assert out[1, 0, 0, 0].item() == pytest.approx(math.sqrt(sched.alpha_bar[999]))


# -- objective ------------------------------------------------------------------


class EchoNoise(nn.Module):
    """Stub that returns the exact noise drawn by the loss (perfect predictor)."""

    def __init__(self, sched):
        super().__init__()
        self.sched = sched
        self.x0 = None

    def forward(self, xt, t, c):
        ab = torch.tensor(self.sched.alpha_bar, dtype=xt.dtype)[t].view(-1, 1, 1, 1)
        return (xt - ab.sqrt() * self.x0) / (1 - ab).sqrt()


def test_loss_zero_for_perfect_predictor(sched):
    m = EchoNoise(sched)
    m.x0 = torch.rand(8, 1, 4, 4, dtype=torch.float64) * 2 - 1
    loss = diffusion_loss(m, m.x0, torch.zeros(8, dtype=torch.long), sched, torch_generator(0))
    assert loss.item() < 1e-20


def test_loss_about_one_for_zero_predictor(sched):
    def zero(x, t, c):
        return torch.zeros_like(x)

    x0 = torch.zeros(4096, 1, 4, 4)
    loss = diffusion_loss(zero, x0, torch.zeros(4096, dtype=torch.long), sched, torch_generator(1))
    assert loss.item() == pytest.approx(1.0, abs=0.02)


def test_loss_empty_batch(sched, tiny_unet):
    with pytest.raises(InvalidArgument):
        diffusion_loss(tiny_unet, torch.zeros(0, 1, 8, 8), torch.zeros(0, dtype=torch.long), sched, torch_generator(0))


def test_label_dropout_rate(sched):
    seen = []

    def spy(x, t, c):
        seen.append(c.clone())
        return torch.zeros_like(x)

    n = 20000
    diffusion_loss(spy, torch.zeros(n, 1, 1, 1), torch.full((n,), POS_TOKEN), sched, torch_generator(2), p_uncond=0.1)
    frac = (seen[0] == UNCOND_TOKEN).float().mean().item()
    assert abs(frac - 0.1) < 0.01
    seen.clear()
    diffusion_loss(spy, torch.zeros(n, 1, 1, 1), torch.full((n,), POS_TOKEN), sched, torch_generator(2), p_uncond=0.0)
    assert (seen[0] == POS_TOKEN).all()


def _flat_grad(model):
    return torch.cat([p.grad.reshape(-1) for p in model.parameters()])


def test_loss_gradient_matches_finite_differences(sched):
    model = build_unet(TINY_SPEC, seed=5, dtype=torch.float64)
    assert count_parameters(model) <= 5000
    x0 = (torch.rand(3, 1, 8, 8, generator=torch_generator(1), dtype=torch.float64) * 2 - 1)
    y = torch.tensor([0, 1, 1])

    def loss_fn():
        return diffusion_loss(model, x0, y, sched, torch_generator(11), p_uncond=0.3)

    model.zero_grad()
    loss_fn().backward()
    grad = _flat_grad(model)
    params = list(model.parameters())
    rng = np.random.default_rng(0)
    h = 1e-6
    for _ in range(25):
        pi = int(rng.integers(len(params)))
        p = params[pi]
        j = int(rng.integers(p.numel()))
        offset = sum(q.numel() for q in params[:pi]) + j
        with torch.no_grad():
            orig = p.view(-1)[j].item()
            p.view(-1)[j] = orig + h
            up = loss_fn().item()
            p.view(-1)[j] = orig - h
            dn = loss_fn().item()
            p.view(-1)[j] = orig
        fd = (up - dn) / (2 * h)
        g = grad[offset].item()
        assert abs(fd - g) <= 1e-3 * max(abs(g), abs(fd)) + 1e-9, (pi, j, g, fd)


def test_gradients_cover_every_parameter(sched, tiny_unet):
    x0 = torch.rand(4, 1, 8, 8) * 2 - 1
    diffusion_loss(tiny_unet, x0, torch.tensor([0, 1, 0, 1]), sched, torch_generator(0), p_uncond=0.5).backward()
    assert all(p.grad is not None for p in tiny_unet.parameters())


# -- pretraining ------------------------------------------------------------


def _toy_corpus():
    return make_dataset(6, 6, size=8)


def test_pretrain_zero_steps_is_init(sched):
    m, log = pretrain_diffusion(_toy_corpus(), DiffusionTrainConfig(steps=0), seed=7, spec=TINY_SPEC, sched=sched)
    ref = build_unet(TINY_SPEC, derive_seed(7, "init"))
    assert log == []
    for a, b in zip(m.parameters(), ref.parameters()):
        assert torch.equal(a, b)


def test_pretrain_deterministic(sched):
    cfg = DiffusionTrainConfig(steps=6, batch_size=4, log_every=2)
    a, la = pretrain_diffusion(_toy_corpus(), cfg, seed=1, spec=TINY_SPEC, sched=sched)
    b, lb = pretrain_diffusion(_toy_corpus(), cfg, seed=1, spec=TINY_SPEC, sched=sched)
    assert la == lb
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)
    assert [s for s, _ in la] == [0, 2, 4, 5]


def test_pretrain_requires_both_classes(sched):
    with pytest.raises(InvalidArgument):
        pretrain_diffusion(make_dataset(5, 0, size=8), DiffusionTrainConfig(steps=1), 0, TINY_SPEC, sched)


def test_unet_shape_and_unconditional_row(tiny_unet):
    x = torch.randn(2, 1, 8, 8)
    out = tiny_unet(x, torch.tensor([3, 900]), torch.tensor([UNCOND_TOKEN, POS_TOKEN]))
    assert out.shape == x.shape
    assert tiny_unet.class_emb.num_embeddings == 3
    assert UNetSpec.from_dict(TINY_SPEC.to_dict()) == TINY_SPEC


# -- sampler ----------------------------------------------------------------------


def test_sampling_timesteps():
    ts = sampling_timesteps(1000, 24)
    assert len(ts) == 24 and ts[0] == 999 and ts[-1] == 0
    assert np.all(np.diff(ts) < 0)
    assert list(sampling_timesteps(1000, 1)) == [999]


def test_guided_eps_exact_endpoints():
    c, u = torch.randn(5), torch.randn(5)
    assert guided_eps(c, u, 1.0) is c
    assert guided_eps(c, u, 0.0) is u
    assert torch.allclose(guided_eps(c, u, 2.0), 2 * c - u)


def test_sampler_validation(sched, tiny_unet):
    with pytest.raises(InvalidArgument):
        sample_cfg(tiny_unet, sched, SamplerConfig(steps=0), image_size=8)
    with pytest.raises(InvalidArgument):
        sample_cfg(tiny_unet, sched, SamplerConfig(steps=1001), image_size=8)
    with pytest.raises(InvalidArgument):
        sample_cfg(tiny_unet, sched, SamplerConfig(guidance_scale=-1), image_size=8)
    with pytest.raises(InvalidArgument):
        sample_cfg(tiny_unet, sched, SamplerConfig(), label="maybe", image_size=8)


def test_sample_range_shape_and_determinism(sched, tiny_unet):
    cfg = SamplerConfig(steps=5, seed=4)
    a = sample_cfg(tiny_unet, sched, cfg, image_size=8)
    b = sample_cfg(tiny_unet, sched, cfg, image_size=8)
    assert a.shape == (8, 8) and np.array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1


def test_batch_independence(sched, tiny_unet):
    cfg = SamplerConfig(steps=4, eta=0.5)
    together = sample_batch(tiny_unet, sched, cfg, POSITIVE, [10, 11, 12], 8)
    alone = sample_batch(tiny_unet, sched, cfg, POSITIVE, [11], 8)
    assert torch.allclose(together[1], alone[0], atol=1e-6)


def test_distinct_seeds_give_distinct_images(sched, tiny_unet):
    cfg = SamplerConfig(steps=6)
    a = sample_cfg(tiny_unet, sched, cfg, image_size=8)
    b = sample_cfg(tiny_unet, sched, SamplerConfig(steps=6, seed=1), image_size=8)
    assert np.mean(np.abs(a - b) > 1 / 255) >= 0.01


def test_generate_pool_contract(sched, tiny_unet):
    pool = generate_pool(tiny_unet, sched, SamplerConfig(steps=3), 5, seed0=40, image_size=8, batch_size=2)
    assert len(pool) == 5
    assert pool.ids == [f"synth-{s:08d}" for s in range(40, 45)]
    assert pool.count(label=POSITIVE, origin="synthetic") == 5
    again = generate_pool(tiny_unet, sched, SamplerConfig(steps=3), 1, seed0=40, image_size=8)
    assert np.array_equal(again.images()[0], pool.images()[0])
    with pytest.raises(InvalidArgument):
        generate_pool(tiny_unet, sched, SamplerConfig(steps=3), 0, seed0=0, image_size=8)
    with pytest.raises(InvalidArgument):
        generate_pool(tiny_unet, sched, SamplerConfig(steps=3), 1, seed0=0, label=NEGATIVE, image_size=8)
