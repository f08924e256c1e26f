import numpy as np
import pytest
import torch
from torch import nn

from embedmask.lora import (
    FreezePolicy,
    LoraLinear,
    apply_policy,
    param_group,
    parameter_counts,
    trainable_parameters,
    wrap_linear,
)
from embedmask.model import ModelConfig, build_model


def test_zero_init_is_bitwise_base():
    torch.manual_seed(0)
    base = nn.Linear(16, 12)
    x = torch.randn(5, 16)
    adapted = wrap_linear(base, r=4, alpha=8)
    assert torch.equal(adapted(x), base(x))


def test_rank_bounds():
    with pytest.raises(ValueError):
        wrap_linear(nn.Linear(4, 6), r=5)
    with pytest.raises(ValueError):
        wrap_linear(nn.Linear(4, 6), r=0)


def test_full_rank_adapter_fits_target_map():
    torch.manual_seed(0)
    d_in, d_out = 6, 5
    base = nn.Linear(d_in, d_out).double()
    for p in base.parameters():
        p.requires_grad_(False)
    layer = LoraLinear(base, r=min(d_in, d_out), alpha=1.0).double()
    x = torch.randn(200, d_in, dtype=torch.float64)
    target_w = torch.randn(d_out, d_in, dtype=torch.float64)
    y = x @ target_w.t() + base.bias
    # least-squares oracle: the best achievable delta is exactly target_w - base.weight
    sol = torch.linalg.lstsq(x, y - base.bias).solution.t()
    assert torch.allclose(sol, target_w, atol=1e-8)
    opt = torch.optim.Adam([layer.lora_A, layer.lora_B], lr=0.05)
    for _ in range(3000):
        opt.zero_grad()
        loss = ((layer(x) - y) ** 2).mean()
        loss.backward()
        opt.step()
    assert loss.item() < 1e-6
    assert torch.allclose(base.weight + layer.delta_weight, target_w, atol=1e-3)


@pytest.fixture(scope="module")
def model():
    return build_model(ModelConfig())


def test_default_trainable_groups(model):
    names = trainable_parameters(model, FreezePolicy())
    groups = {param_group(n) for n in names}
    assert groups == {"lora", "decoder", "embed_tokens", "lm_head", "gamma"}
    lora_names = [n for n in names if param_group(n) == "lora"]
    assert lora_names and all(("q_proj" in n or "v_proj" in n) for n in lora_names)
    assert all(n.endswith(("lora_A", "lora_B")) for n in lora_names)


def test_trainable_fraction_below_half(model):
    trainable, total = parameter_counts(model, FreezePolicy())
    brute_trainable = sum(p.numel() for n, p in model.named_parameters()
                          if param_group(n) in {"lora", "decoder", "embed_tokens", "lm_head", "gamma"})
    assert trainable == brute_trainable
    assert trainable / total < 0.5


def test_vision_lora_ablation_adds_backbone_adapters():
    m = build_model(ModelConfig(vision_lora=True))
    names = trainable_parameters(m, FreezePolicy())
    assert {param_group(n) for n in names} == {"lora", "vision_lora", "decoder", "embed_tokens", "lm_head", "gamma"}
    assert all(not p.requires_grad for n, p in m.named_parameters() if param_group(n) == "vision_encoder")


def test_apply_policy_sets_requires_grad(model):
    apply_policy(model, FreezePolicy())
    for n, p in model.named_parameters():
        assert p.requires_grad == FreezePolicy().trainable(param_group(n))


def test_lora_free_model_outputs_equal_at_init():
    cfg = dict(d_model=32, n_layers=2, n_heads=2, gamma_hidden=32, d_prompt=16, d_vis=16, image_size=(16, 16))
    with_lora = build_model(ModelConfig(**cfg), seed=3)
    without = build_model(ModelConfig(**cfg, lora_targets=()), seed=3)
    assert any(isinstance(m, LoraLinear) for m in with_lora.modules())
    assert not any(isinstance(m, LoraLinear) for m in without.modules())
    x = torch.randn(2, 10, 32)
    assert torch.equal(with_lora.lm(x)[0], without.lm(x)[0])
