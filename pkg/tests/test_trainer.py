import math

import numpy as np
import pytest
import torch

from embedmask.lora import FreezePolicy, param_group
from embedmask.losses import LossWeights
from embedmask.trainer import (
    DataMixer,
    NonFiniteLossError,
    TrainConfig,
    load_checkpoint,
    lr_at,
    new_state,
    run_training,
    save_checkpoint,
    train_step,
)

from helpers import random_sample, tiny_model

SAMPLES = [random_sample(f"s{i}", i, n_masks=1 + i % 2) for i in range(6)] + [
    random_sample(f"v{i}", 100 + i, n_masks=0) for i in range(2)
]


def _cfg(**kw):
    base = dict(batch_per_step=2, grad_accum_steps=2, total_iters=6, warmup_iters=2, lr=1e-3)
    base.update(kw)
    return TrainConfig(**base)


def test_lr_schedule():
    cfg = TrainConfig(total_iters=2000)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(100, cfg) == pytest.approx(3e-4, abs=1e-18)
    assert lr_at(1050, cfg) == pytest.approx(1.5e-4, abs=1e-18)
    assert lr_at(2000, cfg) == 0.0
    assert lr_at(50, cfg) == pytest.approx(1.5e-4)
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(total_iters=0)
    with pytest.raises(ValueError):
        TrainConfig(mix_weights={"semantic": 0.5, "vqa": 0.4})
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"lr": 1e-3, "bogus": 1})
    cfg = TrainConfig(seed=3, mix_weights={"semantic": 0.25, "vqa": 0.75})
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_mixer_respects_weights():
    mixer = DataMixer(SAMPLES, {"semantic": 1.0, "vqa": 0.0}, np.random.default_rng(0))
    assert all(s.kind == "semantic" for s in mixer.draw(50))
    with pytest.raises(ValueError):
        DataMixer(SAMPLES, {"reasoning": 1.0})


def test_update_only_every_accumulation_step():
    model = tiny_model()
    cfg = _cfg(grad_accum_steps=3)
    state = new_state(model, cfg)
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    for i in range(2):
        state, _ = train_step(SAMPLES[:2], state, cfg)
        assert state.iteration == 0
    assert all(torch.equal(before[n], p) for n, p in model.named_parameters())
    state, _ = train_step(SAMPLES[:2], state, cfg)
    assert state.iteration == 1


def test_frozen_groups_unchanged_and_trainable_move():
    model = tiny_model()
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    state = run_training(SAMPLES, _cfg(), model=model)
    policy = FreezePolicy()
    moved = set()
    for n, p in model.named_parameters():
        if policy.trainable(param_group(n)):
            if not torch.equal(before[n], p):
                moved.add(param_group(n))
        else:
            assert torch.equal(before[n], p), n
    assert moved == {"lora", "decoder", "embed_tokens", "lm_head", "gamma"}
    assert state.iteration == 6


def test_breakdown_algebra_in_log():
    state = run_training(SAMPLES, _cfg(), model=tiny_model())
    w = LossWeights()
    for rec in state.history:
        total = w.txt * rec["txt"] + w.mask * (w.bce * rec["bce"] + w.dice * rec["dice"])
        assert rec["total"] == pytest.approx(total, abs=1e-6)
    assert [r["iter"] for r in state.history] == list(range(6))


def test_fixed_seed_identical_loss_curve():
    a = run_training(SAMPLES, _cfg(), model=tiny_model())
    b = run_training(SAMPLES, _cfg(), model=tiny_model())
    for ra, rb in zip(a.history, b.history):
        for k in ra:
            assert abs(ra[k] - rb[k]) <= 1e-9


@pytest.mark.slow
def test_accumulation_matches_large_batch():
    kw = dict(total_iters=50, warmup_iters=5, lr=1e-3)
    small = run_training(SAMPLES, TrainConfig(batch_per_step=2, grad_accum_steps=10, **kw), model=tiny_model())
    large = run_training(SAMPLES, TrainConfig(batch_per_step=20, grad_accum_steps=1, **kw), model=tiny_model())
    assert abs(small.history[-1]["total"] - large.history[-1]["total"]) <= 1e-3


def test_adamw_without_decay_equals_adam():
    torch.manual_seed(0)
    w0 = torch.randn(20, dtype=torch.float64)
    target = torch.randn(20, dtype=torch.float64)
    traces = []
    for opt_cls in (torch.optim.AdamW, torch.optim.Adam):
        w = w0.clone().requires_grad_(True)
        opt = opt_cls([w], lr=1e-2, weight_decay=0.0)
        for _ in range(10):
            opt.zero_grad()
            ((w - target) ** 4).sum().backward()
            opt.step()
        traces.append(w.detach())
    assert (traces[0] - traces[1]).abs().max() <= 1e-9


def test_checkpoint_round_trip_and_resume(tmp_path):
    cfg = _cfg(total_iters=8)
    ref = run_training(SAMPLES, cfg, model=tiny_model(dtype=torch.float32))

    half = run_training(SAMPLES, _cfg(total_iters=8), model=tiny_model(dtype=torch.float32),
                        checkpoint_dir=tmp_path, checkpoint_every=4)
    assert (tmp_path / "iter_000004" / "manifest.json").exists()
    resumed = load_checkpoint(tmp_path / "iter_000004")
    assert resumed.iteration == 4
    for n, p in resumed.model.named_parameters():
        assert p.requires_grad == FreezePolicy().trainable(param_group(n))
    resumed = run_training(SAMPLES, cfg, state=resumed)
    assert [r["total"] for r in resumed.history] == [r["total"] for r in ref.history[4:]]
    for (n, p), (_, q) in zip(resumed.model.named_parameters(), ref.model.named_parameters()):
        assert torch.equal(p, q), n
    assert half.iteration == 8


def test_checkpoint_layout(tmp_path):
    model = tiny_model(dtype=torch.float32)
    root = save_checkpoint(tmp_path / "ck", model, _cfg())
    import json
    manifest = json.loads((root / "manifest.json").read_text())
    name = "lm.lm_head.weight"
    meta = manifest["tensors"][name]
    raw = np.fromfile(root / meta["file"], dtype="<f4").reshape(meta["shape"])
    assert np.array_equal(raw, model.lm.lm_head.weight.detach().numpy())
    assert meta["group"] == "lm_head"
    assert (root / "vocab.txt").read_text().split("\n")[-2] == "<SEG>"


def test_bad_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path)
    (tmp_path / "manifest.json").write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path)


def test_non_finite_loss_aborts():
    model = tiny_model()
    with torch.no_grad():
        model.lm.lm_head.weight.fill_(math.inf)
    state = new_state(model, _cfg())
    with pytest.raises(NonFiniteLossError) as err:
        train_step(SAMPLES[:2], state, _cfg())
    assert err.value.sample_ids == ["s0", "s1"] and err.value.iteration == 0


def test_finetune_requires_base():
    with pytest.raises(ValueError, match="base checkpoint"):
        run_training(SAMPLES, _cfg(), phase="finetune")


def test_pretrain_drops_reasoning():
    reasoning = random_sample("r0", 50, kind="reasoning")
    with pytest.raises(ValueError):
        run_training([reasoning], _cfg(), model=tiny_model())


def test_too_many_categories_rejected():
    s = random_sample("c", 9, n_masks=4)
    with pytest.raises(ValueError, match="categories"):
        train_step([s], new_state(tiny_model(), _cfg()), _cfg())
