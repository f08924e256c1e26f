import math

import pytest
import torch

from embedmask.lm import (
    CausalLM,
    LMConfig,
    build_inputs,
    extract_seg_embeddings,
    forward,
    generate,
    resize_embeddings,
)
from embedmask.tokenizer import encode_conversation

from fd import check_param_grads
from helpers import randomize_lora, tiny_model


def _lm(vocab=50, d=32, layers=2, heads=2, seed=0):
    torch.manual_seed(seed)
    return CausalLM(LMConfig(vocab_size=vocab, d_model=d, n_layers=layers, n_heads=heads, max_seq_len=64)).double()


def test_config_head_divisibility():
    with pytest.raises(ValueError):
        LMConfig(vocab_size=10, d_model=30, n_heads=4)


def test_causality_perturbation_all_positions():
    lm = _lm()
    x = torch.randn(1, 12, 32, dtype=torch.float64)
    base, _ = lm(x)
    for j in range(12):
        y = x.clone()
        y[0, j] += torch.randn(32, dtype=torch.float64)
        out, _ = lm(y)
        if j > 0:
            assert (out[0, :j] - base[0, :j]).abs().max() <= 1e-9
        assert (out[0, j:] - base[0, j:]).abs().max() > 0


def test_zero_head_uniform():
    lm = _lm(vocab=201)
    with torch.no_grad():
        lm.lm_head.weight.zero_()
    logits, _ = lm(torch.randn(1, 5, 32, dtype=torch.float64))
    ce = torch.nn.functional.cross_entropy(logits[0], torch.arange(5))
    assert ce.item() == pytest.approx(math.log(201), abs=1e-12)


def test_too_long_sequence():
    lm = _lm()
    with pytest.raises(ValueError):
        lm(torch.zeros(1, 65, 32, dtype=torch.float64))


def test_image_expansion_length():
    model = tiny_model()
    toks = encode_conversation("<IMAGE> Can you segment the circle in this image?", "It is <SEG>.", model.vocab)
    patches = torch.randn(64, 32, dtype=torch.float64)
    x, p = build_inputs(model.lm, toks.ids, patches, model.vocab.image_id)
    assert x.shape[0] == len(toks.ids) - 1 + 64
    assert p == toks.image_positions[0]
    assert torch.equal(x[p:p + 64], patches)


def test_extract_seg_embeddings():
    model = tiny_model()
    v = model.vocab
    n = model.config.n_patches
    img = torch.randn(n, 32, dtype=torch.float64)
    one = encode_conversation("<IMAGE> Can you segment the circle in this image?", "It is <SEG>.", v)
    _, hidden = forward(model.lm, one, img, v.image_id)
    (emb,) = extract_seg_embeddings(one, hidden, n)
    k = one.seg_positions[0] - 1 + n
    assert emb.expanded_position == k
    assert torch.equal(emb.raw, hidden[k])

    two = encode_conversation("<IMAGE> Can you segment the circle and the square in this image?",
                              "It is <SEG> and <SEG>.", v)
    _, hidden = forward(model.lm, two, img, v.image_id)
    embs = extract_seg_embeddings(two, hidden, n, gamma=model.gamma)
    assert [e.source_position for e in embs] == list(two.seg_positions)
    assert embs[0].source_position < embs[1].source_position
    assert torch.allclose(embs[1].projected, model.gamma(embs[1].raw))

    none = encode_conversation("<IMAGE> How many objects are there in this image?", "3", v)
    _, hidden = forward(model.lm, none, img, v.image_id)
    assert extract_seg_embeddings(none, hidden, n) == []


def _prompt_and_image(model):
    prompt = encode_conversation("<IMAGE> Can you segment the circle in this image?", None, model.vocab)
    img = torch.randn(model.config.n_patches, model.config.d_model, dtype=torch.float64,
                      generator=torch.Generator().manual_seed(0))
    return prompt, img


def test_generate_zero_new_and_determinism():
    model = tiny_model()
    prompt, img = _prompt_and_image(model)
    seq, segs = generate(model.lm, prompt, img, model.vocab, max_new=0)
    assert seq.ids == prompt.ids and segs == []
    a, _ = generate(model.lm, prompt, img, model.vocab, max_new=6)
    b, _ = generate(model.lm, prompt, img, model.vocab, max_new=6)
    assert a == b
    assert len(a.ids) <= len(prompt.ids) + 6


def test_generation_seg_embeddings_match_teacher_forced():
    model = tiny_model()
    v = model.vocab
    with torch.no_grad():
        # force <SEG> to win every step: other head rows zero, SEG row aligned with the final LN bias
        model.lm.ln_f.bias.fill_(1.0)
        model.lm.lm_head.weight.zero_()
        model.lm.lm_head.weight[v.seg_id] = 1.0
    prompt, img = _prompt_and_image(model)
    seq, seg_hidden = generate(model.lm, prompt, img, v, max_new=4)
    assert len(seq.seg_positions) == 4 and len(seg_hidden) == 4
    _, hidden = forward(model.lm, seq, img, v.image_id)
    teacher = extract_seg_embeddings(seq, hidden, img.shape[0])
    for g, t in zip(seg_hidden, teacher):
        assert (g - t.raw).abs().max() <= 1e-6


def test_resize_preserves_old_logits():
    lm = _lm(vocab=40)
    x_ids = torch.randint(0, 40, (1, 9), generator=torch.Generator().manual_seed(1))
    before, _ = lm(lm.embed_tokens(x_ids))
    old_emb = lm.embed_tokens.weight.detach().clone()
    resize_embeddings(lm, 41)
    after, _ = lm(lm.embed_tokens(x_ids))
    assert after.shape[-1] == 41
    assert (after[..., :40] - before).abs().max() <= 1e-9
    assert torch.equal(lm.embed_tokens.weight[:40], old_emb)
    assert torch.allclose(lm.embed_tokens.weight[40], old_emb.mean(0))
    with pytest.raises(ValueError):
        resize_embeddings(lm, 39)


def test_lm_parameter_gradients_match_finite_differences():
    model = tiny_model()
    for p in model.parameters():
        p.requires_grad_(True)
    randomize_lora(model)
    v = model.vocab
    toks = encode_conversation("<IMAGE> Can you segment the circle in this image?", "It is <SEG>.", v)
    img = torch.randn(model.config.n_patches, 32, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
    n_rows = len(toks.ids) - 1 + img.shape[0]
    target = torch.randint(0, len(v), (n_rows,), generator=torch.Generator().manual_seed(3))

    def loss():
        logits, hidden = forward(model.lm, toks, img, v.image_id)
        return torch.nn.functional.cross_entropy(logits, target) + hidden.pow(2).mean()

    errors = check_param_grads(loss, list(model.lm.named_parameters()), k=6)
    assert max(errors.values()) < 1e-4, {k: e for k, e in errors.items() if e >= 1e-4}
