"""Small fixtures shared across model-level tests."""
import numpy as np
import torch

from embedmask.datamodel import BinaryMask, Image, Sample
from embedmask.model import ModelConfig, build_model

TINY = dict(
    image_size=(16, 16),
    patch_size=4,
    d_vis=16,
    d_model=32,
    n_layers=2,
    n_heads=2,
    gamma_hidden=32,
    d_prompt=16,
    decoder_heads=2,
    decoder_mlp=32,
    lora_r=4,
    lora_alpha=8.0,
)


def tiny_model(seed=0, dtype=torch.float64, **overrides):
    model = build_model(ModelConfig(**{**TINY, **overrides}), seed=seed)
    return model.to(dtype)


def random_sample(sid, seed, n_masks=1, kind="semantic", size=16, answer=None):
    rng = np.random.default_rng(seed)
    img = Image(rng.integers(0, 256, (size, size, 3)) / 255.0, patch_size=4 if size == 16 else 8)
    masks = []
    for _ in range(n_masks):
        m = np.zeros((size, size), np.uint8)
        y, x = rng.integers(0, size // 2, size=2)
        m[y:y + rng.integers(2, size // 2), x:x + rng.integers(2, size // 2)] = 1
        masks.append(BinaryMask(m))
    if answer is None:
        answer = "3" if n_masks == 0 else ("It is " + " and ".join(["<SEG>"] * n_masks) + ".")
    return Sample(
        id=sid,
        image=img,
        instruction="<IMAGE> Can you segment the circle and the square in this image?",
        answer_text=answer,
        target_masks=tuple(masks),
        kind=kind if n_masks else "vqa",
    )


def randomize_lora(model, seed=0):
    """Give LoRA B matrices nonzero values so A receives gradient."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("lora_B"):
                p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.1)
