"""The assembled segmentation model: backbone, multimodal LM, projection and mask decoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .datamodel import SEG_TOKEN, BinaryMask
from .decoder import MaskDecoder, Projection, binarize
from .lm import CausalLM, LMConfig, expanded_index, forward_batch, generate, resize_embeddings
from .lora import FreezePolicy, apply_policy, inject_lora, wrap_linear
from .losses import LossBreakdown, LossWeights, bce_loss, dice_loss, text_ce, total_loss
from .tokenizer import (
    Vocabulary,
    build_vocabulary,
    decode,
    encode_conversation,
    expand_vocabulary,
    normalize,
)
from .vision import PatchProjector, VisionEncoder


@dataclass
class ModelConfig:
    image_size: tuple = (64, 64)
    patch_size: int = 8
    d_vis: int = 64
    vision_blocks: int = 2
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    max_seq_len: int = 256
    gamma_hidden: int = 256
    d_prompt: int = 64
    decoder_depth: int = 2
    decoder_heads: int = 4
    decoder_mlp: int = 128
    lora_r: int = 8
    lora_alpha: float = 16.0
    lora_targets: tuple = ("q_proj", "v_proj")
    vision_lora: bool = False
    max_new_tokens: int = 16

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        self.lora_targets = tuple(self.lora_targets)
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")

    @property
    def grid(self):
        return (self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size)

    @property
    def n_patches(self):
        gh, gw = self.grid
        return gh * gw

    def to_dict(self):
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["lora_targets"] = list(self.lora_targets)
        return d


@dataclass
class Prediction:
    text: str
    masks: list
    mask_logits: list = field(default_factory=list)
    token_ids: tuple = ()


class SegmentationModel(nn.Module):
    """Multimodal LM that emits ``<SEG>`` tokens whose hidden states are decoded into masks."""

    def __init__(self, vocab: Vocabulary, config: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = config = config or ModelConfig()
        self.vocab = vocab
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.vision = VisionEncoder(config.patch_size, config.d_vis, config.vision_blocks)
            self.mm_projector = PatchProjector(config.d_vis, config.d_model)
            self.lm = CausalLM(
                LMConfig(
                    vocab_size=len(vocab),
                    d_model=config.d_model,
                    n_layers=config.n_layers,
                    n_heads=config.n_heads,
                    max_seq_len=config.max_seq_len,
                )
            )
            self.gamma = Projection(config.d_model, config.gamma_hidden, config.d_prompt)
            self.decoder = MaskDecoder(
                d_vis=config.d_vis,
                d_prompt=config.d_prompt,
                grid=config.grid,
                patch_size=config.patch_size,
                depth=config.decoder_depth,
                n_heads=config.decoder_heads,
                mlp_dim=config.decoder_mlp,
            )
            inject_lora(self.lm, config.lora_targets, config.lora_r, config.lora_alpha)
            if config.vision_lora:
                self.vision.stem = wrap_linear(self.vision.stem, min(config.lora_r, config.d_vis), config.lora_alpha)

    # ------------------------------------------------------------------ vocab

    def add_token(self, token):
        """Expand the vocabulary by one token and grow the LM embeddings to match."""
        self.vocab = expand_vocabulary(self.vocab, token)
        resize_embeddings(self.lm, len(self.vocab))
        return self

    @property
    def dtype(self):
        return self.lm.embed_tokens.weight.dtype

    # ------------------------------------------------------------------ pieces

    def image_features(self, pixels):
        """(B, H, W, 3) pixels -> (B, h, w, d_vis); no graph is kept for a frozen backbone."""
        if isinstance(pixels, np.ndarray) and not pixels.flags.writeable:
            pixels = pixels.copy()
        pixels = torch.as_tensor(pixels, dtype=self.dtype)
        if pixels.dim() == 3:
            pixels = pixels.unsqueeze(0)
        if pixels.shape[1:3] != self.config.image_size:
            raise ValueError(f"image shape {tuple(pixels.shape[1:3])} != model image size {self.config.image_size}")
        if any(p.requires_grad for p in self.vision.parameters()):
            return self.vision(pixels)
        with torch.no_grad():
            return self.vision(pixels)

    def tokenize(self, sample):
        return encode_conversation(sample.instruction, sample.answer_text, self.vocab)

    def supervised_positions(self, tokens):
        """Text positions scored by the LM loss: the assistant span plus the closing EOS."""
        pos = []
        for start, end, role in tokens.role_spans:
            if role == "assistant":
                pos.extend(range(start, end))
                if end < len(tokens.ids) and tokens.ids[end] == self.vocab.eos_id:
                    pos.append(end)
        return pos

    # ------------------------------------------------------------------ training forward

    def forward_samples(self, samples, pixels=None):
        """Teacher-forced pass over ``samples``.

        Returns per-sample text losses and per-sample lists of (bce, dice) and
        mask logits. ``pixels`` may be passed pre-stacked to skip conversion.
        """
        if pixels is None:
            pixels = np.stack([s.image.pixels for s in samples])
        feats = self.image_features(pixels)
        img_embeds = self.mm_projector(feats)
        token_seqs = [self.tokenize(s) for s in samples]
        logits, hidden, img_pos, _ = forward_batch(
            self.lm, [t.ids for t in token_seqs], list(img_embeds), self.vocab.image_id
        )
        n_patches = img_embeds.shape[1]
        txt_losses = []
        seg_rows, seg_owner, targets = [], [], []
        for i, (s, toks) in enumerate(zip(samples, token_seqs)):
            sup = self.supervised_positions(toks)
            pred_rows = torch.tensor([expanded_index(t - 1, img_pos[i], n_patches) for t in sup])
            tgt = torch.tensor([toks.ids[t] for t in sup])
            txt_losses.append(text_ce(logits[i, pred_rows], tgt, torch.ones(len(sup), dtype=torch.bool)))
            if len(toks.seg_positions) != len(s.target_masks):
                raise ValueError(f"sample {s.id}: {len(toks.seg_positions)} <SEG> tokens vs {len(s.target_masks)} masks")
            for pos, m in zip(toks.seg_positions, s.target_masks):
                seg_rows.append(hidden[i, expanded_index(pos, img_pos[i], n_patches)])
                seg_owner.append(i)
                targets.append(torch.tensor(np.array(m.bits), dtype=self.dtype))
        mask_terms = [[] for _ in samples]
        mask_logits = [[] for _ in samples]
        if seg_rows:
            h_seg = self.gamma(torch.stack(seg_rows))
            out = self.decoder(h_seg, feats[torch.tensor(seg_owner)])
            for j, owner in enumerate(seg_owner):
                mask_terms[owner].append((bce_loss(out[j], targets[j]), dice_loss(out[j], targets[j])))
                mask_logits[owner].append(out[j])
        return txt_losses, mask_terms, mask_logits

    def compute_loss(self, samples, weights=None, pixels=None):
        """Batch-mean objective and its breakdown."""
        weights = weights or LossWeights()
        txt_losses, mask_terms, _ = self.forward_samples(samples, pixels)
        totals = [total_loss(t, m, weights) for t, m in zip(txt_losses, mask_terms)]
        n = len(samples)
        loss = torch.stack(totals).mean()
        bce = sum((sum(b for b, _ in m) / len(m)).item() for m in mask_terms if m) / n
        dice = sum((sum(d for _, d in m) / len(m)).item() for m in mask_terms if m) / n
        txt = torch.stack(txt_losses).mean().item()
        return loss, LossBreakdown(txt=txt, bce=bce, dice=dice, total=loss.item())

    # ------------------------------------------------------------------ inference

    @torch.no_grad()
    def predict(self, image, instruction, max_new=None, threshold=0.0):
        max_new = self.config.max_new_tokens if max_new is None else max_new
        pixels = image.pixels if hasattr(image, "pixels") else image
        feats = self.image_features(pixels)
        img_embeds = self.mm_projector(feats)[0]
        prompt = encode_conversation(instruction, None, self.vocab)
        seq, seg_hidden = generate(self.lm, prompt, img_embeds, self.vocab, max_new)
        gen_ids = seq.ids[len(prompt.ids):]
        text = decode([i for i in gen_ids if i != self.vocab.eos_id], self.vocab)
        masks, logits = [], []
        if seg_hidden:
            h = self.gamma(torch.stack(seg_hidden))
            out = self.decoder(h, feats.expand(len(seg_hidden), -1, -1, -1))
            for m in out:
                logits.append(m)
                masks.append(binarize(m, threshold))
        return Prediction(text=text, masks=masks, mask_logits=logits, token_ids=tuple(gen_ids))

    def answer_matches(self, prediction, answer_text):
        return prediction.text == normalize(answer_text)


def build_model(config=None, seed=0, vocab=None):
    """Fresh model over the synthetic lexicon, with ``<SEG>`` added by vocabulary expansion."""
    from .synthdata import lexicon_texts

    base = vocab if vocab is not None else build_vocabulary(lexicon_texts())
    model = SegmentationModel(base, config, seed)
    if SEG_TOKEN not in model.vocab:
        model.add_token(SEG_TOKEN)
    apply_policy(model, FreezePolicy())
    return model

