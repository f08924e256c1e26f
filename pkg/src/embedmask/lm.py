"""Toy causal transformer consuming text tokens with an image-patch block spliced in.

The single ``<IMAGE>`` token of a prompt is expanded in place into the patch
embedding sequence, so a text of length L with n patches runs at length
L - 1 + n. Positions reported as "expanded" refer to that internal sequence.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .tokenizer import TokenSequence, annotate


@dataclass
class LMConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    max_seq_len: int = 256
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    def to_dict(self):
        return asdict(self)


class CausalSelfAttention(nn.Module):
    def __init__(self, d_model, n_heads):
        super().__init__()
        self.n_heads = n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.o_proj = nn.Linear(d_model, d_model)

    def forward(self, x):
        b, t, d = x.shape
        h = self.n_heads

        def heads(z):
            return z.view(b, t, h, d // h).transpose(1, 2)

        y = F.scaled_dot_product_attention(
            heads(self.q_proj(x)), heads(self.k_proj(x)), heads(self.v_proj(x)), is_causal=True
        )
        return self.o_proj(y.transpose(1, 2).reshape(b, t, d))


class Block(nn.Module):
    def __init__(self, d_model, n_heads, mlp_ratio):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = CausalSelfAttention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.fc1 = nn.Linear(d_model, mlp_ratio * d_model)
        self.fc2 = nn.Linear(mlp_ratio * d_model, d_model)

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


class CausalLM(nn.Module):
    """Pre-norm decoder-only transformer with learned positions and an untied head."""

    def __init__(self, config: LMConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.embed_tokens = nn.Embedding(config.vocab_size, d)
        self.pos_embed = nn.Embedding(config.max_seq_len, d)
        self.blocks = nn.ModuleList(Block(d, config.n_heads, config.mlp_ratio) for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(d)
        self.lm_head = nn.Linear(d, config.vocab_size, bias=False)
        self.apply(self._init)

    @staticmethod
    def _init(m):
        if isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            nn.init.normal_(m.weight, std=0.02)

    def forward(self, inputs_embeds):
        """(B, T, d) -> (logits (B, T, V), hidden (B, T, d)); hidden is the final pre-head output."""
        t = inputs_embeds.shape[1]
        if t > self.config.max_seq_len:
            raise ValueError(f"sequence length {t} exceeds max_seq_len={self.config.max_seq_len}")
        pos = torch.arange(t, device=inputs_embeds.device)
        x = inputs_embeds + self.pos_embed(pos)
        for block in self.blocks:
            x = block(x)
        hidden = self.ln_f(x)
        return self.lm_head(hidden), hidden


def expanded_index(pos, image_pos, n_patches):
    """Map a text position to the expanded sequence (image block inserted at ``image_pos``)."""
    if image_pos is None or pos < image_pos:
        return pos
    if pos == image_pos:
        raise ValueError("the <IMAGE> position has no single expanded index")
    return pos + n_patches - 1


def build_inputs(lm, ids, image_embeds, image_id):
    """Embed ``ids`` (1-D) and splice ``image_embeds`` (n, d) in place of the ``<IMAGE>`` token."""
    ids = torch.as_tensor(ids, dtype=torch.long)
    where = (ids == image_id).nonzero().flatten().tolist()
    tok = lm.embed_tokens(ids)
    if not where:
        if image_embeds is not None and len(image_embeds):
            raise ValueError("image embeddings given but the sequence has no <IMAGE> token")
        return tok, None
    if len(where) > 1:
        raise ValueError("at most one <IMAGE> token per sequence is supported")
    if image_embeds is None:
        raise ValueError("sequence has an <IMAGE> token but no image embeddings were given")
    p = where[0]
    return torch.cat([tok[:p], image_embeds.to(tok.dtype), tok[p + 1:]], dim=0), p


def forward_batch(lm, sequences, image_embeds, image_id):
    """Right-pad and run a batch.

    ``sequences`` are id lists, ``image_embeds`` a list of (n, d) tensors (or
    None). Returns logits, hidden and per-row image position / expanded length.
    """
    rows, img_pos, lengths = [], [], []
    for ids, emb in zip(sequences, image_embeds):
        x, p = build_inputs(lm, ids, emb, image_id)
        rows.append(x)
        img_pos.append(p)
        lengths.append(x.shape[0])
    t = max(lengths)
    d = rows[0].shape[1]
    batch = rows[0].new_zeros(len(rows), t, d)
    for i, x in enumerate(rows):
        batch[i, : x.shape[0]] = x
    logits, hidden = lm(batch)
    return logits, hidden, img_pos, lengths


def forward(lm, tokens, image_embeds, image_id):
    """Single-sequence forward; returns (logits (T, V), hidden (T, d)) over the expanded sequence."""
    ids = tokens.ids if isinstance(tokens, TokenSequence) else tokens
    logits, hidden, _, _ = forward_batch(lm, [ids], [image_embeds], image_id)
    return logits[0], hidden[0]


@dataclass
class SegEmbedding:
    raw: torch.Tensor
    projected: torch.Tensor | None
    source_position: int  # text coordinates
    expanded_position: int


def extract_seg_embeddings(tokens, hidden, n_patches=0, gamma=None):
    """One SegEmbedding per ``<SEG>`` of ``tokens``, in textual order; raw = hidden row at that index."""
    image_pos = tokens.image_positions[0] if tokens.image_positions else None
    out = []
    for pos in tokens.seg_positions:
        k = expanded_index(pos, image_pos, n_patches)
        raw = hidden[k]
        out.append(SegEmbedding(raw, gamma(raw) if gamma is not None else None, pos, k))
    return out


@torch.no_grad()
def generate(lm, prompt, image_embeds, vocab, max_new=16):
    """Greedy, cache-free decoding.

    Returns the full TokenSequence (prompt plus generated ids) and the raw
    ``<SEG>`` hidden states collected during generation, each read from the
    first forward pass in which that token is part of the input.
    """
    ids = list(prompt.ids)
    n_prompt = len(ids)
    n_patches = 0 if image_embeds is None else int(image_embeds.shape[0])
    image_pos = prompt.image_positions[0] if prompt.image_positions else None
    seg_hidden = {}
    for step in range(max_new + 1):
        logits, hidden = forward(lm, ids, image_embeds, vocab.image_id)
        for pos in range(n_prompt, len(ids)):
            if ids[pos] == vocab.seg_id and pos not in seg_hidden:
                seg_hidden[pos] = hidden[expanded_index(pos, image_pos, n_patches)].clone()
        if step == max_new or (len(ids) > n_prompt and ids[-1] == vocab.eos_id):
            break
        if len(ids) - 1 + n_patches >= lm.config.max_seq_len:
            break
        ids.append(int(torch.argmax(logits[-1])))
    seq = annotate(ids, vocab)
    return seq, [seg_hidden[p] for p in seq.seg_positions if p in seg_hidden]


@torch.no_grad()
def resize_embeddings(lm, new_vocab_size):
    """Grow ``embed_tokens`` and ``lm_head`` in place; new rows are the mean of the old ones."""
    old = lm.config.vocab_size
    if new_vocab_size < old:
        raise ValueError(f"cannot shrink vocabulary from {old} to {new_vocab_size}")
    if new_vocab_size == old:
        return lm
    emb = lm.embed_tokens.weight
    head = lm.lm_head.weight
    n_new = new_vocab_size - old
    new_emb = nn.Embedding(new_vocab_size, emb.shape[1]).to(emb.dtype)
    new_emb.weight.copy_(torch.cat([emb, emb.mean(0, keepdim=True).expand(n_new, -1)]))
    new_head = nn.Linear(head.shape[1], new_vocab_size, bias=False).to(head.dtype)
    new_head.weight.copy_(torch.cat([head, head.mean(0, keepdim=True).expand(n_new, -1)]))
    new_emb.weight.requires_grad_(emb.requires_grad)
    new_head.weight.requires_grad_(head.requires_grad)
    lm.embed_tokens = new_emb
    lm.lm_head = new_head
    lm.config.vocab_size = new_vocab_size
    return lm
