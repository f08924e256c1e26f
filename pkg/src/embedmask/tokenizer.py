"""Word-level tokenizer over a closed lexicon, with atomic special tokens."""
from __future__ import annotations

import re
from dataclasses import dataclass, field

from .datamodel import IMAGE_TOKEN, SEG_TOKEN

PAD = "<pad>"
BOS = "<bos>"
EOS = "<eos>"
UNK = "<unk>"
USER = "USER:"
ASSISTANT = "ASSISTANT:"

BASE_SPECIALS = (PAD, BOS, EOS, UNK, IMAGE_TOKEN, USER, ASSISTANT)
ALL_SPECIALS = BASE_SPECIALS + (SEG_TOKEN,)

_SPECIAL_RE = re.compile("(" + "|".join(re.escape(s) for s in ALL_SPECIALS) + ")")
_WORD_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def split_words(text):
    """Lowercase and split into words and single punctuation marks; specials stay whole."""
    out = []
    for chunk in _SPECIAL_RE.split(text):
        if not chunk:
            continue
        if chunk in ALL_SPECIALS:
            out.append(chunk)
        else:
            out.extend(_WORD_RE.findall(chunk.lower()))
    return out


def normalize(text):
    return " ".join(split_words(text))


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple
    token_to_id: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        toks = tuple(self.tokens)
        mapping = {t: i for i, t in enumerate(toks)}
        if len(mapping) != len(toks):
            raise ValueError("duplicate tokens in vocabulary")
        for s in BASE_SPECIALS:
            if s not in mapping:
                raise ValueError(f"vocabulary is missing special token {s!r}")
        object.__setattr__(self, "tokens", toks)
        object.__setattr__(self, "token_to_id", mapping)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.token_to_id

    @property
    def id_to_token(self):
        return dict(enumerate(self.tokens))

    def id(self, token):
        return self.token_to_id.get(token, self.token_to_id[UNK])

    @property
    def pad_id(self):
        return self.token_to_id[PAD]

    @property
    def bos_id(self):
        return self.token_to_id[BOS]

    @property
    def eos_id(self):
        return self.token_to_id[EOS]

    @property
    def image_id(self):
        return self.token_to_id[IMAGE_TOKEN]

    @property
    def seg_id(self):
        return self.token_to_id.get(SEG_TOKEN)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("".join(t + "\n" for t in self.tokens))

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(tuple(line.rstrip("\n") for line in fh if line.rstrip("\n")))


def build_vocabulary(texts):
    """Base specials (without ``<SEG>``) followed by the sorted lexicon of ``texts``."""
    words = set()
    for t in texts:
        words.update(w for w in split_words(t) if w not in ALL_SPECIALS)
    return Vocabulary(BASE_SPECIALS + tuple(sorted(words)))


def expand_vocabulary(vocab, new_token):
    """Append ``new_token``; every existing id keeps its value."""
    if new_token in vocab:
        raise ValueError(f"token {new_token!r} already in vocabulary")
    return Vocabulary(vocab.tokens + (new_token,))


def default_vocabulary():
    """Lexicon of every synthetic template, expanded with ``<SEG>``."""
    from .synthdata import lexicon_texts

    return expand_vocabulary(build_vocabulary(lexicon_texts()), SEG_TOKEN)


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple
    role_spans: tuple = ()
    image_positions: tuple = ()
    seg_positions: tuple = ()

    def __len__(self):
        return len(self.ids)


def annotate(ids, vocab):
    """Build a TokenSequence from raw ids by scanning for specials and role markers."""
    ids = tuple(int(i) for i in ids)
    user_id = vocab.token_to_id[USER]
    asst_id = vocab.token_to_id[ASSISTANT]
    stop_ids = {vocab.eos_id, vocab.pad_id}
    seg_id = vocab.seg_id
    spans = []
    role, start = None, None
    for pos, tok in enumerate(ids):
        if tok in (user_id, asst_id) or tok in stop_ids:
            if role is not None:
                spans.append((start, pos, role))
            role, start = None, None
            if tok == user_id:
                role, start = "user", pos + 1
            elif tok == asst_id:
                role, start = "assistant", pos + 1
    if role is not None:
        spans.append((start, len(ids), role))
    return TokenSequence(
        ids=ids,
        role_spans=tuple(spans),
        image_positions=tuple(i for i, t in enumerate(ids) if t == vocab.image_id),
        seg_positions=tuple(i for i, t in enumerate(ids) if seg_id is not None and t == seg_id),
    )


def encode(text, vocab):
    return annotate([vocab.id(w) for w in split_words(text)], vocab)


def decode(ids, vocab, skip_control=False):
    out = []
    for i in ids:
        i = int(i)
        if not 0 <= i < len(vocab):
            raise ValueError(f"unknown token id {i}")
        tok = vocab.tokens[i]
        if skip_control and tok in (PAD, BOS, EOS):
            continue
        out.append(tok)
    return " ".join(out)


def conversation_prompt(instruction):
    return f"{BOS} {USER} {instruction} {ASSISTANT}"


def encode_conversation(instruction, answer, vocab):
    """``<bos> USER: <instruction> ASSISTANT: <answer> <eos>``; prompt only when ``answer`` is None."""
    text = conversation_prompt(instruction)
    if answer is not None:
        text = f"{text} {answer} {EOS}"
    return encode(text, vocab)
