import pytest

from embedmask.synthdata import lexicon_texts
from embedmask.tokenizer import (
    BASE_SPECIALS,
    Vocabulary,
    annotate,
    build_vocabulary,
    decode,
    default_vocabulary,
    encode,
    encode_conversation,
    expand_vocabulary,
    normalize,
)


@pytest.fixture(scope="module")
def vocab():
    return default_vocabulary()


def test_seg_is_atomic(vocab):
    seq = encode("It is <SEG>.", vocab)
    assert len(seq.seg_positions) == 1
    assert seq.ids[seq.seg_positions[0]] == vocab.seg_id


def test_image_is_atomic(vocab):
    seq = encode("<IMAGE>", vocab)
    assert seq.ids == (vocab.image_id,)
    assert seq.image_positions == (0,)


@pytest.mark.parametrize("text", lexicon_texts())
def test_round_trip_templates(vocab, text):
    assert decode(encode(text, vocab).ids, vocab) == normalize(text)


def test_unknown_word_maps_to_unk(vocab):
    seq = encode("segment the zebra", vocab)
    assert decode(seq.ids, vocab) == "segment the <unk>"


def test_decode_errors_and_empty(vocab):
    with pytest.raises(ValueError):
        decode([10**6], vocab)
    assert decode([], vocab) == ""


def test_vocab_bijective_and_contiguous(vocab):
    assert sorted(vocab.token_to_id.values()) == list(range(len(vocab)))
    assert all(vocab.id_to_token[vocab.token_to_id[t]] == t for t in vocab.tokens)
    for s in BASE_SPECIALS + ("<SEG>",):
        assert vocab.tokens.count(s) == 1


def _vocab_of_size(n):
    words = [f"w{i}" for i in range(n - len(BASE_SPECIALS))]
    return Vocabulary(BASE_SPECIALS + tuple(words))


def test_expand_appends_one():
    v = _vocab_of_size(200)
    v2 = expand_vocabulary(v, "<SEG>")
    assert len(v2) == 201
    assert all(v2.token_to_id[t] == i for t, i in v.token_to_id.items())
    with pytest.raises(ValueError):
        expand_vocabulary(v2, "<SEG>")


def test_expansion_keeps_old_encodings():
    base = build_vocabulary(lexicon_texts())
    expanded = expand_vocabulary(base, "<SEG>")
    for text in lexicon_texts():
        if "<SEG>" in text:
            continue
        assert encode(text, base).ids == encode(text, expanded).ids


def test_role_spans_and_positions(vocab):
    seq = encode_conversation("<IMAGE> Can you segment the circle in this image?", "It is <SEG>.", vocab)
    roles = [r for _, _, r in seq.role_spans]
    assert roles == ["user", "assistant"]
    (us, ue, _), (as_, ae, _) = seq.role_spans
    assert seq.ids[us - 1] == vocab.token_to_id["USER:"]
    assert seq.ids[ue] == vocab.token_to_id["ASSISTANT:"]
    assert seq.ids[ae] == vocab.eos_id
    assert decode(seq.ids[as_:ae], vocab) == "it is <SEG> ."
    # recomputing positions by scanning reproduces the stored list
    assert seq.seg_positions == tuple(i for i, t in enumerate(seq.ids) if t == vocab.seg_id)
    assert annotate(seq.ids, vocab) == seq


def test_vocab_file_round_trip(tmp_path, vocab):
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    lines = path.read_text().splitlines()
    assert lines[vocab.seg_id] == "<SEG>"
    assert Vocabulary.load(path) == vocab
