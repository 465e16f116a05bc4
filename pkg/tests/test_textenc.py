from __future__ import annotations

import numpy as np
import pytest

from mglan import autodiff as ad
from mglan.autodiff import grad_check
from mglan.errors import ConfigError, DataFormatError, DomainError
from mglan.textenc import PAD, UNK, Vocab, encode_batch, encode_text, init_text_encoder, tokenize, tokenize_and_pad

TEXTS = ["The cat sat.", "the cat ran", "A dog RAN!", "cat cat dog"]


def test_tokenize_lowercases_and_strips_punctuation():
    assert tokenize("Breaking: Cats, DOGS & 42 mice!") == ["breaking", "cats", "dogs", "42", "mice"]
    assert tokenize("") == []


def test_vocab_min_count_and_order():
    v = Vocab.build(TEXTS, min_count=2)
    assert v.itos[:2] == ["<pad>", "<unk>"]
    assert v.itos[2:] == ["cat", "dog", "ran", "the"]
    assert v.index("sat") == UNK
    assert "cat" in v and len(v) == 6


def test_vocab_round_trip(tmp_path):
    v = Vocab.build(TEXTS, min_count=1)
    v.dump(tmp_path / "vocab.txt")
    back = Vocab.load(tmp_path / "vocab.txt")
    assert back.itos == v.itos and back.digest() == v.digest()
    assert Vocab.from_dict(v.to_dict()).itos == v.itos
    (tmp_path / "bad.txt").write_text("oops\n")
    with pytest.raises(DataFormatError):
        Vocab.load(tmp_path / "bad.txt")


def test_tokenize_and_pad():
    v = Vocab.build(TEXTS, min_count=1)
    seq = tokenize_and_pad("the cat", v, 6)
    assert seq.indices.tolist() == [PAD] * 4 + [v.index("the"), v.index("cat")]
    assert seq.true_length == 2
    long = tokenize_and_pad(" ".join(["dog"] * 10 + ["cat"]), v, 5)
    assert long.indices.tolist() == [v.index("dog")] * 5 and long.true_length == 5
    assert tokenize_and_pad("zebra", v, 5).indices[-1] == UNK
    assert tokenize_and_pad("", v, 5).true_length == 0
    with pytest.raises(DomainError):
        tokenize_and_pad("the cat", v, 4)


def test_encoder_shapes_and_config(rng):
    params = init_text_encoder(10, 8, 12, rng)
    out = encode_batch(rng.integers(0, 10, size=(3, 7)), params)
    assert out.shape == (3, 12) and params.dim == 12
    assert np.all(out.data >= 0)
    seq = tokenize_and_pad("a b", Vocab(["a", "b"]), 5)
    assert encode_text(seq, init_text_encoder(4, 8, 12, rng)).shape == (12,)
    with pytest.raises(ConfigError):
        init_text_encoder(10, 8, 10, rng)
    with pytest.raises(DomainError):
        encode_batch(np.zeros((2, 4), dtype=int), params)


def test_pad_row_content_is_ignored(rng):
    params = init_text_encoder(10, 6, 9, rng)
    idx = np.array([[0, 0, 0, 4, 5, 6, 2]])
    before = encode_batch(idx, params).data.copy()
    params.embedding.data[PAD] = rng.normal(size=6) * 10
    assert np.allclose(encode_batch(idx, params).data, before)


def test_pad_row_gets_no_gradient(rng):
    params = init_text_encoder(10, 6, 9, rng)
    idx = np.array([[0, 0, 3, 4, 5, 6, 2]])
    ad.tsum(encode_batch(idx, params)).backward()
    assert np.all(params.embedding.grad[PAD] == 0)


def test_text_cnn_gradients(rng):
    params = init_text_encoder(9, 5, 6, rng)
    idx = np.array([[0, 1, 3, 4, 5, 6, 8], [2, 2, 7, 8, 3, 1, 4]])
    w = rng.normal(size=(2, 6))
    err = grad_check(lambda: ad.tsum(encode_batch(idx, params) * w), params.parameters())
    assert err < 1e-4
