import json

import numpy as np
import pytest

from ape.prompts import (
    SENTENCE,
    VOCABULARY,
    Prompt,
    SentenceEmbeddings,
    TextEncoderSlot,
    WordEmbeddings,
    aggregate,
    encode_prompts,
    encode_words,
    load_prompt_file,
    make_prompts,
    tokenize,
    zero_token,
)

SLOT = TextEncoderSlot(name="hash-v1", seed=7, d=16)


def test_tokenize_basic_split():
    assert tokenize("The big chinchilla") == ["the", "big", "chinchilla"]


def test_tokenize_single_token():
    assert tokenize("Girl") == ["girl"]


def test_tokenize_punctuation_separated():
    # derived by hand: lowercase, then split on non-alphanumeric runs
    assert tokenize("red-circle, left!") == ["red", "circle", "left"]


def test_tokenize_empty_rejected():
    with pytest.raises(ValueError, match="empty prompt"):
        tokenize("  ... !! ")


def test_prompt_validation():
    with pytest.raises(ValueError):
        Prompt(text="   ", kind=VOCABULARY, id=0)
    with pytest.raises(ValueError):
        Prompt(text="girl", kind="word", id=0)


def test_encode_words_padding_contract():
    we = encode_words(make_prompts(["girl"]), SLOT)
    assert we.lengths.tolist() == [1]
    assert np.all(we.values[0, 1:] == 0.0)
    assert np.any(we.values[0, 0] != 0.0)


def test_encode_words_independence_bitwise():
    a = make_prompts(["girl", "the big chinchilla"])
    solo = encode_words([a[0]], SLOT)
    both = encode_words(a, SLOT)
    assert np.array_equal(solo.values[0], both.values[0])


def test_encoder_slots_differ_by_seed():
    one = encode_words(make_prompts(["girl"]), TextEncoderSlot(seed=1, d=16))
    two = encode_words(make_prompts(["girl"]), TextEncoderSlot(seed=2, d=16))
    assert not np.array_equal(one.values, two.values)


def test_encode_words_overflow_is_loud():
    text = " ".join(["word"] * 17)
    with pytest.raises(ValueError, match="17 tokens"):
        encode_words(make_prompts([text]), SLOT)


def test_encode_words_unit_norm_tokens():
    we = encode_words(make_prompts(["girl sky water"]), SLOT)
    norms = np.linalg.norm(we.values[0, :3], axis=1)
    assert np.allclose(norms, 1.0, atol=1e-12)


def test_permutation_equivariance_rowwise_bitwise():
    rng = np.random.default_rng(0)
    texts = ["girl", "sky", "the big chinchilla", "red circle", "water"]
    for _ in range(20):
        perm = rng.permutation(len(texts))
        base = encode_words(make_prompts(texts), SLOT)
        permuted = encode_words(make_prompts([texts[i] for i in perm]), SLOT)
        assert np.array_equal(permuted.values, base.values[perm])
        assert np.array_equal(permuted.lengths, base.lengths[perm])


def test_determinism_across_fresh_calls():
    a = encode_words(make_prompts(["girl", "sky"]), SLOT)
    b = encode_words(make_prompts(["girl", "sky"]), TextEncoderSlot("hash-v1", 7, 16))
    assert np.array_equal(a.values, b.values)


def test_aggregate_identical_rows():
    v = np.random.default_rng(1).standard_normal(8)
    values = np.zeros((1, 4, 8))
    values[0, :3] = v
    out = aggregate(WordEmbeddings(values=values, lengths=np.array([3])))
    assert np.allclose(out.values[0], v, atol=1e-15)


def test_aggregate_single_token_identity():
    we = encode_words(make_prompts(["girl"]), SLOT)
    out = aggregate(we)
    assert np.array_equal(out.values[0], we.values[0, 0])


def test_aggregate_mean_of_three_tokens():
    we = encode_words(make_prompts(["red circle left"]), SLOT)
    # brute-force sum in the test, independent of the implementation
    expected = (we.values[0, 0] + we.values[0, 1] + we.values[0, 2]) / 3.0
    out = aggregate(we)
    assert np.allclose(out.values[0], expected, rtol=0, atol=1e-15)


def test_aggregate_true_length_not_padded():
    values = np.zeros((1, 4, 2))
    values[0, 0] = [2.0, 2.0]
    out = aggregate(WordEmbeddings(values=values, lengths=np.array([1])))
    assert np.array_equal(out.values[0], [2.0, 2.0])


def test_aggregate_linearity():
    rng = np.random.default_rng(3)
    lengths = np.array([3, 1, 4])
    p = rng.standard_normal((3, 4, 8))
    q = rng.standard_normal((3, 4, 8))
    alpha, beta = 0.37, -1.21
    left = aggregate(WordEmbeddings(values=alpha * p + beta * q, lengths=lengths)).values
    right = alpha * aggregate(WordEmbeddings(values=p, lengths=lengths)).values
    right += beta * aggregate(WordEmbeddings(values=q, lengths=lengths)).values
    assert np.allclose(left, right, rtol=1e-12, atol=1e-14)


def test_zero_token_contracts():
    z = zero_token(4)
    assert np.array_equal(z.values, [[0.0, 0.0, 0.0, 0.0]])
    x = np.random.default_rng(0).standard_normal(4)
    assert float(z.values[0] @ x) == 0.0
    # aggregating the zero token as a one-token prompt returns it unchanged
    again = aggregate(WordEmbeddings(values=z.values[None], lengths=np.array([1])))
    assert np.array_equal(again.values, z.values)
    with pytest.raises(ValueError):
        zero_token(0)


def test_sentence_embeddings_reject_nonfinite():
    with pytest.raises(ValueError):
        SentenceEmbeddings(values=np.array([[np.nan, 0.0]]))


def test_encode_prompts_keeps_kinds():
    out = encode_prompts(
        [Prompt("girl", VOCABULARY, 0), Prompt("the girl", SENTENCE, 1)], SLOT
    )
    assert out.kinds == (VOCABULARY, SENTENCE)


def test_load_prompt_file_json(tmp_path):
    path = tmp_path / "prompts.json"
    path.write_text(
        json.dumps(
            [
                {"text": "girl", "kind": "vocabulary"},
                {"text": "the big chinchilla", "kind": "sentence"},
            ]
        ),
        encoding="utf-8",
    )
    prompts = load_prompt_file(path)
    assert [p.kind for p in prompts] == [VOCABULARY, SENTENCE]
    assert [p.id for p in prompts] == [0, 1]


def test_load_prompt_file_plain_text(tmp_path):
    path = tmp_path / "vocab.txt"
    path.write_text("girl\nsky\n\nwater\n", encoding="utf-8")
    prompts = load_prompt_file(path)
    assert [p.text for p in prompts] == ["girl", "sky", "water"]
    assert all(p.kind == VOCABULARY for p in prompts)
