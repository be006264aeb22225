import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scapt import tensor as T
from scapt.finetune import (POLARITIES, AspectExample, AspectModel, ClassifierHead, aspect_representation,
                            classify_aspect, extract_all_aspects, finetune_loss)
from scapt.gradcheck import check_gradients
from scapt.pretrain import ScaptModel
from scapt.text import Vocab, tokenize
from scapt.train import IncompatibleCheckpoint, load_pretrained_into, pretrain_meta, RunConfig
from scapt.transformer import EncoderConfig

SMALL = EncoderConfig(d_model=8, n_layers=1, n_heads=2, d_ff=16, max_len=24, dropout_rate=0.0)


# --- pooling -------------------------------------------------------------------


def test_single_token_span_returns_that_row():
    h = np.random.default_rng(0).normal(size=(6, 4))
    assert np.array_equal(aspect_representation(T.constant(h), (2, 3)).data, h[3])


def test_opposite_rows_pool_to_zero():
    v = np.array([0.3, -1.2, 2.0])
    h = np.zeros((5, 3))
    h[2], h[3] = v, -v
    assert np.array_equal(aspect_representation(T.constant(h), (1, 3)).data, np.zeros(3))


def test_three_token_mean_hand_value():
    # [DERIVED] rows 2..4 (span [1,4) after the [CLS] shift) averaged by hand
    h = np.arange(18.0).reshape(6, 3)
    assert np.allclose(aspect_representation(T.constant(h), (1, 4)).data, [9.0, 10.0, 11.0], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.integers(1, 4)), min_size=1, max_size=5), st.integers(0, 1000))
def test_batched_pooling_matches_one_at_a_time(pairs, seed):
    spans = [(a, min(a + w, 7)) for a, w in pairs]
    h = T.constant(np.random.default_rng(seed).normal(size=(9, 4)))
    together = extract_all_aspects(h, spans)
    for span, got in zip(spans, together):
        assert np.allclose(got.data, aspect_representation(h, span).data, atol=1e-12)


def test_duplicate_spans_pool_identically():
    h = T.constant(np.random.default_rng(1).normal(size=(6, 3)))
    a, b = extract_all_aspects(h, [(1, 3), (1, 3)])
    assert np.array_equal(a.data, b.data)
    assert extract_all_aspects(h, []) == []


def test_empty_or_overlong_span_rejected():
    h = T.constant(np.ones((4, 2)))
    with pytest.raises(T.ContractError):
        aspect_representation(h, (2, 2))
    with pytest.raises(T.ContractError):
        aspect_representation(h, (1, 5))
    with pytest.raises(ValueError):
        AspectExample(["a", "b"], (1, 1), "positive")
    with pytest.raises(ValueError):
        AspectExample(["a", "b"], (0, 1), "mixed")


# --- model ------------------------------------------------------------------------


def _vocab():
    return Vocab.build([tokenize("the soup was cold but the staff were kind"), tokenize("great pasta")])


def test_two_aspect_sentence_encoded_once():
    vocab = _vocab()
    toks = tokenize("the soup was cold but the staff were kind")
    exs = [AspectExample(toks, (1, 2), "negative", sentence_id="s"), AspectExample(toks, (6, 7), "positive", sentence_id="s")]
    model = AspectModel(SMALL, len(vocab), np.random.default_rng(0))
    out = model.forward(exs, vocab)
    assert model.encoder.calls == 1
    assert out.logits.shape == (2, 3)
    assert np.array_equal(out.sentiment_reps.data[0], out.sentiment_reps.data[1])
    assert not np.allclose(out.aspect_reps.data[0], out.aspect_reps.data[1])


def test_batched_forward_equals_single_sentence_forward():
    vocab = _vocab()
    a = AspectExample(tokenize("the soup was cold but the staff were kind"), (6, 7), "positive")
    b = AspectExample(tokenize("great pasta"), (1, 2), "positive")
    model = AspectModel(SMALL, len(vocab), np.random.default_rng(0))
    both = model.forward([a, b], vocab).logits.data
    assert np.allclose(both[1], model.forward([b], vocab).logits.data[0], atol=1e-10)


# --- classifier -------------------------------------------------------------------


def _head(d=3, seed=0):
    return ClassifierHead(np.random.default_rng(seed), d)


def test_zero_head_is_uniform():
    head = _head()
    head.weight.data[...] = 0.0
    probs, label = classify_aspect(T.constant([1.0, 2.0, 3.0]), T.constant([-1.0, 0.0, 4.0]), head)
    assert np.allclose(probs, 1 / 3, atol=1e-15)
    assert label == "positive"  # ties go to the first class


def test_classifier_hand_softmax_oracle():
    # [DERIVED] logits = [s ; h] W + b computed with plain loops, then softmax
    head = _head(2)
    w = [[0.5, -0.2, 0.1], [0.3, 0.4, -0.6], [-0.1, 0.2, 0.7], [0.8, -0.5, 0.0]]
    b = [0.05, -0.05, 0.1]
    head.weight.data[...] = w
    head.bias.data[...] = b
    x = [0.4, -1.1, 0.9, 0.25]
    logits = [sum(x[i] * w[i][j] for i in range(4)) + b[j] for j in range(3)]
    z = sum(math.exp(v) for v in logits)
    expect = [math.exp(v) / z for v in logits]
    probs, label = classify_aspect(T.constant(x[:2]), T.constant(x[2:]), head)
    assert np.max(np.abs(probs - expect)) < 1e-12
    assert label == POLARITIES[int(np.argmax(expect))]


def test_swapping_halves_with_weight_blocks_is_invariant():
    rng = np.random.default_rng(3)
    s, h = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    head = _head()
    swapped = _head()
    swapped.weight.data[...] = np.concatenate([head.weight.data[3:], head.weight.data[:3]])
    swapped.bias.data[...] = head.bias.data
    a, _ = classify_aspect(T.constant(s), T.constant(h), head)
    b, _ = classify_aspect(T.constant(h), T.constant(s), swapped)
    assert np.allclose(a, b, atol=1e-12)


def test_argmax_tie_order_and_shape_check():
    head = _head(1)
    head.weight.data[...] = 0.0
    head.bias.data[...] = [0.0, 2.0, 2.0]
    assert classify_aspect(T.constant([0.0]), T.constant([0.0]), head)[1] == "neutral"
    with pytest.raises(T.ShapeError):
        classify_aspect(T.constant([0.0, 1.0]), T.constant([0.0]), head)


# --- loss ------------------------------------------------------------------------------


def _toy_batch():
    toks = tokenize("the soup was cold but the staff were kind")
    return [AspectExample(toks, (1, 2), "negative", [(3, 4)], sentence_id="s"),
            AspectExample(toks, (6, 7), "positive", [(8, 9)], sentence_id="s"),
            AspectExample(tokenize("great pasta"), (1, 2), "neutral", [])]


def test_zero_head_loss_is_log_three():
    vocab = _vocab()
    model = AspectModel(SMALL, len(vocab), np.random.default_rng(0))
    model.classifier.weight.data[...] = 0.0
    assert abs(finetune_loss(model, _toy_batch(), vocab, training=False).item() - math.log(3)) < 1e-12


def test_saturated_head_loss_near_zero():
    vocab = _vocab()
    model = AspectModel(SMALL, len(vocab), np.random.default_rng(0))
    model.classifier.weight.data[...] = 0.0
    model.classifier.bias.data[...] = [40.0, 0.0, 0.0]
    batch = [ex for ex in _toy_batch() if ex.polarity == "positive"]
    assert finetune_loss(model, batch, vocab, training=False).item() < 1e-12


def test_finetune_loss_gradients():
    vocab = _vocab()
    model = AspectModel(SMALL, len(vocab), np.random.default_rng(0))
    batch = _toy_batch()
    res = check_gradients(lambda: finetune_loss(model, batch, vocab, training=False), model.named_parameters(),
                          max_coords=6, rng=np.random.default_rng(0))
    assert res.max_rel_err < 1e-5


# --- initialisation from a pre-training checkpoint ------------------------------------


def test_pretrained_weights_copied_bit_identically():
    vocab = _vocab()
    cfg = RunConfig(encoder=SMALL)
    pre = ScaptModel(SMALL, len(vocab), np.random.default_rng(5))
    params = {k: v.data.copy() for k, v in pre.named_parameters().items()}
    model = AspectModel(SMALL, len(vocab), np.random.default_rng(6))
    head_before = model.classifier.weight.data.copy()
    load_pretrained_into(model, params, pretrain_meta(cfg, vocab, 0, 0), vocab)
    got = model.named_parameters()
    assert np.array_equal(got["w_s"].data, params["w_s"])
    for k, v in params.items():
        if k.startswith("encoder."):
            assert np.array_equal(got[k].data, v)
    assert np.array_equal(model.classifier.weight.data, head_before)


def test_mismatched_checkpoint_rejected():
    vocab = _vocab()
    pre = ScaptModel(SMALL, len(vocab), np.random.default_rng(5))
    params = {k: v.data.copy() for k, v in pre.named_parameters().items()}
    model = AspectModel(SMALL, len(vocab), np.random.default_rng(6))
    other = EncoderConfig(d_model=8, n_layers=2, n_heads=2, d_ff=16, max_len=24, dropout_rate=0.0)
    with pytest.raises(IncompatibleCheckpoint):
        load_pretrained_into(model, params, pretrain_meta(RunConfig(encoder=other), vocab, 0, 0), vocab)
    with pytest.raises(IncompatibleCheckpoint):
        load_pretrained_into(model, params, pretrain_meta(RunConfig(encoder=SMALL), Vocab(["x"]), 0, 0), vocab)
