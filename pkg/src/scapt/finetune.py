"""Aspect-aware fine-tuning: span pooling, representation combination, 3-way head."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .pretrain import sentiment_projection
from .tensor import Tensor
from .text import Vocab, format_input, pad_batch
from .transformer import Encoder, EncoderConfig, Module, xavier

# Order doubles as the argmax tie-break.
POLARITIES = ("positive", "neutral", "negative")


@dataclass
class AspectExample:
    tokens: list[str]
    aspect_span: tuple[int, int]
    polarity: str
    opinion_spans: list[tuple[int, int]] = field(default_factory=list)
    sentence_id: str | None = None
    example_id: str | None = None
    term: str | None = None

    def __post_init__(self):
        a, b = (int(x) for x in self.aspect_span)
        if not 0 <= a < b <= len(self.tokens):
            raise ValueError(f"aspect span [{a},{b}) outside sentence of {len(self.tokens)} tokens")
        self.aspect_span = (a, b)
        if self.polarity not in POLARITIES:
            raise ValueError(f"polarity must be one of {POLARITIES}, got {self.polarity!r}")
        self.opinion_spans = [(int(x), int(y)) for x, y in self.opinion_spans]

    @property
    def sentence_key(self):
        return self.sentence_id if self.sentence_id is not None else tuple(self.tokens)

    @property
    def slice_tag(self) -> str:
        return "ESE" if self.opinion_spans else "ISE"


def _pool_weights(span: tuple[int, int], length: int) -> np.ndarray:
    start, end = span[0] + 1, span[1] + 1  # [CLS] shift
    if end <= start:
        raise T.ContractError(f"empty aspect span {span}")
    if end > length:
        raise T.ContractError(f"aspect span {span} runs past the encoded length {length}")
    w = np.zeros(length)
    w[start:end] = 1.0 / (end - start)
    return w


def aspect_representation(hidden_states: Tensor, span: tuple[int, int]) -> Tensor:
    """Mean of the (L, d) hidden states over the aspect's token positions."""
    if hidden_states.ndim != 2:
        raise T.ShapeError(f"expected (L, d) hidden states, got {hidden_states.shape}")
    w = T.constant(_pool_weights(span, hidden_states.shape[0])[None, :])
    return T.reshape(T.matmul(w, hidden_states), (hidden_states.shape[1],))


def extract_all_aspects(hidden_states: Tensor, spans: Sequence[tuple[int, int]]) -> list[Tensor]:
    """Pool every span from one sentence's hidden states with a single product."""
    if not spans:
        return []
    w = T.constant(np.stack([_pool_weights(s, hidden_states.shape[0]) for s in spans]))
    pooled = T.matmul(w, hidden_states)
    return [T.reshape(T.take(pooled, [i]), (hidden_states.shape[1],)) for i in range(len(spans))]


class ClassifierHead(Module):
    """Maps [s ; h_a] (2 * d_model) to three polarity logits."""

    def __init__(self, rng, d_model: int, n_classes: int = len(POLARITIES)):
        self.weight = T.parameter(xavier(rng, 2 * d_model, n_classes))
        self.bias = T.parameter(np.zeros(n_classes))

    def __call__(self, s_ab: Tensor, h_a: Tensor) -> Tensor:
        return T.linear(T.concat([s_ab, h_a], axis=-1), self.weight, self.bias)


def classify_aspect(s_ab: Tensor, h_a: Tensor, head: ClassifierHead) -> tuple[np.ndarray, np.ndarray]:
    """Probabilities and argmax labels for one or many (s, h_a) pairs."""
    single = s_ab.ndim == 1
    if single:
        s_ab, h_a = T.reshape(s_ab, (1, -1)), T.reshape(h_a, (1, -1))
    if s_ab.shape[1] + h_a.shape[1] != head.weight.shape[0]:
        raise T.ShapeError(f"head expects {head.weight.shape[0]} inputs, got {s_ab.shape[1]} + {h_a.shape[1]}")
    probs = T.softmax(head(s_ab, h_a), axis=-1).data
    labels = np.array([POLARITIES[i] for i in probs.argmax(axis=1)])
    return (probs[0], labels[0]) if single else (probs, labels)


@dataclass
class AspectForward:
    logits: Tensor
    sentiment_reps: Tensor  # s_ab per example, (n, d)
    aspect_reps: Tensor


class AspectModel(Module):
    """Encoder + shared sentiment perceptron W_s + fresh 3-way classifier."""

    def __init__(self, cfg: EncoderConfig, vocab_size: int, rng: np.random.Generator):
        self.encoder = Encoder(cfg, vocab_size, rng)
        self.w_s = T.parameter(xavier(rng, cfg.d_model, cfg.d_model))
        self.classifier = ClassifierHead(rng, cfg.d_model)
        self.cfg = cfg
        self.vocab_size = vocab_size

    def forward(self, examples: Sequence[AspectExample], vocab: Vocab, rng=None, training: bool = False) -> AspectForward:
        """One encoder pass per distinct sentence, however many aspects it carries."""
        order: dict = {}
        sentences = []
        for ex in examples:
            if ex.sentence_key not in order:
                order[ex.sentence_key] = len(sentences)
                sentences.append(ex.tokens)
        seqs = [format_input(toks, vocab, self.cfg.max_len) for toks in sentences]
        ids, mask = pad_batch(seqs)
        enc = self.encoder(ids, mask, rng=rng, training=training)
        n_sent, width = ids.shape
        d = self.cfg.d_model

        sent_idx = [order[ex.sentence_key] for ex in examples]
        pool = np.zeros((len(examples), n_sent * width))
        for row, (ex, si) in enumerate(zip(examples, sent_idx)):
            n = len(seqs[si])
            pool[row, si * width:si * width + n] = _pool_weights(ex.aspect_span, n)
        h_a = T.matmul(T.constant(pool), T.reshape(enc.hidden_states, (n_sent * width, d)))
        s_all = sentiment_projection(enc.sentence_rep, self.w_s)
        s_ab = T.take(s_all, sent_idx)
        return AspectForward(self.classifier(s_ab, h_a), s_ab, h_a)

    def predict(self, examples: Sequence[AspectExample], vocab: Vocab, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
        """Return (probabilities, sentiment representations) without dropout."""
        probs, reps = [], []
        for i in range(0, len(examples), batch_size):
            out = self.forward(examples[i:i + batch_size], vocab)
            probs.append(T.softmax(T.constant(out.logits.data), axis=-1).data)
            reps.append(out.sentiment_reps.data)
        if not probs:
            return np.zeros((0, len(POLARITIES))), np.zeros((0, self.cfg.d_model))
        return np.concatenate(probs), np.concatenate(reps)


def labels_to_ids(examples: Sequence[AspectExample]) -> np.ndarray:
    return np.array([POLARITIES.index(ex.polarity) for ex in examples], dtype=np.int64)


def finetune_loss(model: AspectModel, batch: Sequence[AspectExample], vocab: Vocab, rng=None,
                  training: bool = True) -> Tensor:
    """Mean cross-entropy over every (sentence, aspect) pair in the batch."""
    out = model.forward(batch, vocab, rng=rng, training=training)
    return T.cross_entropy(out.logits, labels_to_ids(batch), reduction="mean")
