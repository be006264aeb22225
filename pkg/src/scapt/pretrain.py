"""Supervised contrastive pre-training: masking, the three objectives, and their sum."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .text import MASK, SEP, Vocab, format_input, pad_batch
from .transformer import Decoder, Encoder, EncoderConfig, Module, xavier

LABELS = ("positive", "negative")


class DegenerateBatch(ValueError):
    """No anchor in the batch has an in-batch positive."""


@dataclass
class LabeledSentence:
    tokens: list[str]
    label: str
    aspect_spans: list[tuple[int, int]]
    source_id: str | None = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"pre-training label must be one of {LABELS}, got {self.label!r}")
        if not self.aspect_spans:
            raise ValueError("a pre-training sentence needs at least one aspect span")
        spans = sorted((int(a), int(b)) for a, b in self.aspect_spans)
        prev_end = 0
        for a, b in spans:
            if not 0 <= a < b <= len(self.tokens):
                raise ValueError(f"aspect span [{a},{b}) outside sentence of {len(self.tokens)} tokens")
            if a < prev_end:
                raise ValueError(f"overlapping aspect spans {spans}")
            prev_end = b
        self.aspect_spans = spans


@dataclass
class MaskedInput:
    """Corrupted ``[CLS] x [SEP]`` ids; positions are in that formatted coordinate frame."""

    corrupted_ids: list[int]
    mask_positions: list[int]
    original_ids: list[int]
    source: LabeledSentence


@dataclass(frozen=True)
class PretrainConfig:
    tau: float = 0.07
    alpha: float = 1.0
    beta: float = 1.0
    mask_floor: float = 0.15
    normalize: bool = False
    # "corrupted": one encoder pass over the masked input feeds every objective.
    # "clean": contrastive and reconstruction read a second pass over the clean input.
    rep_source: str = "corrupted"

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.mask_floor <= 1.0:
            raise ValueError("mask_floor must lie in [0, 1]")
        if self.rep_source not in ("corrupted", "clean"):
            raise ValueError("rep_source must be 'corrupted' or 'clean'")


def _corrupt(orig: int, rng: np.random.Generator, vocab_size: int, first_regular: int) -> int:
    u = rng.random()
    if u < 0.8:
        return MASK
    if u < 0.9:
        if vocab_size > first_regular:
            return int(rng.integers(first_regular, vocab_size))
        return MASK
    return orig


def mask_review(s: LabeledSentence, vocab: Vocab, rng: np.random.Generator, mask_floor: float = 0.15,
                max_len: int = 64) -> MaskedInput:
    """Two-step corruption: every aspect token first, then random fill up to the floor.

    Each selected token becomes [MASK] with probability 0.8, a random regular
    vocabulary token with probability 0.1, and stays as is otherwise.  Every
    selected position is a prediction target whatever its outcome.
    """
    original = format_input(s.tokens, vocab, max_len)
    n = len(original) - 2
    corrupted = list(original)
    v = len(vocab)
    first = vocab.first_regular_id

    aspect_pos = sorted({i + 1 for a, b in s.aspect_spans for i in range(a, b) if i < n})
    for p in aspect_pos:
        corrupted[p] = _corrupt(original[p], rng, v, first)
    chosen = set(aspect_pos)

    # round() guards against 0.15 * 20 == 3.0000000000000004
    target = math.ceil(round(mask_floor * n, 9))
    if len(chosen) < target:
        rest = [p for p in range(1, n + 1) if p not in chosen]
        k = min(target - len(chosen), len(rest))
        if k:
            extra = rng.choice(np.asarray(rest), size=k, replace=False)
            for p in sorted(int(x) for x in extra):
                corrupted[p] = _corrupt(original[p], rng, v, first)
                chosen.add(p)
    return MaskedInput(corrupted, sorted(chosen), original, s)


def sentiment_projection(h_bar: Tensor, w_s: Tensor) -> Tensor:
    """s = W_s h (row-vector convention: h @ W_s), no bias, no nonlinearity."""
    if h_bar.ndim == 1:
        return T.reshape(T.matmul(T.reshape(h_bar, (1, -1)), w_s), (w_s.shape[1],))
    return T.matmul(h_bar, w_s)


def supervised_contrastive_loss(reps: Tensor, labels: Sequence, tau: float, normalize: bool = False) -> tuple[Tensor, int]:
    """Sum over anchors of -log( mean over positives of P(i, c) ), P a softmax over b != i.

    Anchors without an in-batch positive are skipped.  Returns the loss and
    the number of contributing anchors; raises :class:`DegenerateBatch` when
    there are none.
    """
    if reps.ndim != 2:
        raise T.ShapeError(f"expected (B, d) representations, got {reps.shape}")
    b = reps.shape[0]
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise T.ShapeError(f"{labels.shape[0]} labels for a batch of {b}")
    if b < 2:
        raise DegenerateBatch("contrastive loss needs at least two samples")
    if tau <= 0:
        raise ValueError("tau must be positive")
    if normalize:
        reps = T.l2_normalize(reps)

    not_self = ~np.eye(b, dtype=bool)
    positive = (labels[:, None] == labels[None, :]) & not_self
    counts = positive.sum(axis=1)
    anchors = np.flatnonzero(counts > 0)
    if anchors.size == 0:
        raise DegenerateBatch("no anchor has an in-batch positive")

    sim = T.scale(T.matmul(reps, T.transpose(reps)), 1.0 / tau)
    rows = T.take(sim, anchors)
    log_denominator = T.logsumexp(rows, axis=1, mask=not_self[anchors])
    log_numerator = T.logsumexp(rows, axis=1, mask=positive[anchors])
    per_anchor = T.add_constant(T.sub(log_denominator, log_numerator), np.log(counts[anchors]))
    return T.sum_(per_anchor), int(anchors.size)


def reconstruction_targets(original_ids: Sequence[Sequence[int]]) -> list[list[int]]:
    """Gold sequence for reconstruction: the clean tokens followed by [SEP] as end marker."""
    return [list(ids[1:-1]) + [SEP] for ids in original_ids]


def _segment_matrix(lengths: Sequence[int], width: int, mean: bool) -> np.ndarray:
    """(B, B*width) matrix summing (or averaging) the first ``lengths[b]`` slots of row b."""
    m = np.zeros((len(lengths), len(lengths) * width))
    for i, n in enumerate(lengths):
        if n:
            m[i, i * width: i * width + n] = 1.0 / n if mean else 1.0
    return m


def reconstruction_losses(decoder: Decoder, h_bar: Tensor, targets: Sequence[Sequence[int]],
                          rng=None, training: bool = False) -> Tensor:
    """Per-sentence mean token cross-entropy of the teacher-forced decoder, shape (B,)."""
    ids, mask = pad_batch(targets)
    b, n = ids.shape
    logits = decoder(h_bar, ids, mask, rng=rng, training=training)
    nll = T.cross_entropy(T.reshape(logits, (b * n, decoder.vocab_size)), ids.reshape(-1), reduction="none")
    seg = T.constant(_segment_matrix([len(t) for t in targets], n, mean=True))
    return T.reshape(T.matmul(seg, T.reshape(nll, (b * n, 1))), (b,))


def reconstruction_loss(decoder: Decoder, h_bar: Tensor, original_ids: Sequence[int]) -> Tensor:
    """Scalar reconstruction loss for one sentence given its formatted clean ids."""
    rep = T.reshape(h_bar, (1, -1)) if h_bar.ndim == 1 else h_bar
    return T.reshape(reconstruction_losses(decoder, rep, reconstruction_targets([original_ids])), ())


@dataclass
class MapLoss:
    per_sentence_mean: Tensor
    per_sentence_sum: np.ndarray
    empty: int


def masked_aspect_prediction_loss(hidden_states: Tensor, masked: Sequence[MaskedInput], w_o: Tensor) -> MapLoss:
    """Cross-entropy of softmax(W_o h_k) against the original token at every masked k.

    Raw per-sentence sums are kept in ``per_sentence_sum``; the differentiable
    output divides each sentence's sum by its number of masked positions.
    Sentences with nothing masked contribute zero and bump ``empty``.
    """
    b, n, d = hidden_states.shape
    if len(masked) != b:
        raise T.ShapeError(f"{len(masked)} masked inputs for a batch of {b}")
    rows, gold, lengths = [], [], []
    for i, m in enumerate(masked):
        rows.extend(i * n + p for p in m.mask_positions)
        gold.extend(m.original_ids[p] for p in m.mask_positions)
        lengths.append(len(m.mask_positions))
    empty = sum(1 for k in lengths if k == 0)
    if not rows:
        return MapLoss(T.constant(np.zeros(b)), np.zeros(b), empty)
    picked = T.take(T.reshape(hidden_states, (b * n, d)), rows)
    nll = T.cross_entropy(T.matmul(picked, w_o), gold, reduction="none")
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    raw = np.array([nll.data[offsets[i]:offsets[i + 1]].sum() for i in range(b)])
    pool = np.zeros((b, len(rows)))
    for i, k in enumerate(lengths):
        if k:
            pool[i, offsets[i]:offsets[i + 1]] = 1.0 / k
    per = T.reshape(T.matmul(T.constant(pool), T.reshape(nll, (len(rows), 1))), (b,))
    return MapLoss(per, raw, empty)


class ScaptModel(Module):
    """Encoder, reconstruction decoder, sentiment perceptron W_s and MAP head W_o."""

    def __init__(self, cfg: EncoderConfig, vocab_size: int, rng: np.random.Generator):
        self.encoder = Encoder(cfg, vocab_size, rng)
        self.decoder = Decoder(cfg, vocab_size, rng)
        self.w_s = T.parameter(xavier(rng, cfg.d_model, cfg.d_model))
        self.w_o = T.parameter(xavier(rng, cfg.d_model, vocab_size))
        self.cfg = cfg
        self.vocab_size = vocab_size


@dataclass
class JointLoss:
    total: Tensor
    sup: float
    rec: float
    map: float
    map_raw: float
    anchors: int
    map_empty: int


def joint_pretrain_loss(model: ScaptModel, batch: Sequence[LabeledSentence], vocab: Vocab, cfg: PretrainConfig,
                        rng: np.random.Generator, training: bool = True,
                        masked: Sequence[MaskedInput] | None = None) -> JointLoss:
    """L = L_sup + alpha * sum_b L_rec + beta * sum_b L_map over one batch."""
    max_len = model.cfg.max_len
    if masked is None:
        masked = [mask_review(s, vocab, rng, cfg.mask_floor, max_len) for s in batch]
    ids, mask = pad_batch([m.corrupted_ids for m in masked])
    enc = model.encoder(ids, mask, rng=rng, training=training)
    if cfg.rep_source == "clean":
        clean_ids, clean_mask = pad_batch([m.original_ids for m in masked])
        h_bar = model.encoder(clean_ids, clean_mask, rng=rng, training=training).sentence_rep
    else:
        h_bar = enc.sentence_rep

    reps = sentiment_projection(h_bar, model.w_s)
    sup, anchors = supervised_contrastive_loss(reps, [s.label for s in batch], cfg.tau, cfg.normalize)
    rec_each = reconstruction_losses(model.decoder, h_bar, reconstruction_targets([m.original_ids for m in masked]),
                                     rng=rng, training=training)
    map_res = masked_aspect_prediction_loss(enc.hidden_states, masked, model.w_o)

    rec_sum = T.sum_(rec_each)
    map_sum = T.sum_(map_res.per_sentence_mean)
    total = T.add(T.add(sup, T.scale(rec_sum, cfg.alpha)), T.scale(map_sum, cfg.beta))
    return JointLoss(
        total=total,
        sup=sup.item(),
        rec=rec_sum.item(),
        map=map_sum.item(),
        map_raw=float(map_res.per_sentence_sum.sum()),
        anchors=anchors,
        map_empty=map_res.empty,
    )
