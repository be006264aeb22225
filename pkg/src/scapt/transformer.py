"""Post-LN Transformer encoder and the reconstruction decoder.

The encoder reads ``[CLS] x [SEP]`` and exposes the per-token hidden states
plus the sentence representation (the final hidden state at position 0).
The decoder is decoder-only: its step-0 input is the sentence
representation, followed by the right-shifted target embeddings, under a
causal mask.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .text import SEP


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_len: int = 64
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if min(self.d_model, self.n_layers, self.n_heads, self.d_ff) <= 0 or self.max_len < 2:
            raise ValueError("encoder sizes must be positive and max_len >= 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    @property
    def decoder_layers(self) -> int:
        return max(1, self.n_layers // 2)

    def to_dict(self) -> dict:
        return asdict(self)


DESK_ENCODER = EncoderConfig()
FULL_ENCODER = EncoderConfig(d_model=300, n_layers=6, n_heads=6, d_ff=1200, max_len=128)


class Module:
    """Parameter container; parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out[prefix + key] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(f"{prefix}{key}."))
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{prefix}{key}.{i}."))
        return out


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True):
        self.weight = T.parameter(xavier(rng, d_in, d_out))
        self.bias = T.parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = T.parameter(np.ones(d))
        self.bias = T.parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class MultiHeadAttention(Module):
    def __init__(self, rng, d_model: int, n_heads: int):
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q = Linear(rng, d_model, d_model)
        self.k = Linear(rng, d_model, d_model)
        self.v = Linear(rng, d_model, d_model)
        self.o = Linear(rng, d_model, d_model)

    def _split(self, x: Tensor, b: int, n: int) -> Tensor:
        return T.transpose(T.reshape(x, (b, n, self.n_heads, self.d_head)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, attend: np.ndarray) -> Tensor:
        """``attend`` is a boolean (B, 1, L, L) or (B, 1, 1, L) array: True = may attend."""
        b, n, d = x.shape
        q = self._split(self.q(x), b, n)
        k = self._split(self.k(x), b, n)
        v = self._split(self.v(x), b, n)
        scores = T.scale(T.bmm(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.d_head))
        probs = T.softmax(scores, axis=-1, mask=np.broadcast_to(attend, scores.shape))
        ctx = T.reshape(T.transpose(T.bmm(probs, v), (0, 2, 1, 3)), (b, n, d))
        return self.o(ctx)


class Block(Module):
    def __init__(self, rng, cfg: EncoderConfig):
        self.attn = MultiHeadAttention(rng, cfg.d_model, cfg.n_heads)
        self.ln1 = LayerNorm(cfg.d_model)
        self.ff1 = Linear(rng, cfg.d_model, cfg.d_ff)
        self.ff2 = Linear(rng, cfg.d_ff, cfg.d_model)
        self.ln2 = LayerNorm(cfg.d_model)
        self.rate = cfg.dropout_rate

    def __call__(self, x: Tensor, attend: np.ndarray, rng=None, training: bool = False) -> Tensor:
        a = T.dropout(self.attn(x, attend), self.rate, rng, training)
        x = self.ln1(T.add(x, a))
        f = T.dropout(self.ff2(T.gelu(self.ff1(x))), self.rate, rng, training)
        return self.ln2(T.add(x, f))


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


@dataclass
class EncodedBatch:
    """Encoder output for a batch; row ``b`` of ``sentence_rep`` is ``hidden_states[b, 0]``."""

    hidden_states: Tensor
    sentence_rep: Tensor
    token_ids: np.ndarray
    attention_mask: np.ndarray


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, vocab_size: int, rng: np.random.Generator):
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.embed = T.parameter(rng.uniform(-0.1, 0.1, size=(vocab_size, cfg.d_model)))
        self.layers = [Block(rng, cfg) for _ in range(cfg.n_layers)]
        self._pe = sinusoidal_positions(cfg.max_len, cfg.d_model)
        self.calls = 0
        self.sentences_encoded = 0

    def embed_ids(self, ids: np.ndarray) -> Tensor:
        b, n = ids.shape
        if n > self.cfg.max_len:
            raise ValueError(f"sequence length {n} exceeds max_len {self.cfg.max_len}")
        e = T.reshape(T.take(self.embed, ids.reshape(-1)), (b, n, self.cfg.d_model))
        e = T.scale(e, math.sqrt(self.cfg.d_model))
        return T.add_constant(e, np.broadcast_to(self._pe[:n], (b, n, self.cfg.d_model)))

    def __call__(self, ids: np.ndarray, mask: np.ndarray, rng=None, training: bool = False) -> EncodedBatch:
        ids = np.asarray(ids, dtype=np.int64)
        mask = np.asarray(mask, dtype=bool)
        if ids.size and ids.max() >= self.vocab_size:
            raise IndexError(f"token id {ids.max()} outside vocabulary of size {self.vocab_size}")
        self.calls += 1
        self.sentences_encoded += ids.shape[0]
        b, n = ids.shape
        x = T.dropout(self.embed_ids(ids), self.cfg.dropout_rate, rng, training)
        attend = mask[:, None, None, :]
        for layer in self.layers:
            x = layer(x, attend, rng, training)
        cls_rows = np.arange(b) * n
        rep = T.take(T.reshape(x, (b * n, self.cfg.d_model)), cls_rows)
        return EncodedBatch(x, rep, ids, mask)


class Decoder(Module):
    """Causal decoder conditioned only on the sentence representation at step 0."""

    def __init__(self, cfg: EncoderConfig, vocab_size: int, rng: np.random.Generator):
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.embed = T.parameter(rng.uniform(-0.1, 0.1, size=(vocab_size, cfg.d_model)))
        self.layers = [Block(rng, cfg) for _ in range(cfg.decoder_layers)]
        self.out = Linear(rng, cfg.d_model, vocab_size)
        self._pe = sinusoidal_positions(cfg.max_len, cfg.d_model)

    def __call__(self, sentence_rep: Tensor, target_ids: np.ndarray, target_mask: np.ndarray | None = None,
                 rng=None, training: bool = False) -> Tensor:
        """Teacher-forced logits of shape (B, T, V); position t predicts ``target_ids[:, t]``."""
        target_ids = np.asarray(target_ids, dtype=np.int64)
        if target_ids.ndim != 2 or target_ids.shape[1] == 0:
            raise T.ContractError("decoder needs a non-empty (B, T) target")
        b, n = target_ids.shape
        if n > self.cfg.max_len:
            raise ValueError(f"target length {n} exceeds max_len {self.cfg.max_len}")
        if target_mask is None:
            target_mask = np.ones((b, n), dtype=bool)
        d = self.cfg.d_model
        first = T.reshape(sentence_rep, (b, 1, d))
        if n > 1:
            prev = target_ids[:, :-1]
            e = T.scale(T.reshape(T.take(self.embed, prev.reshape(-1)), (b, n - 1, d)), math.sqrt(d))
            x = T.concat([first, e], axis=1)
        else:
            x = first
        x = T.add_constant(x, np.broadcast_to(self._pe[:n], (b, n, d)))
        x = T.dropout(x, self.cfg.dropout_rate, rng, training)
        inputs_valid = np.concatenate([np.ones((b, 1), dtype=bool), target_mask[:, :-1]], axis=1)
        causal = np.tril(np.ones((n, n), dtype=bool))
        attend = causal[None, None] & inputs_valid[:, None, None, :]
        for layer in self.layers:
            x = layer(x, attend, rng, training)
        return self.out(x)

    def greedy(self, sentence_rep: Tensor, max_steps: int) -> list[list[int]]:
        """Free-running argmax decoding; stops at [SEP].  Demo use only."""
        rep = T.constant(sentence_rep.data)
        b = rep.shape[0]
        out = [[] for _ in range(b)]
        done = np.zeros(b, dtype=bool)
        emitted = np.zeros((b, 0), dtype=np.int64)
        for step in range(min(max_steps, self.cfg.max_len)):
            # the trailing slot is a placeholder: only emitted[:, :step] feeds the decoder
            seq = np.concatenate([emitted, np.zeros((b, 1), dtype=np.int64)], axis=1)
            logits = self(rep, seq)
            nxt = logits.data[:, step].argmax(axis=-1)
            for i in range(b):
                if not done[i]:
                    if nxt[i] == SEP:
                        done[i] = True
                    else:
                        out[i].append(int(nxt[i]))
            if done.all():
                break
            emitted = np.concatenate([emitted, nxt[:, None]], axis=1)
        return out
