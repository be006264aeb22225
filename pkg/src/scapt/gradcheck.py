"""Central finite-difference checks of the analytic gradients.

The numeric side only ever calls forward passes, so it is independent of
the backward machinery it checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

# Central differences at h=1e-5 carry roundoff of 1e-9 or more once inner
# terms are large (similarities / tau).  Entries below
# FLOOR_SCALE * max(1, |loss|) are compared against that floor instead of
# their own, unresolvable, magnitude.
FLOOR_SCALE = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR_SCALE) -> np.ndarray:
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_gradient(f: Callable[[], Tensor], p: Tensor, coords, h: float = 1e-5) -> np.ndarray:
    flat = p.data.reshape(-1)
    out = np.empty(len(coords))
    for j, c in enumerate(coords):
        old = flat[c]
        flat[c] = old + h
        up = f().item()
        flat[c] = old - h
        down = f().item()
        flat[c] = old
        out[j] = (up - down) / (2 * h)
    return out


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    checked: int
    worst_param: str | None = None

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


def check_gradients(f: Callable[[], Tensor], params: dict[str, Tensor], name: str = "loss", h: float = 1e-5,
                    max_coords: int | None = None, rng: np.random.Generator | None = None) -> GradCheckResult:
    """Compare backward() against central differences of ``f`` for every listed parameter.

    ``f`` must rebuild the graph on each call.  With ``max_coords`` set, a
    random subset of each parameter's entries is checked.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    loss = f()
    floor = FLOOR_SCALE * max(1.0, abs(loss.item()))
    T.backward(loss, params.values())
    worst, worst_name, checked = 0.0, None, 0
    for pname, p in params.items():
        analytic = p.grad.reshape(-1).copy()
        if max_coords is None or p.size <= max_coords:
            coords = np.arange(p.size)
        else:
            coords = np.sort(rng.choice(p.size, size=max_coords, replace=False))
        numeric = numeric_gradient(f, p, coords, h)
        err = float(relative_error(analytic[coords], numeric, floor).max()) if len(coords) else 0.0
        checked += len(coords)
        if err > worst:
            worst, worst_name = err, pname
    for p in params.values():
        p.grad = None
    return GradCheckResult(name, worst, checked, worst_name)


# ---------------------------------------------------------------------------
# the standard suite: each op on random inputs, then every composite loss


def _op_cases(rng: np.random.Generator) -> list[tuple[str, Callable[[], Tensor], dict[str, Tensor]]]:
    def u(*shape):
        return T.parameter(rng.uniform(-1, 1, size=shape))

    a, b = u(4, 5), u(5, 3)
    ba, bb = u(2, 3, 4, 5), u(2, 3, 5, 2)
    x3, bias = u(3, 4), u(4)
    sm = u(3, 5)
    mask = rng.random((3, 5)) > 0.3
    mask[:, 0] = True
    ln_x, ln_g, ln_b = u(3, 6), u(6), u(6)
    ce = u(5, 4)
    tgt = rng.integers(0, 4, size=5)
    emb = u(7, 3)
    ids = np.array([1, 3, 3, 6, 0])
    c1, c2 = u(2, 3), u(2, 2)
    w = T.constant(rng.uniform(-1, 1, size=(2, 5)))
    wl = T.constant(rng.uniform(-1, 1, size=(3, 6)))

    def weighted(t: Tensor, weights: Tensor) -> Tensor:
        return T.sum_(T.mul(t, weights))

    return [
        ("matmul", lambda: weighted(T.matmul(a, b), T.constant(np.arange(12.0).reshape(4, 3) / 10)), {"a": a, "b": b}),
        ("bmm", lambda: T.sum_(T.mul(T.bmm(ba, bb), T.constant(np.linspace(-1, 1, 48).reshape(2, 3, 4, 2)))), {"a": ba, "b": bb}),
        ("add_bias", lambda: weighted(T.add(x3, bias), T.constant(np.linspace(-1, 1, 12).reshape(3, 4))), {"x": x3, "bias": bias}),
        ("softmax", lambda: weighted(T.softmax(sm, axis=1), T.constant(np.linspace(-2, 2, 15).reshape(3, 5))), {"x": sm}),
        ("softmax_masked", lambda: weighted(T.softmax(sm, axis=1, mask=mask), T.constant(np.linspace(-2, 2, 15).reshape(3, 5))), {"x": sm}),
        ("log_softmax", lambda: weighted(T.log_softmax(sm, axis=1), T.constant(np.linspace(-1, 1, 15).reshape(3, 5))), {"x": sm}),
        ("logsumexp_masked", lambda: weighted(T.logsumexp(sm, axis=1, mask=mask), T.constant([0.3, -1.2, 0.7])), {"x": sm}),
        ("layer_norm", lambda: weighted(T.layer_norm(ln_x, ln_g, ln_b), wl), {"x": ln_x, "gain": ln_g, "bias": ln_b}),
        ("gelu", lambda: weighted(T.gelu(ln_x), wl), {"x": ln_x}),
        ("l2_normalize", lambda: weighted(T.l2_normalize(ln_x), wl), {"x": ln_x}),
        ("cross_entropy", lambda: T.cross_entropy(ce, tgt), {"logits": ce}),
        ("cross_entropy_none", lambda: weighted(T.cross_entropy(ce, tgt, reduction="none"), T.constant(np.linspace(0.5, 2, 5))), {"logits": ce}),
        ("take", lambda: weighted(T.take(emb, ids), T.constant(np.linspace(-1, 1, 15).reshape(5, 3))), {"table": emb}),
        ("concat", lambda: weighted(T.concat([c1, c2], axis=1), w), {"a": c1, "b": c2}),
        ("reshape_transpose", lambda: weighted(T.transpose(T.reshape(a, (5, 4))), T.constant(np.linspace(-1, 1, 20).reshape(4, 5))), {"a": a}),
        ("mean", lambda: T.mean(T.mul(a, a)), {"a": a}),
        ("scale_sub", lambda: weighted(T.sub(T.scale(c1, 2.5), T.mul(c1, c1)), T.constant(np.ones((2, 3)))), {"a": c1}),
    ]


def op_suite(seed: int = 0, h: float = 1e-5) -> list[GradCheckResult]:
    rng = np.random.default_rng(seed)
    return [check_gradients(f, params, name=name, h=h) for name, f, params in _op_cases(rng)]


TOY_SENTENCES = [
    ("the pasta was great and the staff smiled", "positive", [(1, 2), (6, 7)]),
    ("we waited an hour for the pasta", "negative", [(6, 7)]),
    ("the staff was rude", "negative", [(1, 2)]),
    ("i would order the soup again", "positive", [(4, 5)]),
]


def model_suite(cfg, seed: int = 0, h: float = 1e-5, max_coords: int | None = None) -> list[GradCheckResult]:
    """Check every pre-training objective, their weighted sum, and the fine-tuning loss.

    Dropout is forced off so each forward pass is a deterministic function of
    the parameters.
    """
    from dataclasses import replace

    from .finetune import AspectExample, AspectModel, finetune_loss
    from .pretrain import (LabeledSentence, PretrainConfig, ScaptModel, joint_pretrain_loss, mask_review,
                           masked_aspect_prediction_loss, reconstruction_losses, reconstruction_targets,
                           sentiment_projection, supervised_contrastive_loss)
    from .text import Vocab, pad_batch, tokenize

    cfg = replace(cfg, dropout_rate=0.0)
    rng = np.random.default_rng(seed)
    batch = [LabeledSentence(tokenize(t), y, spans) for t, y, spans in TOY_SENTENCES]
    vocab = Vocab.build(s.tokens for s in batch)
    model = ScaptModel(cfg, len(vocab), rng)
    pcfg = PretrainConfig()
    masked = [mask_review(s, vocab, rng, pcfg.mask_floor, cfg.max_len) for s in batch]
    ids, mask = pad_batch([m.corrupted_ids for m in masked])
    labels = [s.label for s in batch]
    targets = reconstruction_targets([m.original_ids for m in masked])
    params = model.named_parameters()

    def subset(*prefixes):
        return {k: v for k, v in params.items() if k.startswith(prefixes)}

    def sup():
        enc = model.encoder(ids, mask)
        return supervised_contrastive_loss(sentiment_projection(enc.sentence_rep, model.w_s), labels, pcfg.tau)[0]

    def rec():
        enc = model.encoder(ids, mask)
        return T.sum_(reconstruction_losses(model.decoder, enc.sentence_rep, targets))

    def map_():
        enc = model.encoder(ids, mask)
        return T.sum_(masked_aspect_prediction_loss(enc.hidden_states, masked, model.w_o).per_sentence_mean)

    def joint():
        return joint_pretrain_loss(model, batch, vocab, pcfg, rng, training=False, masked=masked).total

    absa = [
        AspectExample(batch[0].tokens, (1, 2), "positive", [(3, 4)], sentence_id="s0"),
        AspectExample(batch[0].tokens, (6, 7), "neutral", [], sentence_id="s0"),
        AspectExample(batch[1].tokens, (6, 7), "negative", [], sentence_id="s1"),
    ]
    asp = AspectModel(cfg, len(vocab), rng)

    def fine():
        return finetune_loss(asp, absa, vocab, training=False)

    crng = np.random.default_rng(seed + 1)
    return [
        check_gradients(sup, subset("encoder.", "w_s"), "supervised_contrastive", h, max_coords, crng),
        check_gradients(rec, subset("encoder.", "decoder."), "review_reconstruction", h, max_coords, crng),
        check_gradients(map_, subset("encoder.", "w_o"), "masked_aspect_prediction", h, max_coords, crng),
        check_gradients(joint, params, "joint_pretrain", h, max_coords, crng),
        check_gradients(fine, asp.named_parameters(), "aspect_finetune", h, max_coords, crng),
    ]
