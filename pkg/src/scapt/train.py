"""Pre-training and fine-tuning loops, the class-balanced sampler, run configs."""

from __future__ import annotations

import csv
import logging
import queue
import threading
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, assign_params, load_checkpoint, save_checkpoint
from .finetune import AspectExample, AspectModel, finetune_loss
from .optim import AdamState, adam_step
from .pretrain import LabeledSentence, PretrainConfig, ScaptModel, joint_pretrain_loss, mask_review
from .text import Vocab
from .transformer import DESK_ENCODER, FULL_ENCODER, EncoderConfig

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("step", "epoch", "total", "sup", "rec", "map", "map_raw", "lr")


class TrainingDiverged(RuntimeError):
    """Loss or gradients went non-finite; the last per-epoch checkpoint is left in place."""


class IncompatibleCheckpoint(CheckpointError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    epochs: int = 10
    batch_size: int = 16
    base_lr: float = 1e-3
    warmup_steps: int = 100
    clip_norm: float | None = None
    prefetch: int = 0
    encoder: EncoderConfig = DESK_ENCODER
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0 or self.base_lr <= 0 or self.warmup_steps < 0:
            raise ValueError("epochs >= 0, batch_size > 0, base_lr > 0 and warmup_steps >= 0 are required")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        enc = EncoderConfig(**d.pop("encoder", {}))
        pre = PretrainConfig(**d.pop("pretrain", {}))
        return cls(encoder=enc, pretrain=pre, **d)


# Full-scale schedule (80 pre-training epochs, 1e-3 / 5e-5) versus the laptop profile.
PROFILES = {
    "desk": {
        "pretrain": RunConfig(epochs=10, batch_size=16, base_lr=1e-3, warmup_steps=100),
        "finetune": RunConfig(epochs=20, batch_size=16, base_lr=1e-3, warmup_steps=20),
    },
    "full": {
        "pretrain": RunConfig(epochs=80, batch_size=64, base_lr=1e-3, warmup_steps=4000, encoder=FULL_ENCODER),
        "finetune": RunConfig(epochs=8, batch_size=32, base_lr=5e-5, warmup_steps=100, encoder=FULL_ENCODER),
    },
}


def seed_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators so that, e.g., weight init never shifts batch order."""
    names = ("init", "order", "mask", "dropout")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, children)}


# ---------------------------------------------------------------------------
# sampling


def balanced_batches(items: Sequence, labels: Sequence, batch_size: int, rng: np.random.Generator,
                     min_per_label: int = 2) -> list[list[int]]:
    """Index batches with at least ``min_per_label`` of every label present.

    The batch count K starts at ceil(N / batch_size) and shrinks until every
    label can seed K batches.  Each batch gets its seed examples first; the
    remaining examples, shuffled, fill batches up to ``batch_size`` in turn.
    Examples that do not fit are dropped for this epoch.
    """
    if batch_size < 4:
        raise ValueError("batch_size must be at least 4")
    labels = list(labels)
    if len(labels) != len(items):
        raise ValueError("one label per item is required")
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise ValueError(f"balanced sampling needs at least two labels, found {classes}")
    if min_per_label * len(classes) > batch_size:
        raise ValueError(f"batch_size {batch_size} cannot hold {min_per_label} of each of {len(classes)} labels")

    pools = {c: list(rng.permutation([i for i, y in enumerate(labels) if y == c])) for c in classes}
    n = len(labels)
    k = -(-n // batch_size)
    while k > 0 and any(len(pools[c]) < min_per_label * k for c in classes):
        k -= 1
    if k == 0:
        return []

    batches: list[list[int]] = [[] for _ in range(k)]
    for c in classes:
        for b in range(k):
            batches[b].extend(int(i) for i in pools[c][b * min_per_label:(b + 1) * min_per_label])
        pools[c] = pools[c][k * min_per_label:]
    rest = [int(i) for i in rng.permutation([i for c in classes for i in pools[c]])] if any(pools.values()) else []
    pos = 0
    for b in range(k):
        room = batch_size - len(batches[b])
        batches[b].extend(rest[pos:pos + room])
        pos += room
    return [list(int(i) for i in rng.permutation(b)) for b in batches]


def prefetch(source: Iterable, capacity: int) -> Iterator:
    """Run ``source`` on a producer thread, handing items over a bounded queue.

    ``capacity <= 0`` iterates inline.
    """
    if capacity <= 0:
        yield from source
        return
    q: queue.Queue = queue.Queue(maxsize=capacity)
    done = object()
    stop = threading.Event()

    def produce():
        try:
            for item in source:
                while not stop.is_set():
                    try:
                        q.put(("item", item), timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
            q.put(("end", done))
        except BaseException as exc:  # forwarded to the consumer
            q.put(("error", exc))

    th = threading.Thread(target=produce, daemon=True)
    th.start()
    try:
        while True:
            kind, item = q.get()
            if kind == "item":
                yield item
            elif kind == "error":
                raise item
            else:
                return
    finally:
        stop.set()


# ---------------------------------------------------------------------------
# loops


@dataclass
class PretrainResult:
    model: ScaptModel
    curves: list[dict]
    steps: int
    checkpoint: Path | None


def _write_curves(path: Path, rows: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in CURVE_COLUMNS})


def pretrain_meta(cfg: RunConfig, vocab: Vocab, step: int, epoch: int) -> dict:
    return {"kind": "scapt-pretrain", "run_config": cfg.to_dict(), "vocab": vocab.to_list(), "step": step, "epoch": epoch}


def pretrain_loop(corpus: Sequence[LabeledSentence], vocab: Vocab, cfg: RunConfig, out_dir=None,
                  on_step: Callable[[dict], None] | None = None, model: ScaptModel | None = None) -> PretrainResult:
    """Joint SCAPT training over class-balanced batches; checkpoints after every epoch."""
    if not corpus:
        raise ValueError("pre-training corpus is empty")
    rngs = seed_streams(cfg.seed)
    if model is None:
        model = ScaptModel(cfg.encoder, len(vocab), rngs["init"])
    params = model.named_parameters()
    state = AdamState(base_lr=cfg.base_lr, warmup_steps=cfg.warmup_steps)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.json" if out is not None else None
    labels = [s.label for s in corpus]
    curves: list[dict] = []
    step = 0

    def save(epoch):
        if ckpt is not None:
            save_checkpoint(ckpt, params, pretrain_meta(cfg, vocab, step, epoch))

    def batches_for_epoch():
        for idx in balanced_batches(corpus, labels, cfg.batch_size, rngs["order"]):
            batch = [corpus[i] for i in idx]
            masked = [mask_review(s, vocab, rngs["mask"], cfg.pretrain.mask_floor, cfg.encoder.max_len) for s in batch]
            yield batch, masked

    save(0)
    for epoch in range(1, cfg.epochs + 1):
        for batch, masked in prefetch(batches_for_epoch(), cfg.prefetch):
            try:
                jl = joint_pretrain_loss(model, batch, vocab, cfg.pretrain, rngs["dropout"], training=True, masked=masked)
                T.backward(jl.total, params.values())
                grads_ok = all(np.isfinite(p.grad).all() for p in params.values())
                if not grads_ok:
                    raise T.NonFiniteError("non-finite gradient")
                lr = adam_step(params, state, cfg.clip_norm)
            except T.NonFiniteError as exc:
                if out is not None:
                    _write_curves(out / "loss_curves.csv", curves)
                raise TrainingDiverged(f"step {step + 1}: {exc}; last good checkpoint kept") from exc
            step += 1
            row = {"step": step, "epoch": epoch, "total": jl.total.item(), "sup": jl.sup, "rec": jl.rec,
                   "map": jl.map, "map_raw": jl.map_raw, "lr": lr}
            curves.append(row)
            if on_step is not None:
                on_step(row)
        log.info("pretrain epoch %d done, step %d, last loss %.4f", epoch, step, curves[-1]["total"] if curves else float("nan"))
        save(epoch)
    if out is not None:
        _write_curves(out / "loss_curves.csv", curves)
        vocab.save(out / "vocab.txt")
    return PretrainResult(model, curves, step, ckpt)


@dataclass
class FinetuneResult:
    model: AspectModel
    curves: list[dict]
    steps: int
    checkpoint: Path | None


def finetune_meta(cfg: RunConfig, vocab: Vocab, step: int, epoch: int, init: str) -> dict:
    return {"kind": "scapt-finetune", "run_config": cfg.to_dict(), "vocab": vocab.to_list(), "step": step,
            "epoch": epoch, "init": init}


def load_pretrained_into(model: AspectModel, params: dict[str, np.ndarray], meta: dict, vocab: Vocab) -> None:
    """Copy encoder.* and w_s from a pre-training checkpoint; W_a stays freshly initialised."""
    enc = meta.get("run_config", {}).get("encoder")
    if enc is not None and EncoderConfig(**enc) != model.cfg:
        raise IncompatibleCheckpoint(f"checkpoint encoder {enc} != requested {model.cfg.to_dict()}")
    if "vocab" in meta and meta["vocab"] != vocab.to_list():
        raise IncompatibleCheckpoint("checkpoint vocabulary differs from the one supplied")
    wanted = {k: v for k, v in model.named_parameters().items() if k.startswith("encoder.") or k == "w_s"}
    try:
        assign_params(wanted, params, strict=True)
    except CheckpointError as exc:
        raise IncompatibleCheckpoint(str(exc)) from exc


def finetune_loop(train: Sequence[AspectExample], vocab: Vocab, cfg: RunConfig, checkpoint=None, out_dir=None,
                  on_step: Callable[[dict], None] | None = None) -> FinetuneResult:
    """Aspect-aware fine-tuning from a SCAPT checkpoint, or from random init when ``checkpoint`` is None.

    ``checkpoint`` is a path or a ``(params, meta)`` pair.
    """
    if not train:
        raise ValueError("fine-tuning dataset is empty")
    rngs = seed_streams(cfg.seed)
    model = AspectModel(cfg.encoder, len(vocab), rngs["init"])
    init = "random"
    if checkpoint is not None:
        params_in, meta = load_checkpoint(checkpoint) if isinstance(checkpoint, (str, Path)) else checkpoint
        load_pretrained_into(model, params_in, meta, vocab)
        init = str(checkpoint) if isinstance(checkpoint, (str, Path)) else "in-memory"
    params = model.named_parameters()
    state = AdamState(base_lr=cfg.base_lr, warmup_steps=cfg.warmup_steps)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.json" if out is not None else None
    curves: list[dict] = []
    step = 0

    def save(epoch):
        if ckpt is not None:
            save_checkpoint(ckpt, params, finetune_meta(cfg, vocab, step, epoch, init))

    save(0)
    for epoch in range(1, cfg.epochs + 1):
        order = rngs["order"].permutation(len(train))
        for start in range(0, len(order), cfg.batch_size):
            batch = [train[i] for i in order[start:start + cfg.batch_size]]
            try:
                loss = finetune_loss(model, batch, vocab, rng=rngs["dropout"], training=True)
                T.backward(loss, params.values())
                lr = adam_step(params, state, cfg.clip_norm)
            except T.NonFiniteError as exc:
                raise TrainingDiverged(f"step {step + 1}: {exc}; last good checkpoint kept") from exc
            step += 1
            row = {"step": step, "epoch": epoch, "loss": loss.item(), "lr": lr}
            curves.append(row)
            if on_step is not None:
                on_step(row)
        save(epoch)
    if out is not None:
        with (out / "finetune_curve.csv").open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=("step", "epoch", "loss", "lr"))
            w.writeheader()
            w.writerows(curves)
        vocab.save(out / "vocab.txt")
    return FinetuneResult(model, curves, step, ckpt)


def load_aspect_model(path) -> tuple[AspectModel, Vocab, dict]:
    """Rebuild a fine-tuned model (and its vocabulary) from its checkpoint."""
    params, meta = load_checkpoint(path)
    if meta.get("kind") != "scapt-finetune":
        raise IncompatibleCheckpoint(f"{path} is not a fine-tuned checkpoint (kind={meta.get('kind')!r})")
    cfg = RunConfig.from_dict(meta["run_config"])
    vocab = Vocab(meta["vocab"])
    model = AspectModel(cfg.encoder, len(vocab), np.random.default_rng(0))
    try:
        assign_params(model.named_parameters(), params, strict=True)
    except CheckpointError as exc:
        raise IncompatibleCheckpoint(str(exc)) from exc
    return model, vocab, meta


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    """``dataclasses.replace`` that ignores None values and nests pretrain/encoder keys."""
    kw = {k: v for k, v in kw.items() if v is not None}
    pre = {k[len("pretrain."):]: kw.pop(k) for k in list(kw) if k.startswith("pretrain.")}
    enc = {k[len("encoder."):]: kw.pop(k) for k in list(kw) if k.startswith("encoder.")}
    if pre:
        kw["pretrain"] = replace(cfg.pretrain, **pre)
    if enc:
        kw["encoder"] = replace(cfg.encoder, **enc)
    return replace(cfg, **kw)
