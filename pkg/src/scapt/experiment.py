"""Controlled comparison: SCAPT pre-training + fine-tuning versus fine-tuning from scratch.

Both arms share the vocabulary, the fine-tuning data, the batch order and
the classifier initialisation; they differ only in the starting encoder
and W_s weights.
"""

from __future__ import annotations

import logging
import statistics
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .corpus import build_pretrain_corpus
from .finetune import AspectModel
from .metrics import MetricsReport, embedding_summary, evaluate, predict_labels
from .pretrain import LabeledSentence
from .synthetic import generate_domain
from .text import Vocab, tokenize
from .train import PROFILES, RunConfig, finetune_loop, load_pretrained_into, pretrain_loop, pretrain_meta

log = logging.getLogger(__name__)

_DESK_PRE = PROFILES["desk"]["pretrain"]
# Cosine similarity: raw dot products over post-LayerNorm states saturate the softmax at tau=0.07.
EXPERIMENT_PRETRAIN = replace(_DESK_PRE, epochs=8, batch_size=32, warmup_steps=50,
                              pretrain=replace(_DESK_PRE.pretrain, normalize=True))
EXPERIMENT_FINETUNE = replace(PROFILES["desk"]["finetune"], epochs=15, batch_size=16, warmup_steps=20)


@dataclass
class SeedOutcome:
    seed: int
    corpus_size: int
    corpus_stats: dict
    scapt: MetricsReport
    baseline: MetricsReport
    clustering: dict
    pretrain_clustering: dict
    pretrain_curve: list[dict] = field(repr=False, default_factory=list)
    seconds: float = 0.0

    @property
    def ise_gain(self) -> float:
        return self.scapt.ise_accuracy - self.baseline.ise_accuracy

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "corpus_size": self.corpus_size,
            "corpus_stats": self.corpus_stats,
            "scapt": self.scapt.to_dict(),
            "baseline": self.baseline.to_dict(),
            "ise_gain": self.ise_gain,
            "clustering": self.clustering,
            "pretrain_clustering": self.pretrain_clustering,
            "seconds": self.seconds,
        }


def run_seed(seed: int, pretrain_cfg: RunConfig = EXPERIMENT_PRETRAIN, finetune_cfg: RunConfig = EXPERIMENT_FINETUNE,
             **domain_kw) -> SeedOutcome:
    t0 = time.perf_counter()
    dom = generate_domain(seed, **domain_kw)
    retrieved, stats = build_pretrain_corpus(dom.reviews, dom.train, ["restaurant"])
    corpus = [LabeledSentence(tokenize(s.text), s.label, s.aspect_spans, s.review_id) for s in retrieved]
    vocab = Vocab.build([s.tokens for s in corpus] + [ex.tokens for ex in dom.train])

    pcfg = replace(pretrain_cfg, seed=seed)
    fcfg = replace(finetune_cfg, seed=seed, encoder=pcfg.encoder)
    pre = pretrain_loop(corpus, vocab, pcfg)
    params = {k: v.data.copy() for k, v in pre.model.named_parameters().items()}
    ckpt = (params, pretrain_meta(pcfg, vocab, pre.steps, pcfg.epochs))

    scapt = finetune_loop(dom.train, vocab, fcfg, checkpoint=ckpt).model
    base = finetune_loop(dom.train, vocab, fcfg, checkpoint=None).model
    scapt_report = evaluate(scapt, dom.test, vocab)
    base_report = evaluate(base, dom.test, vocab)
    _, reps = predict_labels(scapt, dom.test, vocab)
    # s^ab does not depend on the classifier, so a head-less load shows what pre-training alone learned
    probe = AspectModel(pcfg.encoder, len(vocab), np.random.default_rng(seed))
    load_pretrained_into(probe, *ckpt, vocab)
    _, pre_reps = probe.predict(dom.test, vocab)
    outcome = SeedOutcome(seed, len(corpus), stats.to_dict(), scapt_report, base_report,
                          embedding_summary(dom.test, reps), embedding_summary(dom.test, pre_reps),
                          pre.curves, time.perf_counter() - t0)
    log.info("seed %d: ISE %.3f vs %.3f (gain %+.3f), %.0fs", seed, scapt_report.ise_accuracy,
             base_report.ise_accuracy, outcome.ise_gain, outcome.seconds)
    return outcome


def run_experiment(seeds=(0, 1, 2, 3, 4), **kw) -> dict:
    outcomes = [run_seed(s, **kw) for s in seeds]
    gains = [o.ise_gain for o in outcomes]
    return {
        "median_ise_gain": statistics.median(gains),
        "gains": gains,
        "outcomes": outcomes,
    }
