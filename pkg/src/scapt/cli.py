"""Command-line entry point: ``scapt <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint
from .corpus import CorpusError, absa_records, build_pretrain_corpus, read_absa, read_pretrain_corpus, read_reviews, write_jsonl
from .metrics import EmptyDatasetError, embedding_summary, evaluate, predict_labels, write_embeddings_csv
from .pretrain import ScaptModel
from .tensor import ContractError
from .text import Vocab, format_input, pad_batch
from .train import (PROFILES, IncompatibleCheckpoint, RunConfig, TrainingDiverged, finetune_loop, load_aspect_model,
                    pretrain_loop, with_overrides)

log = logging.getLogger("scapt")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_CHECKPOINT = 5
EXIT_DIVERGED = 6
EXIT_EXISTS = 7
EXIT_CHECK_FAILED = 8

EXIT_CODES_HELP = """exit codes:
  0  success
  1  unexpected internal error
  2  usage error (unknown flag, missing argument)
  3  invalid configuration
  4  missing or malformed input data
  5  checkpoint missing, corrupt, or incompatible with the requested config/vocab
  6  training diverged (non-finite loss); last good checkpoint kept
  7  output directory not empty (pass --force to overwrite)
  8  gradient check failed the tolerance
Failures print one JSON object {"error", "exit_code", "message"} on stderr.
Set SCAPT_LOG (DEBUG, INFO, WARNING, ...) to change the log level."""


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code, self.kind = code, kind


# ---------------------------------------------------------------------------
# configuration


def _load_config_file(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise CliError(EXIT_CONFIG, "config", f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_CONFIG, "config", f"config {path} is not valid JSON: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise CliError(EXIT_CONFIG, "config", "config file must hold a JSON object")
    return data


def _merge(base: RunConfig, file_cfg: dict) -> RunConfig:
    merged = base.to_dict()
    for key, val in file_cfg.items():
        if key in ("pretrain", "encoder"):
            if not isinstance(val, dict):
                raise CliError(EXIT_CONFIG, "config", f"{key!r} must be an object")
            merged[key] = {**merged[key], **val}
        elif key in merged:
            merged[key] = val
        else:
            raise CliError(EXIT_CONFIG, "config", f"unknown config key {key!r}")
    return RunConfig.from_dict(merged)


def resolve_config(args, stage: str) -> RunConfig:
    """Profile defaults, then the --config file, then flags (flags win)."""
    try:
        cfg = PROFILES[args.profile][stage]
        if args.config:
            cfg = _merge(cfg, _load_config_file(args.config))
        return with_overrides(
            cfg, seed=args.seed, epochs=args.epochs, batch_size=args.batch_size, base_lr=args.lr,
            **{"pretrain.tau": args.tau, "pretrain.alpha": args.alpha, "pretrain.beta": args.beta},
        )
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, "config", str(exc)) from exc


def prepare_out(out, force: bool) -> Path:
    out = Path(out)
    if out.exists() and not out.is_dir():
        raise CliError(EXIT_EXISTS, "output_exists", f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise CliError(EXIT_EXISTS, "output_exists", f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, args, config: dict | None) -> None:
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:] if args.argv is None else args.argv,
        "version": __version__,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "arguments": {k: v for k, v in vars(args).items() if k not in ("func", "argv")},
        "config": config,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _plots():
    from . import plots  # matplotlib import is slow; only pay for it when drawing

    return plots


# ---------------------------------------------------------------------------
# commands


def cmd_synth_data(args) -> int:
    from .synthetic import generate_domain

    out = prepare_out(args.out, args.force)
    write_manifest(out, args, {"seed": args.seed or 0, "n_reviews": args.reviews})
    dom = generate_domain(args.seed or 0, n_reviews=args.reviews)
    write_jsonl(out / "reviews.jsonl", ({"review_id": r.review_id, "text": r.text, "stars": r.stars, "topics": r.topics}
                                        for r in dom.reviews))
    write_jsonl(out / "train.jsonl", absa_records(dom.train))
    write_jsonl(out / "test.jsonl", absa_records(dom.test))
    print(json.dumps({"reviews": len(dom.reviews), "train": len(dom.train), "test": len(dom.test)}))
    return EXIT_OK


def cmd_corpus_build(args) -> int:
    if args.workers < 1:
        raise CliError(EXIT_CONFIG, "config", "--workers must be at least 1")
    out = prepare_out(args.out, args.force)
    write_manifest(out, args, {"topics": args.topics, "workers": args.workers})
    reviews = read_reviews(args.reviews)
    train = read_absa(args.absa)
    _, stats = build_pretrain_corpus(reviews, train, args.topics, out / "corpus.jsonl", workers=args.workers)
    _dump(out / "corpus.stats.json", stats.to_dict())
    print(json.dumps(stats.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args, "pretrain")
    out = prepare_out(args.out, args.force)
    write_manifest(out, args, cfg.to_dict())
    corpus = read_pretrain_corpus(args.corpus)
    if not corpus:
        raise CliError(EXIT_DATA, "data", f"{args.corpus} holds no sentences")
    extra = [ex.tokens for ex in read_absa(args.absa)] if args.absa else []
    vocab = Vocab.build([s.tokens for s in corpus] + extra, min_count=args.min_count)
    res = pretrain_loop(corpus, vocab, cfg, out_dir=out)
    if res.curves:
        _plots().plot_loss_curves(res.curves, out / "loss_curves.png")
    if args.demo_reconstruct:
        _reconstruction_demo(res.model, corpus[:args.demo_reconstruct], vocab, cfg, out / "reconstructions.jsonl")
    print(json.dumps({"steps": res.steps, "checkpoint": str(res.checkpoint),
                      "final": res.curves[-1] if res.curves else None}, sort_keys=True))
    return EXIT_OK


def _reconstruction_demo(model: ScaptModel, sentences, vocab: Vocab, cfg: RunConfig, path: Path) -> None:
    """Greedy decoding from h-bar of the clean input; a qualitative check only."""
    ids, mask = pad_batch([format_input(s.tokens, vocab, cfg.encoder.max_len) for s in sentences])
    enc = model.encoder(ids, mask)
    decoded = model.decoder.greedy(enc.sentence_rep, cfg.encoder.max_len)
    write_jsonl(path, ({"input": " ".join(s.tokens), "output": " ".join(vocab.tokens(d))}
                       for s, d in zip(sentences, decoded)))


def cmd_finetune(args) -> int:
    cfg = resolve_config(args, "finetune")
    checkpoint = None
    if args.checkpoint:
        try:
            params, meta = load_checkpoint(args.checkpoint)
        except CheckpointError as exc:
            raise CliError(EXIT_CHECKPOINT, "checkpoint", str(exc)) from exc
        if meta.get("kind") != "scapt-pretrain":
            raise CliError(EXIT_CHECKPOINT, "checkpoint", f"{args.checkpoint} is not a pre-training checkpoint")
        # the encoder shape comes from the checkpoint unless the config file overrides it
        if not (args.config and "encoder" in _load_config_file(args.config)):
            cfg = replace(cfg, encoder=RunConfig.from_dict(meta["run_config"]).encoder)
        vocab = Vocab(meta["vocab"])
        checkpoint = (params, meta)
    out = prepare_out(args.out, args.force)
    write_manifest(out, args, cfg.to_dict())
    train = read_absa(args.train)
    if checkpoint is None:
        vocab = Vocab.load(args.vocab) if args.vocab else Vocab.build([ex.tokens for ex in train])
    res = finetune_loop(train, vocab, cfg, checkpoint=checkpoint, out_dir=out)
    if res.curves:
        _plots().plot_loss_curves(res.curves, out / "finetune_curve.png", keys=("loss",))
    print(json.dumps({"steps": res.steps, "checkpoint": str(res.checkpoint),
                      "final_loss": res.curves[-1]["loss"] if res.curves else None}))
    return EXIT_OK


def _load_model(path):
    try:
        return load_aspect_model(path)
    except CheckpointError as exc:
        raise CliError(EXIT_CHECKPOINT, "checkpoint", str(exc)) from exc


def cmd_eval(args) -> int:
    out = prepare_out(args.out, args.force)
    write_manifest(out, args, None)
    model, vocab, _ = _load_model(args.checkpoint)
    data = read_absa(args.data)
    report = evaluate(model, data, vocab, with_slices=args.slice)
    metrics = report.to_dict()
    if not args.slice:
        metrics.pop("ese_accuracy")
        metrics.pop("ise_accuracy")
    _dump(out / "metrics.json", metrics)
    _plots().plot_confusion(np.array(report.confusion), out / "confusion.png")
    print(json.dumps({k: metrics[k] for k in metrics if k.endswith("accuracy") or k == "macro_f1"}, sort_keys=True))
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    out = prepare_out(args.out, args.force)
    write_manifest(out, args, None)
    model, vocab, _ = _load_model(args.checkpoint)
    data = read_absa(args.data)
    if not data:
        raise CliError(EXIT_DATA, "data", f"{args.data} holds no examples")
    _, reps = predict_labels(model, data, vocab)
    write_embeddings_csv(out / "embeddings.csv", data, reps)
    summary = embedding_summary(data, reps)
    _dump(out / "clustering.json", summary)
    _plots().plot_embeddings(reps, [ex.polarity for ex in data], [ex.slice_tag for ex in data], out / "embeddings.png")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import model_suite, op_suite
    from .transformer import DESK_ENCODER, EncoderConfig

    cfg = DESK_ENCODER if args.model == "desk" else EncoderConfig(d_model=8, n_layers=2, n_heads=2, d_ff=16, max_len=16)
    seed = args.seed or 0
    out = prepare_out(args.out, args.force) if args.out else None
    if out is not None:
        write_manifest(out, args, {"encoder": cfg.to_dict(), "tol": args.tol, "max_coords": args.max_coords})
    results = op_suite(seed) + model_suite(cfg, seed, max_coords=args.max_coords)
    width = max(len(r.name) for r in results)
    print(f"{'check':<{width}}  {'max rel err':>12}  {'coords':>7}  result")
    for r in results:
        print(f"{r.name:<{width}}  {r.max_rel_err:12.3e}  {r.checked:7d}  {'PASS' if r.passed(args.tol) else 'FAIL'}")
    if out is not None:
        _dump(out / "gradcheck.json", [{"name": r.name, "max_rel_err": r.max_rel_err, "checked": r.checked,
                                        "worst_param": r.worst_param, "passed": r.passed(args.tol)} for r in results])
    failed = [r.name for r in results if not r.passed(args.tol)]
    if failed:
        raise CliError(EXIT_CHECK_FAILED, "gradcheck", f"above {args.tol:g}: {', '.join(failed)}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    from .experiment import EXPERIMENT_FINETUNE, EXPERIMENT_PRETRAIN, run_experiment

    out = prepare_out(args.out, args.force)
    write_manifest(out, args, {"seeds": args.seeds, "pretrain": EXPERIMENT_PRETRAIN.to_dict(),
                               "finetune": EXPERIMENT_FINETUNE.to_dict()})
    res = run_experiment(seeds=tuple(args.seeds))
    rows = [{"seed": o.seed, "scapt_ise": o.scapt.ise_accuracy, "baseline_ise": o.baseline.ise_accuracy,
             "scapt_ese": o.scapt.ese_accuracy, "baseline_ese": o.baseline.ese_accuracy, "ise_gain": o.ise_gain,
             "seconds": o.seconds} for o in res["outcomes"]]
    _dump(out / "summary.json", {"median_ise_gain": res["median_ise_gain"], "per_seed": rows,
                                 "outcomes": [o.to_dict() for o in res["outcomes"]]})
    with (out / "per_seed.csv").open("w") as fh:
        fh.write(",".join(rows[0]) + "\n")
        for r in rows:
            fh.write(",".join(str(v) for v in r.values()) + "\n")
    _plots().plot_gain(rows, out / "ise_gain.png")
    _plots().plot_loss_curves(res["outcomes"][0].pretrain_curve, out / "pretrain_loss_seed%d.png" % rows[0]["seed"])
    print(json.dumps({"median_ise_gain": res["median_ise_gain"], "gains": res["gains"]}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, "usage", f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    p = _Parser(prog="scapt", description="Sentiment-aware contrastive pre-training for aspect sentiment.",
                                epilog=EXIT_CODES_HELP, formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"scapt {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def common(sp, train_flags=False):
        sp.add_argument("--out", required=True, help="output directory (must be empty unless --force)")
        sp.add_argument("--force", action="store_true", help="allow writing into a non-empty output directory")
        sp.add_argument("--seed", type=int, default=None, help="the single source of randomness")
        if train_flags:
            sp.add_argument("--config", help="JSON file of RunConfig fields; nested 'pretrain' / 'encoder' objects")
            sp.add_argument("--profile", choices=sorted(PROFILES), default="desk")
            sp.add_argument("--epochs", type=int)
            sp.add_argument("--batch-size", type=int)
            sp.add_argument("--lr", type=float, help="peak learning rate after warm-up")
            sp.add_argument("--tau", type=float, help="contrastive temperature")
            sp.add_argument("--alpha", type=float, help="reconstruction weight")
            sp.add_argument("--beta", type=float, help="masked aspect prediction weight")
        return sp

    def add(name, func, help_, **kw):
        sp = sub.add_parser(name, help=help_, description=help_, epilog=EXIT_CODES_HELP, formatter_class=fmt)
        sp.set_defaults(func=func)
        return sp

    sp = common(add("corpus-build", cmd_corpus_build, "retrieve rated, in-domain, aspect-bearing sentences"))
    sp.add_argument("--reviews", required=True, help="review JSONL: review_id, text, stars, topics")
    sp.add_argument("--absa", required=True, help="ABSA training JSONL supplying the aspect lexicon")
    sp.add_argument("--topics", nargs="+", default=["restaurant"])
    sp.add_argument("--workers", type=int, default=1)

    sp = common(add("pretrain", cmd_pretrain, "joint contrastive / reconstruction / masked-aspect pre-training"), True)
    sp.add_argument("--corpus", required=True, help="corpus JSONL from corpus-build")
    sp.add_argument("--absa", help="ABSA JSONL whose tokens join the vocabulary")
    sp.add_argument("--min-count", type=int, default=1)
    sp.add_argument("--demo-reconstruct", type=int, default=0, metavar="N",
                    help="greedy-decode the first N corpus sentences after training")

    sp = common(add("finetune", cmd_finetune, "aspect-aware fine-tuning, from a checkpoint or from scratch"), True)
    sp.add_argument("--train", required=True, help="ABSA training JSONL")
    sp.add_argument("--checkpoint", help="pre-training checkpoint; omit to start from random weights")
    sp.add_argument("--vocab", help="vocabulary file when no checkpoint is given")

    sp = common(add("eval", cmd_eval, "accuracy, macro-F1 and (with --slice) ESE/ISE accuracy"))
    sp.add_argument("--checkpoint", required=True, help="fine-tuned checkpoint")
    sp.add_argument("--data", required=True, help="ABSA JSONL to score")
    sp.add_argument("--slice", action="store_true", help="report explicit/implicit slice accuracy")

    sp = common(add("export-embeddings", cmd_export_embeddings, "sentiment representations as CSV plus clustering score"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)

    sp = add("gradcheck", cmd_gradcheck, "finite-difference check of every op and composite loss")
    sp.add_argument("--out", help="optional directory for gradcheck.json")
    sp.add_argument("--force", action="store_true")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--model", choices=("desk", "toy"), default="desk")
    sp.add_argument("--max-coords", type=int, default=8, help="entries sampled per parameter (0 = all)")
    sp.add_argument("--tol", type=float, default=1e-4)

    sp = common(add("synth-data", cmd_synth_data, "write the generated restaurant domain as JSONL"))
    sp.add_argument("--reviews", type=int, default=1400, help="number of rated reviews")

    sp = common(add("experiment", cmd_experiment, "SCAPT versus no pre-training on the generated domain"))
    sp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    return p


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "exit_code": code, "message": message}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("SCAPT_LOG", "WARNING").upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliError as exc:
        return _fail(exc.code, exc.kind, str(exc))
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    args.argv = argv
    if getattr(args, "max_coords", None) == 0:
        args.max_coords = None
    try:
        return args.func(args)
    except CliError as exc:
        return _fail(exc.code, exc.kind, str(exc))
    except IncompatibleCheckpoint as exc:
        return _fail(EXIT_CHECKPOINT, "checkpoint", str(exc))
    except CheckpointError as exc:
        return _fail(EXIT_CHECKPOINT, "checkpoint", str(exc))
    except TrainingDiverged as exc:
        return _fail(EXIT_DIVERGED, "diverged", str(exc))
    except (CorpusError, EmptyDatasetError, ContractError) as exc:
        return _fail(EXIT_DATA, "data", str(exc))
    except (ValueError, OSError) as exc:
        return _fail(EXIT_DATA, "data", str(exc))
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        return _fail(EXIT_INTERNAL, "internal", f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
