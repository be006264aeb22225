"""Review retrieval pipeline and ESE/ISE slicing.

Raw reviews (JSONL, one per line)::

    {"review_id": str, "text": str, "stars": 1..5, "topics": [str, ...]}

Public dumps need a small adapter projecting into that shape; nothing
vendor-specific lives here.  The pipeline keeps 5-star and 1-star reviews,
keeps in-domain topics, splits into sentences, and keeps sentences that
contain an aspect term from the ABSA training split.
"""

from __future__ import annotations

import json
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .finetune import AspectExample
from .pretrain import LabeledSentence
from .text import tokenize

RATING_LABELS = {5: "positive", 1: "negative"}


class CorpusError(ValueError):
    """Malformed input record; the message carries file and line."""


@dataclass
class RawReview:
    review_id: str
    text: str
    stars: int
    topics: list[str] | None = None

    def __post_init__(self):
        if isinstance(self.stars, bool) or int(self.stars) != self.stars or not 1 <= self.stars <= 5:
            raise ValueError(f"stars must be an integer in 1..5, got {self.stars!r}")
        self.stars = int(self.stars)


@dataclass
class RetrievedSentence:
    text: str
    label: str
    aspect_spans: list[tuple[int, int]]
    review_id: str

    def to_json(self) -> dict:
        return {
            "text": self.text,
            "label": self.label,
            "aspects": [{"from": a, "to": b} for a, b in self.aspect_spans],
            "review_id": self.review_id,
        }


@dataclass
class CorpusStats:
    ingested: int = 0
    rating_kept: int = 0
    missing_topic: int = 0
    domain_kept: int = 0
    sentences: int = 0
    matched: int = 0
    per_label: dict[str, int] = field(default_factory=lambda: {"positive": 0, "negative": 0})

    def to_dict(self) -> dict:
        return {
            "ingested": self.ingested,
            "rating_kept": self.rating_kept,
            "missing_topic": self.missing_topic,
            "domain_kept": self.domain_kept,
            "sentences": self.sentences,
            "matched": self.matched,
            "per_label": dict(self.per_label),
        }


# ---------------------------------------------------------------------------
# JSONL plumbing


def iter_jsonl(path) -> Iterator[tuple[int, dict]]:
    path = Path(path)
    try:
        fh = path.open(encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"{path}: cannot open ({exc.strerror})") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise CorpusError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, rec


def read_reviews(path) -> list[RawReview]:
    out = []
    for lineno, rec in iter_jsonl(path):
        try:
            out.append(RawReview(str(rec["review_id"]), rec["text"], rec["stars"], rec.get("topics")))
        except (KeyError, TypeError, ValueError) as exc:
            raise CorpusError(f"{path}:{lineno}: bad review record ({exc})") from exc
    return out


def read_absa(path) -> list[AspectExample]:
    """Load the ABSA JSONL format; one AspectExample per listed aspect."""
    out = []
    for lineno, rec in iter_jsonl(path):
        try:
            tokens = tokenize(rec["text"])
            for k, asp in enumerate(rec["aspects"]):
                out.append(AspectExample(
                    tokens=tokens,
                    aspect_span=(asp["from"], asp["to"]),
                    polarity=asp["polarity"],
                    opinion_spans=[(o["from"], o["to"]) for o in asp.get("opinion_terms", [])],
                    sentence_id=f"{lineno}",
                    example_id=f"{lineno}.{k}",
                    term=asp.get("term"),
                ))
        except (KeyError, TypeError, ValueError) as exc:
            raise CorpusError(f"{path}:{lineno}: bad ABSA record ({exc})") from exc
    return out


def absa_records(examples: Sequence[AspectExample]) -> list[dict]:
    """Inverse of :func:`read_absa`; aspects of one sentence are grouped in input order."""
    groups: dict = {}
    for ex in examples:
        rec = groups.setdefault(ex.sentence_key, {"text": " ".join(ex.tokens), "aspects": []})
        a, b = ex.aspect_span
        rec["aspects"].append({
            "term": ex.term if ex.term is not None else " ".join(ex.tokens[a:b]),
            "from": a,
            "to": b,
            "polarity": ex.polarity,
            "opinion_terms": [{"from": x, "to": y} for x, y in ex.opinion_spans],
        })
    return list(groups.values())


def read_pretrain_corpus(path) -> list[LabeledSentence]:
    out = []
    for lineno, rec in iter_jsonl(path):
        try:
            out.append(LabeledSentence(
                tokens=tokenize(rec["text"]),
                label=rec["label"],
                aspect_spans=[(a["from"], a["to"]) for a in rec["aspects"]],
                source_id=rec.get("review_id"),
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise CorpusError(f"{path}:{lineno}: bad corpus record ({exc})") from exc
    return out


def write_jsonl(path, records: Iterable[dict]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# pipeline stages


def filter_by_rating(reviews: Iterable[RawReview]) -> list[tuple[RawReview, str]]:
    """Keep 5-star (positive) and 1-star (negative) reviews; drop 2-4."""
    return [(r, RATING_LABELS[r.stars]) for r in reviews if r.stars in RATING_LABELS]


def filter_by_domain(reviews, allowed_topics: Iterable[str], stats: CorpusStats | None = None) -> list:
    """Case-insensitive topic membership.  Accepts reviews or (review, label) pairs."""
    allowed = {t.lower() for t in allowed_topics}
    kept = []
    for item in reviews:
        review = item[0] if isinstance(item, tuple) else item
        if not review.topics:
            if stats is not None:
                stats.missing_topic += 1
            continue
        if any(t.lower() in allowed for t in review.topics):
            kept.append(item)
    return kept


_SPLIT_RE = re.compile(r"(?<=[.!?])\s+")


def split_sentences(text: str) -> list[str]:
    """Break after '.', '!' or '?' when followed by whitespace.

    Runs of terminators stay with their sentence; abbreviations are not
    special-cased, so "Dr. Smith" splits.
    """
    return [s for s in (p.strip() for p in _SPLIT_RE.split(text.strip())) if s]


def build_lexicon(absa_train: Iterable[AspectExample]) -> set[tuple[str, ...]]:
    """Tokenised aspect terms from the training split."""
    lex = set()
    for ex in absa_train:
        a, b = ex.aspect_span
        term = tuple(t.lower() for t in ex.tokens[a:b])
        if term:
            lex.add(term)
    return lex


def match_aspects(tokens: Sequence[str], lexicon: set[tuple[str, ...]]) -> list[tuple[int, int]]:
    """Left-to-right, longest-first, non-overlapping exact matches of lexicon terms."""
    if not lexicon:
        return []
    lengths = sorted({len(t) for t in lexicon}, reverse=True)
    low = [t.lower() for t in tokens]
    spans = []
    i = 0
    while i < len(low):
        for n in lengths:
            if i + n <= len(low) and tuple(low[i:i + n]) in lexicon:
                spans.append((i, i + n))
                i += n
                break
        else:
            i += 1
    return spans


def _review_sentences(args) -> list[tuple[str, list[tuple[int, int]]]]:
    text, lexicon = args
    out = []
    for sent in split_sentences(text):
        out.append((sent, match_aspects(tokenize(sent), lexicon)))
    return out


def build_pretrain_corpus(raw_reviews: Iterable[RawReview], absa_train: Iterable[AspectExample],
                          allowed_topics: Iterable[str], out_path=None, workers: int = 1) -> tuple[list[RetrievedSentence], CorpusStats]:
    """Run every stage, write JSONL (if ``out_path``), and return the sentences with stage counts.

    Output order follows input order, so identical inputs give byte-identical files.
    """
    stats = CorpusStats()
    reviews = list(raw_reviews)
    stats.ingested = len(reviews)
    rated = filter_by_rating(reviews)
    stats.rating_kept = len(rated)
    in_domain = filter_by_domain(rated, allowed_topics, stats)
    stats.domain_kept = len(in_domain)

    lexicon = build_lexicon(absa_train)
    jobs = [(r.text, lexicon) for r, _ in in_domain]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            split = list(pool.map(_review_sentences, jobs, chunksize=64))
    else:
        split = [_review_sentences(j) for j in jobs]

    kept: list[RetrievedSentence] = []
    for (review, label), sentences in zip(in_domain, split):
        stats.sentences += len(sentences)
        for text, spans in sentences:
            if spans:
                kept.append(RetrievedSentence(text, label, spans, review.review_id))
                stats.per_label[label] += 1
    stats.matched = len(kept)
    if out_path is not None:
        write_jsonl(out_path, (s.to_json() for s in kept))
    return kept, stats


def slice_ese_ise(examples: Sequence[AspectExample]) -> tuple[list[tuple[AspectExample, str]], dict]:
    """Tag each example ESE (has an opinion term) or ISE (has none) and report proportions."""
    tagged = [(ex, ex.slice_tag) for ex in examples]
    n = len(tagged)
    n_ise = sum(1 for _, t in tagged if t == "ISE")
    props = {
        "total": n,
        "ESE": n - n_ise,
        "ISE": n_ise,
        "ise_fraction": n_ise / n if n else None,
    }
    return tagged, props
