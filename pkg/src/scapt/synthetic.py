"""A generated restaurant-review domain with explicit and implicit sentiment.

Explicit sentences carry an opinion word next to the aspect.  Implicit
sentences describe an event ("we waited an hour for the soup") and carry no
opinion word.  Implicit templates are split in two: a few appear in the
labelled fine-tuning data, the rest only in the rated review dump (and in
the held-out test set).  That mirrors the situation SCAPT targets, where the
review dump is the only place most implicit expressions are ever seen with
a (noisy) label.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import RawReview
from .finetune import AspectExample
from .text import tokenize

ASPECTS = [
    "food", "pasta", "pizza", "service", "waiter", "staff", "music", "dessert",
    "wine list", "sushi", "coffee", "burger", "salad", "steak", "bartender", "happy hour",
]

OPINIONS = {
    "positive": ["great", "delicious", "excellent", "amazing", "fantastic", "wonderful", "friendly", "perfect", "lovely", "superb"],
    "negative": ["terrible", "awful", "bad", "horrible", "bland", "rude", "disgusting", "mediocre", "poor", "dreadful"],
}

# {A} = aspect, {O} = opinion word
EXPLICIT = [
    "the {A} was {O} .",
    "honestly the {A} is {O} .",
    "i thought the {A} was really {O} .",
    "what a {O} {A} .",
    "our {A} tonight was {O} .",
    "the {A} here is always {O} .",
]

IMPLICIT = {
    "positive": [
        "we will definitely come back for the {A} .",
        "i would order the {A} again tomorrow .",
        "my kids finished every bite of the {A} .",
        "i already told all my friends about the {A} .",
        "we booked another table just for the {A} .",
        "the {A} made our anniversary night .",
        "i still dream about the {A} .",
        "we tipped extra because of the {A} .",
        "the {A} is the reason we drive an hour to get here .",
        "my mother asked for the recipe of the {A} .",
        "we stayed until closing time for the {A} .",
        "the {A} alone is worth the trip downtown .",
    ],
    "negative": [
        "we waited an hour for the {A} .",
        "i sent the {A} back twice .",
        "the {A} gave my husband food poisoning .",
        "we left before the {A} even arrived .",
        "i asked for a refund on the {A} .",
        "there was a hair in the {A} .",
        "we will never order the {A} here again .",
        "the manager ignored our complaint about the {A} .",
        "half of the {A} ended up in the trash .",
        "the {A} cost twice what the menu said .",
        "nobody apologized for the {A} .",
        "we had to ask three times about the {A} .",
    ],
}

NEUTRAL = [
    "i ordered the {A} .",
    "my friend had the {A} .",
    "we asked about the {A} .",
    "the {A} comes with the lunch set .",
    "they changed the {A} last month .",
    "the {A} is listed on the second page .",
]

FILLER = [
    "we went there on a friday .",
    "parking was across the street .",
    "it was my sister 's birthday .",
    "we were a group of six .",
    "this was our second visit .",
]

# Implicit templates (per polarity) that labelled fine-tuning data may use; the rest are held out.
SEEN_IMPLICIT = 4


@dataclass
class SyntheticDomain:
    reviews: list[RawReview]
    train: list[AspectExample]
    test: list[AspectExample]


def _split_placeholder(template: str) -> str:
    # tokenize() would drop the NUL placeholder, so swap it for a sentinel word first
    return template.replace("{O}", "OPINIONSLOT")


def render(template: str, aspect: str, opinion: str | None = None) -> tuple[list[str], tuple[int, int], list[tuple[int, int]]]:
    """Tokens, aspect span and opinion spans for one filled template."""
    pre, post = _split_placeholder(template).split("{A}")
    tokens: list[str] = []
    opinions: list[tuple[int, int]] = []
    span = (0, 0)
    for part in (pre, "{A}", post):
        if part == "{A}":
            asp = tokenize(aspect)
            span = (len(tokens), len(tokens) + len(asp))
            tokens.extend(asp)
            continue
        for tok in tokenize(part):
            if tok == "opinionslot":
                if opinion is None:
                    raise ValueError(f"template {template!r} needs an opinion word")
                opinions.append((len(tokens), len(tokens) + 1))
                tokens.append(opinion)
            else:
                tokens.append(tok)
    return tokens, span, opinions


def _sentence(rng: np.random.Generator, polarity: str, kind: str, implicit_pool: str = "all") -> tuple[list[str], tuple[int, int], list[tuple[int, int]]]:
    aspect = ASPECTS[rng.integers(len(ASPECTS))]
    if kind == "explicit":
        t = EXPLICIT[rng.integers(len(EXPLICIT))]
        o = OPINIONS[polarity][rng.integers(len(OPINIONS[polarity]))]
        return render(t, aspect, o)
    if kind == "neutral":
        return render(NEUTRAL[rng.integers(len(NEUTRAL))], aspect)
    pool = IMPLICIT[polarity]
    if implicit_pool == "seen":
        pool = pool[:SEEN_IMPLICIT]
    elif implicit_pool == "heldout":
        pool = pool[SEEN_IMPLICIT:]
    return render(pool[rng.integers(len(pool))], aspect)


def generate_reviews(rng: np.random.Generator, n_reviews: int, label_noise: float = 0.1) -> list[RawReview]:
    """Multi-sentence rated reviews; sentence sentiment disagrees with the rating at rate ``label_noise``."""
    out = []
    for k in range(n_reviews):
        stars = int(rng.choice([1, 2, 3, 4, 5], p=[0.3, 0.1, 0.1, 0.1, 0.4]))
        topic = "restaurant" if rng.random() < 0.85 else str(rng.choice(["spa", "hotel"]))
        base = "positive" if stars >= 4 else "negative" if stars <= 2 else str(rng.choice(["positive", "negative"]))
        sentences = []
        for _ in range(int(rng.integers(2, 5))):
            if rng.random() < 0.15:
                sentences.append(FILLER[rng.integers(len(FILLER))])
                continue
            pol = base if rng.random() >= label_noise else ("negative" if base == "positive" else "positive")
            kind = "explicit" if rng.random() < 0.5 else "implicit"
            toks, _, _ = _sentence(rng, pol, kind)
            sentences.append(" ".join(toks))
        out.append(RawReview(f"r{k}", " ".join(sentences), stars, [topic]))
    return out


def generate_absa(rng: np.random.Generator, n: int, implicit_pool: str, mix=(0.6, 0.15, 0.25), prefix: str = "s",
                  multi_aspect: float = 0.15) -> list[AspectExample]:
    """Labelled aspect examples: ``mix`` = (explicit, implicit, neutral) proportions."""
    out: list[AspectExample] = []
    kinds = ["explicit", "implicit", "neutral"]
    i = 0
    while len(out) < n:
        kind = kinds[int(rng.choice(3, p=list(mix)))]
        sid = f"{prefix}{i}"
        i += 1
        if kind == "explicit" and rng.random() < multi_aspect and len(out) + 2 <= n:
            p1, p2 = (str(x) for x in rng.choice(["positive", "negative"], size=2))
            t1, s1, o1 = _sentence(rng, p1, "explicit")
            t2, s2, o2 = _sentence(rng, p2, "explicit")
            t1 = t1[:-1] + ["but"]
            off = len(t1)
            tokens = t1 + t2
            out.append(AspectExample(tokens, s1, p1, o1, sentence_id=sid, example_id=f"{sid}.0"))
            out.append(AspectExample(tokens, (s2[0] + off, s2[1] + off), p2, [(a + off, b + off) for a, b in o2],
                                     sentence_id=sid, example_id=f"{sid}.1"))
            continue
        pol = "neutral" if kind == "neutral" else str(rng.choice(["positive", "negative"]))
        toks, span, ops = _sentence(rng, pol, kind, implicit_pool)
        out.append(AspectExample(toks, span, pol, ops, sentence_id=sid, example_id=f"{sid}.0"))
    return out


def generate_domain(seed: int, n_reviews: int = 1400, n_train: int = 300, n_test_explicit: int = 120,
                    n_test_implicit: int = 150, label_noise: float = 0.1) -> SyntheticDomain:
    """Review dump, fine-tuning split, and a test split whose implicit part uses held-out templates."""
    rng = np.random.default_rng(seed)
    reviews = generate_reviews(rng, n_reviews, label_noise)
    train = generate_absa(rng, n_train, "seen", prefix="train")
    test = generate_absa(rng, n_test_explicit, "heldout", mix=(1.0, 0.0, 0.0), prefix="ese") + \
        generate_absa(rng, n_test_implicit, "heldout", mix=(0.0, 0.7, 0.3), prefix="ise")
    return SyntheticDomain(reviews, train, test)
