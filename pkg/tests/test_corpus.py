import json
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scapt.corpus import (CorpusError, CorpusStats, RawReview, absa_records, build_lexicon, build_pretrain_corpus,
                          filter_by_domain, filter_by_rating, match_aspects, read_absa, read_pretrain_corpus, read_reviews,
                          slice_ese_ise, split_sentences)
from scapt.text import tokenize

FIX = Path(__file__).parent / "fixtures"

# Hand count for reviews20.jsonl with the lexicon {pasta, battery life, staff, wine list}:
#   rating 5/1 keeps r01 r02 r06 r07 r08 r09 r10 r11 r13 r14 r16 r17 r18 r20      -> 14
#   r07 has no topics field, r16 an empty list                                     -> missing 2
#   r06 (spa) and r11 (hotel) are out of domain                                    -> domain 10
#   sentences: r01 2, r02 2, r08 3, r09 1, r10 1, r13 2, r14 2, r17 1, r18 2, r20 1 -> 17
#   matched:   r01 2, r02 1, r08 2, r10 1, r14 1, r18 2, r20 1                      -> 10
#   positive: r01 2 + r10 1 + r18 2 = 5; negative: r02 1 + r08 2 + r14 1 + r20 1 = 5
HAND_STATS = {"ingested": 20, "rating_kept": 14, "missing_topic": 2, "domain_kept": 10, "sentences": 17,
              "matched": 10, "per_label": {"positive": 5, "negative": 5}}

HAND_RECORDS = [
    ("The pasta was great.", "positive", [(1, 2)], "r01"),
    ("Staff smiled.", "positive", [(0, 1)], "r01"),
    ("Cold pasta!", "negative", [(1, 2)], "r02"),
    ("The wine list is short.", "negative", [(1, 3)], "r08"),
    ("Staff rude?", "negative", [(0, 1)], "r08"),
    ("Great pasta and great staff.", "positive", [(1, 2), (4, 5)], "r10"),
    ("Battery life of my phone died while the pasta came.", "negative", [(0, 2), (8, 9)], "r14"),
    ("Pasta.", "positive", [(0, 1)], "r18"),
    ("Pasta again.", "positive", [(0, 1)], "r18"),
    ("Our staff friend was rude to the staff.", "negative", [(1, 2), (7, 8)], "r20"),
]


def _review(stars, topics=("restaurant",), text="x"):
    return RawReview("id", text, stars, list(topics) if topics is not None else None)


# --- rating ---------------------------------------------------------------------


def test_rating_rule():
    kept = filter_by_rating([_review(s) for s in (1, 2, 3, 4, 5)])
    assert [(r.stars, y) for r, y in kept] == [(1, "negative"), (5, "positive")]


def test_mixed_batch_of_ten():
    stars = [5, 2, 1, 3, 5, 4, 4, 1, 5, 3]
    kept = filter_by_rating([_review(s) for s in stars])
    assert len(kept) == 5
    assert sorted(y for _, y in kept) == ["negative"] * 2 + ["positive"] * 3


def test_invalid_stars_rejected():
    for bad in (0, 6, 2.5, True):
        with pytest.raises(ValueError):
            _review(bad)


# --- domain -----------------------------------------------------------------------


def test_domain_filter_case_insensitive_and_counts_missing():
    reviews = [_review(5, ["Restaurant"]), _review(5, ["spa"]), _review(5, None), _review(1, ["hotel"]),
               _review(1, ["restaurant", "bar"]), _review(5, [])]
    stats = CorpusStats()
    kept = filter_by_domain(reviews, {"restaurant"}, stats)
    assert kept == [reviews[0], reviews[4]]
    assert stats.missing_topic == 2


# --- splitting ----------------------------------------------------------------------


def test_split_examples():
    assert split_sentences("Great food. Bad service.") == ["Great food.", "Bad service."]
    assert split_sentences("Wow!!!") == ["Wow!!!"]
    assert split_sentences("") == []
    # [DERIVED] hand segmentation
    para = "We came at 8. Was the soup hot?  Yes!! Dr. Who served it"
    assert split_sentences(para) == ["We came at 8.", "Was the soup hot?", "Yes!!", "Dr.", "Who served it"]


@settings(max_examples=100, deadline=None)
@given(st.text(alphabet="ab .!?\n", max_size=50))
def test_split_preserves_non_space_characters(text):
    joined = "".join(split_sentences(text)).replace(" ", "").replace("\n", "")
    assert joined == text.replace(" ", "").replace("\n", "")


# --- aspect matching ---------------------------------------------------------------


def test_match_examples():
    toks = tokenize("the battery life is short")
    assert match_aspects(toks, {("battery", "life")}) == [(1, 3)]
    assert match_aspects(toks, {("battery",), ("battery", "life")}) == [(1, 3)]
    assert match_aspects(toks, set()) == []


def test_five_sentence_matching_oracle():
    # [DERIVED] worked by hand
    lex = {("pasta",), ("wine", "list"), ("wine",), ("staff",)}
    sents = ["The pasta and the wine list", "No match here", "Wine wine list staff", "STAFF", "list wine"]
    got = [match_aspects(tokenize(s), lex) for s in sents]
    assert got == [[(1, 2), (4, 6)], [], [(0, 1), (1, 3), (3, 4)], [(0, 1)], [(1, 2)]]


def test_lexicon_comes_from_training_split_only():
    train = read_absa(FIX / "absa_train.jsonl")
    lex = build_lexicon(train)
    assert lex == {("pasta",), ("battery", "life"), ("staff",), ("wine", "list")}
    test_terms = build_lexicon(read_absa(FIX / "absa_test.jsonl"))
    assert not test_terms & lex  # "wine" exists only in the test split, so r13 stays unmatched


# --- end to end ------------------------------------------------------------------------


def test_twenty_review_fixture_counts_and_records(tmp_path):
    reviews = read_reviews(FIX / "reviews20.jsonl")
    sents, stats = build_pretrain_corpus(reviews, read_absa(FIX / "absa_train.jsonl"), ["restaurant"], tmp_path / "c.jsonl")
    assert stats.to_dict() == HAND_STATS
    assert [(s.text, s.label, s.aspect_spans, s.review_id) for s in sents] == HAND_RECORDS
    on_disk = [json.loads(line) for line in (tmp_path / "c.jsonl").read_text().splitlines()]
    assert len(on_disk) == 10
    assert all(r["aspects"] and r["label"] in ("positive", "negative") for r in on_disk)


def test_pipeline_is_byte_identical_across_runs_and_worker_counts(tmp_path):
    reviews = read_reviews(FIX / "reviews20.jsonl")
    train = read_absa(FIX / "absa_train.jsonl")
    build_pretrain_corpus(reviews, train, ["restaurant"], tmp_path / "a.jsonl")
    build_pretrain_corpus(reviews, train, ["restaurant"], tmp_path / "b.jsonl")
    build_pretrain_corpus(reviews, train, ["restaurant"], tmp_path / "c.jsonl", workers=2)
    a = (tmp_path / "a.jsonl").read_bytes()
    assert a == (tmp_path / "b.jsonl").read_bytes() == (tmp_path / "c.jsonl").read_bytes()


def test_labels_join_back_to_source_rating():
    reviews = read_reviews(FIX / "reviews20.jsonl")
    stars = {r.review_id: r.stars for r in reviews}
    sents, _ = build_pretrain_corpus(reviews, read_absa(FIX / "absa_train.jsonl"), ["restaurant"])
    assert all({5: "positive", 1: "negative"}[stars[s.review_id]] == s.label for s in sents)


def test_stage_counters_never_increase_along_the_review_chain():
    _, stats = build_pretrain_corpus(read_reviews(FIX / "reviews20.jsonl"), read_absa(FIX / "absa_train.jsonl"), ["restaurant"])
    assert stats.ingested >= stats.rating_kept >= stats.domain_kept
    assert stats.sentences >= stats.matched == sum(stats.per_label.values())


def test_empty_input_gives_empty_corpus(tmp_path):
    sents, stats = build_pretrain_corpus([], [], ["restaurant"], tmp_path / "e.jsonl")
    assert sents == [] and (tmp_path / "e.jsonl").read_text() == ""
    assert stats.to_dict() == {"ingested": 0, "rating_kept": 0, "missing_topic": 0, "domain_kept": 0, "sentences": 0,
                               "matched": 0, "per_label": {"positive": 0, "negative": 0}}


def test_corpus_round_trips_into_labeled_sentences(tmp_path):
    build_pretrain_corpus(read_reviews(FIX / "reviews20.jsonl"), read_absa(FIX / "absa_train.jsonl"), ["restaurant"],
                          tmp_path / "c.jsonl")
    corpus = read_pretrain_corpus(tmp_path / "c.jsonl")
    assert [s.aspect_spans for s in corpus] == [r[2] for r in HAND_RECORDS]
    assert corpus[6].tokens[0:2] == ["battery", "life"]


def test_unreadable_input_reports_file_and_line(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"review_id": "a", "text": "t", "stars": 5}\n{not json}\n')
    with pytest.raises(CorpusError, match=r"bad.jsonl:2"):
        read_reviews(bad)
    bad.write_text('{"review_id": "a", "text": "t", "stars": 9}\n')
    with pytest.raises(CorpusError, match=r"bad.jsonl:1"):
        read_reviews(bad)
    with pytest.raises(CorpusError):
        read_reviews(tmp_path / "missing.jsonl")


# --- ESE / ISE ---------------------------------------------------------------------------


def test_slice_fixture_fraction():
    # [DERIVED] 8 aspects, 3 without opinion terms
    tagged, props = slice_ese_ise(read_absa(FIX / "slices8.jsonl"))
    assert props == {"total": 8, "ESE": 5, "ISE": 3, "ise_fraction": 0.375}
    assert [t for _, t in tagged][2] == "ISE" and [t for _, t in tagged][0] == "ESE"


def test_absa_records_invert_reader(tmp_path):
    examples = read_absa(FIX / "slices8.jsonl")
    again = absa_records(examples)
    assert len(again) == 7 and len(again[3]["aspects"]) == 2
    path = tmp_path / "x.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in again))
    assert [(e.tokens, e.aspect_span, e.polarity, e.opinion_spans) for e in read_absa(path)] == \
        [(e.tokens, e.aspect_span, e.polarity, e.opinion_spans) for e in examples]
