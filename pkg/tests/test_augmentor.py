import json
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taiji.algebra import Modality
from taiji.augmentor import (DocumentTooShortError, Gazetteer, KnowledgeCatalog, KnowledgeUnit, SourcePolicy,
                             Status, augment, corroborate, dedup, estimate_jaccard, exact_jaccard,
                             extract_entities, hamming, index_knowledge, load_corpus, minhash, simhash)

from corpora import doc, oracle_clusters, oracle_representative, planted_corpus, planted_pair, set_jaccard, words


def test_identical_documents_match_exactly():
    text = "the quick brown fox jumps over the lazy dog"
    assert minhash(text).values == minhash(text).values
    assert estimate_jaccard(minhash(text), minhash(text)) == 1.0


def test_disjoint_vocabularies_estimate_zero():
    rng = random.Random(0)
    ws = words(rng, 80)
    assert estimate_jaccard(minhash(" ".join(ws[:40])), minhash(" ".join(ws[40:]))) == 0.0


def test_signature_length_and_determinism():
    sig = minhash("a b c d e", h=17, seed=4)
    assert len(sig) == 17 and sig == minhash("a b c d e", h=17, seed=4)


def test_minhash_preconditions():
    with pytest.raises(DocumentTooShortError):
        minhash("two tokens")
    with pytest.raises(ValueError):
        minhash("a b c d", n=0)
    with pytest.raises(ValueError):
        estimate_jaccard(minhash("a b c d", seed=1), minhash("a b c d", seed=2))


def test_planted_pair_construction_matches_explicit_sets():
    rng = random.Random(5)
    for target in (0.25, 0.5, 0.75):
        a, b = planted_pair(rng, target)
        assert set_jaccard(a, b) == pytest.approx(target)
        assert exact_jaccard(a, b) == pytest.approx(set_jaccard(a, b))


def test_half_jaccard_within_015_in_95_of_100_trials():
    rng = random.Random(11)
    hits = 0
    for trial in range(100):
        a, b = planted_pair(rng, 0.5)
        hits += abs(estimate_jaccard(minhash(a, seed=trial), minhash(b, seed=trial)) - 0.5) <= 0.15
    assert hits >= 95


@pytest.mark.parametrize("J", [0.25, 0.5, 0.75])
def test_mean_error_within_two_standard_errors(J):
    rng = random.Random(int(J * 100))
    errs = []
    for s in range(50):
        a, b = planted_pair(rng, J)
        errs.append(abs(estimate_jaccard(minhash(a, seed=s), minhash(b, seed=s)) - set_jaccard(a, b)))
    assert sum(errs) / len(errs) <= 2 * math.sqrt(J * (1 - J) / 128)


def test_simhash_self_and_symmetry():
    rng = random.Random(2)
    a, b = " ".join(words(rng, 30)), " ".join(words(rng, 30))
    assert hamming(simhash(a), simhash(a)) == 0
    assert hamming(simhash(a), simhash(b)) == hamming(simhash(b), simhash(a))


def test_simhash_ignores_token_order():
    assert simhash("red chair blue table red").bits == simhash("table red blue red chair").bits


def test_simhash_small_edit_stays_closer_than_unrelated():
    rng = random.Random(8)
    base = words(rng, 40)
    heavy = base * 3
    edited = heavy[:-1] + ["zzzunique"]
    other = " ".join(words(rng, 40))
    d_edit = hamming(simhash(" ".join(heavy)), simhash(" ".join(edited)))
    assert d_edit <= hamming(simhash(" ".join(heavy)), simhash(other))


def test_simhash_rejects_empty():
    with pytest.raises(ValueError):
        simhash("   ")


def test_identical_corpus_is_one_cluster_earliest_kept():
    docs = [doc(i, "same text about wooden chairs and tables", published=float(10 - i)) for i in range(5)]
    r = dedup(docs)
    assert len(r.clusters) == 1 and r.representatives == ["d004"]


def test_distinct_corpus_is_all_singletons():
    rng = random.Random(3)
    docs = [doc(i, " ".join(words(rng, 40))) for i in range(20)]
    assert len(dedup(docs).clusters) == 20


def test_representative_ties_broken_by_id():
    docs = [doc(i, "same words in every single copy here", published=5.0) for i in (3, 1, 2)]
    assert dedup(docs).representatives == ["d001"]


def test_thresholds_validated():
    with pytest.raises(ValueError):
        dedup([doc(0, "a b c d")], tau_minhash=1.5)


@pytest.mark.parametrize("seed", range(4))
def test_dedup_equals_pairwise_closure(seed):
    docs = planted_corpus(seed, 120)
    r = dedup(docs)
    assert {frozenset(c) for c in r.clusters} == oracle_clusters(docs)
    by_id = {d.id: d for d in docs}
    for members, rep in zip(r.clusters, r.representatives):
        assert rep == oracle_representative(members, by_id)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.3, 1.0), st.floats(0.5, 1.0))
def test_dedup_equals_closure_at_any_threshold(seed, tau_m, tau_e):
    docs = planted_corpus(seed, 40)
    got = {frozenset(c) for c in dedup(docs, tau_m, tau_e).clusters}
    assert got == oracle_clusters(docs, tau_m, tau_e)


def test_gazetteer_examples():
    g = Gazetteer({"PostgreSQL": "System", "New York": "City", "York": "City"})
    ents = extract_entities("PostgreSQL stores tables", g)
    assert [(e.name, e.type) for e in ents] == [("PostgreSQL", "System")]
    assert extract_entities("nothing to see", g) == []
    ents = extract_entities("offices in New York today", g)
    assert [e.name for e in ents] == ["New York"]
    text = "offices in New York today"
    assert text[ents[0].start:ents[0].end] == "New York"


def unit(*sources):
    return KnowledgeUnit("u", "c", (("x", "T"),), frozenset(sources))


def test_corroboration_examples():
    mirrors = SourcePolicy(related={frozenset(("A", "B"))})
    assert corroborate(unit("A"), SourcePolicy()) == Status.REJECTED
    assert corroborate(unit("A", "B"), SourcePolicy()) == Status.RETAINED
    assert corroborate(unit("A", "B"), mirrors) == Status.REJECTED
    assert corroborate(unit("A", "B"), {frozenset(("A", "B")): True}) == Status.REJECTED
    with pytest.raises(ValueError):
        corroborate(unit(), SourcePolicy())


@settings(max_examples=100, deadline=None)
@given(st.sets(st.sampled_from("ABCDEF"), min_size=1, max_size=5), st.sampled_from("ABCDEFG"),
       st.sets(st.frozensets(st.sampled_from("ABCDEFG"), min_size=2, max_size=2)))
def test_corroboration_is_monotone(sources, extra, related):
    policy = SourcePolicy(related=set(related))
    if corroborate(unit(*sources), policy) == Status.RETAINED:
        assert corroborate(unit(*sources, extra), policy) == Status.RETAINED


def catalog_units():
    return [
        KnowledgeUnit("a", "old strong", (), frozenset("AB"), Modality.TEXT, 0.9, published_at=0.0, status=Status.RETAINED),
        KnowledgeUnit("b", "new weak", (), frozenset("AB"), Modality.TEXT, 0.6, published_at=86400.0 * 10,
                      status=Status.RETAINED),
        KnowledgeUnit("c", "new strong", (), frozenset("AB"), Modality.TEXT, 0.9, published_at=86400.0 * 10,
                      status=Status.RETAINED),
        KnowledgeUnit("d", "image", (), frozenset("AB"), Modality.IMAGE, 0.7, published_at=86400.0 * 5,
                      status=Status.RETAINED),
    ]


def test_catalog_without_decay_orders_by_credibility():
    cat = index_knowledge(catalog_units())
    assert [u.id for u, _ in cat.query()] == ["a", "c", "d", "b"]


def test_catalog_decay_puts_newer_first():
    cat = index_knowledge(catalog_units())
    order = [u.id for u, _ in cat.query(decay=0.1)]
    assert order.index("c") < order.index("a")
    assert order == ["c", "b", "d", "a"]


def test_catalog_axes():
    cat = index_knowledge(catalog_units())
    assert [u.id for u, _ in cat.query(modality=Modality.IMAGE)] == ["d"]
    assert {u.id for u, _ in cat.query(min_credibility=0.8)} == {"a", "c"}
    assert cat.query(window=(1e9, None)) == []


def test_catalog_refuses_unretained_and_persists(tmp_path):
    with pytest.raises(ValueError):
        index_knowledge([unit("A")])
    path = tmp_path / "k.jsonl"
    index_knowledge(catalog_units(), path)
    again = KnowledgeCatalog(path)
    assert sorted(again.units) == ["a", "b", "c", "d"]
    assert again.units["d"] == catalog_units()[3]


def write_corpus(tmp_path):
    docs = [
        {"id": "n1", "source": "news.example", "published_at": "2024-01-02T00:00:00Z",
         "sections": [{"heading": "DB", "body": "PostgreSQL stores tables on disk. Oslo hosts a meetup."}]},
        {"id": "n2", "source": "mirror.example", "published_at": "2024-01-03",
         "sections": [{"heading": "DB", "body": "PostgreSQL stores tables on disk. Oslo hosts a meetup."}]},
        {"id": "b1", "source": "blog.example", "fetched_at": 1800000000,
         "sections": [["", "A long note on PostgreSQL planning and the vacuum process in production."]]},
        {"id": "e1", "source": "empty.example", "sections": [{"heading": "Only", "body": " "}]},
    ]
    for d in docs:
        (tmp_path / f"{d['id']}.json").write_text(json.dumps(d))
    return tmp_path


def test_pipeline_over_a_corpus(tmp_path):
    docs = load_corpus(write_corpus(tmp_path))
    gaz = Gazetteer({"PostgreSQL": "System", "Oslo": "City"})
    policy = SourcePolicy(related={frozenset(("news.example", "mirror.example"))},
                          credibility={"news.example": 0.8, "blog.example": 0.6})
    cat = KnowledgeCatalog(tmp_path / "out" / "k.jsonl")
    report = augment(docs, gaz, policy, cat)
    assert report.documents == 3 and report.clusters == 2
    units = {u.entities[0][0]: u for u in report.units}
    # mirrored copies do not corroborate each other; an independent blog does
    assert units["Oslo"].status == Status.REJECTED
    assert units["PostgreSQL"].status == Status.RETAINED
    assert units["PostgreSQL"].credibility == 0.8
    assert units["PostgreSQL"].content == "PostgreSQL stores tables on disk."
    assert [u.entities[0][0] for u in cat.units.values()] == ["PostgreSQL"]
    assert all(len({s for s in u.sources}) >= 2 for u in cat.units.values())


def test_duplicate_ids_rejected(tmp_path):
    for name in ("a", "b"):
        (tmp_path / f"{name}.json").write_text(json.dumps({"id": "x", "source": "s", "sections": [["", "t"]]}))
    with pytest.raises(ValueError, match="duplicate"):
        load_corpus(tmp_path)
