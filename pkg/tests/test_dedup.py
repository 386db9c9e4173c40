"""Tests for shingling, MinHash, LSH banding, and corpus deduplication."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from demix.dedup import (
    MERSENNE_PRIME,
    dedup_corpus,
    hash_family,
    lsh_candidates,
    minhash,
    mod_affine,
    shingle,
    ShingleSet,
    tokenize,
)
from demix.errors import ValidationError


def words(n, rng=None, vocab=10_000):
    rng = rng or np.random.default_rng(0)
    return " ".join(f"w{i}" for i in rng.integers(0, vocab, size=n))


# --- tokenization and shingling ----------------------------------------------


def test_tokenize_lowercases_and_drops_punctuation_tokens():
    assert tokenize("Hello , WORLD !! x2") == ["hello", "world", "x2"]


def test_exact_window_counts():
    doc24 = " ".join(f"t{i}" for i in range(24))
    assert len(shingle(doc24).shingles) == 1
    doc26 = " ".join(f"t{i}" for i in range(26))
    assert len(shingle(doc26).shingles) == 3  # windows at offsets 0, 1, 2


def test_short_document_yields_whole_document_shingle():
    assert len(shingle("just five little words here").shingles) == 1


def test_identical_texts_identical_shingles():
    text = words(60)
    assert shingle(text).shingles == shingle(text).shingles


def test_empty_document_rejected():
    with pytest.raises(ValidationError, match="empty document"):
        shingle("...  !!")


# --- modular hash family -------------------------------------------------------


@settings(max_examples=200, deadline=None)
@given(
    st.integers(1, int(MERSENNE_PRIME) - 1),
    st.integers(0, int(MERSENNE_PRIME) - 1),
    st.integers(0, 2**64 - 1),
)
def test_mod_affine_matches_python_int_arithmetic(a, b, x):
    expected = (a * x + b) % int(MERSENNE_PRIME)
    got = mod_affine(np.uint64(a), np.uint64(b), np.uint64(x))
    assert int(got) == expected


def test_hash_family_is_seeded_and_in_range():
    a1, b1 = hash_family(7)
    a2, b2 = hash_family(7)
    a3, _ = hash_family(8)
    assert np.array_equal(a1, a2) and np.array_equal(b1, b2)
    assert not np.array_equal(a1, a3)
    assert a1.min() >= 1 and int(a1.max()) < int(MERSENNE_PRIME)
    assert int(b1.max()) < int(MERSENNE_PRIME)


# --- minhash --------------------------------------------------------------------


def sets_with_jaccard(rng, union_size, jaccard):
    """Two shingle sets with exactly the requested Jaccard similarity."""
    inter = round(jaccard * union_size)
    only = union_size - inter
    universe = np.unique(rng.integers(0, 2**63, size=4 * union_size, dtype=np.uint64))
    assert universe.size >= union_size  # 63-bit draws collide with negligible probability
    universe = rng.permutation(universe)[:union_size]
    shared = universe[:inter]
    a_only = universe[inter : inter + (only + 1) // 2]
    b_only = universe[inter + (only + 1) // 2 :]
    a = frozenset(int(v) for v in np.concatenate([shared, a_only]))
    b = frozenset(int(v) for v in np.concatenate([shared, b_only]))
    return a, b


def exact_jaccard(a, b):
    return len(a & b) / len(a | b)


def test_identical_shingle_sets_identical_signatures():
    text = words(100)
    s1 = minhash(shingle(text, doc_id="a"), seed=3)
    s2 = minhash(shingle(text, doc_id="b"), seed=3)
    assert np.array_equal(s1.values, s2.values)


def test_signature_match_rate_estimates_jaccard():
    rng = np.random.default_rng(11)
    for target in (0.3, 0.6, 0.9):
        hits = 0
        trials = 40
        for t in range(trials):
            sa, sb = sets_with_jaccard(rng, union_size=40, jaccard=target)
            j = exact_jaccard(sa, sb)
            assert j == pytest.approx(target, abs=0.02)
            va = minhash(ShingleSet(doc_id="a", shingles=sa), seed=t).values
            vb = minhash(ShingleSet(doc_id="b", shingles=sb), seed=t).values
            empirical = float(np.mean(va == vb))
            hits += abs(empirical - j) <= 0.12
        assert hits / trials >= 0.95


def test_disjoint_sets_rarely_match():
    rng = np.random.default_rng(12)
    rates = []
    for t in range(50):
        sa, sb = sets_with_jaccard(rng, union_size=60, jaccard=0.0)
        va = minhash(ShingleSet(doc_id="a", shingles=sa), seed=t).values
        vb = minhash(ShingleSet(doc_id="b", shingles=sb), seed=t).values
        rates.append(float(np.mean(va == vb)))
    assert float(np.mean(rates)) <= 0.05


# --- LSH banding ------------------------------------------------------------------


def test_exact_duplicates_always_pair():
    text = words(80)
    sigs = [
        minhash(shingle(text, doc_id="a"), seed=1),
        minhash(shingle(text, doc_id="b"), seed=1),
    ]
    assert lsh_candidates(sigs) == {("a", "b")}


def test_unrelated_documents_never_pair():
    rng = np.random.default_rng(13)
    pairs = 0
    for t in range(1000):
        sa, sb = sets_with_jaccard(rng, union_size=50, jaccard=0.0)
        sigs = [
            minhash(ShingleSet(doc_id="a", shingles=sa), seed=t),
            minhash(ShingleSet(doc_id="b", shingles=sb), seed=t),
        ]
        pairs += len(lsh_candidates(sigs))
    assert pairs == 0


def lsh_collision_rate(jaccard, trials, union_size=40, seed0=0):
    rng = np.random.default_rng(1234 + seed0)
    collisions = 0
    for t in range(trials):
        sa, sb = sets_with_jaccard(rng, union_size=union_size, jaccard=jaccard)
        sigs = [
            minhash(ShingleSet(doc_id="a", shingles=sa), seed=seed0 + t),
            minhash(ShingleSet(doc_id="b", shingles=sb), seed=seed0 + t),
        ]
        collisions += bool(lsh_candidates(sigs))
    return collisions / trials


def test_banding_follows_the_closed_form_s_curve():
    for jaccard in (0.7, 0.85, 0.95):
        expected = 1.0 - (1.0 - jaccard**13) ** 20
        assert abs(lsh_collision_rate(jaccard, trials=200) - expected) <= 0.05


def test_layout_mismatch_rejected():
    text = words(40)
    good = minhash(shingle(text, doc_id="a"), seed=0)
    bad = minhash(shingle(text, doc_id="b"), seed=0)
    bad.band_size = 10
    with pytest.raises(ValidationError, match="layout"):
        lsh_candidates([good, bad])


# --- corpus-level dedup --------------------------------------------------------------


def test_identical_copies_collapse_to_one():
    text = words(50)
    docs = [(f"d{i}", text) for i in range(5)]
    result = dedup_corpus(docs, mode="both", seed=0)
    assert result.kept_ids == ["d0"]
    assert result.removed_ids == ["d1", "d2", "d3", "d4"]
    assert result.clusters == [["d0", "d1", "d2", "d3", "d4"]]
    assert all(result.removal_reasons[d] == "exact" for d in result.removed_ids)


def test_distinct_corpus_nothing_removed_in_fuzzy_mode():
    rng = np.random.default_rng(14)
    docs = [(f"d{i}", words(40, rng)) for i in range(30)]
    shingles = [shingle(text, doc_id=doc_id) for doc_id, text in docs]
    for i in range(len(docs)):  # generated corpus really is near-disjoint
        for j in range(i + 1, len(docs)):
            assert exact_jaccard(shingles[i].shingles, shingles[j].shingles) < 0.1
    result = dedup_corpus(docs, mode="fuzzy", seed=0)
    assert result.removed_ids == []
    assert result.kept_ids == [d for d, _ in docs]


def test_exact_then_fuzzy_equals_fuzzy_alone_on_exact_duplicates():
    rng = np.random.default_rng(15)
    base_texts = [words(40, rng) for _ in range(5)]
    docs = []
    for i, text in enumerate(base_texts):
        docs.append((f"a{i}", text))
        docs.append((f"b{i}", text))
    both = dedup_corpus(docs, mode="both", seed=0)
    fuzzy = dedup_corpus(docs, mode="fuzzy", seed=0)
    assert both.kept_ids == fuzzy.kept_ids


def test_partition_invariants_and_order_stability():
    rng = np.random.default_rng(16)
    text = words(60, rng)
    near = text.rsplit(" ", 1)[0] + " tail"
    docs = [("x", text), ("y", near), ("z", words(60, rng)), ("x2", text)]
    result = dedup_corpus(docs, mode="both", seed=5)
    all_ids = {d for d, _ in docs}
    assert set(result.kept_ids) | set(result.removed_ids) == all_ids
    assert set(result.kept_ids) & set(result.removed_ids) == set()
    for cluster in result.clusters:
        assert cluster[0] in result.kept_ids
        assert all(m in result.removed_ids for m in cluster[1:])
    again = dedup_corpus(docs, mode="both", seed=5)
    assert again.kept_ids == result.kept_ids
    assert again.clusters == result.clusters


def test_duplicate_ids_rejected():
    with pytest.raises(ValidationError, match="duplicate id"):
        dedup_corpus([("a", "x y z"), ("a", "p q r")])


def test_tokenless_documents_are_kept_and_never_matched():
    docs = [("p1", "..."), ("p2", "..."), ("w", words(30))]
    result = dedup_corpus(docs, mode="both", seed=0)
    # "..." texts are byte-identical so exact dedup still applies
    assert result.kept_ids == ["p1", "w"]
    fuzzy_only = dedup_corpus([("p1", "..."), ("p2", "!!!"), ("w", words(30))], mode="fuzzy")
    assert fuzzy_only.removed_ids == []
