import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from storygen.encoder import FrozenEncoder
from storygen.metrics import (CorpusReport, GROUNDING_SCALE, corpus_eval,
                              diversity, evaluate_story, grounding_score,
                              ngram_counts, render_table, rep_n,
                              story_diversity, story_rep_n)


# ---------------------------------------------------------------------------
# hand-enumerated values
# ---------------------------------------------------------------------------

def test_rep_1_single_unique_token():
    assert rep_n([7, 7, 7, 7], 1) == pytest.approx(0.75)


def test_rep_2_all_unique():
    assert rep_n([1, 2, 3, 4], 2) == 0.0


def test_rep_2_alternating_hand_enumeration():
    # bigrams of [a,b,a,b,a]: ab, ba, ab, ba -> 2 unique of 4
    assert rep_n([1, 2, 1, 2, 1], 2) == pytest.approx(0.5)


def test_diversity_all_unique_is_one():
    assert diversity([1, 2, 3, 4, 5, 6]) == pytest.approx(1.0)


def test_diversity_constant_run_hand_value():
    # [a]*5: rep2=3/4? no: bigrams 4 total 1 unique -> 0.75; trigrams 3/1 -> 2/3;
    # 4-grams 2/1 -> 0.5; product of (1-rep) = 0.25 * (1/3) * 0.5
    got = diversity([3, 3, 3, 3, 3])
    assert got == pytest.approx(0.25 * (1 / 3) * 0.5, abs=1e-9)
    assert got == pytest.approx(0.0416667, abs=1e-6)


def test_diversity_absent_below_four_tokens():
    assert diversity([1, 2, 3]) is None
    assert story_diversity([[1], [2]]) is None


def test_rep_n_no_ngrams_returns_zero():
    assert rep_n([], 2) == 0.0
    assert rep_n([5], 3) == 0.0


def test_story_level_counts_do_not_bridge_sentences():
    sentences = [[3, 1], [2, 4]]
    assert story_rep_n(sentences, 2) == 0.0  # two distinct in-sentence bigrams
    bridged = story_rep_n([[3, 1], [3, 1]], 2, bridge_sentences=True)
    unbridged = story_rep_n([[3, 1], [3, 1]], 2, bridge_sentences=False)
    assert unbridged == pytest.approx(0.5)   # (3,1) twice
    assert bridged == pytest.approx(1 - 2 / 3)  # adds the (1,3) bridge bigram


# ---------------------------------------------------------------------------
# randomized invariants
# ---------------------------------------------------------------------------

@settings(max_examples=250, deadline=None)
@given(st.lists(st.integers(0, 30), min_size=0, max_size=40),
       st.integers(1, 4))
def test_rep_is_invariant_under_relabeling(tokens, n):
    perm = np.random.default_rng(0).permutation(31)
    relabeled = [int(perm[t]) for t in tokens]
    assert rep_n(tokens, n) == pytest.approx(rep_n(relabeled, n), abs=1e-12)


@settings(max_examples=250, deadline=None)
@given(st.lists(st.integers(0, 10), min_size=0, max_size=30),
       st.integers(1, 4))
def test_rep_in_unit_range_and_fresh_token_never_increases(tokens, n):
    base = rep_n(tokens, n)
    assert 0.0 <= base <= 1.0
    extended = rep_n(tokens + [999], n)  # 999 never occurs in tokens
    assert extended <= base + 1e-12


@settings(max_examples=250, deadline=None)
@given(st.lists(st.integers(0, 8), min_size=4, max_size=40))
def test_diversity_range_and_product_identity(tokens):
    d = diversity(tokens)
    assert 0.0 <= d <= 1.0
    expect = (1 - rep_n(tokens, 2)) * (1 - rep_n(tokens, 3)) * (1 - rep_n(tokens, 4))
    assert d == pytest.approx(expect, abs=1e-9)
    if d == pytest.approx(1.0, abs=1e-12):
        assert all(rep_n(tokens, n) == 0.0 for n in (2, 3, 4))


# ---------------------------------------------------------------------------
# grounding score
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def enc():
    class _Vocab:
        def token(self, tid):
            return f"w{tid}"
    return FrozenEncoder(d_feat=32, seed=0, vocab=_Vocab())


def test_grounding_identical_feature_scores_full_scale(enc):
    sent = [4, 9, 11]
    feat = enc.encode_text(sent)
    assert grounding_score(sent, feat, enc) == pytest.approx(GROUNDING_SCALE, abs=1e-5)


def test_grounding_orthogonal_and_negative_clamp(enc):
    sent = [4, 9, 11]
    feat = enc.encode_text(sent)
    ortho = np.zeros_like(feat)
    ortho[np.argmin(np.abs(feat))] = 1.0
    ortho -= (ortho @ feat) * feat
    ortho /= np.linalg.norm(ortho)
    assert grounding_score(sent, ortho, enc) == pytest.approx(0.0, abs=1e-5)
    assert grounding_score(sent, -feat, enc) == 0.0


# ---------------------------------------------------------------------------
# corpus aggregation
# ---------------------------------------------------------------------------

def test_single_all_unique_story_aggregates_to_100(enc):
    story = evaluate_story([[1, 2, 3], [4, 5, 6]], None, sequence_id="s")
    report = corpus_eval([story])
    assert report.aggregate["diversity"] == pytest.approx(100.0)
    assert report.aggregate["rep_2"] == 0.0


def test_aggregate_equals_mean_of_per_story_values(enc):
    rng = np.random.default_rng(3)
    stories = []
    for i in range(7):
        sentences = [list(rng.integers(0, 6, size=rng.integers(4, 10)))
                     for _ in range(5)]
        stories.append(evaluate_story(sentences, None, sequence_id=str(i)))
    report = corpus_eval(stories)
    for n in (1, 2, 3, 4):
        mean = float(np.mean([s.rep[n] for s in stories]))
        assert report.aggregate[f"rep_{n}"] == pytest.approx(100 * mean, abs=1e-9)
    mean_div = float(np.mean([s.diversity for s in stories]))
    assert report.aggregate["diversity"] == pytest.approx(100 * mean_div, abs=1e-9)


def test_missing_feature_is_skipped_and_counted(enc):
    table = enc.table_for(["img_a"])
    story = evaluate_story([[1, 2, 3], [2, 3, 4]], ["img_a", "img_missing"],
                           encoder=enc, features=table, sequence_id="s")
    assert story.skipped_images == 1
    assert story.grounding is not None
    report = corpus_eval([story])
    assert report.aggregate["skipped_images"] == 1


def test_pooled_mode_reports_corpus_level_rep(enc):
    stories_tokens = [[[1, 2, 3]], [[1, 2, 3]]]  # identical across stories
    metrics = [evaluate_story(s, None, sequence_id=str(i))
               for i, s in enumerate(stories_tokens)]
    report = corpus_eval(metrics, pooled_counts=stories_tokens)
    # per-story rep_3 = 0, but pooled sees the trigram twice
    assert report.aggregate["rep_3"] == 0.0
    assert report.pooled["rep_3"] == pytest.approx(50.0)


def test_render_table_two_decimals(enc):
    story = evaluate_story([[3, 3, 3, 3, 3]], None, sequence_id="s")
    table = render_table(corpus_eval([story]), label="beam")
    assert "rep-1" in table and "diversity" in table
    assert "75.00" in table  # rep-1 of [a]*5 on the percent scale


def test_corpus_eval_rejects_empty():
    with pytest.raises(ValueError):
        corpus_eval([])
