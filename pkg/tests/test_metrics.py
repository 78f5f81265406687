from __future__ import annotations

import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dialoforge.errors import ContractError, EvalError
from dialoforge.metrics import (
    EVAL_TEMPLATE,
    HashTokenEmbedClient,
    MetricReport,
    bleu,
    embed_score,
    gpt_eval,
    meteor,
    rouge_l,
    weighted_f1,
)
from dialoforge.scriptgen import MockChatClient
from dialoforge.stemmer import porter_stem

# ---------------------------------------------------------------------------
# Brute-force oracles (independent implementations)
# ---------------------------------------------------------------------------


def oracle_bleu(pairs: list[tuple[list[str], list[str]]], max_order: int = 4) -> float:
    """Corpus BLEU by explicit position enumeration."""
    log_sum = 0.0
    cand_total = sum(len(c) for c, _ in pairs)
    ref_total = sum(len(r) for _, r in pairs)
    for order in range(1, max_order + 1):
        matched = 0
        possible = 0
        for cand, ref in pairs:
            ref_grams = []
            for i in range(len(ref) - order + 1):
                ref_grams.append(tuple(ref[i + k] for k in range(order)))
            remaining = Counter(ref_grams)
            for i in range(len(cand) - order + 1):
                possible += 1
                gram = tuple(cand[i + k] for k in range(order))
                if remaining[gram] > 0:
                    remaining[gram] -= 1
                    matched += 1
        if order >= 2:
            matched += 1
            possible += 1
        if matched == 0 or possible == 0:
            return 0.0
        log_sum += math.log(matched / possible) / max_order
    brevity = 1.0 if cand_total > ref_total else math.exp(1.0 - ref_total / cand_total)
    return brevity * math.exp(log_sum)


def oracle_lcs(a: list[str], b: list[str]) -> int:
    """Full-matrix LCS (the production code uses two rows)."""
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                table[i][j] = table[i - 1][j - 1] + 1
            else:
                table[i][j] = max(table[i - 1][j], table[i][j - 1])
    return table[len(a)][len(b)]


def oracle_rouge_l(cand: list[str], ref: list[str]) -> float:
    lcs = oracle_lcs(cand, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return 2 * p * r / (p + r)


def oracle_weighted_f1(predicted: list[str], gold: list[str]) -> float:
    """Support-weighted mean of per-class F1 from an explicit confusion matrix."""
    labels = sorted(set(gold) | set(predicted))
    index = {c: i for i, c in enumerate(labels)}
    confusion = [[0] * len(labels) for _ in labels]
    for p, g in zip(predicted, gold):
        confusion[index[g]][index[p]] += 1
    total = len(gold)
    out = 0.0
    for c in labels:
        i = index[c]
        tp = confusion[i][i]
        support = sum(confusion[i])
        predicted_count = sum(row[i] for row in confusion)
        p = tp / predicted_count if predicted_count else 0.0
        r = tp / support if support else 0.0
        f1 = 2 * p * r / (p + r) if p + r else 0.0
        out += (support / total) * f1
    return out


_VOCAB = "the a cat dog sat ran blue sky tree bird".split()


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


def test_bleu_perfect_match():
    texts = ["the cat sat on the mat", "a dog ran home"]
    assert bleu(texts, texts) == pytest.approx(1.0, abs=1e-12)


def test_bleu_no_shared_unigrams():
    assert bleu(["blue sky tree"], ["dog ran home"]) == 0.0


def test_bleu_fixed_six_word_pair_oracle():
    cand = "the cat sat on the mat"
    ref = "the cat lay on the mat"
    expected = oracle_bleu([(cand.split(), ref.split())])
    assert bleu([cand], [ref]) == pytest.approx(expected, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(
        st.tuples(
            st.lists(st.sampled_from(_VOCAB), min_size=1, max_size=9).map(" ".join),
            st.lists(st.sampled_from(_VOCAB), min_size=1, max_size=9).map(" ".join),
        ),
        min_size=1,
        max_size=4,
    )
)
def test_bleu_matches_oracle(pairs):
    cands = [c for c, _ in pairs]
    refs = [r for _, r in pairs]
    expected = oracle_bleu([(c.split(), r.split()) for c, r in pairs])
    assert bleu(cands, refs) == pytest.approx(expected, abs=1e-9)


def test_bleu_empty_corpus_rejected():
    with pytest.raises(ContractError):
        bleu([], [])


def test_bleu_case_and_whitespace_invariant():
    assert bleu(["  The CAT sat  "], ["the cat sat"]) == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------------------
# ROUGE-L
# ---------------------------------------------------------------------------


def test_rouge_identical():
    assert rouge_l("the cat sat", "the cat sat") == pytest.approx(1.0)


def test_rouge_disjoint():
    assert rouge_l("blue sky", "dog ran") == 0.0


def test_rouge_worked_example():
    # "the cat sat" vs "the cat": LCS=2, P=2/3, R=1.0, F=0.8
    assert rouge_l("the cat sat", "the cat") == pytest.approx(0.8, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(
    cand=st.lists(st.sampled_from(_VOCAB), min_size=1, max_size=9).map(" ".join),
    ref=st.lists(st.sampled_from(_VOCAB), min_size=1, max_size=9).map(" ".join),
)
def test_rouge_matches_oracle(cand, ref):
    assert rouge_l(cand, ref) == pytest.approx(
        oracle_rouge_l(cand.split(), ref.split()), abs=1e-9
    )


def test_rouge_beta_flag():
    p, r = 2 / 3, 1.0
    b2 = 1.2 * 1.2
    expected = (1 + b2) * p * r / (r + b2 * p)
    assert rouge_l("the cat sat", "the cat", beta=1.2) == pytest.approx(expected)


# ---------------------------------------------------------------------------
# METEOR
# ---------------------------------------------------------------------------


def test_meteor_zero_matches():
    assert meteor("blue sky", "dog ran") == 0.0


def test_meteor_identical_four_words():
    # matches=4, chunks=1 -> 1 * (1 - 0.5 * (1/4)^3) = 0.9921875
    assert meteor("the cat sat down", "the cat sat down") == pytest.approx(0.9921875)


def test_meteor_identity_formula_any_length():
    for n in range(1, 9):
        sentence = " ".join(_VOCAB[:n])
        expected = 1.0 - 0.5 * (1.0 / n) ** 3
        assert meteor(sentence, sentence) == pytest.approx(expected, abs=1e-12)


def test_meteor_stemmed_match():
    # "running fast" vs "run fast": stem match + exact match, one chunk
    expected = 1.0 * (1.0 - 0.5 * (1 / 2) ** 3)
    assert meteor("running fast", "run fast") == pytest.approx(expected)


def test_meteor_fragmentation_penalty():
    # same unigrams, scrambled order: matches=3, chunks=3
    score = meteor("sat cat the", "the cat sat")
    assert score == pytest.approx(1.0 * (1.0 - 0.5 * 1.0))


def test_porter_stemmer_cases():
    assert porter_stem("running") == "run"
    assert porter_stem("caresses") == "caress"
    assert porter_stem("ponies") == "poni"
    assert porter_stem("relational") == "relat"
    assert porter_stem("hopeful") == "hope"
    assert porter_stem("sky") == "sky"


# ---------------------------------------------------------------------------
# Embedding score
# ---------------------------------------------------------------------------


def test_embed_identical_sequences():
    client = HashTokenEmbedClient()
    assert embed_score("the cat sat", "the cat sat", client) == pytest.approx(1.0)


def test_embed_orthogonal_clamped_to_zero():
    class OrthogonalClient:
        def embed_tokens(self, tokens):
            out = np.zeros((len(tokens), 8))
            for i, tok in enumerate(tokens):
                out[i, 0 if tok.startswith("a") else 4] = 1.0
            return out

    # candidate tokens use axis 0, reference tokens axis 4
    score = embed_score("aa ab", "ba bb", OrthogonalClient())
    assert score == 0.0


def test_embed_three_token_case_matches_exhaustive_oracle():
    client = HashTokenEmbedClient()
    cand, ref = "cat dog tree", "dog tree bird"
    cand_tokens, ref_tokens = cand.split(), ref.split()
    cv = client.embed_tokens(cand_tokens)
    rv = client.embed_tokens(ref_tokens)
    precision = np.mean([max(float(np.dot(c, r)) for r in rv) for c in cv])
    recall = np.mean([max(float(np.dot(c, r)) for c in cv) for r in rv])
    expected = min(max(2 * precision * recall / (precision + recall), 0.0), 1.0)
    assert embed_score(cand, ref, client) == pytest.approx(expected, abs=1e-12)


def test_hash_embeddings_unit_norm():
    vectors = HashTokenEmbedClient().embed_tokens(["alpha", "beta", "gamma"])
    assert np.allclose(np.linalg.norm(vectors, axis=1), 1.0, atol=1e-6)


# ---------------------------------------------------------------------------
# Weighted F1
# ---------------------------------------------------------------------------


def test_f1_perfect():
    labels = ["happy", "sad", "happy", "neutral"]
    assert weighted_f1(labels, labels) == pytest.approx(1.0)


def test_f1_single_class_all_wrong():
    assert weighted_f1(["sad", "sad"], ["happy", "happy"]) == 0.0


def test_f1_three_class_fixture():
    # supports 3/2/1 with one confusion: gold=[a,a,a,b,b,c], pred=[a,a,b,b,b,c]
    gold = ["a", "a", "a", "b", "b", "c"]
    pred = ["a", "a", "b", "b", "b", "c"]
    # class a: P=1, R=2/3, F=0.8; class b: P=2/3, R=1, F=0.8; class c: F=1
    expected = (3 / 6) * 0.8 + (2 / 6) * 0.8 + (1 / 6) * 1.0
    assert weighted_f1(pred, gold) == pytest.approx(expected, abs=1e-12)
    assert weighted_f1(pred, gold) == pytest.approx(oracle_weighted_f1(pred, gold), abs=1e-12)


@settings(max_examples=120, deadline=None)
@given(
    st.lists(
        st.tuples(st.sampled_from("abcd"), st.sampled_from("abcd")),
        min_size=1,
        max_size=30,
    )
)
def test_f1_matches_confusion_oracle(pairs):
    pred = [p for p, _ in pairs]
    gold = [g for _, g in pairs]
    assert weighted_f1(pred, gold) == pytest.approx(oracle_weighted_f1(pred, gold), abs=1e-12)


def test_f1_length_mismatch():
    with pytest.raises(ContractError):
        weighted_f1(["a"], ["a", "b"])


# ---------------------------------------------------------------------------
# Judge scoring
# ---------------------------------------------------------------------------


class FixedReply:
    def __init__(self, reply):
        self.reply = reply
        self.prompts = []

    def complete(self, prompt, seed):
        self.prompts.append(prompt)
        return self.reply


def test_gpt_eval_bare_integer():
    assert gpt_eval("ctx", "a fine reply", FixedReply("4")) == 4.0


def test_gpt_eval_score_pattern():
    assert gpt_eval("ctx", "a fine reply", FixedReply("Quality is good. Score: 3")) == 3.0


def test_gpt_eval_unparseable():
    with pytest.raises(EvalError) as excinfo:
        gpt_eval("ctx", "a fine reply", FixedReply("excellent"))
    assert excinfo.value.raw_reply == "excellent"


def test_gpt_eval_renders_context_and_response():
    client = FixedReply("Score: 5")
    gpt_eval("the earlier turns", "the candidate reply", client)
    assert "the earlier turns" in client.prompts[0]
    assert "the candidate reply" in client.prompts[0]


def test_mock_chat_client_answers_eval_prompts():
    score = gpt_eval("ctx", "reply text", MockChatClient(), seed=3)
    assert 1.0 <= score <= 5.0
    assert score == gpt_eval("ctx", "reply text", MockChatClient(), seed=3)


def test_eval_template_mentions_score_pattern():
    assert "Score: k" in EVAL_TEMPLATE


# ---------------------------------------------------------------------------
# MetricReport
# ---------------------------------------------------------------------------


def test_report_range_validation():
    MetricReport(bleu=0.5, rouge_l=0.5, meteor=0.5, embed_score=0.5, f1_emotion=0.5)
    with pytest.raises(ContractError):
        MetricReport(bleu=1.5, rouge_l=0.5, meteor=0.5, embed_score=0.5, f1_emotion=0.5)
    with pytest.raises(ContractError):
        MetricReport(
            bleu=0.5, rouge_l=0.5, meteor=0.5, embed_score=0.5, f1_emotion=0.5, gpt_eval=0.5
        )


def test_all_metrics_share_whitespace_and_case_normalizer():
    a, b = "  The CAT sat  ", "the cat sat"
    assert bleu([a], [b]) == pytest.approx(1.0, abs=1e-12)
    assert rouge_l(a, b) == pytest.approx(1.0)
    assert meteor(a, b) == meteor(b, b)
    assert embed_score(a, b, HashTokenEmbedClient()) == pytest.approx(1.0)
