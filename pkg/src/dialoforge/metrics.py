"""Response-quality metric battery: BLEU, ROUGE-L, METEOR, an embedding
similarity score, weighted emotion F1, and judge-model score orchestration.

All text metrics share one normalizer (lowercase, punctuation stripped,
whitespace collapsed), so they are invariant to case and surrounding
whitespace. BLEU is corpus-level BLEU-4 with add-1 smoothing on orders >= 2;
a sentence-level mode sits behind a flag.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

import numpy as np

from .errors import ContractError, EvalError, MetricError
from .gate import normalize_words
from .rng import stable_hash64
from .scriptgen import ChatClient
from .stemmer import porter_stem

# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


def _ngram_counts(tokens: Sequence[str], order: int) -> Counter:
    return Counter(tuple(tokens[i : i + order]) for i in range(len(tokens) - order + 1))


def _bleu_pair_stats(cand: list[str], ref: list[str], max_order: int):
    matches = []
    totals = []
    for order in range(1, max_order + 1):
        cand_counts = _ngram_counts(cand, order)
        ref_counts = _ngram_counts(ref, order)
        matches.append(sum(min(c, ref_counts[g]) for g, c in cand_counts.items()))
        totals.append(max(0, len(cand) - order + 1))
    return matches, totals


def _bleu_from_totals(matches, totals, cand_len, ref_len, max_order) -> float:
    log_precision = 0.0
    for order in range(1, max_order + 1):
        m, t = matches[order - 1], totals[order - 1]
        if order >= 2:  # add-1 smoothing on higher orders
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        log_precision += math.log(m / t) / max_order
    brevity = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return brevity * math.exp(log_precision)


def bleu(
    candidates: Sequence[str],
    references: Sequence[str],
    max_order: int = 4,
    sentence_level: bool = False,
) -> float:
    """Corpus BLEU-4 against single references, in [0, 1].

    ``sentence_level`` averages per-pair scores instead of pooling counts.
    """
    if len(candidates) != len(references):
        raise ContractError("candidates and references must have equal length")
    if not candidates:
        raise ContractError("empty corpus")
    pairs = []
    for cand_text, ref_text in zip(candidates, references):
        cand, ref = normalize_words(cand_text), normalize_words(ref_text)
        if not cand or not ref:
            raise ContractError("candidates and references must be non-empty")
        pairs.append((cand, ref))

    if sentence_level:
        scores = []
        for cand, ref in pairs:
            m, t = _bleu_pair_stats(cand, ref, max_order)
            scores.append(_bleu_from_totals(m, t, len(cand), len(ref), max_order))
        return sum(scores) / len(scores)

    total_matches = [0] * max_order
    total_counts = [0] * max_order
    cand_len = ref_len = 0
    for cand, ref in pairs:
        m, t = _bleu_pair_stats(cand, ref, max_order)
        total_matches = [a + b for a, b in zip(total_matches, m)]
        total_counts = [a + b for a, b in zip(total_counts, t)]
        cand_len += len(cand)
        ref_len += len(ref)
    return _bleu_from_totals(total_matches, total_counts, cand_len, ref_len, max_order)


# ---------------------------------------------------------------------------
# ROUGE-L
# ---------------------------------------------------------------------------


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[-1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str, beta: float = 1.0) -> float:
    """LCS-based F-score (beta=1 by default; 1.2 available for comparison)."""
    cand, ref = normalize_words(candidate), normalize_words(reference)
    if not cand or not ref:
        raise ContractError("candidate and reference must be non-empty")
    lcs = _lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    precision = lcs / len(cand)
    recall = lcs / len(ref)
    b2 = beta * beta
    return (1 + b2) * precision * recall / (recall + b2 * precision)


# ---------------------------------------------------------------------------
# METEOR
# ---------------------------------------------------------------------------


def _align(cand: list[str], ref: list[str]) -> list[tuple[int, int]]:
    """Exact then stemmed unigram alignment, greedy first-unused matching."""
    pairs: list[tuple[int, int]] = []
    used_ref = [False] * len(ref)
    matched_cand = [False] * len(cand)
    for i, tok in enumerate(cand):
        for j, rtok in enumerate(ref):
            if not used_ref[j] and tok == rtok:
                pairs.append((i, j))
                used_ref[j] = True
                matched_cand[i] = True
                break
    cand_stems = [porter_stem(t) for t in cand]
    ref_stems = [porter_stem(t) for t in ref]
    for i, stem in enumerate(cand_stems):
        if matched_cand[i]:
            continue
        for j, rstem in enumerate(ref_stems):
            if not used_ref[j] and stem == rstem:
                pairs.append((i, j))
                used_ref[j] = True
                matched_cand[i] = True
                break
    return sorted(pairs)


def _chunk_count(pairs: list[tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for i, j in pairs:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor(candidate: str, reference: str) -> float:
    """Unigram-alignment score: F_mean (recall weight 9) times 1 - penalty,
    with penalty = 0.5 * (chunks / matches)^3.
    """
    cand, ref = normalize_words(candidate), normalize_words(reference)
    if not cand or not ref:
        raise ContractError("candidate and reference must be non-empty")
    pairs = _align(cand, ref)
    matches = len(pairs)
    if matches == 0:
        return 0.0
    precision = matches / len(cand)
    recall = matches / len(ref)
    f_mean = 10.0 * precision * recall / (recall + 9.0 * precision)
    penalty = 0.5 * (_chunk_count(pairs) / matches) ** 3
    return f_mean * (1.0 - penalty)


# ---------------------------------------------------------------------------
# Embedding similarity score
# ---------------------------------------------------------------------------


class TokenEmbedClient(Protocol):
    def embed_tokens(self, tokens: Sequence[str]) -> np.ndarray:
        """(n_tokens, dim) unit vectors."""
        ...


class HashTokenEmbedClient:
    """Deterministic per-token unit vectors derived from a content hash."""

    def __init__(self, dim: int = 32):
        self.dim = dim

    def embed_tokens(self, tokens: Sequence[str]) -> np.ndarray:
        out = np.empty((len(tokens), self.dim))
        for k, tok in enumerate(tokens):
            rng = np.random.default_rng(stable_hash64(tok.encode("utf-8")))
            vec = rng.standard_normal(self.dim)
            out[k] = vec / np.linalg.norm(vec)
        return out


class HttpTokenEmbedClient:
    def __init__(self, url: str, api_key: str = "", timeout: float = 60.0):
        self.url = url
        self.api_key = api_key
        self.timeout = timeout

    def embed_tokens(self, tokens: Sequence[str]) -> np.ndarray:
        import httpx

        try:
            resp = httpx.post(
                self.url,
                json={"tokens": list(tokens)},
                headers={"Authorization": f"Bearer {self.api_key}"} if self.api_key else {},
                timeout=self.timeout,
            )
            resp.raise_for_status()
            vectors = np.asarray(resp.json()["vectors"], dtype=np.float64)
        except Exception as exc:
            raise MetricError(f"token-embedding request failed: {exc}") from exc
        norms = np.linalg.norm(vectors, axis=1, keepdims=True)
        return vectors / norms


def embed_score(candidate: str, reference: str, client: TokenEmbedClient) -> float:
    """Greedy max-cosine matching in both directions; F1, clamped to [0, 1]."""
    cand, ref = normalize_words(candidate), normalize_words(reference)
    if not cand or not ref:
        raise ContractError("candidate and reference must be non-empty")
    try:
        cand_vecs = np.asarray(client.embed_tokens(cand), dtype=np.float64)
        ref_vecs = np.asarray(client.embed_tokens(ref), dtype=np.float64)
    except MetricError:
        raise
    except Exception as exc:
        raise MetricError(f"embedding failed: {exc}") from exc
    sims = cand_vecs @ ref_vecs.T
    precision = float(np.mean(np.max(sims, axis=1)))
    recall = float(np.mean(np.max(sims, axis=0)))
    if precision + recall <= 0:
        return 0.0
    return float(np.clip(2.0 * precision * recall / (precision + recall), 0.0, 1.0))


# ---------------------------------------------------------------------------
# Weighted F1
# ---------------------------------------------------------------------------


def weighted_f1(predicted: Sequence[str], gold: Sequence[str]) -> float:
    """Per-class F1 weighted by gold support."""
    if len(predicted) != len(gold):
        raise ContractError(
            f"length mismatch: {len(predicted)} predictions vs {len(gold)} gold labels"
        )
    if not gold:
        raise ContractError("labels must be non-empty")
    total = len(gold)
    score = 0.0
    for cls in sorted(set(gold)):
        tp = sum(1 for p, g in zip(predicted, gold) if p == cls and g == cls)
        fp = sum(1 for p, g in zip(predicted, gold) if p == cls and g != cls)
        fn = sum(1 for p, g in zip(predicted, gold) if p != cls and g == cls)
        support = tp + fn
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        score += (support / total) * f1
    return score


# ---------------------------------------------------------------------------
# Judge-model scoring
# ---------------------------------------------------------------------------

EVAL_TEMPLATE = (
    "You are evaluating the quality of a spoken-dialogue response.\n"
    "Dialogue context:\n{context}\n"
    "Candidate response:\n{response}\n"
    "Rate how natural, contextually appropriate, and emotionally fitting the\n"
    "response is on a scale from 1 (poor) to 5 (excellent).\n"
    'Respond with "Score: k" where k is an integer from 1 to 5.'
)

_SCORE_RE = re.compile(r"Score:\s*([1-5])\b", re.IGNORECASE)
_BARE_SCORE_RE = re.compile(r"\b([1-5])\b")


def gpt_eval(context: str, response: str, client: ChatClient, seed: int = 0) -> float:
    """Render the judge prompt and parse the first in-range score."""
    if not response.strip():
        raise ContractError("response must be non-empty")
    reply = client.complete(
        EVAL_TEMPLATE.format(context=context, response=response), seed
    )
    match = _SCORE_RE.search(reply) or _BARE_SCORE_RE.search(reply)
    if match is None:
        raise EvalError(f"no score in judge reply: {reply[:120]!r}", raw_reply=reply)
    return float(match.group(1))


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricReport:
    """Corpus-level metric values (all in [0, 1]; judge score in [1, 5])."""

    bleu: float
    rouge_l: float
    meteor: float
    embed_score: float
    f1_emotion: float
    gpt_eval: Optional[float] = None

    def __post_init__(self):
        for name in ("bleu", "rouge_l", "meteor", "embed_score", "f1_emotion"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise ContractError(f"{name} outside [0, 1]: {value}")
        if self.gpt_eval is not None and not (1.0 <= self.gpt_eval <= 5.0):
            raise ContractError(f"gpt_eval outside [1, 5]: {self.gpt_eval}")

    def to_json_dict(self) -> dict:
        return {
            "bleu": self.bleu,
            "rouge_l": self.rouge_l,
            "meteor": self.meteor,
            "embed_score": self.embed_score,
            "f1_emotion": self.f1_emotion,
            "gpt_eval": self.gpt_eval,
        }
