"""Degeneration metrics, grounding score, and corpus aggregation.

rep-n is the duplicate fraction of n-grams; diversity multiplies
(1 - rep_n) for n = 2..4. Metrics are story-level: the five sentences pool
their n-gram counts, and n-grams do not bridge sentence boundaries unless
explicitly asked to. Values are fractions internally; reports present them
on the percent scale with two decimals.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .encoder import FeatureTable, FrozenEncoder
from .lm import BOS_ID, EOS_ID, FrozenLm

REP_ORDERS = (1, 2, 3, 4)
DIVERSITY_ORDERS = (2, 3, 4)
GROUNDING_SCALE = 2.5


def ngram_counts(tokens: Sequence[int], n: int):
    """(unique, total) n-gram counts of one flat token stream."""
    if n < 1:
        raise ValueError("n must be >= 1")
    tokens = list(tokens)
    total = max(0, len(tokens) - n + 1)
    if total == 0:
        return 0, 0
    unique = len({tuple(tokens[i:i + n]) for i in range(total)})
    return unique, total


def rep_n(tokens: Sequence[int], n: int) -> float:
    """Duplicate n-gram fraction; 0.0 when there are no n-grams at all."""
    unique, total = ngram_counts(tokens, n)
    if total == 0:
        return 0.0
    return 1.0 - unique / total


def story_ngram_counts(sentences: Sequence[Sequence[int]], n: int,
                       bridge_sentences: bool = False):
    """Pooled (unique, total) counts over a story's sentences."""
    if bridge_sentences:
        flat = [t for s in sentences for t in s]
        return ngram_counts(flat, n)
    grams = set()
    total = 0
    for sent in sentences:
        sent = list(sent)
        m = max(0, len(sent) - n + 1)
        total += m
        grams.update(tuple(sent[i:i + n]) for i in range(m))
    return len(grams), total


def story_rep_n(sentences: Sequence[Sequence[int]], n: int,
                bridge_sentences: bool = False) -> float:
    unique, total = story_ngram_counts(sentences, n, bridge_sentences)
    if total == 0:
        return 0.0
    return 1.0 - unique / total


def diversity(tokens: Sequence[int]) -> Optional[float]:
    """Product of (1 - rep_n) for n = 2..4; absent below 4 tokens."""
    if len(tokens) < 4:
        return None
    value = 1.0
    for n in DIVERSITY_ORDERS:
        value *= 1.0 - rep_n(tokens, n)
    return value


def story_diversity(sentences: Sequence[Sequence[int]],
                    bridge_sentences: bool = False) -> Optional[float]:
    if sum(len(s) for s in sentences) < 4:
        return None
    value = 1.0
    for n in DIVERSITY_ORDERS:
        value *= 1.0 - story_rep_n(sentences, n, bridge_sentences)
    return value


def grounding_score(sentence_tokens: Sequence[int], image_feat: np.ndarray,
                    encoder: FrozenEncoder) -> float:
    """Clamped cosine between the sentence's stub feature and the image's."""
    text_feat = encoder.encode_text(list(sentence_tokens))
    cos = float(text_feat @ np.asarray(image_feat, dtype=np.float32))
    return GROUNDING_SCALE * max(0.0, cos)


@dataclass
class StoryMetrics:
    sequence_id: str
    rep: dict                      # n -> fraction
    diversity: Optional[float]
    perplexity: Optional[float]
    grounding: Optional[float]     # mean over scored sentences
    tokens: int
    skipped_images: int = 0


@dataclass
class CorpusReport:
    stories: list
    aggregate: dict                # percent-scale means, plus counts
    pooled: Optional[dict] = None  # corpus-pooled rep-n (percent), optional

    def to_json(self) -> str:
        payload = {
            "aggregate": self.aggregate,
            "stories": [{
                "sequence_id": s.sequence_id,
                "rep": {str(n): s.rep[n] for n in sorted(s.rep)},
                "diversity": s.diversity,
                "perplexity": s.perplexity,
                "grounding": s.grounding,
                "tokens": s.tokens,
                "skipped_images": s.skipped_images,
            } for s in self.stories],
        }
        if self.pooled is not None:
            payload["pooled"] = self.pooled
        return json.dumps(payload, sort_keys=True, indent=2)


def evaluate_story(sentence_tokens: Sequence[Sequence[int]], image_ids, *,
                   encoder: Optional[FrozenEncoder] = None,
                   features: Optional[FeatureTable] = None,
                   lm: Optional[FrozenLm] = None, sequence_id: str = "",
                   bridge_sentences: bool = False) -> StoryMetrics:
    rep = {n: story_rep_n(sentence_tokens, n, bridge_sentences) for n in REP_ORDERS}
    div = story_diversity(sentence_tokens, bridge_sentences)

    ppl = None
    if lm is not None:
        values = [lm.perplexity([BOS_ID] + list(s) + [EOS_ID])
                  for s in sentence_tokens]
        ppl = float(np.mean(values)) if values else None

    grounding = None
    skipped = 0
    if encoder is not None and image_ids is not None:
        scores = []
        for sent, image_id in zip(sentence_tokens, image_ids):
            if features is not None:
                if image_id not in features:
                    skipped += 1
                    continue
                feat = features.get(image_id)
            else:
                feat = encoder.encode_image(image_id)
            scores.append(grounding_score(sent, feat, encoder))
        grounding = float(np.mean(scores)) if scores else None

    return StoryMetrics(sequence_id=sequence_id, rep=rep, diversity=div,
                        perplexity=ppl, grounding=grounding,
                        tokens=sum(len(s) for s in sentence_tokens),
                        skipped_images=skipped)


def _percent(x: float) -> float:
    return 100.0 * x


def corpus_eval(stories: Sequence[StoryMetrics],
                pooled_counts: Optional[Sequence[Sequence[Sequence[int]]]] = None,
                bridge_sentences: bool = False) -> CorpusReport:
    """Aggregate per-story metrics (means, percent scale for rep/diversity).

    ``pooled_counts``: optionally pass the stories' sentence-token lists to
    also report corpus-pooled rep-n (n-gram counts merged across stories)
    next to the default mean-of-stories view.
    """
    if not stories:
        raise ValueError("corpus_eval: empty corpus")
    agg = {}
    for n in REP_ORDERS:
        agg[f"rep_{n}"] = _percent(float(np.mean([s.rep[n] for s in stories])))
    div_values = [s.diversity for s in stories if s.diversity is not None]
    agg["diversity"] = _percent(float(np.mean(div_values))) if div_values else None
    ppl_values = [s.perplexity for s in stories if s.perplexity is not None]
    agg["perplexity"] = float(np.mean(ppl_values)) if ppl_values else None
    gr_values = [s.grounding for s in stories if s.grounding is not None]
    agg["grounding"] = float(np.mean(gr_values)) if gr_values else None
    agg["stories"] = len(stories)
    agg["skipped_images"] = int(sum(s.skipped_images for s in stories))

    pooled = None
    if pooled_counts is not None:
        pooled = {}
        for n in REP_ORDERS:
            unique, total = 0, 0
            grams = set()
            for sentences in pooled_counts:
                if bridge_sentences:
                    flat = [t for s in sentences for t in s]
                    m = max(0, len(flat) - n + 1)
                    total += m
                    grams.update(tuple(flat[i:i + n]) for i in range(m))
                else:
                    for sent in sentences:
                        sent = list(sent)
                        m = max(0, len(sent) - n + 1)
                        total += m
                        grams.update(tuple(sent[i:i + n]) for i in range(m))
            pooled[f"rep_{n}"] = _percent(1.0 - len(grams) / total) if total else 0.0
        pooled["diversity"] = _percent(float(np.prod(
            [1.0 - pooled[f"rep_{n}"] / 100.0 for n in DIVERSITY_ORDERS])))
    return CorpusReport(stories=list(stories), aggregate=agg, pooled=pooled)


def render_table(report: CorpusReport, label: str = "model") -> str:
    """Aligned text table over rep-1..4 and diversity, percent scale."""
    headers = ["", "rep-1", "rep-2", "rep-3", "rep-4", "diversity"]
    agg = report.aggregate
    div = agg["diversity"]
    row = [label] + [f"{agg[f'rep_{n}']:.2f}" for n in REP_ORDERS] + \
        [f"{div:.2f}" if div is not None else "n/a"]
    widths = [max(len(h), len(r)) for h, r in zip(headers, row)]
    lines = ["  ".join(h.rjust(w) for h, w in zip(headers, widths)),
             "  ".join(r.rjust(w) for r, w in zip(row, widths))]
    return "\n".join(lines)
