"""Decoding strategies and the story-level generation loop.

Beam search and contrastive (degeneration-penalized) search are
deterministic; top-k and nucleus sampling draw from a counter-based
generator keyed by (seed, image index, step), so the order in which
sentences are decoded can never perturb the draws.

A "session" binds a frozen model to one soft prompt and exposes next-token
log-probabilities (and final-layer hidden states, for contrastive search)
after an arbitrary emitted-token history. Anything with that surface
decodes; tests drive the strategies with small table-based models.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import FeatureTable, FrozenEncoder
from .lm import EOS_ID, FrozenLm
from .mapping import MappingNetwork, PrefixSequence

STRATEGIES = ("beam", "top_k", "nucleus", "simctg")

STOP_EOS = "eos"
STOP_LENGTH = "length"


@dataclass(frozen=True)
class DecodeConfig:
    strategy: str = "beam"
    max_len: int = 30
    num_beams: int = 5
    k: int = 50
    p: float = 0.9
    simctg_k: int = 5
    alpha: float = 0.8        # degeneration penalty weight
    temperature: float = 1.0  # applied to the sampling strategies only
    seed: int = 0
    length_normalize: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if not 0 < self.p <= 1:
            raise ValueError("p must be in (0, 1]")
        if self.k < 1 or self.num_beams < 1 or self.simctg_k < 1:
            raise ValueError("k, num_beams and simctg_k must be >= 1")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must be in [0, 1]")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


class LmSession:
    """Frozen LM bound to a soft prompt; no KV cache, desk scale."""

    def __init__(self, lm: FrozenLm, prompt: PrefixSequence):
        self.lm = lm
        self.prompt_data = prompt.vectors.data.astype(np.float32)
        self.vocab_size = lm.config.vocab_size
        self.eos_id = EOS_ID
        budget = lm.config.max_positions - self.prompt_data.shape[0]
        if budget < 1:
            raise ValueError(
                f"prompt of {self.prompt_data.shape[0]} rows leaves no room "
                f"within max_positions {lm.config.max_positions}")
        self.max_tokens = budget

    def _forward(self, token_ids: Sequence[int]):
        parts = [Tensor(self.prompt_data)]
        if token_ids:
            parts.append(self.lm.token_embedding(list(token_ids)))
        x = ad.concat_rows(parts) if len(parts) > 1 else parts[0]
        x = ad.add(x, self.lm.position_embedding(0, x.shape[0]))
        with ad.no_grad():
            return self.lm.forward(x)

    def log_probs_after(self, token_ids: Sequence[int]) -> np.ndarray:
        out = self._forward(token_ids)
        row = out.logits.data[-1].astype(np.float64)
        return row - (np.log(np.exp(row - row.max()).sum()) + row.max())

    def hidden_after(self, token_ids: Sequence[int]) -> np.ndarray:
        return self._forward(token_ids).final_hidden.data.astype(np.float64)


def step_rng(seed: int, image_index: int, step: int) -> np.random.Generator:
    """Counter-based stream: one generator per (seed, image, step)."""
    bitgen = np.random.Philox(key=np.uint64(seed),
                              counter=[0, 0, np.uint64(image_index), np.uint64(step)])
    return np.random.Generator(bitgen)


# ---------------------------------------------------------------------------
# candidate sets (shared by the samplers and their brute-force oracles)
# ---------------------------------------------------------------------------

def descending_order(probs: np.ndarray) -> np.ndarray:
    """Indices by probability descending, ties broken by lower token id."""
    return np.lexsort((np.arange(probs.shape[0]), -probs))


def top_k_candidates(probs: np.ndarray, k: int):
    """The k most probable token ids and their renormalized probabilities."""
    order = descending_order(probs)[:min(k, probs.shape[0])]
    chosen = probs[order]
    return order, chosen / chosen.sum()


def nucleus_candidates(probs: np.ndarray, p: float):
    """Shortest descending-order prefix with cumulative probability >= p.

    The argmax is always included, so p below the max probability gives
    greedy decoding.
    """
    order = descending_order(probs)
    cum = np.cumsum(probs[order])
    cut = int(np.searchsorted(cum, p)) + 1
    cut = min(cut, order.shape[0])
    chosen = probs[order[:cut]]
    return order[:cut], chosen / chosen.sum()


def _probs_from(session, tokens, temperature: float = 1.0) -> np.ndarray:
    lp = session.log_probs_after(tokens) / temperature
    lp -= lp.max()
    e = np.exp(lp)
    return e / e.sum()


# ---------------------------------------------------------------------------
# strategies
# ---------------------------------------------------------------------------

def beam_search(session, cfg: DecodeConfig):
    """Highest-total-log-probability continuation among the explored beams.

    Completed hypotheses (EOS) are set aside; score ties break toward the
    lexicographically smaller token sequence. No length normalization
    unless configured.
    """
    max_len = min(cfg.max_len, session.max_tokens)
    beams = [((), 0.0)]
    completed = []
    for _ in range(max_len):
        candidates = []
        for seq, score in beams:
            lp = session.log_probs_after(list(seq))
            for tok in range(session.vocab_size):
                candidates.append((seq + (tok,), score + lp[tok]))
        candidates.sort(key=lambda c: (-c[1], c[0]))
        # the top num_beams candidates claim the beam slots; EOS-ended ones
        # retire to the completed pool, the rest stay live
        beams = []
        for seq, score in candidates[: cfg.num_beams]:
            if seq[-1] == session.eos_id:
                completed.append((seq, score))
            else:
                beams.append((seq, score))
        if not beams:
            break

    def final_key(item):
        seq, score = item
        if cfg.length_normalize and len(seq) > 0:
            score = score / len(seq)
        return (-score, seq)

    if completed:
        best = min(completed, key=final_key)
        return list(best[0][:-1]), STOP_EOS
    best = min(beams, key=final_key)
    return list(best[0]), STOP_LENGTH


def greedy_decode(session, cfg: DecodeConfig):
    """Argmax decoding (ties toward the lower token id)."""
    tokens = []
    max_len = min(cfg.max_len, session.max_tokens)
    for _ in range(max_len):
        lp = session.log_probs_after(tokens)
        tok = int(descending_order(lp)[0])
        if tok == session.eos_id:
            return tokens, STOP_EOS
        tokens.append(tok)
    return tokens, STOP_LENGTH


def _sample_loop(session, cfg: DecodeConfig, image_index: int, pick):
    tokens = []
    max_len = min(cfg.max_len, session.max_tokens)
    for step in range(max_len):
        probs = _probs_from(session, tokens, cfg.temperature)
        ids, weights = pick(probs)
        rng = step_rng(cfg.seed, image_index, step)
        tok = int(rng.choice(ids, p=weights))
        if tok == session.eos_id:
            return tokens, STOP_EOS
        tokens.append(tok)
    return tokens, STOP_LENGTH


def top_k_sample(session, cfg: DecodeConfig, image_index: int = 0):
    """Sample from the renormalized k most probable tokens each step."""
    return _sample_loop(session, cfg, image_index,
                        lambda probs: top_k_candidates(probs, cfg.k))


def nucleus_sample(session, cfg: DecodeConfig, image_index: int = 0):
    """Sample from the smallest probability mass >= p each step."""
    return _sample_loop(session, cfg, image_index,
                        lambda probs: nucleus_candidates(probs, cfg.p))


def contrastive_search(session, cfg: DecodeConfig):
    """Degeneration-penalized deterministic decoding.

    Over the simctg_k most probable candidates v:
        score(v) = (1 - alpha) * p(v | context)
                   - alpha * max_j cos(h_v, h_j)
    where h_v is the final hidden state of the lookahead sequence and j
    runs over all previous positions (soft prompt included).
    """
    tokens = []
    max_len = min(cfg.max_len, session.max_tokens)
    for _ in range(max_len):
        probs = _probs_from(session, tokens)
        ids, _ = top_k_candidates(probs, cfg.simctg_k)
        scored = []
        for tok in ids:
            hidden = session.hidden_after(tokens + [int(tok)])
            h_new = hidden[-1]
            prev = hidden[:-1]
            norms = np.linalg.norm(prev, axis=1) * np.linalg.norm(h_new)
            sims = prev @ h_new / np.maximum(norms, 1e-12)
            score = (1.0 - cfg.alpha) * probs[tok] - cfg.alpha * sims.max()
            scored.append((-score, int(tok)))
        scored.sort()
        tok = scored[0][1]
        if tok == session.eos_id:
            return tokens, STOP_EOS
        tokens.append(tok)
    return tokens, STOP_LENGTH


def decode(session, cfg: DecodeConfig, image_index: int = 0):
    if cfg.strategy == "beam":
        return beam_search(session, cfg)
    if cfg.strategy == "top_k":
        return top_k_sample(session, cfg, image_index)
    if cfg.strategy == "nucleus":
        return nucleus_sample(session, cfg, image_index)
    return contrastive_search(session, cfg)


# ---------------------------------------------------------------------------
# story generation
# ---------------------------------------------------------------------------

@dataclass
class GeneratedStory:
    sequence_id: str
    strategy: str
    sentences: list            # token id lists, EOS not included
    texts: list                # decoded strings
    stop_reasons: list
    trace: list                # per-sentence context provenance
    config: dict

    def __post_init__(self):
        if len(self.sentences) != len(self.stop_reasons):
            raise ValueError("one stop reason per sentence required")


def generate_story(lm: FrozenLm, mapping: MappingNetwork, encoder: FrozenEncoder,
                   image_ids: Sequence[str], album_title: str,
                   album_description: str, cfg: DecodeConfig,
                   context_mode: str = "none", context_sentences: int = 0,
                   vocab=None, features: Optional[FeatureTable] = None,
                   sequence_id: str = "") -> GeneratedStory:
    """Decode one sentence per image, threading predicted context forward.

    Sentence i conditions on image feature i plus the previous
    min(i, context_sentences) *predicted* sentences; with context enabled
    the first sentence falls back to the album title + description. The
    feature source is the frozen encoder unless ``features`` (a loaded
    table) is given, in which case unknown ids are an error.
    """
    if not image_ids:
        raise ValueError("generate_story: empty image sequence")
    if vocab is None:
        vocab = getattr(encoder, "vocab", None)
    if vocab is None:
        raise ValueError("generate_story needs a vocabulary for album context")
    sentences = []
    texts = []
    stop_reasons = []
    trace = []
    L = context_sentences
    for i, image_id in enumerate(image_ids):
        if features is not None:
            v = features.get(image_id)
        else:
            v = encoder.encode_image(image_id)
        if context_mode == "none" or L <= 0:
            context_tokens = []
            context_source = "none"
        elif i == 0:
            context_tokens = vocab.encode(album_title) + vocab.encode(album_description)
            context_source = "album_meta"
        else:
            lo = max(0, i - L)
            context_tokens = [t for s in sentences[lo:i] for t in s]
            context_source = f"predicted[{lo}:{i}]"

        ctext = None
        if context_mode == "before":
            c = (encoder.encode_text(context_tokens) if context_tokens
                 else encoder.zero_context_feature())
            prompt = mapping.map_prefix_with_context(v, c)
        elif context_mode == "after":
            prompt = mapping.map_prefix(v)
            budget = lm.config.max_positions - mapping.config.prefix_len \
                - cfg.max_len - 2
            ctext = mapping.build_context_after(context_tokens, lm,
                                                max_context_tokens=max(0, budget))
            prompt = mapping.attach_context_after(prompt, ctext)
        else:
            prompt = mapping.map_prefix(v)

        session = LmSession(lm, prompt)
        tokens, stop = decode(session, cfg, image_index=i)
        sentences.append(tokens)
        texts.append(vocab.decode(tokens))
        stop_reasons.append(stop)
        trace.append({"index": i, "image_id": image_id,
                      "context_source": context_source,
                      "context_tokens": len(context_tokens),
                      "layout": prompt.layout})
    return GeneratedStory(
        sequence_id=sequence_id, strategy=cfg.strategy, sentences=sentences,
        texts=texts, stop_reasons=stop_reasons, trace=trace,
        config={"strategy": cfg.strategy, "max_len": cfg.max_len,
                "num_beams": cfg.num_beams, "k": cfg.k, "p": cfg.p,
                "simctg_k": cfg.simctg_k, "alpha": cfg.alpha,
                "temperature": cfg.temperature, "seed": cfg.seed,
                "context_mode": context_mode, "context_sentences": L})


def write_stories_jsonl(stories: Sequence[GeneratedStory], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for story in stories:
            fh.write(json.dumps({
                "sequence_id": story.sequence_id,
                "strategy": story.strategy,
                "sentences": story.texts,
                "stop_reasons": story.stop_reasons,
                "config": story.config,
            }, sort_keys=True) + "\n")


def read_stories_jsonl(path) -> list:
    stories = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                stories.append(json.loads(line))
    return stories
