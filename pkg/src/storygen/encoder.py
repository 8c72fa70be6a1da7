"""Frozen multimodal encoder stub.

Stands in for a contrastively pretrained image/text encoder: image features
are drawn from a counter-based PRNG keyed by a hash of the image id, text
features pool per-token hash-seeded embeddings through one frozen linear
layer. Both live in the same d_feat space so context can be fused with
image features. Everything here is deterministic in (seed, input) and holds
no trainable state.

Feature vectors are plain float32 numpy arrays with unit L2 norm.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

D_FEAT_DEFAULT = 64
CLIP_STYLE_MAX_TOKENS = 77  # text inputs past this length are truncated

_BOS_WORD = "<bos>"


class FeatureError(ValueError):
    """Bad feature file or dimension mismatch."""


def _hash_rng(seed: int, label: str) -> np.random.Generator:
    digest = hashlib.blake2b(f"{seed}|{label}".encode("utf-8"), digest_size=16).digest()
    key = np.frombuffer(digest, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _unit(v: np.ndarray) -> np.ndarray:
    return (v / np.linalg.norm(v)).astype(np.float32)


class FrozenEncoder:
    """Deterministic image/text feature extractor over a shared space.

    ``vocab`` (anything with a ``token(id) -> str`` method) is only needed
    for :meth:`encode_text`; word-level encoding works without it, which is
    what dataset synthesis uses before any vocabulary exists.
    """

    def __init__(self, d_feat: int = D_FEAT_DEFAULT, seed: int = 0, vocab=None):
        if d_feat <= 0:
            raise ValueError("d_feat must be positive")
        self.d_feat = d_feat
        self.seed = seed
        self.vocab = vocab
        # frozen text-side linear layer, same seed as the image side
        rng = _hash_rng(seed, "text-linear")
        self._w = rng.normal(0.0, 1.0 / np.sqrt(d_feat),
                             size=(d_feat, d_feat)).astype(np.float32)
        self._b = rng.normal(0.0, 0.01, size=d_feat).astype(np.float32)
        self._word_cache: dict = {}

    def encode_image(self, image_id: str) -> np.ndarray:
        if not image_id:
            raise ValueError("encode_image: empty image id")
        rng = _hash_rng(self.seed, f"img|{image_id}")
        return _unit(rng.normal(size=self.d_feat))

    def _word_embedding(self, word: str) -> np.ndarray:
        cached = self._word_cache.get(word)
        if cached is None:
            rng = _hash_rng(self.seed, f"txt|{word}")
            cached = rng.normal(size=self.d_feat).astype(np.float32)
            self._word_cache[word] = cached
        return cached

    def encode_words(self, words: Sequence[str]) -> np.ndarray:
        """Mean of per-word frozen embeddings through the frozen linear layer."""
        words = list(words)[:CLIP_STYLE_MAX_TOKENS]
        if not words:
            words = [_BOS_WORD]
        pooled = np.mean([self._word_embedding(w) for w in words], axis=0)
        return _unit(self._w @ pooled + self._b)

    def encode_text(self, token_ids: Sequence[int]) -> np.ndarray:
        """Pooled feature of a token sequence (empty -> BOS-only feature)."""
        if self.vocab is None:
            raise RuntimeError("encode_text needs a vocabulary; use encode_words")
        ids = list(token_ids)[:CLIP_STYLE_MAX_TOKENS]
        return self.encode_words([self.vocab.token(t) for t in ids])

    def zero_context_feature(self) -> np.ndarray:
        return self.encode_words([])

    def table_for(self, image_ids: Sequence[str]) -> "FeatureTable":
        feats = {i: self.encode_image(i) for i in image_ids}
        return FeatureTable(features=feats, d_feat=self.d_feat, provenance="synthetic")


@dataclass
class FeatureTable:
    features: dict = field(default_factory=dict)
    d_feat: int = D_FEAT_DEFAULT
    provenance: str = "synthetic"

    def __contains__(self, image_id: str) -> bool:
        return image_id in self.features

    def get(self, image_id: str) -> np.ndarray:
        if image_id not in self.features:
            raise KeyError(f"no feature for image id {image_id!r}")
        return self.features[image_id]

    def __len__(self) -> int:
        return len(self.features)


def save_features(table: FeatureTable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for image_id in sorted(table.features):
            rec = {"id": image_id,
                   "values": [float(x) for x in table.features[image_id]]}
            fh.write(json.dumps(rec) + "\n")


def load_features(path, d_feat: Optional[int] = None) -> FeatureTable:
    """Read a JSON Lines feature file: {"id": str, "values": [floats]}.

    Vectors whose norm strays more than 1e-3 from 1 are re-normalized.
    """
    features = {}
    expected = d_feat
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                image_id = rec["id"]
                values = np.asarray(rec["values"], dtype=np.float32)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
                raise FeatureError(f"{path}:{line_no}: malformed record ({err})")
            if values.ndim != 1:
                raise FeatureError(f"{path}:{line_no}: values for {image_id!r} not a flat list")
            if expected is None:
                expected = values.shape[0]
            elif values.shape[0] != expected:
                raise FeatureError(
                    f"{path}:{line_no}: feature {image_id!r} has dimension "
                    f"{values.shape[0]}, expected {expected}")
            if image_id in features:
                raise FeatureError(f"{path}:{line_no}: duplicate id {image_id!r}")
            norm = float(np.linalg.norm(values))
            if norm == 0.0:
                raise FeatureError(f"{path}:{line_no}: zero vector for {image_id!r}")
            if abs(norm - 1.0) > 1e-3:
                values = values / norm
            features[image_id] = values.astype(np.float32)
    if not features:
        raise FeatureError(f"{path}: no feature records found")
    return FeatureTable(features=features, d_feat=expected, provenance="loaded")
