"""Dataset types, tokenizer, toy-data synthesis, and JSONL persistence.

Two annotation kinds drive the curriculum: DII samples pair one image with
one caption, SIS samples pair a five-image album with a five-sentence story
plus album title/description. Files are one JSON Lines file per split per
kind (train.sis.jsonl, train.dii.jsonl, ...). Sentences are stored as raw
strings and tokenized at load time against a closed vocabulary built from
the training split.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .encoder import FrozenEncoder
from .lm import BOS_ID, EOS_ID, PAD_ID, SPECIAL_TOKENS, UNK_ID

logger = logging.getLogger(__name__)

IMAGES_PER_STORY = 5

_TOKEN_RE = re.compile(r"[a-z0-9']+|[^a-z0-9'\s]")


class DataFormatError(ValueError):
    """Malformed dataset record."""


def tokenize(text: str) -> list:
    """Lowercase whitespace tokenization with punctuation detached."""
    return _TOKEN_RE.findall(text.lower())


class Vocab:
    """Closed vocabulary: specials + sorted unique training tokens."""

    def __init__(self, tokens: Sequence[str]):
        self._tokens = list(SPECIAL_TOKENS) + sorted(set(tokens) - set(SPECIAL_TOKENS))
        self._index = {t: i for i, t in enumerate(self._tokens)}

    @classmethod
    def from_texts(cls, texts: Sequence[str]) -> "Vocab":
        words = []
        for text in texts:
            words.extend(tokenize(text))
        return cls(words)

    def __len__(self) -> int:
        return len(self._tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self._tokens == other._tokens

    def token(self, token_id: int) -> str:
        return self._tokens[token_id]

    def id_of(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def encode(self, text: str) -> list:
        return [self.id_of(t) for t in tokenize(text)]

    def decode(self, token_ids: Sequence[int]) -> str:
        return " ".join(self._tokens[t] for t in token_ids
                        if t not in (PAD_ID, BOS_ID, EOS_ID))

    def tokens(self) -> list:
        return list(self._tokens)


@dataclass
class DiiSample:
    image_id: str
    caption: str
    caption_tokens: list = field(default_factory=list)

    def __post_init__(self):
        if not self.caption.strip():
            raise DataFormatError(f"DII sample {self.image_id!r}: empty caption")


@dataclass
class SisSample:
    album_id: str
    album_title: str
    album_description: str
    image_ids: list = field(default_factory=list)
    sentences: list = field(default_factory=list)
    sentence_tokens: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.image_ids) != IMAGES_PER_STORY:
            raise DataFormatError(
                f"SIS record {self.album_id!r}: {len(self.image_ids)} images, "
                f"need exactly {IMAGES_PER_STORY}")
        if len(self.sentences) != IMAGES_PER_STORY:
            raise DataFormatError(
                f"SIS record {self.album_id!r}: {len(self.sentences)} sentences, "
                f"need exactly {IMAGES_PER_STORY}")


@dataclass
class DatasetSplits:
    vocab: Vocab
    train_dii: list = field(default_factory=list)
    train_sis: list = field(default_factory=list)
    val_dii: list = field(default_factory=list)
    val_sis: list = field(default_factory=list)
    test_dii: list = field(default_factory=list)
    test_sis: list = field(default_factory=list)

    def sis(self, split: str) -> list:
        return getattr(self, f"{split}_sis")

    def dii(self, split: str) -> list:
        return getattr(self, f"{split}_dii")

    def all_image_ids(self) -> list:
        ids = [s.image_id for split in ("train", "val", "test") for s in self.dii(split)]
        for split in ("train", "val", "test"):
            for s in self.sis(split):
                ids.extend(s.image_ids)
        return sorted(set(ids))

    def check_album_disjointness(self) -> None:
        seen = {}
        for split in ("train", "val", "test"):
            for s in self.sis(split):
                if s.album_id in seen and seen[s.album_id] != split:
                    raise DataFormatError(
                        f"album {s.album_id!r} appears in both "
                        f"{seen[s.album_id]} and {split}")
                seen[s.album_id] = split

    def counts(self) -> dict:
        return {f"{split}_{kind}": len(getattr(self, f"{split}_{kind}"))
                for split in ("train", "val", "test") for kind in ("dii", "sis")}


def _retokenize(splits: DatasetSplits) -> None:
    vocab = splits.vocab
    for split in ("train", "val", "test"):
        for d in splits.dii(split):
            d.caption_tokens = vocab.encode(d.caption)
        for s in splits.sis(split):
            s.sentence_tokens = [vocab.encode(t) for t in s.sentences]


# ---------------------------------------------------------------------------
# toy dataset synthesis
# ---------------------------------------------------------------------------

_NOUNS = [
    "bicycle", "garden", "river", "castle", "market", "forest", "harbor",
    "kitchen", "museum", "orchard", "meadow", "bridge", "library", "bakery",
    "island", "mountain", "lantern", "sailboat", "workshop", "carnival",
    "lighthouse", "vineyard", "waterfall", "courtyard", "windmill", "glacier",
    "station", "theater", "fountain", "canyon", "cottage", "temple",
    "aquarium", "balloon", "campfire", "desert", "engine", "festival",
    "greenhouse", "jungle",
]
_VERBS = ["rests", "shines", "waits", "stands", "glows", "drifts", "turns",
          "appears", "opens", "rises", "settles", "sparkles"]
_ADJS = ["old", "quiet", "bright", "small", "busy", "green", "golden",
         "foggy", "warm", "distant", "crowded", "peaceful"]


def _word_hash(word: str) -> int:
    return int.from_bytes(hashlib.blake2b(word.encode(), digest_size=4).digest(),
                          "little")


def synthesize_toy_dataset(seed: int, n_albums: int = 64,
                           encoder: Optional[FrozenEncoder] = None,
                           encoder_seed: int = 0,
                           d_feat: int = 64) -> DatasetSplits:
    """Grammar-generated albums whose wording is groundable in the stub space.

    Each album gets a theme word aligned with the mean of its image
    features, and each sentence a content word aligned with its own image
    feature, so image-text similarity under the frozen encoder is learnable
    rather than pure noise. The adjective and verb are fixed functions of
    the content word: given the groundable words, the wording is
    deterministic. Deterministic in (seed, n_albums, encoder seed).
    """
    if n_albums < 4:
        raise ValueError("need n_albums >= 4 for non-empty splits")
    enc = encoder if encoder is not None else FrozenEncoder(d_feat=d_feat, seed=encoder_seed)
    rng = np.random.default_rng(seed)
    noun_feats = np.stack([enc.encode_words([w]) for w in _NOUNS])

    albums = []
    album_captions = []
    for a in range(n_albums):
        album_id = f"album{a:04d}"
        image_ids = [f"{album_id}_img{j}" for j in range(IMAGES_PER_STORY)]
        feats = np.stack([enc.encode_image(i) for i in image_ids])
        mean_dir = feats.mean(axis=0)
        theme = _NOUNS[int(np.argmax(noun_feats @ mean_dir))]
        sentences = []
        captions = []
        for j in range(IMAGES_PER_STORY):
            scores = noun_feats @ feats[j]
            content = _NOUNS[int(np.argmax(scores))]
            adj = _ADJS[_word_hash(content) % len(_ADJS)]
            verb = _VERBS[_word_hash(content + theme) % len(_VERBS)]
            sentences.append(f"the {content} {verb} by the {theme} .")
            captions.append(f"a {adj} {content} near the {theme} .")
        albums.append(SisSample(
            album_id=album_id,
            album_title=f"our {theme} story",
            album_description=f"a day around the {theme} .",
            image_ids=image_ids,
            sentences=sentences,
        ))
        album_captions.append(captions)

    order = rng.permutation(n_albums)
    n_val = max(1, round(0.1 * n_albums))
    n_test = max(1, round(0.1 * n_albums))
    val_idx = set(order[:n_val].tolist())
    test_idx = set(order[n_val:n_val + n_test].tolist())

    def bucket(i):
        if i in val_idx:
            return "val"
        if i in test_idx:
            return "test"
        return "train"

    buckets = {"train": ([], []), "val": ([], []), "test": ([], [])}
    for i, album in enumerate(albums):
        dii_list, sis_list = buckets[bucket(i)]
        for image_id, caption in zip(album.image_ids, album_captions[i]):
            dii_list.append(DiiSample(image_id=image_id, caption=caption))
        sis_list.append(album)

    train_texts = []
    for album in buckets["train"][1]:
        train_texts.extend(album.sentences)
        train_texts.append(album.album_title)
        train_texts.append(album.album_description)
    for d in buckets["train"][0]:
        train_texts.append(d.caption)

    splits = DatasetSplits(
        vocab=Vocab.from_texts(train_texts),
        train_dii=buckets["train"][0], train_sis=buckets["train"][1],
        val_dii=buckets["val"][0], val_sis=buckets["val"][1],
        test_dii=buckets["test"][0], test_sis=buckets["test"][1],
    )
    _retokenize(splits)
    splits.check_album_disjointness()
    return splits


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_dataset(splits: DatasetSplits, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for split in ("train", "val", "test"):
        with open(root / f"{split}.dii.jsonl", "w", encoding="utf-8") as fh:
            for d in splits.dii(split):
                fh.write(json.dumps({"image_id": d.image_id, "caption": d.caption},
                                    sort_keys=True) + "\n")
        with open(root / f"{split}.sis.jsonl", "w", encoding="utf-8") as fh:
            for s in splits.sis(split):
                fh.write(json.dumps({
                    "album_id": s.album_id, "album_title": s.album_title,
                    "album_description": s.album_description,
                    "image_ids": s.image_ids, "sentences": s.sentences,
                }, sort_keys=True) + "\n")


def _load_jsonl(path: Path):
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield line_no, json.loads(line)
            except json.JSONDecodeError as err:
                raise DataFormatError(f"{path}:{line_no}: invalid JSON ({err})")


def load_dataset(root) -> DatasetSplits:
    """Parse, validate, and tokenize the six split files under ``root``."""
    root = Path(root)
    parsed = {}
    for split in ("train", "val", "test"):
        dii_path = root / f"{split}.dii.jsonl"
        sis_path = root / f"{split}.sis.jsonl"
        for path in (dii_path, sis_path):
            if not path.exists():
                raise DataFormatError(f"missing split file {path}")
        dii = []
        for line_no, rec in _load_jsonl(dii_path):
            try:
                dii.append(DiiSample(image_id=rec["image_id"], caption=rec["caption"]))
            except (KeyError, TypeError) as err:
                raise DataFormatError(f"{dii_path}:{line_no}: bad DII record ({err})")
        sis = []
        for line_no, rec in _load_jsonl(sis_path):
            try:
                sis.append(SisSample(
                    album_id=rec["album_id"],
                    album_title=rec.get("album_title", ""),
                    album_description=rec.get("album_description", ""),
                    image_ids=list(rec["image_ids"]),
                    sentences=list(rec["sentences"]),
                ))
            except KeyError as err:
                raise DataFormatError(f"{sis_path}:{line_no}: missing field {err}")
            except DataFormatError as err:
                raise DataFormatError(f"{sis_path}:{line_no}: {err}")
        parsed[split] = (dii, sis)

    train_texts = []
    for album in parsed["train"][1]:
        train_texts.extend(album.sentences)
        train_texts.append(album.album_title)
        train_texts.append(album.album_description)
    for d in parsed["train"][0]:
        train_texts.append(d.caption)

    splits = DatasetSplits(
        vocab=Vocab.from_texts(train_texts),
        train_dii=parsed["train"][0], train_sis=parsed["train"][1],
        val_dii=parsed["val"][0], val_sis=parsed["val"][1],
        test_dii=parsed["test"][0], test_sis=parsed["test"][1],
    )
    _retokenize(splits)
    splits.check_album_disjointness()
    logger.info("loaded dataset from %s: %s", root, splits.counts())
    return splits
