"""Trainable mapping network: frozen features -> soft prefix vectors.

The only trainable component of the pipeline. A learned input projection
expands the feature vector (or the fused image+context pair) into a fixed
number of slots; a small bidirectional transformer trunk lets a set of
learnable query vectors attend over those slots, and the query outputs are
the prefix. Also owns the learnable BOS/EOS rows used when context is
appended after the prefix, and the linear projection head feeding the
contrastive loss.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .autodiff import Tensor
from .lm import FrozenLm, init_block_params, transformer_block

logger = logging.getLogger(__name__)

LAYOUT_PREFIX_ONLY = "prefix_only"
LAYOUT_PREFIX_THEN_CONTEXT = "prefix_then_context"
LAYOUT_CONTEXT_FUSED = "context_fused"


@dataclass(frozen=True)
class MappingConfig:
    d_feat: int = 64
    embed_dim: int = 64
    prefix_len: int = 20      # number of soft prefix vectors produced
    input_slots: int = 20     # slots the input projection expands into
    n_layers: int = 2         # desk default; --paper-shape selects 8/8
    n_heads: int = 4

    def __post_init__(self):
        for name in ("d_feat", "embed_dim", "prefix_len", "input_slots",
                     "n_layers", "n_heads"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.embed_dim % self.n_heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")

    @classmethod
    def paper_shape(cls, d_feat: int = 64, embed_dim: int = 64,
                    prefix_len: int = 20, input_slots: int = 20) -> "MappingConfig":
        if embed_dim % 8:
            raise ValueError(f"embed_dim {embed_dim} not divisible by 8 heads")
        return cls(d_feat=d_feat, embed_dim=embed_dim, prefix_len=prefix_len,
                   input_slots=input_slots, n_layers=8, n_heads=8)


@dataclass
class PrefixSequence:
    """Soft prompt rows for the LM: the k-vector prefix, possibly extended."""

    vectors: Tensor
    layout: str
    prefix_len: int

    def __post_init__(self):
        if self.vectors.shape[0] < self.prefix_len:
            raise ValueError(
                f"prefix part needs {self.prefix_len} rows, got {self.vectors.shape[0]}")


class MappingNetwork:
    def __init__(self, config: MappingConfig, params: dict):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: MappingConfig, seed: int = 0) -> "MappingNetwork":
        rng = np.random.default_rng(seed)
        d, df = config.embed_dim, config.d_feat
        slots = config.input_slots

        def gauss(rgen, *shape):
            return Tensor(rgen.normal(0.0, 0.02, size=shape).astype(np.float32),
                          requires_grad=True)

        params = {
            "proj1.w": gauss(rng, df, slots * d),
            "proj1.b": Tensor(np.zeros(slots * d, dtype=np.float32), requires_grad=True),
            "proj2.w": gauss(rng, 2 * df, slots * d),
            "proj2.b": Tensor(np.zeros(slots * d, dtype=np.float32), requires_grad=True),
            "queries": gauss(rng, config.prefix_len, d),
            "text_proj.w": gauss(rng, d, df),
            "text_proj.b": Tensor(np.zeros(df, dtype=np.float32), requires_grad=True),
        }
        for i in range(config.n_layers):
            init_block_params(params, f"t{i}.", d, rng)
        params["lnf.g"] = Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
        params["lnf.b"] = Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)
        # distinct fixed streams so the two special rows never start equal
        params["bos_text"] = gauss(np.random.default_rng([seed, 101]), d)
        params["eos_text"] = gauss(np.random.default_rng([seed, 202]), d)
        return cls(config, params)

    def trainable_parameters(self) -> dict:
        return dict(self.params)

    def checksum(self) -> str:
        return ckpt.state_checksum({k: v.data for k, v in self.params.items()})

    # -- prefix construction -------------------------------------------------

    def _trunk(self, slot_rows: Tensor) -> Tensor:
        x = ad.concat_rows([slot_rows, self.params["queries"]])
        for i in range(self.config.n_layers):
            x = transformer_block(x, self.params, f"t{i}.", self.config.n_heads)
        x = ad.add(ad.mul(ad.layernorm(x), self.params["lnf.g"]), self.params["lnf.b"])
        lo = self.config.input_slots
        return ad.slice_rows(x, lo, lo + self.config.prefix_len)

    def _check_feature(self, v: np.ndarray, name: str) -> np.ndarray:
        v = np.asarray(v, dtype=np.float32)
        if v.shape != (self.config.d_feat,):
            raise ad.ShapeError(
                f"{name}: feature dimension {v.shape} != ({self.config.d_feat},)")
        return v

    def map_prefix(self, v: np.ndarray) -> PrefixSequence:
        """Image feature -> k soft prefix vectors in the LM embedding space."""
        v = self._check_feature(v, "map_prefix")
        flat = ad.add(ad.matmul(Tensor(v.reshape(1, -1)), self.params["proj1.w"]),
                      self.params["proj1.b"])
        slots = ad.reshape(flat, (self.config.input_slots, self.config.embed_dim))
        return PrefixSequence(self._trunk(slots), LAYOUT_PREFIX_ONLY,
                              self.config.prefix_len)

    def map_prefix_with_context(self, v: np.ndarray, c: np.ndarray) -> PrefixSequence:
        """Image + context features fused before the trunk (concat-before)."""
        v = self._check_feature(v, "map_prefix_with_context(v)")
        c = self._check_feature(c, "map_prefix_with_context(c)")
        fused = np.concatenate([v, c]).reshape(1, -1)
        flat = ad.add(ad.matmul(Tensor(fused), self.params["proj2.w"]),
                      self.params["proj2.b"])
        slots = ad.reshape(flat, (self.config.input_slots, self.config.embed_dim))
        return PrefixSequence(self._trunk(slots), LAYOUT_CONTEXT_FUSED,
                              self.config.prefix_len)

    # -- context-after path ---------------------------------------------------

    def build_context_after(self, context_tokens: Sequence[int], lm: FrozenLm,
                            max_context_tokens: Optional[int] = None) -> Tensor:
        """[BOS_text; LM token embeddings of the context; EOS_text].

        Overlong context is truncated from the left (most recent kept) and
        the truncation is recorded in the run log.
        """
        tokens = list(context_tokens)
        if max_context_tokens is not None and len(tokens) > max_context_tokens:
            logger.info("context truncated from %d to %d tokens (keeping most recent)",
                        len(tokens), max_context_tokens)
            tokens = tokens[len(tokens) - max_context_tokens:]
        d = self.config.embed_dim
        bos = ad.reshape(self.params["bos_text"], (1, d))
        eos = ad.reshape(self.params["eos_text"], (1, d))
        if tokens:
            return ad.concat_rows([bos, lm.token_embedding(tokens), eos])
        return ad.concat_rows([bos, eos])

    def attach_context_after(self, prefix: PrefixSequence, ctext: Tensor) -> PrefixSequence:
        if prefix.layout != LAYOUT_PREFIX_ONLY:
            raise ValueError(f"cannot append context to layout {prefix.layout!r}")
        return PrefixSequence(ad.concat_rows([prefix.vectors, ctext]),
                              LAYOUT_PREFIX_THEN_CONTEXT, prefix.prefix_len)

    # -- contrastive head ------------------------------------------------------

    def project_text(self, final_hidden: Tensor, target_mask: np.ndarray) -> Tensor:
        """Masked mean of decoder hidden states -> d_feat, unit-normalized."""
        mask = np.asarray(target_mask, dtype=bool)
        n = int(mask.sum())
        if n == 0:
            raise ValueError("project_text: empty target mask")
        if mask.shape[0] != final_hidden.shape[0]:
            raise ad.ShapeError(
                f"project_text: mask length {mask.shape[0]} != hidden rows "
                f"{final_hidden.shape[0]}")
        weights = Tensor((mask.astype(np.float32) / n).reshape(1, -1))
        pooled = ad.matmul(weights, final_hidden)
        projected = ad.add(ad.matmul(pooled, self.params["text_proj.w"]),
                           self.params["text_proj.b"])
        return ad.reshape(ad.l2_normalize(projected), (self.config.d_feat,))

    # -- persistence ------------------------------------------------------------

    def save(self, path) -> None:
        state = {f"mapping.{k}": v.data for k, v in self.params.items()}
        for name in ("d_feat", "embed_dim", "prefix_len", "input_slots",
                     "n_layers", "n_heads"):
            state[f"meta.{name}"] = np.float32(getattr(self.config, name))
        ckpt.save_tensors(path, state)

    @classmethod
    def load(cls, path) -> "MappingNetwork":
        state = ckpt.load_tensors(path)
        try:
            config = MappingConfig(**{
                name: int(ckpt.scalar(state[f"meta.{name}"]))
                for name in ("d_feat", "embed_dim", "prefix_len", "input_slots",
                             "n_layers", "n_heads")})
        except KeyError as missing:
            raise ckpt.CheckpointError(f"{path}: missing metadata record {missing}")
        params = {k[8:]: Tensor(v, requires_grad=True)
                  for k, v in state.items() if k.startswith("mapping.")}
        expected = set(cls.init(config, seed=0).params)
        if set(params) != expected:
            raise ckpt.CheckpointError(f"{path}: parameter set does not match config")
        return cls(config, params)


@dataclass
class AssembledInput:
    embeddings: Tensor        # (T, embed_dim), positions already added
    target_mask: np.ndarray   # bool (T,), True exactly at target positions
    layout: str


def assemble_input(prefix: PrefixSequence, context_after: Optional[Tensor],
                   targets: Sequence[int], lm: FrozenLm) -> AssembledInput:
    """Concatenate prefix, optional context block, and target embeddings.

    Position rows are added across the whole assembled sequence so the
    target tokens continue the prefix's position range.
    """
    targets = list(targets)
    if not targets:
        raise ValueError("assemble_input: empty target sequence")
    parts = [prefix.vectors]
    layout = prefix.layout
    if context_after is not None:
        if prefix.layout != LAYOUT_PREFIX_ONLY:
            raise ValueError(f"context_after conflicts with layout {prefix.layout!r}")
        parts.append(context_after)
        layout = LAYOUT_PREFIX_THEN_CONTEXT
    parts.append(lm.token_embedding(targets))
    x = ad.concat_rows(parts)
    total = x.shape[0]
    if total > lm.config.max_positions:
        raise ValueError(
            f"assembled length {total} (prefix {parts[0].shape[0]}, "
            f"context {0 if context_after is None else context_after.shape[0]}, "
            f"targets {len(targets)}) exceeds max_positions {lm.config.max_positions}")
    x = ad.add(x, lm.position_embedding(0, total))
    mask = np.zeros(total, dtype=bool)
    mask[total - len(targets):] = True
    return AssembledInput(embeddings=x, target_mask=mask, layout=layout)
