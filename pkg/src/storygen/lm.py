"""A small GPT-style causal decoder used as the frozen language model.

Pre-layernorm blocks, learned absolute positions, weight-tied head. The
transformer stack itself is position-agnostic: callers embed tokens (or
assemble soft-prefix sequences) and add position rows for the whole input,
so a prefix + context + tokens sequence gets one consecutive position range.

The model is trained once on the toy corpus (see ``training.pretrain_lm``),
then frozen; afterwards gradients flow through its activations to soft
prefix inputs but never into its weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .autodiff import Tensor

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

ATTN_MASK_VALUE = -1e30

# embed_dim / n_layers ladders emulating the GPT-2 family's size axis
PRESETS = {
    "small": (64, 2),
    "medium": (96, 3),
    "large": (128, 4),
    "xl": (160, 5),
}


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int = 256
    embed_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_positions: int = 128

    def __post_init__(self):
        if self.vocab_size <= len(SPECIAL_TOKENS):
            raise ValueError(f"vocab_size {self.vocab_size} too small")
        if self.embed_dim % self.n_heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        for name in ("embed_dim", "n_layers", "n_heads", "max_positions"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def preset(cls, name: str, vocab_size: int = 256,
               max_positions: int = 128) -> "LmConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        dim, layers = PRESETS[name]
        return cls(vocab_size=vocab_size, embed_dim=dim, n_layers=layers,
                   n_heads=4, max_positions=max_positions)


def validate_token_sequence(token_ids: Sequence[int], vocab_size: int) -> None:
    """Enforce TokenSequence invariants: id range, PAD only as suffix, one EOS."""
    seen_pad = False
    eos_count = 0
    for pos, tid in enumerate(token_ids):
        if not 0 <= tid < vocab_size:
            raise ValueError(f"token id {tid} at position {pos} outside [0, {vocab_size})")
        if tid == PAD_ID:
            seen_pad = True
        elif seen_pad:
            raise ValueError(f"non-PAD token {tid} at position {pos} after PAD")
        if tid == EOS_ID:
            eos_count += 1
    if eos_count > 1:
        raise ValueError(f"EOS appears {eos_count} times; at most one allowed")


@dataclass
class LmOutput:
    logits: Tensor        # (T, vocab)
    final_hidden: Tensor  # (T, embed_dim); feeds the contrastive projection


def _init_params(config: LmConfig, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    d = config.embed_dim

    def gauss(*shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape).astype(np.float32),
                      requires_grad=True)

    params = {"wte": gauss(config.vocab_size, d), "wpe": gauss(config.max_positions, d)}
    for i in range(config.n_layers):
        init_block_params(params, f"h{i}.", d, rng)
    params["lnf.g"] = Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
    params["lnf.b"] = Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)
    return params


def transformer_block(x: Tensor, params: dict, prefix: str, n_heads: int,
                      mask: Optional[Tensor] = None) -> Tensor:
    """One pre-layernorm block: self-attention + MLP, residual around each.

    ``mask`` is an additive attention bias ((T, T), typically the causal
    triangle); omit it for bidirectional attention.
    """
    d = x.shape[-1]

    a = ad.add(ad.mul(ad.layernorm(x), params[prefix + "ln1.g"]), params[prefix + "ln1.b"])
    q = ad.add(ad.matmul(a, params[prefix + "attn.wq"]), params[prefix + "attn.bq"])
    # no key bias: a per-row constant shift of the attention logits is
    # removed exactly by softmax, so the parameter would be dead weight
    k = ad.matmul(a, params[prefix + "attn.wk"])
    v = ad.add(ad.matmul(a, params[prefix + "attn.wv"]), params[prefix + "attn.bv"])
    qh, kh, vh = (ad.split_heads(z, n_heads) for z in (q, k, v))
    att = ad.scale(ad.matmul(qh, ad.transpose_last2(kh)), 1.0 / np.sqrt(d // n_heads))
    if mask is not None:
        att = ad.add(att, mask)
    ctx = ad.merge_heads(ad.matmul(ad.softmax(att), vh))
    x = ad.add(x, ad.add(ad.matmul(ctx, params[prefix + "attn.wo"]),
                         params[prefix + "attn.bo"]))

    m = ad.add(ad.mul(ad.layernorm(x), params[prefix + "ln2.g"]), params[prefix + "ln2.b"])
    m = ad.gelu(ad.add(ad.matmul(m, params[prefix + "mlp.w1"]), params[prefix + "mlp.b1"]))
    m = ad.add(ad.matmul(m, params[prefix + "mlp.w2"]), params[prefix + "mlp.b2"])
    return ad.add(x, m)


def init_block_params(params: dict, prefix: str, d: int, rng) -> None:
    """Allocate one block's trainable tensors into ``params`` under ``prefix``."""
    def gauss(*shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape).astype(np.float32),
                      requires_grad=True)

    params[prefix + "ln1.g"] = Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
    params[prefix + "ln1.b"] = Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)
    for name in ("attn.wq", "attn.wk", "attn.wv", "attn.wo"):
        params[prefix + name] = gauss(d, d)
    for name in ("attn.bq", "attn.bv", "attn.bo"):
        params[prefix + name] = Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)
    params[prefix + "ln2.g"] = Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
    params[prefix + "ln2.b"] = Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)
    params[prefix + "mlp.w1"] = gauss(d, 4 * d)
    params[prefix + "mlp.b1"] = Tensor(np.zeros(4 * d, dtype=np.float32), requires_grad=True)
    params[prefix + "mlp.w2"] = gauss(4 * d, d)
    params[prefix + "mlp.b2"] = Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)


class FrozenLm:
    """Causal transformer over embedding sequences.

    Constructed trainable (for the one-off pretraining run); ``freeze()``
    afterwards. Weights are immutable after freezing, so forward passes are
    safe to run concurrently.
    """

    def __init__(self, config: LmConfig, params: dict):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: LmConfig, seed: int = 0) -> "FrozenLm":
        return cls(config, _init_params(config, seed))

    def freeze(self) -> "FrozenLm":
        for p in self.params.values():
            p.requires_grad = False
        return self

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.params.values())

    def checksum(self) -> str:
        return ckpt.state_checksum({k: v.data for k, v in self.params.items()})

    # -- embeddings --------------------------------------------------------

    def token_embedding(self, token_ids: Sequence[int]) -> Tensor:
        """Token rows only; positions are added for the assembled sequence."""
        ids = np.asarray(list(token_ids), dtype=np.int64)
        validate_token_sequence(ids, self.config.vocab_size)
        return ad.embedding(self.params["wte"], ids)

    def position_embedding(self, offset: int, length: int) -> Tensor:
        if offset + length > self.config.max_positions:
            raise ValueError(
                f"positions [{offset}, {offset + length}) exceed max_positions "
                f"{self.config.max_positions}")
        return ad.embedding(self.params["wpe"], np.arange(offset, offset + length))

    def embed_tokens(self, token_ids: Sequence[int], position_offset: int = 0) -> Tensor:
        """Token embedding + learned absolute position embedding per token."""
        tok = self.token_embedding(token_ids)
        pos = self.position_embedding(position_offset, tok.shape[0])
        return ad.add(tok, pos)

    # -- transformer stack --------------------------------------------------

    def forward(self, input_vectors: Tensor) -> LmOutput:
        """Run the causal stack over a (T, embed_dim) embedding sequence.

        Inputs may mix soft prefix vectors and token embeddings; logits at
        position t depend only on positions <= t.
        """
        T, d = input_vectors.shape
        if d != self.config.embed_dim:
            raise ad.ShapeError(
                f"forward: input dim {d} != embed_dim {self.config.embed_dim}")
        if T > self.config.max_positions:
            raise ValueError(
                f"sequence length {T} exceeds max_positions {self.config.max_positions}")
        mask = Tensor(np.triu(np.full((T, T), ATTN_MASK_VALUE, dtype=np.float32), k=1))
        x = input_vectors
        for i in range(self.config.n_layers):
            x = transformer_block(x, self.params, f"h{i}.", self.config.n_heads, mask)
        hidden = ad.add(ad.mul(ad.layernorm(x), self.params["lnf.g"]), self.params["lnf.b"])
        logits = ad.matmul(hidden, ad.transpose_last2(self.params["wte"]))
        return LmOutput(logits=logits, final_hidden=hidden)

    def log_probs(self, logits: Tensor) -> Tensor:
        """Per-position normalized log-distribution over the vocabulary."""
        if not np.all(np.isfinite(logits.data)):
            raise ValueError("log_probs: logits contain non-finite values")
        return ad.log_softmax(logits)

    def perplexity(self, token_ids: Sequence[int]) -> float:
        """exp of the mean next-token NLL over the realized sequence."""
        ids = list(token_ids)
        if len(ids) < 2:
            raise ValueError(f"perplexity needs length >= 2, got {len(ids)}")
        with ad.no_grad():
            out = self.forward(self.embed_tokens(ids))
            lp = self.log_probs(out.logits).data.astype(np.float64)
        targets = np.asarray(ids[1:])
        picked = lp[np.arange(len(ids) - 1), targets]
        return float(np.exp(-picked.mean()))

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        state = {f"lm.{k}": v.data for k, v in self.params.items()}
        state["meta.vocab_size"] = np.float32(self.config.vocab_size)
        state["meta.embed_dim"] = np.float32(self.config.embed_dim)
        state["meta.n_layers"] = np.float32(self.config.n_layers)
        state["meta.n_heads"] = np.float32(self.config.n_heads)
        state["meta.max_positions"] = np.float32(self.config.max_positions)
        ckpt.save_tensors(path, state)

    @classmethod
    def load(cls, path, frozen: bool = True) -> "FrozenLm":
        state = ckpt.load_tensors(path)
        try:
            config = LmConfig(
                vocab_size=int(ckpt.scalar(state["meta.vocab_size"])),
                embed_dim=int(ckpt.scalar(state["meta.embed_dim"])),
                n_layers=int(ckpt.scalar(state["meta.n_layers"])),
                n_heads=int(ckpt.scalar(state["meta.n_heads"])),
                max_positions=int(ckpt.scalar(state["meta.max_positions"])),
            )
        except KeyError as missing:
            raise ckpt.CheckpointError(f"{path}: missing metadata record {missing}")
        params = {}
        for key, value in state.items():
            if key.startswith("lm."):
                params[key[3:]] = Tensor(value, requires_grad=not frozen)
        expected = set(_init_params(config, seed=0))
        if set(params) != expected:
            raise ckpt.CheckpointError(
                f"{path}: parameter names do not match config "
                f"(missing {sorted(expected - set(params))[:3]}...)")
        return cls(config, params)
