"""Caption tokenizer and a small bidirectional transformer text encoder.

The tokenizer is deterministic: lowercase, split at whitespace and
punctuation boundaries, vocabulary ordered by (-count, token). Reserved
ids: PAD=0, CLS=1, UNK=2. The encoder reads the CLS row of the final
layer; PAD positions are masked out of every attention softmax, so
appending padding never changes an embedding.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .counters import COUNTERS
from .errors import ConfigError, ContractError, ShapeError
from .nn import (AttentionParams, MlpParams, NormParams, init_attention,
                 init_mlp, init_norm, mlp_forward, multi_head_attention)
from .tensor import SeededRng, Tensor

PAD_ID = 0
CLS_ID = 1
UNK_ID = 2
N_RESERVED = 3

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class Vocabulary:
    """Bijective token <-> id map over non-reserved tokens; ids 0..2 reserved."""

    def __init__(self, tokens: list[str]):
        if len(set(tokens)) != len(tokens):
            raise ContractError("vocabulary tokens must be unique")
        self.tokens = list(tokens)
        self._ids = {tok: i + N_RESERVED for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return N_RESERVED + len(self.tokens)

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def save(self, path) -> None:
        """One token per line; line number = id - 3."""
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def build_vocab(corpus: list[str], min_count: int = 1) -> Vocabulary:
    """Count tokens over the corpus and keep those with count >= min_count,
    ordered by (-count, token) for a stable id assignment."""
    if not corpus:
        raise ContractError("build_vocab: empty corpus")
    counts: dict[str, int] = {}
    for caption in corpus:
        for tok in split_words(caption):
            counts[tok] = counts.get(tok, 0) + 1
    kept = sorted((tok for tok, c in counts.items() if c >= min_count),
                  key=lambda tok: (-counts[tok], tok))
    return Vocabulary(kept)


@dataclass
class TokenSequence:
    ids: list[int]

    def __post_init__(self):
        if not self.ids or self.ids[0] != CLS_ID:
            raise ContractError("token sequence must start with CLS")

    def __len__(self) -> int:
        return len(self.ids)


def tokenize(text: str, vocab: Vocabulary, max_len: int = 32) -> TokenSequence:
    """CLS + token ids (UNK for out-of-vocabulary), truncated to max_len."""
    ids = [CLS_ID] + [vocab.id_of(tok) for tok in split_words(text)]
    return TokenSequence(ids[:max_len])


# ---------------------------------------------------------------------------
# Encoder


@dataclass
class TextEncoderConfig:
    vocab_size: int
    dim: int = 64
    heads: int = 4
    blocks: int = 2
    max_len: int = 32
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by {self.heads} heads")
        if self.vocab_size < N_RESERVED:
            raise ConfigError("vocab_size must include the reserved ids")

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.dim * self.mlp_ratio))


@dataclass
class TextBlockParams:
    attn: AttentionParams
    mlp: MlpParams
    norm_attn: NormParams
    norm_mlp: NormParams

    def named(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.attn.named(f"{prefix}.attn"))
        out.update(self.mlp.named(f"{prefix}.mlp"))
        out.update(self.norm_attn.named(f"{prefix}.norm_attn"))
        out.update(self.norm_mlp.named(f"{prefix}.norm_mlp"))
        return out


@dataclass
class TextEncoderParams:
    token_table: Tensor   # [vocab, D]
    pos_table: Tensor     # [max_len, D]
    blocks: list[TextBlockParams] = field(default_factory=list)
    norm_out: NormParams = None

    def named(self) -> dict[str, Tensor]:
        out = {"text.tokens": self.token_table, "text.positions": self.pos_table}
        for i, blk in enumerate(self.blocks):
            out.update(blk.named(f"text.block{i}"))
        out.update(self.norm_out.named("text.norm_out"))
        return out


def init_text_params(config: TextEncoderConfig, rng: SeededRng) -> TextEncoderParams:
    d = config.dim

    def blk():
        return TextBlockParams(
            attn=init_attention(d, rng),
            mlp=init_mlp(d, config.mlp_hidden, rng),
            norm_attn=init_norm(d),
            norm_mlp=init_norm(d),
        )

    return TextEncoderParams(
        token_table=Tensor(rng.trunc_normal((config.vocab_size, d)), requires_grad=True),
        pos_table=Tensor(rng.trunc_normal((config.max_len, d)), requires_grad=True),
        blocks=[blk() for _ in range(config.blocks)],
        norm_out=init_norm(d),
    )


def pad_batch(seqs: list[TokenSequence], max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Stack sequences into an id matrix plus a 1/0 key mask."""
    width = max(len(s) for s in seqs)
    if width > max_len:
        raise ShapeError(f"sequence of length {width} exceeds max_len {max_len}")
    ids = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), width))
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s.ids
        mask[i, :len(s)] = 1.0
    return ids, mask


def encode_texts(seqs: list[TokenSequence], params: TextEncoderParams,
                 config: TextEncoderConfig) -> Tensor:
    """Batch of token sequences -> [B, D] CLS embeddings."""
    ids, mask = pad_batch(seqs, config.max_len)
    b, width = ids.shape
    x = T.embedding(params.token_table, ids)              # [B, W, D]
    pos = T.expand(T.reshape(T.narrow(params.pos_table, 0, 0, width),
                             (1, width, config.dim)), 0, b)
    x = T.add(x, pos)
    for blk in params.blocks:
        h = T.layer_norm(x, blk.norm_attn.gamma, blk.norm_attn.beta)
        x = T.add(x, multi_head_attention(h, blk.attn, config.heads, key_mask=mask))
        h = T.layer_norm(x, blk.norm_mlp.gamma, blk.norm_mlp.beta)
        x = T.add(x, mlp_forward(h, blk.mlp))
    x = T.layer_norm(x, params.norm_out.gamma, params.norm_out.beta)
    COUNTERS.text_encodes += b
    return T.reshape(T.narrow(x, 1, 0, 1), (b, config.dim))


def encode_text(seq: TokenSequence, params: TextEncoderParams,
                config: TextEncoderConfig) -> Tensor:
    """Single sequence -> [D] embedding."""
    out = encode_texts([seq], params, config)
    return T.reshape(out, (config.dim,))
