"""Tokenizer, frozen text encoder, and the trainable soft-prompt mechanism.

The encoder is a small frozen network: token embedding lookup plus positional
offsets, followed by two position-wise dense layers with tanh. Soft prompts
are extra embedding rows appended after the real tokens before encoding; they
are the only trainable object in the whole pipeline.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np

from .numerics import NumericsError, Rng, require_finite

N_EMBED = 32
L_MAX = 20
SOFT_RESERVE = 4

BOS, EOS, PAD = 0, 1, 2
RESERVED_WORDS = ("<bos>", "<eos>", "<pad>")


class Category(Enum):
    """Unsafe concept categories; order fixes the combined-guard row order."""

    A = 0
    B = 1
    C = 2
    D = 3


CATEGORIES = (Category.A, Category.B, Category.C, Category.D)
COMBINED_CATEGORY_ID = 255


class TokenizeError(ValueError):
    """Unknown word or overlength prompt."""


@dataclass(frozen=True)
class Vocabulary:
    """Closed toy vocabulary with dense ids; reserved tokens sit at 0, 1, 2."""

    words: tuple[str, ...]

    def __post_init__(self):
        if self.words[:3] != RESERVED_WORDS:
            raise ValueError("vocabulary must start with the reserved tokens")
        if len(set(self.words)) != len(self.words):
            raise ValueError("duplicate words in vocabulary")

    @property
    def size(self) -> int:
        return len(self.words)

    def id(self, word: str) -> int:
        try:
            return self.words.index(word)
        except ValueError:
            raise TokenizeError(f"unknown word {word!r}") from None

    def word(self, token_id: int) -> str:
        return self.words[token_id]

    def content_hash(self) -> str:
        return hashlib.sha256("\n".join(self.words).encode("utf-8")).hexdigest()


def build_vocabulary(content_words: Sequence[str]) -> Vocabulary:
    return Vocabulary(words=RESERVED_WORDS + tuple(content_words))


def tokenize(prompt: str, vocab: Vocabulary) -> list[int]:
    """BOS + word ids + EOS; leaves room for SOFT_RESERVE appended soft tokens."""
    words = prompt.split()
    ids = [BOS] + [vocab.id(w) for w in words] + [EOS]
    if len(ids) > L_MAX - SOFT_RESERVE:
        raise TokenizeError(f"prompt too long: {len(ids)} tokens > {L_MAX - SOFT_RESERVE}")
    return ids


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    return " ".join(vocab.word(i) for i in ids if i not in (BOS, EOS, PAD))


@dataclass
class FrozenEncoder:
    """Embedding table, positional offsets, and two dense tanh layers.

    Weights are trained once during base-model pretraining and then frozen;
    soft-prompt training never writes to them.
    """

    embedding: np.ndarray  # [V, N]
    pos: np.ndarray  # [L_MAX, N]
    w1: np.ndarray  # [N, N]
    b1: np.ndarray  # [N]
    w2: np.ndarray  # [N, N]
    b2: np.ndarray  # [N]

    @property
    def n_embed(self) -> int:
        return self.embedding.shape[1]

    def weight_arrays(self) -> dict[str, np.ndarray]:
        """Named weights in checkpoint order."""
        return {
            "enc.embedding": self.embedding,
            "enc.pos": self.pos,
            "enc.w1": self.w1,
            "enc.b1": self.b1,
            "enc.w2": self.w2,
            "enc.b2": self.b2,
        }

    def astype(self, dtype) -> "FrozenEncoder":
        return FrozenEncoder(
            **{k.split(".", 1)[1]: v.astype(dtype) for k, v in self.weight_arrays().items()}
        )


def init_encoder(rng: Rng, vocab_size: int, n_embed: int = N_EMBED) -> FrozenEncoder:
    scale = 1.0 / np.sqrt(n_embed)
    return FrozenEncoder(
        embedding=rng.normal((vocab_size, n_embed)) * 0.5,
        pos=rng.normal((L_MAX, n_embed)) * 0.1,
        w1=rng.normal((n_embed, n_embed)) * scale,
        b1=np.zeros(n_embed, dtype=np.float32),
        w2=rng.normal((n_embed, n_embed)) * scale,
        b2=np.zeros(n_embed, dtype=np.float32),
    )


@dataclass
class SoftPromptEmbedding:
    """Trainable pseudo-token vectors for one category, or the combined guard.

    ``category`` is None for the combined guard; ``vectors`` is [k, N] with
    k=1 per individual category by default and k=4 for the combined guard.
    """

    category: Category | None
    vectors: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors))

    @property
    def k(self) -> int:
        return self.vectors.shape[0]

    @property
    def n(self) -> int:
        return self.vectors.shape[1]


def init_soft_prompt(
    encoder: FrozenEncoder,
    category: Category,
    rng: Rng,
    warm_start_token: int,
    k: int = 1,
    noise_scale: float = 0.01,
) -> SoftPromptEmbedding:
    """Warm start from a neutral filler word's embedding row plus small noise."""
    base = encoder.embedding[warm_start_token]
    vectors = np.tile(base, (k, 1)) + noise_scale * rng.normal((k, encoder.n_embed))
    return SoftPromptEmbedding(category=category, vectors=vectors.astype(np.float32))


def cap_norm(vectors: np.ndarray, cap: float = 10.0) -> np.ndarray:
    """Scale any row with L2 norm above ``cap`` back onto the cap sphere."""
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    factor = np.where(norms > cap, cap / np.maximum(norms, 1e-12), 1.0)
    return (vectors * factor).astype(vectors.dtype)


@dataclass
class PromptEncoding:
    """Token ids, the embedding matrix fed to the encoder, and hidden states."""

    token_ids: tuple[int, ...]
    embed: np.ndarray  # [L, N] with soft rows at the end
    n_soft: int
    hidden: np.ndarray | None = None

    @property
    def length(self) -> int:
        return self.embed.shape[0]


def embed_and_append(
    ids: Sequence[int],
    soft: Sequence[SoftPromptEmbedding],
    encoder: FrozenEncoder,
) -> PromptEncoding:
    """Embedding lookup with soft-prompt rows appended after the real tokens."""
    rows = [encoder.embedding[list(ids)]]
    n_soft = 0
    for emb in soft:
        if emb.n != encoder.n_embed:
            raise NumericsError(f"soft vector dim {emb.n} != encoder dim {encoder.n_embed}")
        rows.append(emb.vectors)
        n_soft += emb.k
    matrix = np.concatenate(rows, axis=0)
    if matrix.shape[0] > L_MAX:
        raise TokenizeError(f"encoding length {matrix.shape[0]} exceeds L_MAX={L_MAX}")
    return PromptEncoding(token_ids=tuple(int(i) for i in ids), embed=matrix, n_soft=n_soft)


def encode_hidden(embed: np.ndarray, encoder: FrozenEncoder):
    """Frozen forward pass; returns hidden states and the backprop cache."""
    L = embed.shape[0]
    h0 = embed + encoder.pos[:L]
    a1 = h0 @ encoder.w1 + encoder.b1
    h1 = np.tanh(a1)
    a2 = h1 @ encoder.w2 + encoder.b2
    h2 = np.tanh(a2)
    cache = (h0, h1, h2)
    return h2, cache


def encode_backward(
    d_hidden: np.ndarray,
    cache,
    encoder: FrozenEncoder,
    with_weight_grads: bool = False,
):
    """Gradient of the encoder forward pass w.r.t. the embedding rows.

    Weight gradients are only needed during base-model pretraining; the
    soft-prompt trainer discards everything except the soft rows of d_embed.
    """
    h0, h1, h2 = cache
    da2 = d_hidden * (1.0 - h2 * h2)
    dh1 = da2 @ encoder.w2.T
    da1 = dh1 * (1.0 - h1 * h1)
    d_embed = da1 @ encoder.w1.T
    if not with_weight_grads:
        return d_embed, None
    grads = {
        "enc.w2": h1.T @ da2,
        "enc.b2": da2.sum(axis=0),
        "enc.w1": h0.T @ da1,
        "enc.b1": da1.sum(axis=0),
        "enc.pos.rows": d_embed,  # same gradient as the embedding rows, by position
    }
    return d_embed, grads


def encode(encoding: PromptEncoding, encoder: FrozenEncoder) -> PromptEncoding:
    hidden, _ = encode_hidden(encoding.embed, encoder)
    return replace(encoding, hidden=require_finite(hidden, "hidden states"))


def combine_embeddings(parts: Sequence[SoftPromptEmbedding]) -> SoftPromptEmbedding:
    """Concatenate the four per-category guards in fixed A, B, C, D order."""
    by_cat = {}
    for p in parts:
        if p.category is None:
            raise ValueError("cannot combine an already-combined guard")
        if p.category in by_cat:
            raise ValueError(f"duplicate category {p.category.name}")
        by_cat[p.category] = p
    missing = [c.name for c in CATEGORIES if c not in by_cat]
    if missing:
        raise ValueError(f"missing categories: {missing}")
    dims = {by_cat[c].n for c in CATEGORIES}
    if len(dims) != 1:
        raise ValueError(f"embedding dims disagree: {sorted(dims)}")
    vectors = np.concatenate([by_cat[c].vectors for c in CATEGORIES], axis=0)
    metadata = {"parts": {c.name: dict(by_cat[c].metadata) for c in CATEGORIES}}
    return SoftPromptEmbedding(category=None, vectors=vectors, metadata=metadata)


def split_combined(combined: SoftPromptEmbedding) -> list[SoftPromptEmbedding]:
    """Inverse of combine_embeddings for a k=4 combined guard."""
    if combined.category is not None or combined.k != len(CATEGORIES):
        raise ValueError("not a combined 4-row guard")
    parts = []
    for i, cat in enumerate(CATEGORIES):
        meta = combined.metadata.get("parts", {}).get(cat.name, {})
        parts.append(
            SoftPromptEmbedding(category=cat, vectors=combined.vectors[i : i + 1].copy(),
                                metadata=dict(meta))
        )
    return parts


MAGIC_PGE = b"PGE1"


def save_embedding(path, emb: SoftPromptEmbedding) -> None:
    """Bit-exact PGE1 format: magic, version, category id, k, N, f32 data, JSON."""
    cat_id = COMBINED_CATEGORY_ID if emb.category is None else emb.category.value
    meta = json.dumps(emb.metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    data = emb.vectors.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC_PGE)
        fh.write(struct.pack("<BB", 1, cat_id))
        fh.write(struct.pack("<II", emb.k, emb.n))
        fh.write(data)
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)


def load_embedding(path) -> SoftPromptEmbedding:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC_PGE:
            raise ValueError(f"bad magic {magic!r}, expected PGE1")
        version, cat_id = struct.unpack("<BB", fh.read(2))
        if version != 1:
            raise ValueError(f"unsupported PGE version {version}")
        k, n = struct.unpack("<II", fh.read(8))
        vectors = np.frombuffer(fh.read(4 * k * n), dtype="<f4").reshape(k, n).copy()
        (meta_len,) = struct.unpack("<I", fh.read(4))
        metadata = json.loads(fh.read(meta_len).decode("utf-8"))
    category = None if cat_id == COMBINED_CATEGORY_ID else Category(cat_id)
    return SoftPromptEmbedding(category=category, vectors=vectors, metadata=metadata)
