"""Nullable text prompts.

A present prompt is embedded by a text encoder; an absent one (or one dropped
during training) is replaced by a learnable null vector. Both cases go through
the same blend, ``z = a * T(text) + (1 - a) * z_null`` with ``a = present * keep``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
from torch import nn

NEUTRAL_PROMPT = "breast ultrasound image"


class PromptEncodingError(RuntimeError):
    pass


def normalize_prompt(text: str | None) -> str | None:
    """Whitespace-only and empty strings count as absent."""
    if text is None:
        return None
    text = " ".join(text.split())
    return text or None


def presence_mask(prompt: str | None) -> int:
    return 0 if normalize_prompt(prompt) is None else 1


@dataclass(frozen=True)
class PromptPair:
    global_: str | None = None
    local: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "global_", normalize_prompt(self.global_))
        object.__setattr__(self, "local", normalize_prompt(self.local))

    @property
    def regime(self) -> str:
        return {(1, 1): "both", (1, 0): "global_only", (0, 1): "local_only", (0, 0): "neither"}[
            (presence_mask(self.global_), presence_mask(self.local))
        ]


class TextEncoder(Protocol):
    dim: int

    def encode(self, text: str) -> np.ndarray: ...


class HashTextEncoder:
    """Bag-of-tokens encoder: each whitespace token hashes to a seeded Gaussian
    direction; the token vectors are averaged and L2-normalized.

    Deterministic across processes (uses blake2b, not Python's salted ``hash``).
    """

    def __init__(self, dim: int = 64, seed: int = 0):
        if dim < 1:
            raise ValueError(f"dim must be >= 1, got {dim}")
        self.dim = dim
        self.seed = seed
        self._token_vector = lru_cache(maxsize=4096)(self._make_token_vector)

    def _make_token_vector(self, token: str) -> np.ndarray:
        digest = hashlib.blake2b(f"{self.seed}\x00{token}".encode("utf-8"), digest_size=8).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        v = rng.standard_normal(self.dim)
        return v / np.linalg.norm(v)

    def encode(self, text: str) -> np.ndarray:
        text = normalize_prompt(text)
        if text is None:
            raise PromptEncodingError("cannot encode an absent prompt; absence is handled by the null embedding")
        tokens = text.lower().split()
        v = np.mean([self._token_vector(t) for t in tokens], axis=0)
        norm = np.linalg.norm(v)
        if norm == 0:
            raise PromptEncodingError(f"prompt {text!r} encodes to the zero vector")
        return v / norm


class EmbeddingTableEncoder:
    """Looks prompts up in a precomputed sidecar table (JSON object ``text -> vector``).

    Used to plug in embeddings from a pretrained text tower computed offline.
    """

    def __init__(self, table: dict[str, Sequence[float]]):
        if not table:
            raise ValueError("embedding table is empty")
        self.table = {normalize_prompt(k): np.asarray(v, dtype=np.float64) for k, v in table.items()}
        dims = {v.shape for v in self.table.values()}
        if len(dims) != 1:
            raise ValueError(f"embedding table has inconsistent vector shapes {sorted(dims)}")
        (shape,) = dims
        self.dim = int(shape[0])

    @classmethod
    def from_file(cls, path: str | Path) -> "EmbeddingTableEncoder":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    def encode(self, text: str) -> np.ndarray:
        key = normalize_prompt(text)
        if key is None:
            raise PromptEncodingError("cannot encode an absent prompt")
        try:
            return self.table[key]
        except KeyError:
            raise PromptEncodingError(f"prompt {text!r} not found in embedding table") from None


def build_text_encoder(kind: str = "hash", dim: int = 64, seed: int = 0, path: str | None = None) -> TextEncoder:
    if kind == "hash":
        return HashTextEncoder(dim, seed)
    if kind == "external":
        if not path:
            raise ValueError("text_encoder 'external' needs an embeddings file")
        enc = EmbeddingTableEncoder.from_file(path)
        if enc.dim != dim:
            raise ValueError(f"embedding table dim {enc.dim} != configured text_dim {dim}")
        return enc
    raise ValueError(f"unknown text encoder {kind!r}")


@dataclass
class EncodedPrompts:
    z_g: torch.Tensor  # (B, d)
    z_l: torch.Tensor  # (B, d)
    m_g: torch.Tensor  # (B,) presence
    m_l: torch.Tensor
    d_g: torch.Tensor  # (B,) dropout keep draws
    d_l: torch.Tensor
    alpha_g: torch.Tensor  # m * d
    alpha_l: torch.Tensor


class NullableEmbeddings(nn.Module):
    """Learnable null vectors for the global and local prompt slots.

    Args:
        encoder: text encoder T; kept fixed.
        p: prompt dropout rate applied in train mode.
        use_text: when False, text is never encoded and both slots always use
            their nulls (the zero-text ablation).
        null_noise: std of the Gaussian offset that separates the two nulls at init.
    """

    def __init__(self, encoder: TextEncoder, p: float = 0.3, use_text: bool = True,
                 null_noise: float = 0.01, seed: int = 0):
        super().__init__()
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"prompt dropout p must lie in [0, 1], got {p}")
        self.encoder = encoder
        self.dim = encoder.dim
        self.p = p
        self.use_text = use_text

        neutral = torch.from_numpy(np.asarray(self._neutral_vector(encoder), dtype=np.float64)).float()
        g = torch.Generator().manual_seed(seed)
        self.null_global = nn.Parameter(neutral + null_noise * torch.randn(self.dim, generator=g))
        self.null_local = nn.Parameter(neutral + null_noise * torch.randn(self.dim, generator=g))

    @staticmethod
    def _neutral_vector(encoder: TextEncoder) -> np.ndarray:
        try:
            return encoder.encode(NEUTRAL_PROMPT)
        except PromptEncodingError:
            # tables built offline may not contain the neutral phrase
            return np.zeros(encoder.dim)

    def encode_texts(self, texts: Sequence[str | None]) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (T(texts) with zeros where absent, presence mask)."""
        dtype, device = self.null_global.dtype, self.null_global.device
        out = torch.zeros(len(texts), self.dim, dtype=dtype, device=device)
        present = torch.zeros(len(texts), dtype=dtype, device=device)
        for i, text in enumerate(texts):
            text = normalize_prompt(text)
            if text is None or not self.use_text:
                continue
            try:
                vec = self.encoder.encode(text)
            except Exception as exc:
                raise PromptEncodingError(f"text encoder failed on prompt {text!r}: {exc}") from exc
            out[i] = torch.as_tensor(np.asarray(vec), dtype=dtype, device=device)
            present[i] = 1.0
        return out, present

    def forward(self, prompts: Sequence[PromptPair], mode: str | None = None,
                generator: torch.Generator | None = None) -> EncodedPrompts:
        if mode is None:
            mode = "train" if self.training else "eval"
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        n = len(prompts)
        t_g, m_g = self.encode_texts([pp.global_ for pp in prompts])
        t_l, m_l = self.encode_texts([pp.local for pp in prompts])

        if mode == "train":
            keep = 1.0 - self.p
            d_g = (torch.rand(n, generator=generator) < keep).to(m_g)
            d_l = (torch.rand(n, generator=generator) < keep).to(m_l)
        else:
            d_g = torch.ones_like(m_g)
            d_l = torch.ones_like(m_l)
        a_g = m_g * d_g
        a_l = m_l * d_l
        z_g = blend_null(t_g, self.null_global, a_g)
        z_l = blend_null(t_l, self.null_local, a_l)
        return EncodedPrompts(z_g=z_g, z_l=z_l, m_g=m_g, m_l=m_l, d_g=d_g, d_l=d_l, alpha_g=a_g, alpha_l=a_l)


def blend_null(text_emb: torch.Tensor, null: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """``alpha * T + (1 - alpha) * null`` per row; exact for alpha in {0, 1}."""
    a = alpha[:, None]
    return a * text_emb + (1.0 - a) * null[None, :]


def expected_embedding(text_emb: torch.Tensor, null: torch.Tensor, present: float, p: float) -> torch.Tensor:
    """Mean embedding under prompt dropout: (1-p) m T + (1 - (1-p) m) z_null."""
    w = (1.0 - p) * present
    return w * text_emb + (1.0 - w) * null
