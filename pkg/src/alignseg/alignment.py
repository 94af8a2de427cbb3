"""Shared-space semantic alignment: pixel embeddings, class prototypes, and
the prompt-driven text branch.

Both branches score pixels by cosine similarity against per-class anchors in
one D-dimensional embedding space. The text anchors come from a frozen text
encoder fed prompts with learnable per-class context tokens; only the context
tokens and the final projection train.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .config import AlignConfig, TextEncoderConfig

EPS = 1e-8


def l2_normalize(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Rows scaled to unit norm; eps in the denominator so zero rows stay zero."""
    return x / (x.norm(dim=dim, keepdim=True) + EPS)


def cosine_logits(z: torch.Tensor, anchors: torch.Tensor, grid_hw: tuple[int, int], temperature: float = 1.0) -> torch.Tensor:
    """Similarity of unit pixel embeddings [B,N,D] against class anchors [C,D],
    reshaped to [B,C,H',W']. Cosine values are clamped to [-1,1] before the
    optional temperature so float error cannot push them out of range."""
    sims = torch.clamp(z @ l2_normalize(anchors).T, -1.0, 1.0)
    if temperature != 1.0:
        sims = sims / temperature
    b, n, c = sims.shape
    h, w = grid_hw
    if n != h * w:
        raise ValueError(f"{n} pixel embeddings cannot fill a {h}x{w} grid")
    return sims.transpose(1, 2).reshape(b, c, h, w)


class PixelProjector(nn.Module):
    """3x3 conv head mapping deep features into the shared space, flattened to
    unit-norm rows z [B, N, D]."""

    def __init__(self, in_channels: int, embed_dim: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, embed_dim, 3, padding=1)

    def forward(self, f_high: torch.Tensor) -> tuple[torch.Tensor, tuple[int, int]]:
        e = self.conv(f_high)
        b, d, h, w = e.shape
        z = e.reshape(b, d, h * w).transpose(1, 2)
        return l2_normalize(z), (h, w)


class PrototypeBank(nn.Module):
    """Learnable class anchors P [C, D], initialized at scale 1/sqrt(D).
    Raw rows are what trains; similarity always uses normalized copies."""

    def __init__(self, num_classes: int, embed_dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(num_classes, embed_dim) / embed_dim**0.5)

    def logits(self, z: torch.Tensor, grid_hw: tuple[int, int], temperature: float = 1.0) -> torch.Tensor:
        return cosine_logits(z, self.weight, grid_hw, temperature)


@dataclass
class PromptTemplate:
    """Token layout [BOS][ctx_1..ctx_M][class tokens][EOT][PAD...]."""

    class_name: str
    token_ids: list[int]
    context_start: int
    context_len: int
    eot_index: int


class TextEncoder(nn.Module):
    """Adapter base for a frozen text encoder. Implementations expose a
    tokenizer, token/positional embeddings, a frozen sequence transform, and
    the final frozen projection; none of it trains."""

    vocab_size: int
    token_dim: int
    text_dim: int
    seq_len: int
    pad_id = 0
    bos_id = 1
    eot_id = 2

    def tokenize(self, text: str) -> list[int]:
        raise NotImplementedError

    def embed_tokens(self, token_ids: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def positional(self) -> torch.Tensor:
        raise NotImplementedError

    def encode_sequence(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def clip_project(self, h_eot: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


class ToyTextEncoder(TextEncoder):
    """Deterministic frozen stand-in: hashed word tokenizer, seeded random
    token/positional embeddings, one fixed mixing layer across positions,
    and a fixed projection to the text feature dimension."""

    _RESERVED = 3  # pad, bos, eot

    def __init__(self, cfg: TextEncoderConfig):
        super().__init__()
        self.vocab_size = cfg.vocab_size
        self.token_dim = cfg.token_dim
        self.text_dim = cfg.text_dim
        self.seq_len = cfg.seq_len
        rng = np.random.default_rng(np.random.SeedSequence([0x7E87, cfg.seed]))

        def buf(name, shape, scale):
            self.register_buffer(name, torch.from_numpy(rng.standard_normal(shape) * scale).float())

        buf("token_table", (cfg.vocab_size, cfg.token_dim), 0.5)
        buf("pos_table", (cfg.seq_len, cfg.token_dim), 0.1)
        buf("pos_mix", (cfg.seq_len, cfg.seq_len), 1.0 / np.sqrt(cfg.seq_len))
        buf("chan_mix", (cfg.token_dim, cfg.token_dim), 1.0 / np.sqrt(cfg.token_dim))
        buf("mix_bias", (cfg.token_dim,), 0.02)
        buf("clip_weight", (cfg.token_dim, cfg.text_dim), 1.0 / np.sqrt(cfg.token_dim))

    def tokenize(self, text: str) -> list[int]:
        n_words = self.vocab_size - self._RESERVED
        return [
            self._RESERVED + zlib.crc32(word.encode("utf-8")) % n_words
            for word in text.lower().split()
        ]

    def embed_tokens(self, token_ids: torch.Tensor) -> torch.Tensor:
        return self.token_table[token_ids]

    def positional(self) -> torch.Tensor:
        return self.pos_table

    def encode_sequence(self, x: torch.Tensor) -> torch.Tensor:
        mixed = torch.einsum("ls,csd->cld", self.pos_mix.to(x.dtype), x)
        return torch.tanh(mixed @ self.chan_mix.to(x.dtype) + self.mix_bias.to(x.dtype))

    def clip_project(self, h_eot: torch.Tensor) -> torch.Tensor:
        return h_eot @ self.clip_weight.to(h_eot.dtype)


TEXT_ENCODER_REGISTRY = {"toy": ToyTextEncoder}


def build_text_encoder(cfg: TextEncoderConfig) -> TextEncoder:
    try:
        return TEXT_ENCODER_REGISTRY[cfg.kind](cfg)
    except KeyError:
        raise ValueError(
            f"unknown text encoder kind '{cfg.kind}' (registered: {sorted(TEXT_ENCODER_REGISTRY)})"
        ) from None


def build_prompts(class_names: list[str], num_context: int, encoder: TextEncoder) -> list[PromptTemplate]:
    """Per-class prompt skeletons with placeholder ids at the context slots."""
    if not class_names:
        raise ValueError("class_names must be non-empty")
    if num_context < 0:
        raise ValueError("num_context must be >= 0")
    templates = []
    for name in class_names:
        class_ids = encoder.tokenize(name)
        budget = encoder.seq_len - num_context - 2
        if len(class_ids) > budget:
            raise ValueError(
                f"class name '{name}' needs {len(class_ids)} tokens but only "
                f"{budget} fit beside {num_context} context tokens"
            )
        ids = [encoder.bos_id] + [encoder.pad_id] * num_context + class_ids + [encoder.eot_id]
        eot_index = len(ids) - 1
        ids += [encoder.pad_id] * (encoder.seq_len - len(ids))
        templates.append(
            PromptTemplate(
                class_name=name,
                token_ids=ids,
                context_start=1,
                context_len=num_context,
                eot_index=eot_index,
            )
        )
    return templates


class TextBranch(nn.Module):
    """Prompted text anchors. Gradients reach only the context tokens and the
    output projection; the adapter underneath is frozen by construction."""

    def __init__(self, cfg: AlignConfig, encoder: TextEncoder):
        super().__init__()
        self.encoder = encoder
        self.temperature = cfg.temperature
        self.templates = build_prompts(cfg.class_names, cfg.num_context_tokens, encoder)
        num_classes = len(cfg.class_names)
        self.context = nn.Parameter(
            torch.randn(num_classes, cfg.num_context_tokens, encoder.token_dim)
            * cfg.context_init_std
        )
        self.project = nn.Linear(encoder.text_dim, cfg.embed_dim)
        with torch.no_grad():
            eye = torch.eye(cfg.embed_dim, encoder.text_dim)
            self.project.weight.copy_(eye)
            self.project.bias.zero_()
        ids = torch.tensor([t.token_ids for t in self.templates], dtype=torch.long)
        self.register_buffer("token_ids", ids)
        self.register_buffer(
            "eot_indices", torch.tensor([t.eot_index for t in self.templates], dtype=torch.long)
        )

    def embeddings(self) -> torch.Tensor:
        """Class text embedding matrix T [C, D]; recomputed every call since
        the context tokens move during training."""
        base = self.encoder.embed_tokens(self.token_ids)
        dtype = self.project.weight.dtype
        base = base.to(dtype)
        if self.context.shape[1] > 0:
            start = self.templates[0].context_start
            end = start + self.context.shape[1]
            base = torch.cat([base[:, :start], self.context, base[:, end:]], dim=1)
        x = base + self.encoder.positional().to(dtype)
        hidden = self.encoder.encode_sequence(x)
        h_eot = hidden[torch.arange(hidden.shape[0]), self.eot_indices]
        return self.project(self.encoder.clip_project(h_eot))

    def logits(self, z: torch.Tensor, text_matrix: torch.Tensor, grid_hw: tuple[int, int]) -> torch.Tensor:
        return cosine_logits(z, text_matrix, grid_hw, self.temperature)
