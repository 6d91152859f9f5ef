"""Context encoder: toy text/keypoint encoders fused through a CLS transformer.

The encoder always emits 21 context tokens, one per modeled joint. A learned
null sequence stands in when no condition is given or when classifier-free
guidance dropout removes it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from .layers import EncoderBlock
from .numcore import DTYPE, RngStream

CONTEXT_TOKENS = 21
VOCAB_ROWS = 4096
IMAGE_KEYPOINTS = 21
CANVAS = 1000.0

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a_64(word: str) -> int:
    """64-bit FNV-1a over the UTF-8 bytes of ``word``."""
    h = _FNV_OFFSET
    for byte in word.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def tokenize(caption: str) -> list[int]:
    """Lowercase, split on whitespace and commas, hash each word into the vocabulary."""
    words = caption.lower().replace(",", " ").split()
    if not words:
        raise ValueError("caption must contain at least one word")
    return [fnv1a_64(w) % VOCAB_ROWS for w in words]


@dataclass
class ContextSequence:
    tokens: torch.Tensor  # [B, 21, D]
    is_null: torch.Tensor  # [B] bool

    def __post_init__(self):
        if self.tokens.shape[-2] != CONTEXT_TOKENS:
            raise ValueError(f"context must have {CONTEXT_TOKENS} tokens, got {self.tokens.shape[-2]}")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def repeat(self, n: int) -> "ContextSequence":
        """Tile a single context across a batch of ``n``."""
        return ContextSequence(self.tokens.expand(n, -1, -1), self.is_null.expand(n))

    def detach(self) -> "ContextSequence":
        return ContextSequence(self.tokens.detach(), self.is_null)

    @staticmethod
    def cat(items: Sequence["ContextSequence"]) -> "ContextSequence":
        return ContextSequence(torch.cat([c.tokens for c in items]), torch.cat([c.is_null for c in items]))


@dataclass
class ImageFeatureInput:
    """Detected keypoints in pixels ``[B, 21, 2]`` with confidences ``[B, 21]``."""

    keypoints2d: torch.Tensor
    confidence: torch.Tensor

    def __post_init__(self):
        if ((self.confidence < 0) | (self.confidence > 1)).any():
            raise ValueError("confidences must lie in [0, 1]")


class ContextEncoder(nn.Module):
    def __init__(self, dim: int, heads: int, fusion_blocks: int = 2):
        super().__init__()
        self.dim = dim
        self.text_table = nn.EmbeddingBag(VOCAB_ROWS, dim, mode="mean")
        self.image_mlp = nn.Sequential(nn.Linear(IMAGE_KEYPOINTS * 3, dim), nn.SiLU(), nn.Linear(dim, dim))
        self.cls = nn.Parameter(torch.randn(dim) * 0.02)
        self.modality = nn.Parameter(torch.randn(2, dim) * 0.02)
        self.fusion = nn.ModuleList(EncoderBlock(dim, heads) for _ in range(fusion_blocks))
        self.fusion_norm = nn.LayerNorm(dim)
        self.cls_proj = nn.Linear(dim, dim)
        self.joint_queries = nn.Parameter(torch.randn(CONTEXT_TOKENS, dim) * 0.02)
        self.null_tokens = nn.Parameter(torch.randn(CONTEXT_TOKENS, dim) * 0.02)

    def encode_text(self, captions: Sequence[str]) -> torch.Tensor:
        ids = [tokenize(c) for c in captions]
        flat = torch.tensor([i for row in ids for i in row], dtype=torch.long)
        offsets = torch.tensor([0] + [len(r) for r in ids[:-1]], dtype=torch.long).cumsum(0)
        return self.text_table(flat, offsets)

    def encode_image(self, feat: ImageFeatureInput) -> torch.Tensor:
        uv = (feat.keypoints2d / CANVAS * 2 - 1).clamp(-1, 1)
        conf = feat.confidence * 2 - 1
        x = torch.cat([uv, conf[..., None]], dim=-1).flatten(-2)
        return self.image_mlp(x)

    def null_context(self, batch: int) -> ContextSequence:
        return ContextSequence(self.null_tokens.expand(batch, -1, -1), torch.ones(batch, dtype=torch.bool))

    def fuse(
        self,
        c_image: torch.Tensor | None,
        c_text: torch.Tensor | None,
        image_mask: torch.Tensor | None = None,
        text_mask: torch.Tensor | None = None,
        t_embed: torch.Tensor | None = None,
    ) -> ContextSequence:
        """Fuse per-modality vectors ``[B, D]`` into 21 context tokens.

        Masks mark, per batch item, which modality is present; an absent
        tensor means the modality is missing for the whole batch.
        """
        ref = c_image if c_image is not None else c_text
        if ref is None:
            raise ValueError("no condition given; use null_context instead")
        b = ref.shape[0]
        zeros = torch.zeros(b, self.dim, dtype=ref.dtype)
        no = torch.zeros(b, dtype=torch.bool)
        yes = torch.ones(b, dtype=torch.bool)
        image_mask = (yes if c_image is not None else no) if image_mask is None else image_mask
        text_mask = (yes if c_text is not None else no) if text_mask is None else text_mask
        if not (image_mask | text_mask).all():
            raise ValueError("every batch item needs at least one modality; use null_context instead")
        seq = torch.stack(
            [
                self.cls.expand(b, -1),
                (c_image if c_image is not None else zeros) + self.modality[0],
                (c_text if c_text is not None else zeros) + self.modality[1],
            ],
            dim=1,
        )
        key_mask = torch.stack([yes, image_mask, text_mask], dim=1)
        for block in self.fusion:
            seq = block(seq, key_mask=key_mask)
        cls_out = self.cls_proj(self.fusion_norm(seq[:, 0]))
        tokens = self.joint_queries + cls_out[:, None, :]
        if t_embed is not None:
            tokens = tokens + t_embed[:, None, :]
        return ContextSequence(tokens, no)

    def forward(
        self, captions: Sequence[str | None] | None = None, image: ImageFeatureInput | None = None
    ) -> ContextSequence:
        """Encode a batch where each item may have a caption, keypoint features or both."""
        c_text = text_mask = c_image = image_mask = None
        if captions is not None:
            text_mask = torch.tensor([c is not None for c in captions])
            c_text = torch.zeros(len(captions), self.dim, dtype=DTYPE)
            if text_mask.any():
                present = [c for c in captions if c is not None]
                c_text = c_text.index_put((text_mask.nonzero()[:, 0],), self.encode_text(present))
        if image is not None:
            c_image = self.encode_image(image)
            image_mask = torch.ones(c_image.shape[0], dtype=torch.bool)
            if text_mask is None:
                text_mask = torch.zeros_like(image_mask)
        elif text_mask is not None:
            image_mask = torch.zeros_like(text_mask)
        return self.fuse(c_image, c_text, image_mask, text_mask)


def cfg_dropout(context: ContextSequence, p: float, stream: RngStream, null_tokens: torch.Tensor) -> ContextSequence:
    """Replace each batch item's context by the null sequence with probability ``p``."""
    if not 0 <= p <= 1:
        raise ValueError("dropout probability must be in [0, 1]")
    drop = torch.from_numpy(stream.uniform(len(context)) < p)
    if not drop.any():
        return context
    tokens = torch.where(drop[:, None, None], null_tokens.expand_as(context.tokens), context.tokens)
    return ContextSequence(tokens, context.is_null | drop)
