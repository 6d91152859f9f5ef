"""Skeleton-aware transformer that predicts the noise in a 24x6 pose.

Joint tokens get a learned per-joint embedding plus one of five group
embeddings chosen by hop distance from the pelvis. Self-attention logits carry
a per-head bias computed from the skeletal hop distance between the two joints.
Each block then cross-attends to the 21 context tokens, which carry the
timestep embedding.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .conditioning import ContextEncoder, ContextSequence
from .layers import FeedForward, MultiHeadAttention, sinusoidal_embedding
from .numcore import DTYPE, NumericError
from .skeleton import GROUP_COUNT, KinematicTree

CHECKPOINT_MAGIC = b"PDCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DenoiserConfig:
    latent_dim: int = 64
    blocks: int = 4
    heads: int = 4
    group_count: int = GROUP_COUNT
    joint_tokens: int = 24
    phi_hidden: int = 16
    fusion_blocks: int = 2

    def __post_init__(self):
        if self.latent_dim % self.heads:
            raise ValueError("latent_dim must be divisible by heads")
        if self.group_count != GROUP_COUNT:
            raise ValueError("group_count is fixed at 5")


class DistanceBias(nn.Module):
    """Maps normalized hop counts to one attention-logit bias per head."""

    def __init__(self, heads: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(1, hidden), nn.SiLU(), nn.Linear(hidden, heads))

    def forward(self, dist: torch.Tensor) -> torch.Tensor:
        return self.net(dist[..., None]).permute(2, 0, 1)  # [H, J, J]


class PoseAttention(nn.Module):
    def __init__(self, dim: int, heads: int, phi_hidden: int):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads)
        self.phi = DistanceBias(heads, phi_hidden)

    def bias(self, dist: torch.Tensor) -> torch.Tensor:
        return self.phi(dist / dist.max().clamp_min(1))

    def weights(self, x: torch.Tensor, dist: torch.Tensor) -> torch.Tensor:
        return self.attn.weights(x, bias=self.bias(dist))

    def forward(self, x: torch.Tensor, dist: torch.Tensor) -> torch.Tensor:
        return self.attn(x, bias=self.bias(dist))


class DenoiserBlock(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        d = cfg.latent_dim
        self.norm_self = nn.LayerNorm(d)
        self.pose_attn = PoseAttention(d, cfg.heads, cfg.phi_hidden)
        self.norm_cross = nn.LayerNorm(d)
        # no output bias, so an all-zero context leaves the tokens untouched
        self.cross_attn = MultiHeadAttention(d, cfg.heads, out_bias=False)
        self.norm_mlp = nn.LayerNorm(d)
        self.mlp = FeedForward(d)

    def cross_attend(self, x: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        if ctx.shape[-1] != x.shape[-1]:
            raise ValueError(f"context width {ctx.shape[-1]} does not match token width {x.shape[-1]}")
        return x + self.cross_attn(self.norm_cross(x), ctx)

    def forward(self, x, ctx, dist):
        x = x + self.pose_attn(self.norm_self(x), dist)
        x = self.cross_attend(x, ctx)
        return x + self.mlp(self.norm_mlp(x))


class PoseDiffuser(nn.Module):
    """Noise predictor ``eps_hat = model(z_t, t, context)`` plus its context encoder."""

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig(), tree: KinematicTree | None = None, seed: int = 0):
        super().__init__()
        # weight init draws from torch's global generator; fork it so construction is
        # a pure function of ``seed`` and leaves the caller's state alone
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self._build(cfg, tree)
        self.to(DTYPE)

    def _build(self, cfg: DenoiserConfig, tree: KinematicTree | None) -> None:
        tree = tree or KinematicTree()
        if tree.joint_count != cfg.joint_tokens:
            raise ValueError("tree joint count does not match config")
        self.cfg = cfg
        d = cfg.latent_dim
        self.input_proj = nn.Linear(6, d)
        self.joint_embed = nn.Parameter(torch.randn(cfg.joint_tokens, d) * 0.02)
        self.group_embed = nn.Parameter(torch.randn(cfg.group_count, d) * 0.02)
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(DenoiserBlock(cfg) for _ in range(cfg.blocks))
        self.out_norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, 6)
        self.context = ContextEncoder(d, cfg.heads, cfg.fusion_blocks)
        self.register_buffer("groups", torch.as_tensor(tree.groups(), dtype=torch.long), persistent=False)
        self.register_buffer("distances", torch.as_tensor(tree.distance_table(), dtype=DTYPE), persistent=False)

    def embed_inputs(self, z_t: torch.Tensor) -> torch.Tensor:
        return self.input_proj(z_t) + self.joint_embed + self.group_embed[self.groups]

    def time_embed(self, t: torch.Tensor) -> torch.Tensor:
        return self.time_mlp(sinusoidal_embedding(t, self.cfg.latent_dim))

    def null_context(self, batch: int) -> ContextSequence:
        return self.context.null_context(batch)

    def forward(self, z_t: torch.Tensor, t, context: ContextSequence | None = None) -> torch.Tensor:
        b = z_t.shape[0]
        t = torch.as_tensor(t, dtype=DTYPE)
        if t.ndim == 0:
            t = t.expand(b)
        if context is None:
            context = self.null_context(b)
        elif len(context) == 1 and b > 1:
            context = context.repeat(b)
        ctx = context.tokens + self.time_embed(t)[:, None, :]
        x = self.embed_inputs(z_t)
        for block in self.blocks:
            x = block(x, ctx, self.distances)
        eps = self.head(self.out_norm(x))
        if not torch.isfinite(eps).all():
            raise NumericError("non-finite activations in denoiser output")
        return eps


def save_checkpoint(model: PoseDiffuser, path: str | Path) -> None:
    """Little-endian ``PDCK`` file: magic, version, JSON config, then named f64 records."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg = json.dumps(asdict(model.cfg), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    state = model.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", tensor.ndim))
        buf.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        buf.write(tensor.detach().cpu().numpy().astype("<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path: str | Path, tree: KinematicTree | None = None) -> PoseDiffuser:
    data = Path(path).read_bytes()
    view = memoryview(data)
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a PDCK checkpoint")
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = struct.unpack_from(fmt, view, pos)
        pos += size
        return out

    (version,) = take("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (n,) = take("<I")
    cfg = DenoiserConfig(**json.loads(bytes(view[pos : pos + n])))
    pos += n
    model = PoseDiffuser(cfg, tree)
    expected = model.state_dict()
    (count,) = take("<I")
    state = {}
    for _ in range(count):
        (n,) = take("<I")
        name = bytes(view[pos : pos + n]).decode()
        pos += n
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I")
        if name not in expected or tuple(expected[name].shape) != tuple(shape):
            raise CheckpointError(f"{path}: record {name!r} with shape {shape} does not match config")
        size = int(np.prod(shape)) * 8
        if pos + size > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        state[name] = torch.from_numpy(np.frombuffer(data, dtype="<f8", count=size // 8, offset=pos).copy()).reshape(shape)
        pos += size
    missing = set(expected) - set(state)
    if missing:
        raise CheckpointError(f"{path}: missing records {sorted(missing)}")
    model.load_state_dict(state)
    return model
