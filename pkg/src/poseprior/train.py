"""Training loop for the pose diffuser on a corpus of ``PoseRecord``."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import torch
from torch.optim.swa_utils import AveragedModel, get_ema_multi_avg_fn

from .conditioning import ContextSequence, ImageFeatureInput
from .data import PoseRecord, stack_poses
from .denoiser import PoseDiffuser
from .diffusion import CFG_DROPOUT, DiffusionSchedule, training_loss
from .numcore import DTYPE, RngStream
from .skeleton import CameraIntrinsics, KinematicTree, forward_kinematics, project

log = logging.getLogger(__name__)

DEFAULT_CAMERA = CameraIntrinsics()
DEFAULT_ROOT = (0.0, 0.0, 3.0)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    steps: int = 3000
    lr: float = 1e-3
    p_uncond: float = CFG_DROPOUT
    log_every: int = 250
    # decay of the weight moving average copied into the model at the end; None disables it
    ema_decay: float | None = 0.999


def keypoint_features(
    pose: torch.Tensor, tree: KinematicTree, K: CameraIntrinsics = DEFAULT_CAMERA, root=DEFAULT_ROOT
) -> ImageFeatureInput:
    """Fully confident 2D keypoints of the 21 modeled joints, rendered from ``pose``."""
    joints = forward_kinematics(pose, None, tree) + torch.tensor(root, dtype=DTYPE)
    uv = project(joints[..., 1:22, :], K)
    return ImageFeatureInput(uv, torch.ones(uv.shape[:-1], dtype=DTYPE))


def condition_batch(
    model: PoseDiffuser,
    captions: Sequence[str | None],
    features: ImageFeatureInput,
    stream: RngStream,
) -> ContextSequence:
    """Encode each item with text only, keypoints only, or both (equal odds)."""
    draw = stream.uniform(len(captions))
    text_on = [(d < 1 / 3 or d >= 2 / 3) and c is not None for d, c in zip(draw, captions)]
    image_on = torch.tensor([not (d < 1 / 3 and c is not None) for d, c in zip(draw, captions)])
    enc = model.context
    c_text = torch.zeros(len(captions), enc.dim, dtype=DTYPE)
    if any(text_on):
        idx = torch.tensor([i for i, on in enumerate(text_on) if on])
        c_text = c_text.index_put((idx,), enc.encode_text([captions[i] for i in idx.tolist()]))
    c_image = enc.encode_image(features)
    return enc.fuse(c_image, c_text, image_on, torch.tensor(text_on))


def train(
    model: PoseDiffuser,
    records: Sequence[PoseRecord],
    schedule: DiffusionSchedule,
    cfg: TrainConfig,
    stream: RngStream,
    tree: KinematicTree | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> list[float]:
    """Adam with cosine learning-rate decay; returns the per-step loss history.

    With ``cfg.ema_decay`` set, the model ends up holding the exponential moving
    average of its weights rather than the last iterate.
    """
    tree = tree or KinematicTree()
    poses = stack_poses(records)
    captions = [r.caption for r in records]
    with torch.no_grad():
        feats = keypoint_features(poses, tree)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, foreach=True)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 0.5 * (1 + math.cos(math.pi * s / cfg.steps)))
    ema = None
    if cfg.ema_decay is not None:
        ema = AveragedModel(model, multi_avg_fn=get_ema_multi_avg_fn(cfg.ema_decay))
    history = []
    model.train()
    for step in range(cfg.steps):
        idx = torch.from_numpy(stream.integers(0, len(records), cfg.batch_size))
        batch_feats = ImageFeatureInput(feats.keypoints2d[idx], feats.confidence[idx])
        context = condition_batch(model, [captions[i] for i in idx.tolist()], batch_feats, stream)
        loss = training_loss(model, poses[idx], context, schedule, stream, p_uncond=cfg.p_uncond)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        if ema is not None:
            ema.update_parameters(model)
        history.append(loss.item())
        if on_step is not None:
            on_step(step, history[-1])
        if cfg.log_every and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            recent = history[-cfg.log_every :]
            log.info("step %d loss %.4f (running %.4f)", step, history[-1], sum(recent) / len(recent))
    if ema is not None:
        with torch.no_grad():
            for p, avg in zip(model.parameters(), ema.module.parameters()):
                p.copy_(avg)
    model.eval()
    return history
