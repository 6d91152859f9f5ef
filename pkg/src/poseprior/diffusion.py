"""DDPM forward process and training loss, DDIM sampling/inversion, and DPS guidance.

Timestep conventions: the schedule is indexed ``0..T-1``. In a DDIM
trajectory, stepping to ``t_prev = 0`` lands on the clean sample, i.e. the
target uses ``alpha_bar = 1``. The model itself is any callable
``model(z_t, t, context) -> eps_hat``; :class:`~poseprior.denoiser.PoseDiffuser`
is the real one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .conditioning import ContextSequence, cfg_dropout
from .numcore import DTYPE, RngStream, gauss_sample
from .rotations import sixd_to_matrix
from .skeleton import CameraIntrinsics, KinematicTree, forward_kinematics, geman_mcclure, project

EpsModel = Callable[[torch.Tensor, object, "ContextSequence | None"], torch.Tensor]

BETA_START = 1e-4
BETA_END = 0.02
CFG_DROPOUT = 0.1
DPS_RHO = 0.003


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor

    def abar(self, t: int) -> float:
        return float(self.alpha_bar[t])

    def abar_target(self, t: int) -> float:
        """``alpha_bar`` of a DDIM target timestep; 0 means the clean sample."""
        return 1.0 if t == 0 else float(self.alpha_bar[t])


def make_schedule(T: int = 1000) -> DiffusionSchedule:
    """Linear betas from 1e-4 to 0.02 over ``T`` steps."""
    if T < 1:
        raise ValueError("T must be at least 1")
    beta = torch.linspace(BETA_START, BETA_END, T, dtype=DTYPE) if T > 1 else torch.tensor([BETA_START], dtype=DTYPE)
    alpha = 1 - beta
    # explicit running product so alpha_bar[t] == alpha_bar[t-1] * alpha[t] exactly
    abar = np.empty(T)
    acc = 1.0
    for i, a in enumerate(alpha.tolist()):
        acc = acc * a
        abar[i] = acc
    return DiffusionSchedule(T, beta, alpha, torch.from_numpy(abar))


def _coef(schedule: DiffusionSchedule, t, ndim: int) -> torch.Tensor:
    abar = schedule.alpha_bar[torch.as_tensor(t, dtype=torch.long)]
    return abar.reshape(abar.shape + (1,) * (ndim - abar.ndim))


def q_sample(z0: torch.Tensor, t, eps: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    """``sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``; ``t`` is an int or a per-item tensor."""
    abar = _coef(schedule, t, z0.ndim)
    return abar.sqrt() * z0 + (1 - abar).sqrt() * eps


def estimate_x0(z_t: torch.Tensor, t, eps_hat: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    abar = _coef(schedule, t, z_t.ndim)
    return (z_t - (1 - abar).sqrt() * eps_hat) / abar.sqrt()


def training_loss(
    model: EpsModel,
    z0: torch.Tensor,
    context: ContextSequence | None,
    schedule: DiffusionSchedule,
    stream: RngStream,
    t: torch.Tensor | None = None,
    p_uncond: float = CFG_DROPOUT,
    null_tokens: torch.Tensor | None = None,
) -> torch.Tensor:
    """Simple DDPM objective: per-pose squared noise error, averaged over the batch.

    ``t`` defaults to uniform draws over all timesteps. With a context and
    ``p_uncond > 0`` the context is swapped for the null sequence per item.
    """
    b = z0.shape[0]
    if t is None:
        t = torch.from_numpy(stream.integers(0, schedule.T, b))
    eps = gauss_sample(stream, tuple(z0.shape))
    z_t = q_sample(z0, t, eps, schedule)
    if context is not None and p_uncond > 0:
        if null_tokens is None:
            null_tokens = model.context.null_tokens
        context = cfg_dropout(context, p_uncond, stream, null_tokens)
    eps_hat = model(z_t, t, context)
    return ((eps - eps_hat) ** 2).flatten(1).sum(-1).mean()


def ddim_step(
    z_t: torch.Tensor,
    t: int,
    t_prev: int,
    eps_hat: torch.Tensor,
    schedule: DiffusionSchedule,
    sigma: float = 0.0,
    stream: RngStream | None = None,
) -> torch.Tensor:
    """One DDIM update from ``t`` to ``t_prev``. ``sigma = 0`` consumes no randomness."""
    if not t_prev < t:
        raise ValueError("t_prev must precede t")
    abar_prev = schedule.abar_target(t_prev)
    if sigma**2 > 1 - abar_prev:
        raise ValueError("sigma^2 exceeds 1 - alpha_bar at the target step")
    x0 = estimate_x0(z_t, t, eps_hat, schedule)
    out = math.sqrt(abar_prev) * x0 + math.sqrt(1 - abar_prev - sigma**2) * eps_hat
    if sigma > 0:
        if stream is None:
            raise ValueError("stochastic DDIM step needs a random stream")
        out = out + sigma * gauss_sample(stream, tuple(z_t.shape))
    return out


def cfg_epsilon(model: EpsModel, z: torch.Tensor, t: int, context: ContextSequence | None, scale: float = 1.0):
    """Classifier-free guidance: ``eps_null + w (eps_cond - eps_null)``.

    ``w = 1`` and ``w = 0`` evaluate only the conditional or only the null branch.
    Otherwise both branches run as one batched call.
    """
    if context is None or scale == 0:
        return model(z, t, None)
    if scale == 1:
        return model(z, t, context)
    b = z.shape[0]
    if len(context) == 1 and b > 1:
        context = context.repeat(b)
    both = ContextSequence.cat([context, model.null_context(b)])
    eps = model(torch.cat([z, z]), t, both)
    cond, uncond = eps[:b], eps[b:]
    return uncond + scale * (cond - uncond)


@dataclass
class GuidanceSpec:
    """Observation-driven guidance for posterior sampling.

    ``reprojection``: ``target`` holds pixels ``[B, J, 2]``; joints are placed at
    ``translation`` in the camera frame and projected with ``intrinsics``; the
    loss is the weighted Geman-McClure error.
    ``sparse3d``: ``target`` holds root-relative joints ``[B, J, 3]``; the loss is
    the weighted squared distance, ``weights`` doubling as the observation mask.
    """

    rho: float
    loss_kind: str
    target: torch.Tensor
    weights: torch.Tensor
    intrinsics: CameraIntrinsics | None = None
    translation: torch.Tensor | None = None
    beta: torch.Tensor | None = None
    sigma: float = 100.0

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError("rho must be non-negative")
        if self.loss_kind not in ("reprojection", "sparse3d"):
            raise ValueError(f"unknown guidance loss {self.loss_kind!r}")
        if self.loss_kind == "reprojection" and (self.intrinsics is None or self.translation is None):
            raise ValueError("reprojection guidance needs intrinsics and a root translation")

    def data_loss(self, pose: torch.Tensor, tree: KinematicTree) -> torch.Tensor:
        """Per-item data term ``[B]`` for 6D poses ``[B, J, 6]``."""
        joints = forward_kinematics(pose, self.beta, tree)
        if self.loss_kind == "sparse3d":
            return (self.weights * ((joints - self.target) ** 2).sum(-1)).sum(-1)
        pixels = project(joints + self.translation[:, None, :], self.intrinsics)
        residual = pixels - self.target
        return (self.weights * geman_mcclure(residual, self.sigma)).sum(-1)


def dps_epsilon(
    model: EpsModel,
    z_t: torch.Tensor,
    t: int,
    context: ContextSequence | None,
    guidance: GuidanceSpec | None,
    schedule: DiffusionSchedule,
    tree: KinematicTree,
    guidance_scale: float = 1.0,
) -> torch.Tensor:
    """Noise estimate plus ``rho sqrt(1 - abar_t)`` times the data-loss gradient w.r.t. ``z_t``.

    The gradient flows through the clean-sample estimate, the network, forward
    kinematics and (for reprojection) the camera.
    """
    if guidance is None or guidance.rho == 0:
        with torch.no_grad():
            return cfg_epsilon(model, z_t, t, context, guidance_scale)
    with torch.enable_grad():
        z = z_t.detach().requires_grad_(True)
        eps = cfg_epsilon(model, z, t, context, guidance_scale)
        x0 = estimate_x0(z, t, eps, schedule)
        loss = guidance.data_loss(x0, tree).sum()
        (grad,) = torch.autograd.grad(loss, z)
    return eps.detach() + guidance.rho * math.sqrt(1 - schedule.abar(t)) * grad


def uniform_timesteps(t_start: int, stride: int) -> list[int]:
    """Evaluation timesteps ``t_start, t_start - stride, ...`` down to (excluding) 0."""
    if stride < 1:
        raise ValueError("stride must be positive")
    return list(range(t_start, 0, -stride))


def linear_timesteps(t_start: int, t_end: int, steps: int) -> list[int]:
    """``steps`` evaluation timesteps linearly spaced from ``t_start`` to ``t_end``."""
    ts = np.round(np.linspace(t_start, t_end, steps)).astype(int).tolist()
    if len(set(ts)) != len(ts):
        raise ValueError("schedule has repeated timesteps")
    return ts


def run_ddim(
    model: EpsModel,
    z: torch.Tensor,
    timesteps: Sequence[int],
    context: ContextSequence | None,
    schedule: DiffusionSchedule,
    guidance: GuidanceSpec | None = None,
    tree: KinematicTree | None = None,
    guidance_scale: float = 1.0,
    sigma: float = 0.0,
    stream: RngStream | None = None,
) -> torch.Tensor:
    """Deterministic (or ``sigma > 0``) DDIM through ``timesteps``, ending on the clean sample."""
    tree = tree or KinematicTree()
    for k, t in enumerate(timesteps):
        t_prev = timesteps[k + 1] if k + 1 < len(timesteps) else 0
        eps = dps_epsilon(model, z, t, context, guidance, schedule, tree, guidance_scale)
        z = ddim_step(z, t, t_prev, eps, schedule, sigma, stream)
    return z


@torch.no_grad()
def ddim_invert(
    model: EpsModel,
    z0: torch.Tensor,
    t_target: int,
    context: ContextSequence | None,
    schedule: DiffusionSchedule,
    stride: int = 1,
    guidance_scale: float = 1.0,
) -> torch.Tensor:
    """Run the deterministic DDIM update backwards from the clean sample to ``t_target``."""
    if t_target > schedule.T - 1:
        raise ValueError("t_target beyond the schedule")
    grid = list(range(0, t_target, stride)) + [t_target] if t_target > 0 else [0]
    z = z0
    for cur, nxt in zip(grid[:-1], grid[1:]):
        eps = cfg_epsilon(model, z, cur, context, guidance_scale)
        abar_cur = schedule.abar_target(cur)
        abar_nxt = schedule.abar(nxt)
        x0 = (z - math.sqrt(1 - abar_cur) * eps) / math.sqrt(abar_cur)
        z = math.sqrt(abar_nxt) * x0 + math.sqrt(1 - abar_nxt) * eps
    return z


def sample(
    model: EpsModel,
    schedule: DiffusionSchedule,
    n: int,
    stream: RngStream,
    context: ContextSequence | None = None,
    steps: int = 20,
    guidance: GuidanceSpec | None = None,
    guidance_scale: float = 1.0,
    tree: KinematicTree | None = None,
    joints: int = 24,
) -> torch.Tensor:
    """Draw ``n`` poses ``[n, J, 6]`` from noise with ``steps`` deterministic DDIM updates.

    Raises:
        DegenerateRotationError: if any output joint does not map to a rotation.
    """
    if steps < 1:
        raise ValueError("steps must be positive")
    z = gauss_sample(stream, (n, joints, 6))
    stride = max(schedule.T // steps, 1)
    timesteps = [schedule.T - 1 - k * stride for k in range(min(steps, schedule.T))]
    out = run_ddim(model, z, timesteps, context, schedule, guidance, tree, guidance_scale)
    sixd_to_matrix(out)
    return out
