"""Downstream pipelines that use the diffusion model as a pose prior.

* :func:`refine_pose` inverts an initial estimate a short way into the noise
  process and denoises it back under 2D keypoint guidance.
* :func:`smplify_fit` is an optimization fit with the model as a regularizer.
* :func:`complete_pose` samples from noise under sparse 3D joint guidance.
* :func:`denoise_pose` treats a noisy pose as a mid-trajectory latent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .conditioning import ContextSequence
from .diffusion import (
    DPS_RHO,
    DiffusionSchedule,
    EpsModel,
    GuidanceSpec,
    cfg_epsilon,
    ddim_invert,
    ddim_step,
    linear_timesteps,
    run_ddim,
    uniform_timesteps,
)
from .numcore import DTYPE, NumericError, RngStream, gauss_sample
from .rotations import axis_angle_to_matrix, matrix_to_sixd, sixd_to_matrix
from .skeleton import (
    SHAPE_DIM,
    CameraIntrinsics,
    KinematicTree,
    forward_kinematics,
    geman_mcclure,
    hinge_bend_angles,
    project,
)

REFINE_T = 50
REFINE_STRIDE = 2
DENOISE_T = 400
DENOISE_STRIDE = 5
IK_T_START = 900
IK_T_END = 10
IK_STEPS = 400
# The reprojection rho is in pixel units and does not transfer to metric 3D
# residuals. Picked on the synthetic corpus: larger values overshoot at the
# high-noise end of the schedule, where the clean-sample estimate amplifies
# the latent step by 1/sqrt(abar).
IK_RHO = 10.0
PRIOR_T = 50
PRIOR_STRIDE = 10

SCENARIO_HIDDEN = {
    "occ_arm": (13, 16, 18, 20, 22),
    "occ_legs": (1, 4, 7, 10, 2, 5, 8, 11),
}
END_EFFECTORS = (7, 8, 15, 20, 21)


@dataclass
class Observation2D:
    """Keypoints ``[B, 24, 2]`` in pixels with per-joint weights ``[B, 24]``.

    ``translation`` is the root position in the camera frame ``[B, 3]``.
    """

    keypoints: torch.Tensor
    weights: torch.Tensor
    translation: torch.Tensor
    intrinsics: CameraIntrinsics = field(default_factory=CameraIntrinsics)

    def __post_init__(self):
        if (self.weights < 0).any() or not torch.isfinite(self.weights).all():
            raise ValueError("observation weights must be finite and non-negative")

    def guidance(self, rho: float, beta: torch.Tensor | None = None) -> GuidanceSpec:
        return GuidanceSpec(rho, "reprojection", self.keypoints, self.weights, self.intrinsics, self.translation, beta)


@dataclass
class Observation3D:
    """Root-relative joints ``[B, 24, 3]`` (meters) and an observation mask ``[B, 24]``."""

    joints: torch.Tensor
    mask: torch.Tensor

    def __post_init__(self):
        if not self.mask.reshape(-1, self.mask.shape[-1]).any(-1).all():
            raise ValueError("at least one joint must be observed")

    def guidance(self, rho: float) -> GuidanceSpec:
        return GuidanceSpec(rho, "sparse3d", self.joints, self.mask.to(DTYPE))


class OptimizationError(RuntimeError):
    pass


def render_observation(
    gt: torch.Tensor,
    tree: KinematicTree,
    translation=(0.0, 0.0, 3.0),
    intrinsics: CameraIntrinsics | None = None,
    beta: torch.Tensor | None = None,
) -> Observation2D:
    """Noise-free keypoints of all joints of ``gt`` ``[B, 24, 6]``, all fully weighted."""
    intrinsics = intrinsics or CameraIntrinsics()
    trans = torch.as_tensor(translation, dtype=DTYPE).expand(gt.shape[0], 3)
    with torch.no_grad():
        joints = forward_kinematics(gt, beta, tree) + trans[:, None, :]
        kp = project(joints, intrinsics)
    return Observation2D(kp, torch.ones(kp.shape[:-1], dtype=DTYPE), trans, intrinsics)


def perturb_pose(pose: torch.Tensor, angle: float, stream: RngStream) -> torch.Tensor:
    """Rotate every joint by ``angle`` radians about an independent random axis."""
    axis = gauss_sample(stream, tuple(pose.shape[:-1]) + (3,))
    axis = axis / axis.norm(dim=-1, keepdim=True)
    noise = axis_angle_to_matrix(axis * angle)
    return matrix_to_sixd(sixd_to_matrix(pose) @ noise)


def refine_pose(
    init: torch.Tensor,
    obs: Observation2D,
    model: EpsModel,
    schedule: DiffusionSchedule,
    tree: KinematicTree,
    context: ContextSequence | None = None,
    rho: float = DPS_RHO,
    t: int = REFINE_T,
    stride: int = REFINE_STRIDE,
    guidance_scale: float = 1.0,
) -> torch.Tensor:
    """Invert ``init`` to step ``t`` and denoise back with reprojection guidance."""
    z = ddim_invert(model, init, t, context, schedule, stride, guidance_scale)
    return run_ddim(
        model, z, uniform_timesteps(t, stride), context, schedule, obs.guidance(rho), tree, guidance_scale
    )


def denoise_pose(
    noisy: torch.Tensor,
    model: EpsModel,
    schedule: DiffusionSchedule,
    t: int = DENOISE_T,
    stride: int = DENOISE_STRIDE,
) -> torch.Tensor:
    """Unconditional deterministic DDIM treating ``noisy`` as the step-``t`` latent."""
    with torch.no_grad():
        return run_ddim(model, noisy, uniform_timesteps(t, stride), None, schedule)


def complete_pose(
    obs: Observation3D,
    model: EpsModel,
    schedule: DiffusionSchedule,
    tree: KinematicTree,
    stream: RngStream,
    context: ContextSequence | None = None,
    rho: float = IK_RHO,
    init: torch.Tensor | None = None,
    steps: int = IK_STEPS,
) -> torch.Tensor:
    """Sample poses consistent with the observed joints.

    The start latent is pure noise, or the DDIM inversion of ``init`` when given.
    """
    timesteps = linear_timesteps(IK_T_START, IK_T_END, steps)
    if init is None:
        z = gauss_sample(stream, (obs.joints.shape[0], tree.joint_count, 6))
    else:
        z = ddim_invert(model, init, IK_T_START, context, schedule, stride=10)
    out = run_ddim(model, z, timesteps, context, schedule, obs.guidance(rho), tree)
    sixd_to_matrix(out)
    return out


def make_scenario(name: str, gt: torch.Tensor, tree: KinematicTree, beta: torch.Tensor | None = None) -> Observation3D:
    """Root-relative joints of ``gt`` with the scenario's occlusion mask."""
    n = tree.joint_count
    if name == "end_effectors":
        mask = torch.zeros(n, dtype=torch.bool)
        mask[list(END_EFFECTORS)] = True
    elif name in SCENARIO_HIDDEN:
        mask = torch.ones(n, dtype=torch.bool)
        mask[list(SCENARIO_HIDDEN[name])] = False
    else:
        raise ValueError(f"unknown scenario {name!r}")
    with torch.no_grad():
        joints = forward_kinematics(gt, beta, tree)
    return Observation3D(joints, mask.expand(joints.shape[:-1]).clone())


def diffusion_projection(
    pose: torch.Tensor,
    model: EpsModel,
    schedule: DiffusionSchedule,
    context: ContextSequence | None = None,
    t: int = PRIOR_T,
    stride: int = PRIOR_STRIDE,
) -> torch.Tensor:
    """Differentiable short DDIM pass that treats ``pose`` as the step-``t`` latent."""
    timesteps = uniform_timesteps(t, stride)
    z = pose
    for k, tk in enumerate(timesteps):
        t_prev = timesteps[k + 1] if k + 1 < len(timesteps) else 0
        z = ddim_step(z, tk, t_prev, cfg_epsilon(model, z, tk, context), schedule)
    return z


@dataclass
class FitResult:
    pose: torch.Tensor
    beta: torch.Tensor
    history: list[torch.Tensor]


def smplify_objective(
    pose, beta, obs: Observation2D, model, schedule, tree, lambdas, context=None, sigma: float = 100.0
) -> torch.Tensor:
    """Per-item objective ``[B]``: data + prior + shape + angle terms."""
    lam_prior, lam_shape, lam_angle = lambdas
    joints = forward_kinematics(pose, beta, tree) + obs.translation[:, None, :]
    data = (obs.weights * geman_mcclure(project(joints, obs.intrinsics) - obs.keypoints, sigma)).sum(-1)
    total = data + lam_shape * (beta**2).sum(-1)
    if lam_angle:
        # hyperextension (negative bend) is the penalized direction
        total = total + lam_angle * torch.exp(-hinge_bend_angles(pose)).sum(-1)
    if lam_prior:
        projected = diffusion_projection(pose, model, schedule, context)
        total = total + lam_prior * ((pose - projected) ** 2).flatten(1).sum(-1)
    return total


def smplify_fit(
    obs: Observation2D,
    init: torch.Tensor,
    beta: torch.Tensor | None,
    model: EpsModel,
    schedule: DiffusionSchedule,
    tree: KinematicTree,
    lambdas=(0.1, 1e-3, 1e-2),
    iters: int = 200,
    context: ContextSequence | None = None,
    step0: float = 1e-2,
    shrink: float = 0.5,
    max_backtracks: int = 20,
) -> FitResult:
    """Gradient descent with per-item backtracking line search.

    Each item keeps its own step size: it starts at ``step0``, halves on every
    rejected trial and doubles after an accepted one. An item whose line search
    fails is left where it is for that iteration.
    """
    if any(l < 0 for l in lambdas):
        raise ValueError("lambdas must be non-negative")
    pose = init.detach().clone()
    beta = torch.zeros(pose.shape[0], SHAPE_DIM, dtype=DTYPE) if beta is None else beta.detach().clone()
    step = torch.full((pose.shape[0],), step0, dtype=DTYPE)

    def objective(p, b):
        return smplify_objective(p, b, obs, model, schedule, tree, lambdas, context)

    history = []
    for it in range(iters):
        p = pose.clone().requires_grad_(True)
        b = beta.clone().requires_grad_(True)
        loss = objective(p, b)
        if not torch.isfinite(loss).all():
            raise OptimizationError(f"objective diverged at iteration {it}")
        gp, gb = torch.autograd.grad(loss.sum(), (p, b))
        loss = loss.detach()
        history.append(loss)
        pending = torch.ones_like(step, dtype=torch.bool)
        trial_step = step.clone()
        for _ in range(max_backtracks):
            s = trial_step[:, None]
            cand_p = pose - s[..., None] * gp
            cand_b = beta - s * gb
            try:
                with torch.no_grad():
                    cand = objective(cand_p, cand_b)
            except (ValueError, NumericError):
                cand = torch.full_like(loss, float("inf"))
            ok = pending & torch.isfinite(cand) & (cand <= loss)
            pose = torch.where(ok[:, None, None], cand_p, pose)
            beta = torch.where(ok[:, None], cand_b, beta)
            step = torch.where(ok, trial_step * 2, step)
            pending &= ~ok
            if not pending.any():
                break
            trial_step = torch.where(pending, trial_step * shrink, trial_step)
        step = torch.where(pending, trial_step, step)
    with torch.no_grad():
        history.append(objective(pose, beta))
    return FitResult(pose, beta, history)
