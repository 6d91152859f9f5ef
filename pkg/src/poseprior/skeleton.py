"""Rigid 24-joint body model: forward kinematics, skeletal distances, projection.

The topology follows the SMPL joint order. Rest offsets are a hand-written
humanoid table (meters, y up, +x toward the body's left, +z forward); only the
topology matters to the diffusion model.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import torch

from .numcore import DTYPE
from .rotations import angle_about_axis, sixd_to_matrix

JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow", "left_wrist", "right_wrist", "left_hand", "right_hand",
)  # fmt: skip

SMPL_PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21)

REST_OFFSETS = (
    (0.0, 0.0, 0.0),
    (0.06, -0.09, 0.0), (-0.06, -0.09, 0.0), (0.0, 0.11, -0.02),
    (0.04, -0.38, 0.0), (-0.04, -0.38, 0.0), (0.0, 0.13, 0.0),
    (0.0, -0.40, -0.04), (0.0, -0.40, -0.04), (0.0, 0.05, 0.02),
    (0.02, -0.05, 0.12), (-0.02, -0.05, 0.12), (0.0, 0.22, -0.03),
    (0.08, 0.12, -0.01), (-0.08, 0.12, -0.01), (0.0, 0.09, 0.05),
    (0.12, 0.04, -0.01), (-0.12, 0.04, -0.01), (0.26, 0.0, -0.02),
    (-0.26, 0.0, -0.02), (0.25, 0.01, 0.0), (-0.25, 0.01, 0.0),
    (0.08, -0.01, -0.01), (-0.08, -0.01, -0.01),
)  # fmt: skip

# Joints whose flexion is penalized by the angle prior: (joint, axis, sign).
# ``sign * angle_about_axis`` is the bend; negative bend is hyperextension.
HINGE_JOINTS = ((4, "x", 1.0), (5, "x", 1.0), (18, "y", -1.0), (19, "y", 1.0))

# Hop-count bands from the pelvis mapped to the 5 group embeddings.
GROUP_BANDS = ((0, 0), (1, 1), (2, 3), (4, 5), (6, None))
GROUP_COUNT = 5
SHAPE_DIM = 10
BONE_SCALE_RANGE = (0.5, 2.0)


def _default_shape_basis(seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).uniform(-0.1, 0.1, size=(len(SMPL_PARENTS), SHAPE_DIM))


@dataclass(frozen=True)
class KinematicTree:
    parent: tuple[int, ...] = SMPL_PARENTS
    rest_offset: np.ndarray = field(default_factory=lambda: np.asarray(REST_OFFSETS, dtype=np.float64))
    shape_basis: np.ndarray = field(default_factory=_default_shape_basis)

    def __post_init__(self):
        parent = tuple(int(p) for p in self.parent)
        object.__setattr__(self, "parent", parent)
        roots = [j for j, p in enumerate(parent) if p < 0]
        if roots != [0] or any(p >= j for j, p in enumerate(parent) if p >= 0):
            raise ValueError("parents must form a single tree rooted at joint 0 in topological order")
        offsets = np.asarray(self.rest_offset, dtype=np.float64)
        basis = np.asarray(self.shape_basis, dtype=np.float64)
        if offsets.shape != (len(parent), 3) or np.any(offsets[0] != 0):
            raise ValueError("rest offsets must be (J, 3) with a zero root offset")
        if basis.shape[0] != len(parent):
            raise ValueError("shape basis must have one row per joint")
        object.__setattr__(self, "rest_offset", offsets)
        object.__setattr__(self, "shape_basis", basis)

    @property
    def joint_count(self) -> int:
        return len(self.parent)

    def to_json(self) -> str:
        return json.dumps(
            {"parent": list(self.parent), "rest_offset": self.rest_offset.tolist(), "shape_basis": self.shape_basis.tolist()}
        )

    @classmethod
    def from_json(cls, text: str) -> "KinematicTree":
        d = json.loads(text)
        return cls(tuple(d["parent"]), np.asarray(d["rest_offset"]), np.asarray(d["shape_basis"]))

    def distance_table(self) -> np.ndarray:
        return _distance_table(self.parent)

    def groups(self) -> np.ndarray:
        return np.array([joint_group(self, i) for i in range(self.joint_count)])


def _distance_table(parent: tuple[int, ...]) -> np.ndarray:
    n = len(parent)
    adj: list[list[int]] = [[] for _ in range(n)]
    for j, p in enumerate(parent):
        if p >= 0:
            adj[j].append(p)
            adj[p].append(j)
    table = np.full((n, n), -1, dtype=np.int64)
    for s in range(n):
        table[s, s] = 0
        queue = deque([s])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if table[s, v] < 0:
                    table[s, v] = table[s, u] + 1
                    queue.append(v)
    return table


def skeletal_distance(tree: KinematicTree, i: int, j: int) -> int:
    """Hop count between joints ``i`` and ``j`` along the skeleton."""
    # walk both joints up to their lowest common ancestor
    depth = {}
    k, d = i, 0
    while k >= 0:
        depth[k] = d
        k, d = tree.parent[k], d + 1
    k, d = j, 0
    while k not in depth:
        k, d = tree.parent[k], d + 1
    return depth[k] + d


def joint_group(tree: KinematicTree, i: int) -> int:
    hops = skeletal_distance(tree, 0, i)
    for g, (lo, hi) in enumerate(GROUP_BANDS):
        if hops >= lo and (hi is None or hops <= hi):
            return g
    raise AssertionError("unreachable")


def bone_scales(tree: KinematicTree, beta: torch.Tensor) -> torch.Tensor:
    basis = torch.as_tensor(tree.shape_basis, dtype=DTYPE)
    return (1 + beta @ basis.T).clamp(*BONE_SCALE_RANGE)


def forward_kinematics(pose: torch.Tensor, beta: torch.Tensor | None, tree: KinematicTree) -> torch.Tensor:
    """Joint positions ``[..., J, 3]`` for 6D pose ``[..., J, 6]``; the root sits at the origin.

    Bone ``i`` is ``rest_offset[i]`` scaled by ``1 + (shape_basis @ beta)[i]``
    (clipped) and rotated by the parent's global rotation.
    """
    batch = pose.shape[:-2]
    if beta is None:
        beta = torch.zeros(*batch, SHAPE_DIM, dtype=DTYPE)
    local = sixd_to_matrix(pose)
    offsets = torch.as_tensor(tree.rest_offset, dtype=DTYPE) * bone_scales(tree, beta)[..., None]
    glob: list[torch.Tensor] = []
    pos: list[torch.Tensor] = []
    for j, p in enumerate(tree.parent):
        if p < 0:
            glob.append(local[..., j, :, :])
            pos.append(torch.zeros(*batch, 3, dtype=DTYPE))
        else:
            glob.append(glob[p] @ local[..., j, :, :])
            pos.append(pos[p] + (glob[p] @ offsets[..., j, :, None])[..., 0])
    return torch.stack(pos, dim=-2)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float = 1000.0
    fy: float = 1000.0
    cx: float = 500.0
    cy: float = 500.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")


class BehindCameraError(ValueError):
    pass


def project(points: torch.Tensor, K: CameraIntrinsics) -> torch.Tensor:
    """Pinhole projection of camera-frame points ``[..., 3]`` to pixels ``[..., 2]``."""
    z = points[..., 2]
    if (z <= 1e-6).any():
        raise BehindCameraError("point at or behind the camera plane")
    u = K.fx * points[..., 0] / z + K.cx
    v = K.fy * points[..., 1] / z + K.cy
    return torch.stack([u, v], dim=-1)


def geman_mcclure(residual: torch.Tensor, sigma: float = 100.0) -> torch.Tensor:
    """Sum of ``r^2 sigma^2 / (r^2 + sigma^2)`` over the last axis."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    sq = residual**2
    return (sq * sigma**2 / (sq + sigma**2)).sum(-1)


def hinge_bend_angles(pose: torch.Tensor) -> torch.Tensor:
    """Flexion angle of knees and elbows ``[..., 4]``; hyperextension is negative."""
    R = sixd_to_matrix(pose)
    return torch.stack([sign * angle_about_axis(R[..., j, :, :], axis) for j, axis, sign in HINGE_JOINTS], dim=-1)


def knee_bend(pose: torch.Tensor) -> torch.Tensor:
    """Mean flexion of the two knees."""
    return hinge_bend_angles(pose)[..., :2].mean(-1)


def identity_pose(*batch: int) -> torch.Tensor:
    eye6 = torch.tensor([1.0, 0, 0, 0, 1.0, 0], dtype=DTYPE)
    return eye6.expand(*batch, len(SMPL_PARENTS), 6).clone()
