"""Synthetic pose/caption corpus and the ``PDPS1`` pose file format."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from .numcore import DTYPE, RngStream
from .rotations import axis_angle_to_matrix, matrix_to_sixd

POSE_HEADER = "PDPS1"
POSE_VALUES = 24 * 6

# Axis-angle limit box per joint, (lo, hi) for each of x, y, z in radians.
# Axes follow the skeleton module: y up, +x to the body's left, +z forward.
_DEFAULT_BOX = ((-0.2, 0.2), (-0.2, 0.2), (-0.2, 0.2))
JOINT_LIMITS = np.array(
    [
        ((-0.3, 0.3), (-0.3, 0.3), (-0.3, 0.3)),      # pelvis
        ((-1.6, 0.4), (-0.4, 0.4), (-0.2, 0.8)),      # left_hip
        ((-1.6, 0.4), (-0.4, 0.4), (-0.8, 0.2)),      # right_hip
        ((-0.3, 0.5), (-0.3, 0.3), (-0.2, 0.2)),      # spine1
        ((0.0, 2.4), (-0.05, 0.05), (-0.05, 0.05)),   # left_knee
        ((0.0, 2.4), (-0.05, 0.05), (-0.05, 0.05)),   # right_knee
        ((-0.2, 0.3), (-0.2, 0.2), (-0.15, 0.15)),    # spine2
        ((-0.5, 0.5), (-0.2, 0.2), (-0.2, 0.2)),      # left_ankle
        ((-0.5, 0.5), (-0.2, 0.2), (-0.2, 0.2)),      # right_ankle
        ((-0.2, 0.3), (-0.2, 0.2), (-0.15, 0.15)),    # spine3
        ((-0.2, 0.2), (-0.05, 0.05), (-0.05, 0.05)),  # left_foot
        ((-0.2, 0.2), (-0.05, 0.05), (-0.05, 0.05)),  # right_foot
        ((-0.4, 0.5), (-0.5, 0.5), (-0.3, 0.3)),      # neck
        ((-0.1, 0.1), (-0.2, 0.2), (-0.2, 0.3)),      # left_collar
        ((-0.1, 0.1), (-0.2, 0.2), (-0.3, 0.2)),      # right_collar
        ((-0.4, 0.5), (-0.6, 0.6), (-0.3, 0.3)),      # head
        ((-0.8, 0.8), (-1.0, 1.0), (-1.4, 1.4)),      # left_shoulder
        ((-0.8, 0.8), (-1.0, 1.0), (-1.4, 1.4)),      # right_shoulder
        ((-0.3, 0.3), (-2.4, 0.0), (-0.05, 0.05)),    # left_elbow
        ((-0.3, 0.3), (0.0, 2.4), (-0.05, 0.05)),     # right_elbow
        ((-0.5, 0.5), (-0.3, 0.3), (-0.5, 0.5)),      # left_wrist
        ((-0.5, 0.5), (-0.3, 0.3), (-0.5, 0.5)),      # right_wrist
        (_DEFAULT_BOX),                               # left_hand
        (_DEFAULT_BOX),                               # right_hand
    ],
    dtype=np.float64,
)  # fmt: skip

# Centers that differ from the middle of the box: (joint, axis) -> radians.
_CENTER_OVERRIDES = {(4, 0): 0.6, (5, 0): 0.6, (16, 2): -0.7, (17, 2): 0.7, (1, 0): -0.3, (2, 0): -0.3}
# Hand-placed latent couplings: (joint, axis) -> (latent index, weight).
_COUPLINGS = {
    (4, 0): (0, 1.0), (5, 0): (0, 1.0), (1, 0): (0, -0.8), (2, 0): (0, -0.8), (3, 0): (0, 0.5),
    (16, 2): (1, 1.0), (18, 1): (1, -0.6),
    (17, 2): (2, -1.0), (19, 1): (2, 0.6),
}  # fmt: skip

KNEEL_THRESHOLD = 1.2
STAND_THRESHOLD = 0.3
ARM_RAISE_THRESHOLD = 0.5


@dataclass(frozen=True)
class CorpusSpec:
    size: int = 512
    seed: int = 0
    latent_rank: int = 8
    test_size: int = 0

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("corpus size must be at least 1")
        if self.latent_rank < 3:
            raise ValueError("latent rank must be at least 3 for the coupled factors")


@dataclass
class PoseRecord:
    id: int
    pose: torch.Tensor  # [24, 6]
    caption: str | None = None
    split: str = "train"


def _mixing(spec: CorpusSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rng = np.random.default_rng([spec.seed, 0xC0FFEE])
    W = 0.5 * rng.standard_normal((24 * 3, spec.latent_rank))
    W[:, :3] *= 0.3
    for (j, a), (k, w) in _COUPLINGS.items():
        W[j * 3 + a, k] += w * 2.0
    W /= np.linalg.norm(W, axis=1, keepdims=True)
    lo, hi = JOINT_LIMITS[..., 0].reshape(-1), JOINT_LIMITS[..., 1].reshape(-1)
    center = (lo + hi) / 2
    for (j, a), c in _CENTER_OVERRIDES.items():
        center[j * 3 + a] = c
    scale = (hi - lo) / 2 * 0.8
    return W, center, scale


def caption_for(axis_angles: np.ndarray) -> str:
    """Caption from angle predicates on ``[24, 3]`` axis-angle vectors."""
    knees = axis_angles[[4, 5], 0]
    parts = []
    if (knees > KNEEL_THRESHOLD).all():
        parts.append("kneeling")
    elif (knees < STAND_THRESHOLD).all():
        parts.append("standing")
    else:
        parts.append("crouching")
    if axis_angles[16, 2] > ARM_RAISE_THRESHOLD:
        parts.append("left arm raised")
    if axis_angles[17, 2] < -ARM_RAISE_THRESHOLD:
        parts.append("right arm raised")
    return ", ".join(parts)


def synth_axis_angles(spec: CorpusSpec, record_id: int) -> np.ndarray:
    W, center, scale = _mixing(spec)
    u = RngStream(spec.seed).spawn(record_id).generator().standard_normal(spec.latent_rank)
    aa = np.clip(center + scale * (W @ u), JOINT_LIMITS[..., 0].reshape(-1), JOINT_LIMITS[..., 1].reshape(-1))
    return aa.reshape(24, 3)


def synth_corpus(spec: CorpusSpec) -> list[PoseRecord]:
    """``spec.size`` training records followed by ``spec.test_size`` held-out ones."""
    records = []
    for i in range(spec.size + spec.test_size):
        aa = synth_axis_angles(spec, i)
        pose = matrix_to_sixd(axis_angle_to_matrix(torch.from_numpy(aa)))
        records.append(PoseRecord(i, pose, caption_for(aa), "train" if i < spec.size else "test"))
    return records


def stack_poses(records: Iterable[PoseRecord]) -> torch.Tensor:
    return torch.stack([r.pose for r in records]).to(DTYPE)


class PoseFileError(ValueError):
    pass


def save_poses(records: Iterable[PoseRecord], path: str | Path) -> None:
    lines = [POSE_HEADER]
    for r in records:
        lines.append(
            json.dumps({"id": int(r.id), "split": r.split, "caption": r.caption, "pose": r.pose.reshape(-1).tolist()})
        )
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write pose file {path}: {exc.strerror}") from exc


def load_poses(path: str | Path) -> list[PoseRecord]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read pose file {path}: {exc.strerror}") from exc
    except UnicodeDecodeError as exc:
        raise PoseFileError(f"{path}: not UTF-8 text at byte {exc.start}") from exc
    lines = text.split("\n")
    if lines[0] != POSE_HEADER:
        raise PoseFileError(f"{path}: bad header {lines[0][:16]!r}, expected {POSE_HEADER!r}")
    if lines[-1] == "":
        lines.pop()
    elif len(lines) > 1:
        raise PoseFileError(f"{path}: line {len(lines)}: truncated record (no trailing newline)")
    records, seen = [], set()
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            d = json.loads(line)
            rid, pose = int(d["id"]), d["pose"]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise PoseFileError(f"{path}: line {lineno}: malformed record ({exc})") from exc
        if not isinstance(pose, list) or len(pose) != POSE_VALUES:
            got = len(pose) if isinstance(pose, list) else type(pose).__name__
            raise PoseFileError(f"{path}: record {rid}: expected {POSE_VALUES} values, got {got}")
        if rid in seen:
            raise PoseFileError(f"{path}: line {lineno}: duplicate id {rid}")
        seen.add(rid)
        try:
            values = torch.tensor(pose, dtype=DTYPE).reshape(24, 6)
        except (TypeError, ValueError, RuntimeError) as exc:
            raise PoseFileError(f"{path}: record {rid}: non-numeric pose values") from exc
        records.append(PoseRecord(rid, values, d.get("caption"), d.get("split", "train")))
    return records
