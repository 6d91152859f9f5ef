"""6D rotations, rotation matrices, quaternions and geodesic distances.

All functions accept leading batch dimensions. Matrices are stored with the
rotated basis vectors as columns, so a 6D vector is ``[R[:, 0], R[:, 1]]``.
"""

from __future__ import annotations

import torch

from .numcore import DTYPE

DEGENERATE_EPS = 1e-9
ORTHO_TOL = 1e-6


class DegenerateRotationError(ValueError):
    """A 6D vector whose columns are zero or parallel."""


class RotationValidationError(ValueError):
    """Input is not a proper rotation matrix."""


def sixd_to_matrix(r: torch.Tensor) -> torch.Tensor:
    """Gram-Schmidt map from ``[..., 6]`` to ``[..., 3, 3]`` rotation matrices.

    Raises:
        DegenerateRotationError: first column is zero or the second is parallel to it.
    """
    a1, a2 = r[..., :3], r[..., 3:]
    n1 = a1.norm(dim=-1, keepdim=True)
    if (n1 <= DEGENERATE_EPS).any():
        raise DegenerateRotationError("6D first column is zero")
    b1 = a1 / n1
    u2 = a2 - (b1 * a2).sum(-1, keepdim=True) * b1
    n2 = u2.norm(dim=-1, keepdim=True)
    if (n2 <= DEGENERATE_EPS * a2.norm(dim=-1, keepdim=True).clamp_min(1.0)).any():
        raise DegenerateRotationError("6D columns are parallel")
    b2 = u2 / n2
    b3 = torch.linalg.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1)


def _validate(R: torch.Tensor) -> None:
    eye = torch.eye(3, dtype=R.dtype)
    err = (R.transpose(-1, -2) @ R - eye).abs().amax() if R.numel() else 0.0
    if err > ORTHO_TOL or (R.numel() and (torch.linalg.det(R) <= 0).any()):
        raise RotationValidationError(f"not a rotation matrix (orthonormality error {float(err):.3g})")


def matrix_to_sixd(R: torch.Tensor) -> torch.Tensor:
    """First two columns of ``R``, stacked."""
    _validate(R)
    return torch.cat([R[..., :, 0], R[..., :, 1]], dim=-1)


def matrix_to_quaternion(R: torch.Tensor) -> torch.Tensor:
    """Unit quaternions ``(w, x, y, z)`` with ``w >= 0``.

    Uses the largest-diagonal branch per matrix to stay well conditioned near
    180 degree rotations.
    """
    _validate(R)
    m = R
    tr = m[..., 0, 0] + m[..., 1, 1] + m[..., 2, 2]
    cands = torch.stack(
        [
            torch.stack([1 + tr, m[..., 2, 1] - m[..., 1, 2], m[..., 0, 2] - m[..., 2, 0], m[..., 1, 0] - m[..., 0, 1]], -1),
            torch.stack([m[..., 2, 1] - m[..., 1, 2], 1 + m[..., 0, 0] - m[..., 1, 1] - m[..., 2, 2], m[..., 0, 1] + m[..., 1, 0], m[..., 0, 2] + m[..., 2, 0]], -1),
            torch.stack([m[..., 0, 2] - m[..., 2, 0], m[..., 0, 1] + m[..., 1, 0], 1 - m[..., 0, 0] + m[..., 1, 1] - m[..., 2, 2], m[..., 1, 2] + m[..., 2, 1]], -1),
            torch.stack([m[..., 1, 0] - m[..., 0, 1], m[..., 0, 2] + m[..., 2, 0], m[..., 1, 2] + m[..., 2, 1], 1 - m[..., 0, 0] - m[..., 1, 1] + m[..., 2, 2]], -1),
        ],
        dim=-2,
    )
    diag = torch.stack([tr, m[..., 0, 0], m[..., 1, 1], m[..., 2, 2]], -1)
    pick = diag.argmax(-1)
    q = torch.gather(cands, -2, pick[..., None, None].expand(*pick.shape, 1, 4)).squeeze(-2)
    q = q / q.norm(dim=-1, keepdim=True)
    return canonical_quaternion(q)


def canonical_quaternion(q: torch.Tensor) -> torch.Tensor:
    sign = torch.where(q[..., :1] < 0, -1.0, 1.0).to(q.dtype)
    return q * sign


def quaternion_to_matrix(q: torch.Tensor) -> torch.Tensor:
    w, x, y, z = q.unbind(-1)
    return torch.stack(
        [
            torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        dim=-2,
    )


def quaternion_geodesic(q1: torch.Tensor, q2: torch.Tensor) -> torch.Tensor:
    """Angle in radians of the relative rotation, in ``[0, pi]``."""
    dot = (q1 * q2).sum(-1).abs().clamp(0.0, 1.0)
    return 2 * torch.arccos(dot)


def axis_angle_to_matrix(aa: torch.Tensor) -> torch.Tensor:
    """Rodrigues formula for ``[..., 3]`` rotation vectors."""
    aa = torch.as_tensor(aa, dtype=DTYPE)
    angle = aa.norm(dim=-1, keepdim=True)
    safe = angle.clamp_min(1e-12)
    axis = aa / safe
    x, y, z = axis.unbind(-1)
    zero = torch.zeros_like(x)
    K = torch.stack(
        [torch.stack([zero, -z, y], -1), torch.stack([z, zero, -x], -1), torch.stack([-y, x, zero], -1)], -2
    )
    s = torch.sin(angle)[..., None]
    c = torch.cos(angle)[..., None]
    eye = torch.eye(3, dtype=aa.dtype).expand(K.shape)
    R = eye + s * K + (1 - c) * (K @ K)
    return torch.where((angle < 1e-12)[..., None], eye, R)


def axis_rotation(axis: str, angle: float | torch.Tensor) -> torch.Tensor:
    vec = torch.zeros(3, dtype=DTYPE)
    vec["xyz".index(axis)] = 1.0
    return axis_angle_to_matrix(vec * torch.as_tensor(angle, dtype=DTYPE))


def angle_about_axis(R: torch.Tensor, axis: str) -> torch.Tensor:
    """Signed twist angle of ``R`` about a coordinate axis (exact for pure axis rotations)."""
    if axis == "x":
        return torch.atan2(R[..., 2, 1], R[..., 1, 1])
    if axis == "y":
        return torch.atan2(R[..., 0, 2], R[..., 2, 2])
    return torch.atan2(R[..., 1, 0], R[..., 0, 0])


def local_to_global(pose: torch.Tensor, parents) -> torch.Tensor:
    """Compose local rotations ``[..., J, 6]`` (or ``[..., J, 3, 3]``) down the tree."""
    local = sixd_to_matrix(pose) if pose.shape[-1] == 6 else pose
    out: list[torch.Tensor] = []
    for j, p in enumerate(parents):
        out.append(local[..., j, :, :] if p < 0 else out[p] @ local[..., j, :, :])
    return torch.stack(out, dim=-3)


def random_rotations(n: int, stream) -> torch.Tensor:
    """Uniformly distributed rotation matrices via normalized Gaussian quaternions."""
    from .numcore import gauss_sample

    q = gauss_sample(stream, (n, 4))
    q = q / q.norm(dim=-1, keepdim=True)
    return quaternion_to_matrix(q)

