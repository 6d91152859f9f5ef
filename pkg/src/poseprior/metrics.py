"""Generation and fitting metrics over pose sets."""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from .rotations import local_to_global, matrix_to_quaternion, quaternion_geodesic, sixd_to_matrix
from .skeleton import KinematicTree, forward_kinematics

log = logging.getLogger(__name__)

COV_REGULARIZER = 1e-6


class AlignmentError(ValueError):
    pass


def _as_batch(poses) -> torch.Tensor:
    if isinstance(poses, torch.Tensor):
        return poses if poses.ndim == 3 else poses[None]
    return torch.stack([getattr(p, "pose", p) for p in poses])


def pose_features(poses, tree: KinematicTree) -> np.ndarray:
    """Root-centered rest-shape joint positions, flattened to 72 values per pose."""
    with torch.no_grad():
        return forward_kinematics(_as_batch(poses), None, tree).flatten(-2).numpy()


def gaussian_stats(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    feats = np.asarray(features, dtype=np.float64)
    if feats.shape[0] < feats.shape[1] + 1:
        log.warning("only %d samples for %d features; covariance is rank deficient", *feats.shape)
    mu = feats.mean(0)
    cov = np.cov(feats, rowvar=False) if feats.shape[0] > 1 else np.zeros((feats.shape[1],) * 2)
    cov = (cov + cov.T) / 2 + COV_REGULARIZER * np.eye(feats.shape[1])
    return mu, cov


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(mu_a, cov_a, mu_b, cov_b) -> float:
    """Frechet distance between two Gaussians.

    The cross term uses ``tr sqrt(A^1/2 B A^1/2)``, which equals
    ``tr sqrt(A B)`` but stays inside symmetric eigendecompositions.
    """
    root_a = _psd_sqrt(cov_a)
    cross = np.linalg.eigvalsh(root_a @ cov_b @ root_a)
    tr_cross = np.sqrt(np.clip(cross, 0, None)).sum()
    diff = mu_a - mu_b
    return float(max(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_cross, 0.0))


def fid_from_features(a: np.ndarray, b: np.ndarray) -> float:
    return frechet_distance(*gaussian_stats(a), *gaussian_stats(b))


def fid(a, b, tree: KinematicTree) -> float:
    return fid_from_features(pose_features(a, tree), pose_features(b, tree))


def apd(poses, tree: KinematicTree) -> float:
    """Average pairwise distance between pose feature vectors, in centimeters."""
    feats = pose_features(poses, tree) * 100.0
    n = feats.shape[0]
    if n < 2:
        raise ValueError("APD needs at least two poses")
    d = np.linalg.norm(feats[:, None, :] - feats[None, :, :], axis=-1)
    return float(d[np.triu_indices(n, k=1)].mean())


def _local_quats(poses) -> torch.Tensor:
    with torch.no_grad():
        return matrix_to_quaternion(sixd_to_matrix(_as_batch(poses)))


def d_nn(samples, reference) -> float:
    """Mean over samples of the nearest reference pose's per-joint geodesic distance.

    Per pair, geodesics over the 23 non-root joints are summed; the minimum
    over the reference is divided by 23 and averaged over samples (radians).
    """
    qs = _local_quats(samples)[:, 1:]
    qr = _local_quats(reference)[:, 1:]
    if qr.shape[0] == 0:
        raise ValueError("reference set is empty")
    best = []
    for chunk in torch.split(qs, 64):
        dist = quaternion_geodesic(chunk[:, None], qr[None]).sum(-1)
        best.append(dist.min(dim=1).values)
    return float(torch.cat(best).mean() / qs.shape[1])


def delta_q(pred, gt, tree: KinematicTree) -> torch.Tensor:
    """Mean global-frame geodesic error per pose (radians)."""
    with torch.no_grad():
        gp = matrix_to_quaternion(local_to_global(_as_batch(pred), tree.parent))
        gg = matrix_to_quaternion(local_to_global(_as_batch(gt), tree.parent))
        return quaternion_geodesic(gp, gg).mean(-1)


def procrustes_align(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Similarity transform of ``pred`` that best matches ``gt`` in least squares."""
    mu_p, mu_g = pred.mean(0), gt.mean(0)
    p, g = pred - mu_p, gt - mu_g
    if np.linalg.svd(g, compute_uv=False)[1] < 1e-9 or np.linalg.svd(p, compute_uv=False)[1] < 1e-9:
        raise AlignmentError("degenerate (collinear) point set")
    u, s, vt = np.linalg.svd(p.T @ g)
    d = np.sign(np.linalg.det(u @ vt))
    s[-1] *= d
    u[:, -1] *= d
    R = u @ vt
    scale = s.sum() / (p**2).sum()
    return scale * p @ R + mu_g


def pa_mpjpe(pred, gt) -> float:
    """Mean per-joint error after similarity alignment, in millimeters."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[0] < 3:
        raise AlignmentError("need matching point sets with at least 3 joints")
    aligned = procrustes_align(pred, gt)
    return float(np.linalg.norm(aligned - gt, axis=-1).mean() * 1000)


def mpjpe(pred, gt) -> float:
    pred, gt = np.asarray(pred), np.asarray(gt)
    return float(np.linalg.norm(pred - gt, axis=-1).mean() * 1000)


def j2j(pred, gt, tree: KinematicTree, beta=None) -> torch.Tensor:
    """Root-aligned mean joint-to-joint distance per pose, in millimeters."""
    with torch.no_grad():
        jp = forward_kinematics(_as_batch(pred), beta, tree)
        jg = forward_kinematics(_as_batch(gt), beta, tree)
        jp = jp - jp[..., :1, :]
        jg = jg - jg[..., :1, :]
        return (jp - jg).norm(dim=-1).mean(-1) * 1000


def write_metric_csv(rows: Iterable[tuple[str, str, str, float]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "set_a", "set_b", "value"])
        for metric, a, b, value in rows:
            w.writerow([metric, a, b, repr(float(value))])
