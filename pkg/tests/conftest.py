import numpy as np
import pytest
import torch

from poseprior.numcore import DTYPE, RngStream
from poseprior.skeleton import KinematicTree


@pytest.fixture(scope="session")
def tree():
    return KinematicTree()


@pytest.fixture
def stream():
    return RngStream(1234)


def random_sixd(stream: RngStream, *shape) -> torch.Tensor:
    """Random non-orthonormal 6D inputs, comfortably away from degeneracy."""
    x = torch.from_numpy(stream.generator().standard_normal(shape + (6,))).to(DTYPE)
    x[..., :3] += torch.tensor([1.5, 0.0, 0.0], dtype=DTYPE)
    x[..., 3:] += torch.tensor([0.0, 1.5, 0.0], dtype=DTYPE)
    return x


def rel_close(a, b, rtol=1e-4, atol=1e-6):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    small = np.abs(b) < 1e-2
    return bool(np.all(np.where(small, np.abs(a - b) <= atol, np.abs(a - b) <= rtol * np.abs(b))))
