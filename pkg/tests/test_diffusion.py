import math

import numpy as np
import pytest
import torch

from poseprior.denoiser import DenoiserConfig, PoseDiffuser
from poseprior.diffusion import (
    GuidanceSpec,
    cfg_epsilon,
    ddim_invert,
    ddim_step,
    dps_epsilon,
    estimate_x0,
    linear_timesteps,
    make_schedule,
    q_sample,
    run_ddim,
    sample,
    training_loss,
    uniform_timesteps,
)
from poseprior.numcore import DTYPE, RngStream, finite_difference_gradient, gauss_sample, gradient_agrees
from poseprior.skeleton import CameraIntrinsics, forward_kinematics, project

from conftest import random_sixd

SMALL = DenoiserConfig(latent_dim=16, blocks=1, heads=2, phi_hidden=4, fusion_blocks=1)


@pytest.fixture(scope="module")
def schedule():
    return make_schedule()


@pytest.fixture(scope="module")
def model():
    return PoseDiffuser(SMALL, seed=5)


class Counting:
    """Wraps a model and records the timestep of every evaluation."""

    def __init__(self, inner):
        self.inner = inner
        self.calls = []

    def __call__(self, z, t, context=None):
        self.calls.append(t)
        return self.inner(z, t, context)

    def null_context(self, b):
        return self.inner.null_context(b)


class Linear:
    """``eps_hat = z @ A`` over the 6D axis, ignoring t and context."""

    def __init__(self, A):
        self.A = A

    def __call__(self, z, t, context=None):
        return z @ self.A


def test_schedule_values(schedule):
    assert schedule.T == 1000
    assert schedule.beta[0].item() == 1e-4
    assert schedule.beta[999].item() == pytest.approx(0.02, abs=1e-18)
    assert schedule.alpha_bar[0].item() == 1 - 1e-4
    diffs = schedule.alpha_bar[1:] - schedule.alpha_bar[:-1]
    assert (diffs < 0).all()
    for t in range(1, 1000):
        assert schedule.alpha_bar[t].item() == schedule.alpha_bar[t - 1].item() * schedule.alpha[t].item()
    with pytest.raises(ValueError):
        make_schedule(0)
    assert make_schedule(1).alpha_bar.tolist() == [1 - 1e-4]


def test_q_sample_closed_form(schedule, stream):
    z0 = random_sixd(stream, 4, 24)
    eps = gauss_sample(stream, (4, 24, 6))
    z = q_sample(z0, 0, eps, schedule)
    shrink = (1 - math.sqrt(schedule.abar(0))) * z0.abs()
    assert ((z - z0).abs() <= shrink + math.sqrt(1 - schedule.abar(0)) * eps.abs() + 1e-15).all()
    assert torch.equal(q_sample(z0, 300, torch.zeros_like(eps), schedule), math.sqrt(schedule.abar(300)) * z0)
    per_item = q_sample(z0, torch.tensor([0, 10, 500, 999]), eps, schedule)
    assert torch.equal(per_item[2], q_sample(z0[2:3], 500, eps[2:3], schedule)[0])


def test_q_sample_variance(schedule):
    z0 = torch.ones(10_000, 1, 1, dtype=DTYPE)
    for t in (50, 400, 900):
        z = q_sample(z0, t, gauss_sample(RngStream(t), tuple(z0.shape)), schedule)
        assert z.var().item() == pytest.approx(1 - schedule.abar(t), rel=0.05)


def test_training_loss_oracle_and_zero(schedule, stream):
    z0 = random_sixd(stream, 8, 24)

    def oracle(z, t, ctx):
        abar = schedule.alpha_bar[t].reshape(-1, 1, 1)
        return (z - abar.sqrt() * z0) / (1 - abar).sqrt()

    assert training_loss(oracle, z0, None, schedule, RngStream(3)).item() < 1e-18
    z0 = torch.zeros(1000, 24, 6, dtype=DTYPE)
    loss = training_loss(lambda z, t, c: torch.zeros_like(z), z0, None, schedule, RngStream(4))
    assert loss.item() == pytest.approx(144, rel=0.05)


def test_training_loss_applies_dropout(schedule, model, stream):
    seen = []

    def spy(z, t, ctx):
        seen.append(ctx)
        return model(z, t, ctx)

    spy.context = model.context
    ctx = model.context(["standing"] * 2000, None).detach()
    training_loss(spy, torch.zeros(2000, 24, 6, dtype=DTYPE), ctx, schedule, RngStream(8))
    assert 0.08 < seen[0].is_null.double().mean().item() < 0.12


def test_estimate_x0(schedule, stream):
    z0 = random_sixd(stream, 3, 24)
    eps = gauss_sample(stream, (3, 24, 6))
    for t in (0, 1, 250, 999):
        z = q_sample(z0, t, eps, schedule)
        assert (estimate_x0(z, t, eps, schedule) - z0).abs().max() < 1e-10
    z = gauss_sample(stream, (3, 24, 6))
    assert torch.allclose(estimate_x0(z, 0, torch.zeros_like(z), schedule), z / math.sqrt(schedule.abar(0)))
    x0 = estimate_x0(z, 640, eps, schedule)
    assert (q_sample(x0, 640, eps, schedule) - z).abs().max() < 1e-10


def test_ddim_step_with_oracle_noise_recovers_clean(schedule, stream):
    z0 = random_sixd(stream, 2, 24)
    eps = gauss_sample(stream, (2, 24, 6))
    for t in (1, 50, 500, 999):
        z = q_sample(z0, t, eps, schedule)
        assert (ddim_step(z, t, 0, eps, schedule) - z0).abs().max() < 1e-10
        if t > 10:
            assert (ddim_step(z, t, 10, eps, schedule) - q_sample(z0, 10, eps, schedule)).abs().max() < 1e-10


def test_ddim_step_determinism_and_variance(schedule, stream):
    z = gauss_sample(stream, (1000, 4))
    eps = gauss_sample(stream, (1000, 4))
    a = ddim_step(z, 500, 450, eps, schedule)
    assert torch.equal(a, ddim_step(z, 500, 450, eps, schedule))
    noisy = ddim_step(z, 500, 450, eps, schedule, sigma=0.3, stream=RngStream(2))
    assert noisy.var().item() > a.var().item()
    assert (noisy - a).var().item() == pytest.approx(
        0.09 + (math.sqrt(1 - schedule.abar(450) - 0.09) - math.sqrt(1 - schedule.abar(450))) ** 2 * eps.var().item(),
        rel=0.1,
    )
    with pytest.raises(ValueError):
        ddim_step(z, 500, 0, eps, schedule, sigma=0.1, stream=RngStream(1))
    with pytest.raises(ValueError):
        ddim_step(z, 500, 500, eps, schedule)
    with pytest.raises(ValueError):
        ddim_step(z, 500, 450, eps, schedule, sigma=0.1)


def test_ddim_invert_identity_and_linear_oracle(schedule, stream):
    A = torch.from_numpy(stream.generator().normal(scale=0.3, size=(6, 6)))
    lin = Linear(A)
    z0 = random_sixd(stream, 2, 24)
    assert torch.equal(ddim_invert(lin, z0, 0, None, schedule), z0)
    for t_target, stride in ((50, 1), (50, 2), (137, 10)):
        grid = list(range(0, t_target, stride)) + [t_target]
        M = np.eye(6)
        An = A.numpy()
        for cur, nxt in zip(grid[:-1], grid[1:]):
            ac = 1.0 if cur == 0 else schedule.abar(cur)
            an = schedule.abar(nxt)
            step = math.sqrt(an / ac) * (np.eye(6) - math.sqrt(1 - ac) * An) + math.sqrt(1 - an) * An
            M = M @ step
        expected = z0.numpy() @ M
        got = ddim_invert(lin, z0, t_target, None, schedule, stride).numpy()
        assert np.abs(got - expected).max() < 1e-8


def test_ddim_invert_rejects_out_of_range(schedule, model, stream):
    with pytest.raises(ValueError):
        ddim_invert(model, random_sixd(stream, 1, 24), 1000, None, schedule)


def test_timestep_grids():
    assert uniform_timesteps(50, 2) == list(range(50, 0, -2))
    assert len(uniform_timesteps(400, 5)) == 80
    grid = linear_timesteps(900, 10, 400)
    assert len(grid) == 400 and grid[0] == 900 and grid[-1] == 10
    with pytest.raises(ValueError):
        linear_timesteps(5, 1, 10)
    with pytest.raises(ValueError):
        uniform_timesteps(10, 0)


def test_sample_counts_and_determinism(schedule, model):
    counting = Counting(model)
    with torch.no_grad():
        a = sample(counting, schedule, 3, RngStream(9), steps=20)
        b = sample(model, schedule, 3, RngStream(9), steps=20)
    assert counting.calls == list(range(999, 0, -50))
    assert torch.equal(a, b)
    assert a.shape == (3, 24, 6)


def test_cfg_weight_extremes(schedule, model, stream):
    ctx = model.context(["kneeling"], None)
    z = gauss_sample(stream, (2, 24, 6))
    with torch.no_grad():
        assert torch.equal(cfg_epsilon(model, z, 500, ctx, 0.0), model(z, 500, None))
        assert torch.equal(cfg_epsilon(model, z, 500, ctx, 1.0), model(z, 500, ctx))
        cond, null = model(z, 500, ctx), model(z, 500, None)
        assert torch.allclose(cfg_epsilon(model, z, 500, ctx, 2.5), null + 2.5 * (cond - null), atol=1e-12)
        s0 = sample(model, schedule, 2, RngStream(4), ctx, guidance_scale=0.0)
        assert torch.equal(s0, sample(model, schedule, 2, RngStream(4)))


def reprojection_spec(rho, stream, b=2):
    kp = torch.from_numpy(stream.generator().uniform(300, 700, size=(b, 24, 2)))
    w = torch.from_numpy(stream.generator().uniform(0.2, 1.0, size=(b, 24)))
    trans = torch.tensor([[0.0, 0.0, 3.0]] * b, dtype=DTYPE)
    return GuidanceSpec(rho, "reprojection", kp, w, CameraIntrinsics(), trans)


def test_dps_rho_zero_is_bit_identical(schedule, model, tree, stream):
    z = gauss_sample(stream, (2, 24, 6))
    spec = reprojection_spec(0.0, stream)
    with torch.no_grad():
        plain = cfg_epsilon(model, z, 300, None)
    assert torch.equal(dps_epsilon(model, z, 300, None, spec, schedule, tree), plain)
    assert torch.equal(dps_epsilon(model, z, 300, None, None, schedule, tree), plain)


def test_dps_consistent_observation_has_no_pull(schedule, model, tree, stream):
    z = gauss_sample(stream, (2, 24, 6))
    with torch.no_grad():
        eps = model(z, 120)
        x0 = estimate_x0(z, 120, eps, schedule)
        joints = forward_kinematics(x0, None, tree)
        trans = torch.tensor([[0.0, 0.0, 4.0]] * 2, dtype=DTYPE)
        kp = project(joints + trans[:, None], CameraIntrinsics())
    for spec in (
        GuidanceSpec(0.5, "sparse3d", joints, torch.ones(2, 24, dtype=DTYPE)),
        GuidanceSpec(0.5, "reprojection", kp, torch.ones(2, 24, dtype=DTYPE), CameraIntrinsics(), trans),
    ):
        assert (dps_epsilon(model, z, 120, None, spec, schedule, tree) - eps).abs().max() < 1e-10


@pytest.mark.parametrize("kind", ["reprojection", "sparse3d"])
def test_dps_gradient_matches_fd(schedule, model, tree, stream, kind):
    rho = 0.7
    if kind == "reprojection":
        spec = reprojection_spec(rho, stream, 1)
    else:
        target = torch.from_numpy(stream.generator().normal(scale=0.3, size=(1, 24, 3)))
        mask = torch.from_numpy((stream.generator().uniform(size=(1, 24)) < 0.5).astype(np.float64))
        spec = GuidanceSpec(rho, "sparse3d", target, mask)
    t = 200
    z = gauss_sample(stream, (1, 24, 6))
    with torch.no_grad():
        base = model(z, t)
    guided = dps_epsilon(model, z, t, None, spec, schedule, tree)
    analytic = (guided - base) / (rho * math.sqrt(1 - schedule.abar(t)))

    def loss(zz):
        return spec.data_loss(estimate_x0(zz, t, model(zz, t), schedule), tree).sum()

    numeric = finite_difference_gradient(loss, z)
    assert gradient_agrees(analytic, numeric)


def test_guidance_validation(stream):
    with pytest.raises(ValueError):
        GuidanceSpec(-1.0, "sparse3d", torch.zeros(1, 24, 3), torch.ones(1, 24))
    with pytest.raises(ValueError):
        GuidanceSpec(1.0, "depth", torch.zeros(1, 24, 3), torch.ones(1, 24))
    with pytest.raises(ValueError):
        GuidanceSpec(1.0, "reprojection", torch.zeros(1, 24, 2), torch.ones(1, 24))


def test_dps_surfaces_behind_camera(schedule, model, tree, stream):
    from poseprior.skeleton import BehindCameraError

    spec = reprojection_spec(1.0, stream, 1)
    spec.translation = torch.tensor([[0.0, 0.0, -3.0]], dtype=DTYPE)
    with pytest.raises(BehindCameraError):
        dps_epsilon(model, gauss_sample(stream, (1, 24, 6)), 10, None, spec, schedule, tree)


def test_run_ddim_guided_counts(schedule, model, tree, stream):
    counting = Counting(model)
    spec = GuidanceSpec(1.0, "sparse3d", torch.zeros(1, 24, 3, dtype=DTYPE), torch.ones(1, 24, dtype=DTYPE))
    run_ddim(counting, gauss_sample(stream, (1, 24, 6)), uniform_timesteps(50, 2), None, schedule, spec, tree)
    assert len(counting.calls) == 25
