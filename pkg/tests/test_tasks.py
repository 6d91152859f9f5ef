import pytest
import torch

from poseprior.denoiser import DenoiserConfig, PoseDiffuser
from poseprior.diffusion import make_schedule, uniform_timesteps
from poseprior.numcore import DTYPE, RngStream, evaluate_with_gradients, finite_difference_gradient, gradient_agrees
from poseprior.rotations import matrix_to_quaternion, quaternion_geodesic, sixd_to_matrix
from poseprior.skeleton import forward_kinematics, identity_pose
from poseprior.tasks import (
    END_EFFECTORS,
    Observation2D,
    Observation3D,
    complete_pose,
    denoise_pose,
    diffusion_projection,
    make_scenario,
    perturb_pose,
    refine_pose,
    render_observation,
    smplify_fit,
)

SMALL = DenoiserConfig(latent_dim=16, blocks=1, heads=2, phi_hidden=4, fusion_blocks=1)


@pytest.fixture(scope="module")
def schedule():
    return make_schedule()


@pytest.fixture(scope="module")
def model():
    return PoseDiffuser(SMALL, seed=11)


@pytest.fixture
def counted(model):
    calls = []
    handle = model.register_forward_hook(lambda mod, args, out: calls.append(args[1]))
    yield calls
    handle.remove()


def first(t):
    return int(torch.as_tensor(t).reshape(-1)[0])


def valid_poses(stream, n):
    return torch.from_numpy(stream.generator().normal(scale=0.2, size=(n, 24, 6))) + identity_pose(n)


def test_refine_evaluation_count(model, schedule, tree, stream, counted):
    gt = valid_poses(stream, 2)
    obs = render_observation(gt, tree)
    out = refine_pose(perturb_pose(gt, 0.3, stream), obs, model, schedule, tree)
    assert out.shape == gt.shape
    # inversion 25 + guided denoising 25
    assert len(counted) == 50
    guided = [first(t) for t in counted[25:]]
    assert guided == uniform_timesteps(50, 2)


def test_refine_with_zero_weight_is_unguided(model, schedule, tree, stream):
    gt = valid_poses(stream, 2)
    init = perturb_pose(gt, 0.3, stream)
    obs = render_observation(gt, tree)
    blind = Observation2D(obs.keypoints, torch.zeros_like(obs.weights), obs.translation)
    a = refine_pose(init, blind, model, schedule, tree)
    b = refine_pose(init, obs, model, schedule, tree, rho=0.0)
    assert torch.allclose(a, b, rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        Observation2D(obs.keypoints, -obs.weights, obs.translation)


def test_denoise_count_and_determinism(model, schedule, stream, counted):
    noisy = perturb_pose(identity_pose(3), 0.5, stream)
    a = denoise_pose(noisy, model, schedule)
    assert len(counted) == 80
    assert [first(t) for t in counted] == list(range(400, 0, -5))
    assert torch.equal(a, denoise_pose(noisy, model, schedule))


def test_complete_count_and_determinism(model, schedule, tree, stream, counted):
    gt = valid_poses(stream, 2)
    obs = make_scenario("occ_arm", gt, tree)
    a = complete_pose(obs, model, schedule, tree, RngStream(4))
    assert len(counted) == 400
    ts = [first(t) for t in counted]
    assert ts[0] == 900 and ts[-1] == 10 and all(x > y for x, y in zip(ts, ts[1:]))
    b = complete_pose(obs, model, schedule, tree, RngStream(4))
    assert torch.equal(a, b)
    sixd_to_matrix(a)


def test_complete_from_init(model, schedule, tree, stream):
    gt = valid_poses(stream, 1)
    obs = make_scenario("end_effectors", gt, tree)
    out = complete_pose(obs, model, schedule, tree, RngStream(4), init=gt, steps=10)
    assert out.shape == gt.shape


def test_scenario_masks(tree, stream):
    gt = valid_poses(stream, 3)
    ee = make_scenario("end_effectors", gt, tree)
    assert ee.mask.shape == (3, 24)
    assert ee.mask[0].nonzero().flatten().tolist() == sorted(END_EFFECTORS)
    arm = make_scenario("occ_arm", gt, tree)
    legs = make_scenario("occ_legs", gt, tree)
    assert int(arm.mask[0].sum()) == 19 and int(legs.mask[0].sum()) == 16
    assert arm.mask[:, 0].all() and legs.mask[:, 0].all()
    assert torch.allclose(arm.joints[:, 0], torch.zeros(3, 3, dtype=DTYPE))
    assert torch.allclose(arm.joints, forward_kinematics(gt, None, tree))
    with pytest.raises(ValueError):
        make_scenario("occ_head", gt, tree)
    with pytest.raises(ValueError):
        Observation3D(arm.joints, torch.zeros_like(arm.mask))


def test_render_observation_centres_root(tree, stream):
    gt = valid_poses(stream, 2)
    obs = render_observation(gt, tree)
    assert obs.keypoints.shape == (2, 24, 2)
    c = obs.intrinsics
    assert torch.allclose(obs.keypoints[:, 0], torch.tensor([c.cx, c.cy], dtype=DTYPE).expand(2, 2))


def test_perturb_pose_angle(stream):
    pose = valid_poses(stream, 4)
    moved = perturb_pose(pose, 0.3, stream)
    qa = matrix_to_quaternion(sixd_to_matrix(pose))
    qb = matrix_to_quaternion(sixd_to_matrix(moved))
    assert torch.allclose(quaternion_geodesic(qa, qb), torch.full((4, 24), 0.3, dtype=DTYPE), atol=1e-9)


def test_diffusion_projection_gradient(model, schedule, stream):
    pose = valid_poses(stream, 1)
    w = torch.from_numpy(stream.generator().normal(size=pose.shape))
    f = lambda p: (diffusion_projection(p, model, schedule) * w).sum()
    _, (g,) = evaluate_with_gradients(f, [pose])
    assert gradient_agrees(g, finite_difference_gradient(f, pose))


def test_smplify_monotone_and_improves(model, schedule, tree, stream):
    gt = valid_poses(stream, 2)
    obs = render_observation(gt, tree)
    init = perturb_pose(gt, 0.3, stream)
    fit = smplify_fit(obs, init, None, model, schedule, tree, iters=15)
    hist = torch.stack(fit.history)
    assert hist.shape == (16, 2)
    assert (hist[1:] <= hist[:-1]).all()
    assert (hist[-1] < hist[0]).all()
    assert fit.beta.shape == (2, 10)


def test_smplify_without_prior(model, schedule, tree, stream):
    gt = valid_poses(stream, 1)
    obs = render_observation(gt, tree)
    fit = smplify_fit(obs, perturb_pose(gt, 0.3, stream), None, model, schedule, tree, lambdas=(0, 0, 0), iters=5)
    assert fit.history[-1] < fit.history[0]
    with pytest.raises(ValueError):
        smplify_fit(obs, gt, None, model, schedule, tree, lambdas=(0.1, -1, 0))
