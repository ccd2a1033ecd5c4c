import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from hd2ssc import diffcore as dc
from hd2ssc.errors import ConfigError
from hd2ssc.geometry import (CameraModel, Projection, VoxelGridSpec, project_points,
                             project_voxels, sample_image_features)

K = np.array([[100.0, 0.0, 64.0], [0.0, 100.0, 32.0], [0.0, 0.0, 1.0]])
IDENTITY_CAM = CameraModel(K, np.eye(3), np.zeros(3))


def test_principal_ray():
    uv, z = project_points(np.array([0.0, 0.0, 5.0]), IDENTITY_CAM)
    np.testing.assert_allclose(uv, [64.0, 32.0])
    assert z == 5.0


def test_offset_point():
    uv, _ = project_points(np.array([1.0, 0.0, 5.0]), IDENTITY_CAM)
    np.testing.assert_allclose(uv, [84.0, 32.0])


def test_behind_camera_is_invalid():
    spec = VoxelGridSpec((1, 1, 1), (-0.5, -0.5, -1.5), 1.0)
    proj = project_voxels(spec, IDENTITY_CAM, (128, 64))
    assert not proj.valid[0, 0, 0]
    assert proj.depth[0, 0, 0] == -1.0


def test_voxel_centroid_convention():
    spec = VoxelGridSpec((2, 3, 4), (1.0, 2.0, 3.0), 0.5)
    c = spec.centroids()
    np.testing.assert_allclose(c[1, 2, 3], [1.0 + 0.75, 2.0 + 1.25, 3.0 + 1.75])


def test_camera_invariants():
    with pytest.raises(ConfigError):
        CameraModel(np.array([[100, 0, 1], [1, 100, 1], [0, 0, 1.0]]), np.eye(3), np.zeros(3))
    with pytest.raises(ConfigError):
        CameraModel(K, np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ConfigError):
        VoxelGridSpec((2, 2, 2), (0, 0, 0), 0.0)


def random_camera(rng):
    R = Rotation.random(random_state=int(rng.integers(2 ** 31))).as_matrix()
    f = rng.uniform(30, 200)
    Km = np.array([[f, 0, rng.uniform(20, 60)], [0, f * rng.uniform(0.8, 1.2), rng.uniform(20, 60)], [0, 0, 1.0]])
    # place the camera a few metres from the grid centre, looking at it
    target = np.array([2.0, 2.0, 1.0])
    forward = R[2]
    center = target - forward * rng.uniform(4, 10)
    return CameraModel(Km, R, -R @ center)


def test_round_trip_reprojection():
    rng = np.random.default_rng(0)
    spec = VoxelGridSpec((10, 10, 5), (0.0, 0.0, 0.0), 0.4)
    pts = spec.centroids()
    worst = 0.0
    for _ in range(100):
        cam = random_camera(rng)
        proj = project_voxels(spec, cam, (80, 80))
        v = proj.valid
        assert v.any()
        back = cam.backproject(proj.uv[v][:, 0], proj.uv[v][:, 1], proj.depth[v])
        worst = max(worst, np.abs(back - pts[v]).max())
    assert worst < 1e-9


def test_rigid_consistency():
    rng = np.random.default_rng(1)
    spec = VoxelGridSpec((6, 6, 3), (0.0, 0.0, 0.0), 0.5)
    cam = random_camera(rng)
    Rg = Rotation.random(random_state=3).as_matrix()
    tg = rng.normal(size=3)
    pts = spec.centroids().reshape(-1, 3)
    moved = pts @ Rg.T + tg
    # camera seeing the moved scene: R' = R Rg^T, t' = t - R' tg
    R2 = cam.R @ Rg.T
    cam2 = CameraModel(cam.K, R2, cam.t - R2 @ tg)
    uv1, z1 = project_points(pts, cam)
    uv2, z2 = project_points(moved, cam2)
    assert np.abs(uv1 - uv2).max() < 1e-9
    assert np.abs(z1 - z2).max() < 1e-9


def test_shrinking_image_never_adds_valid_voxels():
    rng = np.random.default_rng(2)
    spec = VoxelGridSpec((8, 8, 4), (0.0, 0.0, 0.0), 0.5)
    for _ in range(20):
        cam = random_camera(rng)
        big = project_voxels(spec, cam, (96, 96)).valid
        small = project_voxels(spec, cam, (48, 64)).valid
        assert not np.any(small & ~big)


def _projection(uv, valid, size):
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 1, 1, 2)
    valid = np.asarray(valid).reshape(-1, 1, 1)
    return Projection(uv=uv, depth=np.ones(valid.shape), valid=valid, image_size=size)


def test_sample_constant_field():
    proj = _projection([[1.3, 2.7], [0.0, 0.0]], [True, False], (4, 4))
    out = sample_image_features(np.ones((2, 4, 4)), proj).data
    assert out.shape == (2, 2, 1, 1)
    np.testing.assert_array_equal(out[:, 0], 1.0)
    np.testing.assert_array_equal(out[:, 1], 0.0)


def test_sample_at_pixel_centre_and_midpoint():
    feat = np.zeros((1, 3, 3))
    feat[0, 1, 1] = 7.0
    feat[0, 1, 2] = 1.0
    proj = _projection([[1.0, 1.0], [1.5, 1.0]], [True, True], (3, 3))
    out = sample_image_features(feat, proj).data.reshape(-1)
    assert out[0] == 7.0
    f2 = np.zeros((1, 1, 2))
    f2[0, 0, 1] = 1.0
    assert sample_image_features(f2, _projection([[0.5, 0.0]], [True], (2, 1))).data.item() == 0.5


def test_sample_with_downsampling():
    # image pixel centre 5.5 maps to feature coordinate (5.5 + 0.5) / 4 - 0.5 = 1.0
    feat = np.arange(16.0).reshape(1, 4, 4)
    proj = _projection([[5.5, 5.5]], [True], (16, 16))
    assert sample_image_features(feat, proj, downsample=4).data.item() == feat[0, 1, 1]
    with pytest.raises(ConfigError):
        sample_image_features(feat, proj, downsample=0)


def test_sample_gradient():
    rng = np.random.default_rng(4)
    feat = dc.Parameter(rng.normal(size=(3, 5, 6)), "feat")
    proj = _projection(rng.uniform(0, 5, size=(7, 2)), rng.random(7) > 0.3, (6, 5))
    w = rng.normal(size=(3, 7, 1, 1))
    assert dc.grad_check(lambda: dc.tsum(sample_image_features(feat, proj) * w), [feat]) < 1e-5


def test_looking_forward_camera_sees_ahead():
    cam = CameraModel.looking_forward(50, 50, 32, 24, (0.0, 0.0, 1.5), pitch=0.0)
    uv, z = project_points(np.array([10.0, 0.0, 1.5]), cam)
    np.testing.assert_allclose(uv, [32.0, 24.0], atol=1e-12)
    assert abs(z - 10.0) < 1e-12
    # a point to the left (+y) lands left of centre, a point above lands higher
    assert project_points(np.array([10.0, 1.0, 1.5]), cam)[0][0] < 32
    assert project_points(np.array([10.0, 0.0, 2.5]), cam)[0][1] < 24
