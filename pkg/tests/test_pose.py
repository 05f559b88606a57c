"""Camera loss and discrete pose selection tests."""

import numpy as np
import pytest
import torch

from matxfer.errors import ValidationError
from matxfer.learning import grad_check
from matxfer.pose import (
    PointSet,
    Pose,
    camera_loss,
    camera_loss_t,
    rotation_from_axis_angle,
    select_pose,
    semantic_projection,
    silhouette_iou,
)
from matxfer.synth import SegmentedImage, ShapeSpec, ToyShape, generate_shapes


def test_camera_loss_perfect_pose_zero():
    pts = np.random.default_rng(0).normal(size=(10, 3))
    ps = PointSet(world=pts, truth=pts.copy())
    assert camera_loss(ps, Pose(R=np.eye(3), t=np.zeros(3))) == 0.0


def test_camera_loss_single_point_hand_value():
    ps = PointSet(world=np.array([[1.0, 0.0, 0.0]]), truth=np.array([[0.0, 1.0, 0.0]]))
    # ||(0,1,0) - (1,0,0)||^2 = 2
    assert camera_loss(ps, Pose(R=np.eye(3), t=np.zeros(3))) == pytest.approx(2.0, abs=1e-15)


def test_camera_loss_requires_truth():
    ps = PointSet(world=np.zeros((3, 3)))
    with pytest.raises(ValidationError):
        camera_loss(ps, Pose(R=np.eye(3), t=np.zeros(3)))


def test_pose_validation_rejects_non_rotation():
    with pytest.raises(ValidationError):
        Pose(R=np.eye(3) * 2.0, t=np.zeros(3)).validate()
    refl = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(ValidationError):
        Pose(R=refl, t=np.zeros(3)).validate()


def test_camera_loss_rigid_motion_invariance():
    rng = np.random.default_rng(1)
    world = rng.normal(size=(12, 3))
    truth = rng.normal(size=(12, 3))
    w = torch.tensor(rng.normal(size=3) * 0.8)
    R = rotation_from_axis_angle(w).numpy()
    t = rng.normal(size=3)
    base = camera_loss(PointSet(world, truth), Pose(R=R, t=t))
    for _ in range(5):
        s_w = torch.tensor(rng.normal(size=3) * 0.5)
        S = rotation_from_axis_angle(s_w).numpy()
        u = rng.normal(size=3)
        moved_truth = truth @ S.T + u
        composed = Pose(R=S @ R, t=S @ t + u)
        composed.validate(atol=1e-9)
        got = camera_loss(PointSet(world, moved_truth), composed)
        assert got == pytest.approx(base, rel=1e-10)


def test_rotation_from_axis_angle_is_rotation():
    rng = np.random.default_rng(2)
    for _ in range(10):
        w = torch.tensor(rng.normal(size=3))
        R = rotation_from_axis_angle(w).numpy()
        Pose(R=R, t=np.zeros(3)).validate(atol=1e-12)


def test_camera_loss_grad_check_axis_angle():
    rng = np.random.default_rng(3)
    for _ in range(5):
        world = torch.tensor(rng.normal(size=(6, 3)))
        truth = torch.tensor(rng.normal(size=(6, 3)))
        w = torch.tensor(rng.uniform(0.2, 1.5, size=3), requires_grad=True)
        t = torch.tensor(rng.normal(size=3), requires_grad=True)
        report = grad_check(lambda: camera_loss_t(world, truth, w, t), [w, t], step=1e-6, tol=1e-6)
        assert report.passed, report


# ---------------------------------------------------------------------------
# select_pose
# ---------------------------------------------------------------------------

def _exemplar_with_fg(rows, cols, size=16):
    labels = np.zeros((size, size), dtype=np.int64)
    labels[rows, cols] = 1
    color = np.zeros((size, size, 3))
    return SegmentedImage(color=color, labels=labels)


def test_select_pose_recovers_own_view():
    shapes = generate_shapes(ShapeSpec(n_shapes=2, part_range=(2, 3), vocabulary_size=4,
                                       n_views=3, image_size=32), seed=5)
    shape = shapes[0]
    for v in shape.views:
        labels = shape.labels_raster(v)
        exemplar = SegmentedImage(color=np.zeros((32, 32, 3)), labels=labels)
        assert select_pose(exemplar, shape, shape.views) == v


def test_select_pose_hand_iou():
    # View 0 covers 80 of the exemplar's 100 foreground pixels (IoU 0.8);
    # view 1 covers 30 (IoU 0.3).
    shape = ToyShape(id=0, labels=[1], kinds=["rect"],
                     layouts={0: [(0, 0, 10, 8)], 1: [(0, 0, 10, 3)]},
                     image_size=16, views=[0, 1])
    exemplar = _exemplar_with_fg(slice(0, 10), slice(0, 10))
    assert silhouette_iou(exemplar.foreground(), shape.labels_raster(0) != 0) == pytest.approx(0.8)
    assert silhouette_iou(exemplar.foreground(), shape.labels_raster(1) != 0) == pytest.approx(0.3)
    assert select_pose(exemplar, shape, [0, 1]) == 0
    assert select_pose(exemplar, shape, [1, 0]) == 0  # candidate order irrelevant


def test_select_pose_tie_lowest_view():
    shape = ToyShape(id=0, labels=[1], kinds=["rect"],
                     layouts={0: [(0, 0, 4, 4)], 1: [(0, 0, 4, 4)], 2: [(8, 8, 12, 12)]},
                     image_size=16, views=[0, 1, 2])
    exemplar = _exemplar_with_fg(slice(0, 4), slice(0, 4))
    assert select_pose(exemplar, shape, [2, 1, 0]) == 0


def test_select_pose_errors():
    shape = ToyShape(id=0, labels=[1], kinds=["rect"], layouts={0: [(0, 0, 4, 4)]},
                     image_size=16, views=[0])
    empty = SegmentedImage(color=np.zeros((16, 16, 3)), labels=np.zeros((16, 16), dtype=np.int64))
    with pytest.raises(ValidationError):
        select_pose(empty, shape, [0])
    exemplar = _exemplar_with_fg(slice(0, 4), slice(0, 4))
    with pytest.raises(ValidationError):
        select_pose(exemplar, shape, [])


# ---------------------------------------------------------------------------
# semantic_projection
# ---------------------------------------------------------------------------

def test_semantic_projection_matches_renderer():
    shapes = generate_shapes(ShapeSpec(n_shapes=2, part_range=(2, 4), vocabulary_size=5,
                                       n_views=2, image_size=32), seed=6)
    for shape in shapes:
        for v in shape.views:
            np.testing.assert_array_equal(semantic_projection(shape, v), shape.labels_raster(v))


def test_semantic_projection_background_zero():
    shape = generate_shapes(ShapeSpec(n_shapes=1, part_range=(2, 2), vocabulary_size=2,
                                      n_views=1, image_size=32), seed=7)[0]
    proj = semantic_projection(shape, 0)
    covered = np.zeros_like(proj, dtype=bool)
    for idx in range(len(shape.labels)):
        covered |= shape.part_mask(idx, 0)
    assert (proj[~covered] == 0).all()


def test_semantic_projection_part_areas():
    shape = generate_shapes(ShapeSpec(n_shapes=1, part_range=(3, 3), vocabulary_size=3,
                                      n_views=2, image_size=32), seed=8)[0]
    proj = semantic_projection(shape, 1)
    for idx, label in enumerate(shape.labels):
        assert (proj == label).sum() == shape.part_mask(idx, 1).sum()


def test_semantic_projection_unknown_view():
    shape = generate_shapes(ShapeSpec(n_shapes=1, part_range=(2, 2), vocabulary_size=2,
                                      n_views=1, image_size=32), seed=9)[0]
    with pytest.raises(ValidationError):
        semantic_projection(shape, 5)
