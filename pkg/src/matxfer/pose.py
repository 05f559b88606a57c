"""Camera-alignment loss and discrete pose selection.

Continuous pose regression is out of scope; the camera loss is kept (with an
axis-angle rotation chart for gradient checks) and pose estimation is a
discrete argmax of silhouette IoU over a shape's candidate views.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ValidationError
from .synth import SegmentedImage, ToyShape


@dataclass
class Pose:
    R: np.ndarray  # 3x3 rotation
    t: np.ndarray  # 3-vector

    def validate(self, atol: float = 1e-9):
        R = np.asarray(self.R, dtype=np.float64)
        if R.shape != (3, 3):
            raise ValidationError("R must be 3x3")
        if np.abs(R.T @ R - np.eye(3)).max() > atol:
            raise ValidationError("R is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > atol:
            raise ValidationError("R is not a proper rotation")


@dataclass
class PointSet:
    world: np.ndarray            # N x 3
    truth: np.ndarray | None = None  # N x 3 camera-space ground truth

    def validate(self):
        w = np.asarray(self.world)
        if w.ndim != 2 or w.shape[1] != 3 or w.shape[0] < 1:
            raise ValidationError("world points must be Nx3 with N >= 1")
        if self.truth is not None and np.asarray(self.truth).shape != w.shape:
            raise ValidationError("truth points must align with world points")


def rotation_from_axis_angle(w: torch.Tensor) -> torch.Tensor:
    """Rodrigues' formula; differentiable chart away from zero and pi."""
    theta = torch.linalg.vector_norm(w)
    if float(theta) < 1e-12:
        return torch.eye(3, dtype=w.dtype)
    k = w / theta
    K = torch.zeros((3, 3), dtype=w.dtype)
    K[0, 1], K[0, 2] = -k[2], k[1]
    K[1, 0], K[1, 2] = k[2], -k[0]
    K[2, 0], K[2, 1] = -k[1], k[0]
    eye = torch.eye(3, dtype=w.dtype)
    return eye + torch.sin(theta) * K + (1.0 - torch.cos(theta)) * (K @ K)


def camera_loss(points: PointSet, pose: Pose) -> float:
    """Mean squared distance between truth and rigidly transformed points."""
    points.validate()
    if points.truth is None:
        raise ValidationError("camera loss requires ground-truth points")
    pose.validate()
    moved = points.world @ np.asarray(pose.R).T + np.asarray(pose.t)
    return float(np.mean(np.sum((points.truth - moved) ** 2, axis=1)))


def camera_loss_t(world: torch.Tensor, truth: torch.Tensor, axis_angle: torch.Tensor,
                  t: torch.Tensor) -> torch.Tensor:
    """Differentiable camera loss with the rotation given in axis-angle form."""
    R = rotation_from_axis_angle(axis_angle)
    moved = world @ R.T + t
    return ((truth - moved) ** 2).sum(dim=1).mean()


def silhouette_iou(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    inter = np.logical_and(mask_a, mask_b).sum()
    union = np.logical_or(mask_a, mask_b).sum()
    return float(inter) / float(union) if union else 0.0


def select_pose(exemplar: SegmentedImage, shape: ToyShape, candidates: list[int]) -> int:
    """View whose projected silhouette best overlaps the exemplar foreground.

    Ties resolve to the lowest view id.
    """
    if not candidates:
        raise ValidationError("no candidate views")
    fg = exemplar.foreground()
    if not fg.any():
        raise ValidationError("exemplar has empty foreground")
    best_view, best_iou = None, -1.0
    for v in sorted(candidates):
        proj = shape.labels_raster(v) != 0
        iou = silhouette_iou(fg, proj)
        if iou > best_iou:
            best_view, best_iou = v, iou
    return best_view


def semantic_projection(shape: ToyShape, view: int) -> np.ndarray:
    """Per-pixel part labels of the shape seen from `view` (0 = background)."""
    if view not in shape.layouts:
        raise ValidationError(f"shape {shape.id} has no view {view}")
    return shape.labels_raster(view)
