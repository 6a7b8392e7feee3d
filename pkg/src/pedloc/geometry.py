"""Pinhole camera math and network input assembly.

Pixels are mapped to normalized image coordinates with K^-1, the
skeleton is zero-centered, and a predicted distance is turned back into
a camera-frame point along the ray through the bounding-box center.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BehindCameraError,
    DegeneratePoseError,
    InvalidDistanceError,
    InvalidIntrinsicsError,
)

COCO_JOINTS = (
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
)
N_JOINTS = len(COCO_JOINTS)
INPUT_DIM = 2 * N_JOINTS
JOINT_INDEX = {name: i for i, name in enumerate(COCO_JOINTS)}

CENTER_MODES = ("centroid", "bbox")


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    skew: float = 0.0

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy, self.skew)
        if not all(np.isfinite(v) for v in vals):
            raise InvalidIntrinsicsError(f"non-finite intrinsics {vals}")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidIntrinsicsError(
                f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, self.skew, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def inverse(self) -> np.ndarray:
        # closed form for the upper-triangular K, no LU round-off
        fx, fy, cx, cy, s = self.fx, self.fy, self.cx, self.cy, self.skew
        return np.array(
            [
                [1.0 / fx, -s / (fx * fy), (s * cy - cx * fy) / (fx * fy)],
                [0.0, 1.0 / fy, -cy / fy],
                [0.0, 0.0, 1.0],
            ]
        )

    @classmethod
    def from_matrix(cls, K) -> "CameraIntrinsics":
        """Build from a 3x3 matrix or a 9-element row-major sequence."""
        K = np.asarray(K, dtype=float)
        if K.size != 9:
            raise InvalidIntrinsicsError(f"expected 9 values, got {K.size}")
        K = K.reshape(3, 3)
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0 or K[2, 2] == 0:
            raise InvalidIntrinsicsError(f"not an upper-triangular intrinsic matrix: {K.tolist()}")
        K = K / K[2, 2]
        return cls(fx=K[0, 0], fy=K[1, 1], cx=K[0, 2], cy=K[1, 2], skew=K[0, 1])

    def to_list(self) -> list[float]:
        return [float(v) for v in self.matrix.ravel()]

    def scaled(self, factor: float) -> "CameraIntrinsics":
        return CameraIntrinsics(
            self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor, self.skew * factor
        )


@dataclass
class Keypoints2D:
    """17 COCO joints as (u, v, conf) rows plus the detection box.

    A joint with ``conf == 0`` is treated as missing.
    """

    joints: np.ndarray
    bbox: tuple[float, float, float, float]

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=float)
        if self.joints.shape != (N_JOINTS, 3):
            raise ValueError(f"expected joints of shape ({N_JOINTS}, 3), got {self.joints.shape}")
        self.bbox = tuple(float(b) for b in self.bbox)
        if len(self.bbox) != 4:
            raise ValueError(f"bbox needs 4 values, got {len(self.bbox)}")
        u0, v0, u1, v1 = self.bbox
        if not (u1 > u0 and v1 > v0):
            raise ValueError(f"bbox must have positive width and height: {self.bbox}")
        conf = self.joints[:, 2]
        if np.any(conf < 0) or np.any(conf > 1):
            raise ValueError("joint confidences must lie in [0, 1]")

    @property
    def present(self) -> np.ndarray:
        return self.joints[:, 2] > 0

    @property
    def bbox_center(self) -> tuple[float, float]:
        u0, v0, u1, v1 = self.bbox
        return 0.5 * (u0 + u1), 0.5 * (v0 + v1)

    @property
    def bbox_height(self) -> float:
        return self.bbox[3] - self.bbox[1]

    @staticmethod
    def bbox_from_joints(uv, margin: float = 0.0) -> tuple[float, float, float, float]:
        """Tight box around pixel positions, padded by ``margin`` times its height on every side."""
        uv = np.asarray(uv, dtype=float)
        u0, v0 = uv.min(axis=0)
        u1, v1 = uv.max(axis=0)
        pad = margin * (v1 - v0)
        return (float(u0 - pad), float(v0 - pad), float(u1 + pad), float(v1 + pad))


@dataclass
class NormalizedInput:
    coords: np.ndarray  # (34,) interleaved x*, y* per joint, zero-centered
    center_ray: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))


@dataclass(frozen=True)
class Point3D:
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.as_array()))


def backproject(K: CameraIntrinsics, pixel) -> np.ndarray:
    """Pixel(s) ``(..., 2)`` to normalized image coordinates ``(..., 2)``."""
    uv = np.asarray(pixel, dtype=float)
    y = (uv[..., 1] - K.cy) / K.fy
    x = (uv[..., 0] - K.cx - K.skew * y) / K.fx
    return np.stack([x, y], axis=-1)


def project(K: CameraIntrinsics, p) -> np.ndarray:
    """Camera-frame point(s) ``(..., 3)`` to pixels ``(..., 2)``."""
    if isinstance(p, Point3D):
        p = p.as_array()
    p = np.asarray(p, dtype=float)
    z = p[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError(f"point(s) with z <= 0 cannot be projected (min z = {np.min(z)})")
    x = p[..., 0] / z
    y = p[..., 1] / z
    u = K.fx * x + K.skew * y + K.cx
    v = K.fy * y + K.cy
    return np.stack([u, v], axis=-1)


def pixel_ray(K: CameraIntrinsics, pixel) -> np.ndarray:
    """Unit-norm viewing ray through a pixel."""
    xy = backproject(K, pixel)
    ray = np.concatenate([xy, np.ones(xy.shape[:-1] + (1,))], axis=-1)
    return ray / np.linalg.norm(ray, axis=-1, keepdims=True)


def normalize_keypoints(
    K: CameraIntrinsics, kp: Keypoints2D, center: str = "centroid"
) -> NormalizedInput:
    """Back-project all joints and zero-center them.

    ``center="centroid"`` subtracts the mean of the present joints;
    ``center="bbox"`` subtracts the back-projected box center instead.
    Missing joints are written as the centering reference, i.e. zero.
    """
    if center not in CENTER_MODES:
        raise ValueError(f"center must be one of {CENTER_MODES}, got {center!r}")
    present = kp.present
    if present.sum() < 2:
        raise DegeneratePoseError(
            f"need at least 2 confident joints, got {int(present.sum())}"
        )
    uv = kp.joints[:, :2]
    if center == "centroid":
        # offsets from one present joint first, so identical joints center to exact zeros
        rel = uv - uv[np.argmax(present)]
        rel = rel - rel[present].mean(axis=0)
    else:
        rel = uv - np.asarray(kp.bbox_center)
    # K^-1 is affine, so centered normalized coords only need its linear part
    y = rel[:, 1] / K.fy
    x = (rel[:, 0] - K.skew * y) / K.fx
    centered = np.column_stack([x, y])
    centered[~present] = 0.0
    return NormalizedInput(coords=centered.ravel(), center_ray=pixel_ray(K, kp.bbox_center))


def localize(d: float, center_ray) -> Point3D:
    if not d > 0:
        raise InvalidDistanceError(f"distance must be positive, got {d}")
    ray = np.asarray(center_ray, dtype=float)
    ray = ray / np.linalg.norm(ray)
    x, y, z = d * ray
    return Point3D(float(x), float(y), float(z))
