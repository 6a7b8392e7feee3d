"""Deterministic distance from one body segment of known metric length.

Fit: with ground-truth depth, back-project the endpoints of three
segments (head-shoulder, shoulder-hip, hip-ankle) and record their
vertical lengths in meters; the segment with the smallest spread is
selected.  Estimate: treat the selected segment as an upright 3D
segment of the mean length at unknown (X, Y, Z) and solve the four
pinhole equations of its endpoints in the least-squares sense.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCameraError, UnresolvableDistanceError
from .geometry import JOINT_INDEX, CameraIntrinsics, Keypoints2D, backproject, pixel_ray

SEGMENTS = {
    "head-shoulder": (("nose",), ("left_shoulder", "right_shoulder")),
    "shoulder-hip": (("left_shoulder", "right_shoulder"), ("left_hip", "right_hip")),
    "hip-ankle": (("left_hip", "right_hip"), ("left_ankle", "right_ankle")),
}


@dataclass
class SegmentStats:
    mean: dict[str, float]
    std: dict[str, float]
    count: dict[str, int]
    selected: str = field(default="")

    def __post_init__(self):
        if not self.selected:
            self.selected = min(self.std, key=lambda k: (self.std[k], k))

    @property
    def length(self) -> float:
        return self.mean[self.selected]

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "count": self.count, "selected": self.selected}

    @classmethod
    def from_dict(cls, data: dict) -> "SegmentStats":
        return cls(dict(data["mean"]), dict(data["std"]), {k: int(v) for k, v in data["count"].items()},
                   data.get("selected", ""))


def segment_pixels(kp: Keypoints2D, segment: str):
    """Upper and lower endpoint in pixels, averaging left/right joints that are present."""
    ends = []
    for group in SEGMENTS[segment]:
        idx = [JOINT_INDEX[j] for j in group if kp.joints[JOINT_INDEX[j], 2] > 0]
        if not idx:
            return None
        ends.append(kp.joints[idx, :2].mean(axis=0))
    return ends[0], ends[1]


def fit_segments(samples, segments=tuple(SEGMENTS)) -> SegmentStats:
    """``samples`` yields (Keypoints2D, CameraIntrinsics, gt center D) triples."""
    lengths = {s: [] for s in segments}
    for kp, K, D in samples:
        z = float(D[2])
        if not z > 0:
            continue
        for s in segments:
            ends = segment_pixels(kp, s)
            if ends is None:
                continue
            top, bottom = backproject(K, np.stack(ends))
            lengths[s].append(abs(bottom[1] - top[1]) * z)
    if not any(lengths.values()):
        raise ValueError("no valid instances to fit segment lengths")
    mean, std, count = {}, {}, {}
    for s, vals in lengths.items():
        if not vals:
            continue
        v = np.asarray(vals)
        mean[s] = float(v.mean())
        std[s] = float(v.std(ddof=1)) if v.size > 1 else 0.0
        count[s] = int(v.size)
    return SegmentStats(mean, std, count)


def solve_segment(K: CameraIntrinsics, top_px, bottom_px, length: float) -> np.ndarray:
    """3D position (X, Y, Z) of the upper endpoint of an upright segment.

    Unknowns are the upper endpoint; the lower one sits ``length`` below
    it (camera y points down).  The two projection equations per endpoint
    give four linear equations.  Flipping the sign of ``length`` yields the
    mirrored solution with negated depth; the one with Z > 0 is returned.
    """
    (x1, y1), (x2, y2) = backproject(K, np.stack([top_px, bottom_px]))
    if y1 == y2:
        raise UnresolvableDistanceError("segment has zero vertical extent in the image")
    A = np.array([[1.0, 0.0, -x1], [0.0, 1.0, -y1], [1.0, 0.0, -x2], [0.0, 1.0, -y2]])
    AtA = A.T @ A
    for sign in (1.0, -1.0):
        c = np.array([0.0, 0.0, 0.0, -sign * length])
        sol = np.linalg.solve(AtA, A.T @ c)
        if sol[2] > 0:
            return sol
    raise BehindCameraError("both mirrored solutions lie behind the camera")


def estimate_distance(kp: Keypoints2D, K: CameraIntrinsics, stats: SegmentStats, segment: str | None = None) -> float:
    """Distance to the pedestrian center: depth from the segment, direction from the box center."""
    segment = segment or stats.selected
    ends = segment_pixels(kp, segment)
    if ends is None:
        raise UnresolvableDistanceError(f"joints of segment {segment} are missing")
    z = solve_segment(K, ends[0], ends[1], stats.mean[segment])[2]
    ray = pixel_ray(K, kp.bbox_center)
    return float(z / ray[2])
