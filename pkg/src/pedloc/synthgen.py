"""Synthetic pedestrians seen by a pinhole camera.

A planar, fronto-parallel skeleton scaled to a sampled stature is
placed in front of the camera with its feet on the ground, projected,
and perturbed with Gaussian pixel noise.  The ground-truth center is
the midpoint of the 3D joint extents, which projects exactly onto the
center of the noise-free keypoint box.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import dataio
from .errors import BehindCameraError, SceneGenerationError
from .geometry import COCO_JOINTS, N_JOINTS, CameraIntrinsics, Keypoints2D, project
from .height_model import HeightMixture, adult_mixture

MAX_TRIES = 100
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SkeletonTemplate:
    """Joint positions as fractions of stature.

    ``rows`` is the height above the ground, ``lateral`` the signed
    offset from the body midline (positive = the person's left, which
    is camera +x for someone facing the camera).
    """

    rows: tuple[float, ...]
    lateral: tuple[float, ...]
    head_top: float = 1.0

    def __post_init__(self):
        if len(self.rows) != N_JOINTS or len(self.lateral) != N_JOINTS:
            raise ValueError("template needs one entry per COCO joint")
        idx = {n: i for i, n in enumerate(COCO_JOINTS)}
        for side in ("ankle",):
            for s in ("left", "right"):
                if self.rows[idx[f"{s}_{side}"]] != 0.0:
                    raise ValueError("ankle rows must be at 0")
        if self.head_top != 1.0 or max(self.rows) > self.head_top:
            raise ValueError("head top must be at 1 and above every joint")
        for name, i in idx.items():
            if name.startswith("left_"):
                j = idx["right_" + name[5:]]
                if self.rows[i] != self.rows[j] or self.lateral[i] != -self.lateral[j]:
                    raise ValueError(f"template not left/right symmetric at {name}")

    def row_of(self, joint: str) -> float:
        return self.rows[COCO_JOINTS.index(joint)]

    def joints_3d(self, height_m: float) -> np.ndarray:
        """Offsets (x right, y down, z) of each joint from the point between the ankles."""
        out = np.zeros((N_JOINTS, 3))
        out[:, 0] = np.array(self.lateral) * height_m
        out[:, 1] = -np.array(self.rows) * height_m
        return out


def _template() -> SkeletonTemplate:
    # vertical rows from Drillis-style segment ratios: shoulder 0.818,
    # hip 0.530 (shoulder-hip 0.288), knee 0.285; the head joints share
    # one row at 0.936 since COCO has no top-of-head joint
    table = {
        "nose": (0.936, 0.0),
        "eye": (0.936, 0.018),
        "ear": (0.936, 0.040),
        "shoulder": (0.818, 0.129),
        "elbow": (0.630, 0.145),
        "wrist": (0.485, 0.140),
        "hip": (0.530, 0.095),
        "knee": (0.285, 0.060),
        "ankle": (0.0, 0.055),
    }
    rows, lateral = [], []
    for name in COCO_JOINTS:
        side, _, part = name.partition("_")
        if not part:
            r, w = table[name]
            rows.append(r)
            lateral.append(w)
        else:
            r, w = table[part]
            rows.append(r)
            lateral.append(w if side == "left" else -w)
    return SkeletonTemplate(tuple(rows), tuple(lateral))


DEFAULT_TEMPLATE = _template()
HEAD_ROW = DEFAULT_TEMPLATE.row_of("nose")

# KITTI P2 intrinsics; the image is taller than KITTI's 375 px so that
# the feet of pedestrians at 5 m stay in frame
KITTI_K = CameraIntrinsics(fx=721.5377, fy=721.5377, cx=609.5593, cy=172.854)


@dataclass(frozen=True)
class SynthConfig:
    d_range: tuple[float, float] = (5.0, 40.0)
    lateral_fov_fraction: float = 0.35
    pixel_noise_std: float = 2.0
    mix: HeightMixture = field(default_factory=adult_mixture)
    K: CameraIntrinsics = KITTI_K
    image_size: tuple[int, int] = (1242, 480)
    camera_height: float = 1.65
    bbox_margin: float = 0.05
    joint_dropout: float = 0.0
    fixed_height: float | None = None  # cm; bypasses the mixture when set
    template: SkeletonTemplate = DEFAULT_TEMPLATE

    def __post_init__(self):
        lo, hi = self.d_range
        if not (1.0 < lo <= hi < 100.0):
            raise ValueError(f"d_range must lie within (1, 100) m, got {self.d_range}")
        if not 0 <= self.lateral_fov_fraction <= 1:
            raise ValueError("lateral_fov_fraction must be in [0, 1]")
        if self.pixel_noise_std < 0:
            raise ValueError("pixel_noise_std must be >= 0")
        if not 0 <= self.joint_dropout < 1:
            raise ValueError("joint_dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "d_range": list(self.d_range),
            "lateral_fov_fraction": self.lateral_fov_fraction,
            "pixel_noise_std": self.pixel_noise_std,
            "mix": self.mix.to_dict(),
            "K": self.K.to_list(),
            "image_size": list(self.image_size),
            "camera_height": self.camera_height,
            "bbox_margin": self.bbox_margin,
            "joint_dropout": self.joint_dropout,
            "fixed_height": self.fixed_height,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        kw = dict(data)
        if "d_range" in kw:
            kw["d_range"] = tuple(kw["d_range"])
        if "image_size" in kw:
            kw["image_size"] = tuple(kw["image_size"])
        if "mix" in kw:
            kw["mix"] = HeightMixture.from_dict(kw["mix"])
        if "K" in kw:
            kw["K"] = CameraIntrinsics.from_matrix(kw["K"])
        return cls(**kw)


@dataclass
class SceneSample:
    kp: Keypoints2D
    d_gt: float
    h_gt: float  # cm
    gender: str
    pose_tag: str  # "standing" | "lying"
    K: CameraIntrinsics
    center: np.ndarray  # ground-truth 3D center, camera frame
    joints_3d: np.ndarray  # (17, 3) noise-free
    noise: np.ndarray  # (17, 2) pixel noise that was added
    image_size: tuple[int, int] = (1242, 480)
    occlusion: int = 0
    truncation: float = 0.0

    def to_record(self, rec_id: str, image_id: str | None = None) -> dataio.AnnotationRecord:
        return dataio.AnnotationRecord(
            id=rec_id,
            image_id=image_id or rec_id,
            keypoints=self.kp.joints,
            bbox=self.kp.bbox,
            K=self.K,
            gt={
                "D": [float(x) for x in self.center],
                "h_gt": float(self.h_gt),
                "occlusion": self.occlusion,
                "truncation": self.truncation,
                "gender": self.gender,
                "pose_tag": self.pose_tag,
            },
        )


def _extent_center(joints_3d: np.ndarray) -> np.ndarray:
    return 0.5 * (joints_3d.min(axis=0) + joints_3d.max(axis=0))


def _in_image(uv: np.ndarray, size) -> bool:
    w, h = size
    return bool(np.all(uv[:, 0] >= 0) and np.all(uv[:, 0] <= w) and np.all(uv[:, 1] >= 0) and np.all(uv[:, 1] <= h))


def _observe(K, joints_3d, noise, conf, margin):
    uv = project(K, joints_3d) + noise
    present = conf > 0
    bbox = Keypoints2D.bbox_from_joints(uv[present], margin)
    return Keypoints2D(np.column_stack([uv, conf]), bbox)


def sample_scene(rng_seed, cfg: SynthConfig = SynthConfig()) -> SceneSample:
    """Draw one pedestrian.  ``rng_seed`` is an int or a sequence of ints."""
    rng = np.random.default_rng(rng_seed)
    K = cfg.K
    half_fov = min(K.cx, cfg.image_size[0] - K.cx) / K.fx
    labels = [c.label or str(i) for i, c in enumerate(cfg.mix.components)]
    for _ in range(MAX_TRIES):
        comp, h = cfg.mix.sample(rng)
        if cfg.fixed_height is not None:
            h = float(cfg.fixed_height)
        h = float(h)
        d = rng.uniform(*cfg.d_range)
        a = rng.uniform(-1.0, 1.0) * cfg.lateral_fov_fraction * half_fov
        noise = rng.normal(0.0, cfg.pixel_noise_std, size=(N_JOINTS, 2)) if cfg.pixel_noise_std > 0 else np.zeros((N_JOINTS, 2))
        conf = np.ones(N_JOINTS)
        if cfg.joint_dropout > 0:
            conf[rng.random(N_JOINTS) < cfg.joint_dropout] = 0.0
        if h <= 0 or conf.sum() < 2:
            continue
        h_m = h / 100.0
        offsets = cfg.template.joints_3d(h_m)
        yc = cfg.camera_height + float(_extent_center(offsets)[1])
        if d * d <= yc * yc:
            continue
        z = math.sqrt((d * d - yc * yc) / (1.0 + a * a))
        ground = np.array([a * z, cfg.camera_height, z])
        joints_3d = ground + offsets
        center = _extent_center(joints_3d)
        try:
            kp = _observe(K, joints_3d, noise, conf, cfg.bbox_margin)
        except BehindCameraError:
            continue
        if not _in_image(kp.joints[:, :2], cfg.image_size):
            continue
        return SceneSample(
            kp=kp,
            d_gt=float(np.linalg.norm(center)),
            h_gt=h,
            gender=labels[int(comp)],
            pose_tag="standing",
            K=K,
            center=center,
            joints_3d=joints_3d,
            noise=noise,
            image_size=cfg.image_size,
        )
    raise SceneGenerationError(f"no in-image pedestrian after {MAX_TRIES} tries; check d_range/K/image_size")


def _rotation(axis: str) -> np.ndarray:
    if axis == "x":
        # body falls away from the camera: up (-y) turns into +z
        return np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])
    if axis == "z":
        # body falls sideways: up (-y) turns into +x
        return np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    raise ValueError(f"axis must be 'x' or 'z', got {axis!r}")


def make_lying_variant(s: SceneSample, axis: str = "z", margin: float = 0.05) -> SceneSample:
    """Rotate a standing skeleton by 90 degrees about a line through the ankles.

    ``axis="z"`` (default) lays the body sideways in the image plane;
    ``axis="x"`` lays it along the viewing direction.  The same pixel
    noise is re-applied so standing/lying pairs differ only in pose.
    """
    if s.pose_tag != "standing":
        raise ValueError("lying variant needs a standing sample")
    pivot = 0.5 * (s.joints_3d[COCO_JOINTS.index("left_ankle")] + s.joints_3d[COCO_JOINTS.index("right_ankle")])
    R = _rotation(axis)
    joints_3d = pivot + (s.joints_3d - pivot) @ R.T
    if np.any(joints_3d[:, 2] <= 0):
        raise BehindCameraError("rotated skeleton reaches behind the camera")
    center = _extent_center(joints_3d)
    kp = _observe(s.K, joints_3d, s.noise, s.kp.joints[:, 2], margin)
    return replace(
        s,
        kp=kp,
        d_gt=float(np.linalg.norm(center)),
        pose_tag="lying",
        center=center,
        joints_3d=joints_3d,
    )


def split_sizes(n: int, ratios) -> list[int]:
    ratios = np.asarray(ratios, dtype=float)
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(ratios) != len(SPLITS) or np.any(ratios < 0) or abs(ratios.sum() - 1) > 1e-9:
        raise ValueError(f"split ratios must be 3 non-negative numbers summing to 1, got {ratios}")
    sizes = [int(round(n * r)) for r in ratios[:-1]]
    sizes.append(n - sum(sizes))
    if sizes[-1] < 0:
        raise ValueError(f"split ratios {ratios} overflow n={n}")
    return sizes


def generate_split(seed: int, split: str, n: int, cfg: SynthConfig) -> list[SceneSample]:
    # per-sample streams keyed on (seed, split, index) so splits never share draws
    k = SPLITS.index(split)
    return [sample_scene([seed, k, i], cfg) for i in range(n)]


def generate_dataset(n: int, split_ratios, cfg: SynthConfig, out_dir, seed: int = 0) -> dict[str, Path]:
    """Write ``train/val/test.jsonl`` annotation files; returns their paths."""
    out_dir = Path(out_dir)
    paths = {}
    for split, size in zip(SPLITS, split_sizes(n, split_ratios)):
        samples = generate_split(seed, split, size, cfg)
        records = [s.to_record(f"{split}-{i:06d}") for i, s in enumerate(samples)]
        path = out_dir / f"{split}.jsonl"
        dataio.write_annotations(path, records)
        paths[split] = path
    return paths
