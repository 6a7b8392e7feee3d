"""Persistence: annotation JSONL, KITTI calibration text, checkpoints,
prediction JSONL and report CSVs.

Every text format carries a version field.  Floats are written with
``repr`` (shortest round-trip decimal) so write/read is lossless.
File layouts are documented in ``docs/formats.md``.
"""
from __future__ import annotations

import contextlib
import csv
import fcntl
import hashlib
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, SchemaError, VersionMismatchError
from .geometry import N_JOINTS, CameraIntrinsics, Keypoints2D, normalize_keypoints

ANNOTATION_VERSION = 1
PREDICTION_VERSION = 1
CHECKPOINT_VERSION = 1
CHECKPOINT_MAGIC = b"PEDLOC-CKPT"

_GT_KEYS = {"D", "h_gt", "occlusion", "truncation", "gender", "pose_tag"}


def dumps_canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


@contextlib.contextmanager
def locked_writer(path, mode="w"):
    """Write to a temp file next to ``path`` under an exclusive lock, then rename.

    A failure part-way leaves the previous file (or nothing) in place.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lock_path = path.with_name(path.name + ".lock")
    try:
        with open(lock_path, "w") as lock:
            fcntl.flock(lock, fcntl.LOCK_EX)
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
            try:
                newline = "" if "b" not in mode else None
                with os.fdopen(fd, mode, newline=newline) as fh:
                    yield fh
                os.replace(tmp, path)
            except BaseException:
                with contextlib.suppress(FileNotFoundError):
                    os.unlink(tmp)
                raise
            finally:
                fcntl.flock(lock, fcntl.LOCK_UN)
    finally:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(lock_path)


# ---------------------------------------------------------------- calibration


def parse_kitti_calib(text: str, key: str = "P2") -> CameraIntrinsics:
    """Read fx, fy, cx, cy (and skew) from a ``Px:`` row of a KITTI calib file.

    The fourth column (stereo baseline term) is ignored.
    """
    if not text.strip():
        raise ParseError("empty calibration text")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        name, sep, rest = line.partition(":")
        if not sep:
            raise ParseError(f"expected '<key>: values', got {line!r}", lineno)
        if name.strip() != key:
            continue
        try:
            vals = [float(tok) for tok in rest.split()]
        except ValueError as exc:
            raise ParseError(f"non-numeric value in {key} row: {exc}", lineno) from None
        if len(vals) != 12:
            raise ParseError(f"{key} row needs 12 values, got {len(vals)}", lineno)
        P = np.array(vals).reshape(3, 4)
        try:
            return CameraIntrinsics.from_matrix(P[:, :3])
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
    raise ParseError(f"no {key} row found")


def format_kitti_calib(K: CameraIntrinsics, key: str = "P2") -> str:
    P = np.zeros((3, 4))
    P[:, :3] = K.matrix
    return f"{key}: " + " ".join(repr(float(v)) for v in P.ravel()) + "\n"


# ---------------------------------------------------------------- annotations


@dataclass
class AnnotationRecord:
    id: str
    image_id: str
    keypoints: np.ndarray  # (17, 3)
    bbox: tuple[float, float, float, float]
    K: CameraIntrinsics
    gt: dict | None = None

    @property
    def kp(self) -> Keypoints2D:
        return Keypoints2D(self.keypoints, self.bbox)

    @property
    def d_gt(self) -> float | None:
        if self.gt is None or "D" not in self.gt:
            return None
        return float(np.linalg.norm(self.gt["D"]))

    def to_dict(self) -> dict:
        out = {
            "version": ANNOTATION_VERSION,
            "id": self.id,
            "image_id": self.image_id,
            "keypoints": [[float(x) for x in row] for row in np.asarray(self.keypoints)],
            "bbox": [float(b) for b in self.bbox],
            "K": self.K.to_list(),
        }
        if self.gt is not None:
            gt = dict(self.gt)
            if "D" in gt:
                gt["D"] = [float(x) for x in gt["D"]]
            out["gt"] = gt
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "AnnotationRecord":
        validate_annotation(data)
        gt = data.get("gt")
        return cls(
            id=data["id"],
            image_id=data["image_id"],
            keypoints=np.array(data["keypoints"], dtype=float),
            bbox=tuple(data["bbox"]),
            K=CameraIntrinsics.from_matrix(data["K"]),
            gt=dict(gt) if gt is not None else None,
        )


def _is_num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def validate_annotation(data) -> None:
    """Check an annotation dict, collecting every problem before raising."""
    problems = []
    if not isinstance(data, dict):
        raise SchemaError([f"record must be an object, got {type(data).__name__}"])
    if data.get("version") != ANNOTATION_VERSION:
        problems.append(f"version: expected {ANNOTATION_VERSION}, got {data.get('version')!r}")
    for key in ("id", "image_id"):
        if not isinstance(data.get(key), str):
            problems.append(f"{key}: expected string")
    kps = data.get("keypoints")
    if not (isinstance(kps, list) and len(kps) == N_JOINTS):
        problems.append(f"keypoints: expected list of {N_JOINTS} [u, v, conf] triples")
    else:
        for i, row in enumerate(kps):
            if not (isinstance(row, list) and len(row) == 3 and all(_is_num(x) for x in row)):
                problems.append(f"keypoints[{i}]: expected 3 finite numbers")
            elif not 0 <= row[2] <= 1:
                problems.append(f"keypoints[{i}].conf: outside [0, 1]")
    bbox = data.get("bbox")
    if not (isinstance(bbox, list) and len(bbox) == 4 and all(_is_num(x) for x in bbox)):
        problems.append("bbox: expected 4 finite numbers")
    elif not (bbox[2] > bbox[0] and bbox[3] > bbox[1]):
        problems.append("bbox: non-positive width or height")
    K = data.get("K")
    if not (isinstance(K, list) and len(K) == 9 and all(_is_num(x) for x in K)):
        problems.append("K: expected 9 finite numbers (row-major 3x3)")
    gt = data.get("gt")
    if gt is not None:
        if not isinstance(gt, dict):
            problems.append("gt: expected object")
        else:
            for extra in sorted(set(gt) - _GT_KEYS):
                problems.append(f"gt.{extra}: unknown field")
            if "D" in gt:
                D = gt["D"]
                if not (isinstance(D, list) and len(D) == 3 and all(_is_num(x) for x in D)):
                    problems.append("gt.D: expected 3 finite numbers")
            if "h_gt" in gt and not (_is_num(gt["h_gt"]) and gt["h_gt"] > 0):
                problems.append("gt.h_gt: expected positive number")
            for key in ("occlusion", "truncation"):
                if key in gt and not _is_num(gt[key]):
                    problems.append(f"gt.{key}: expected number")
    extra = sorted(set(data) - {"version", "id", "image_id", "keypoints", "bbox", "K", "gt"})
    for key in extra:
        problems.append(f"{key}: unknown field")
    if problems:
        raise SchemaError(problems)


def records_to_arrays(records, center: str = "centroid"):
    """Network inputs (N, 34), box-center rays (N, 3) and gt distances (N,).

    Distances are NaN for records without ground truth.
    """
    xs, rays, ds = [], [], []
    for rec in records:
        inp = normalize_keypoints(rec.K, rec.kp, center=center)
        xs.append(inp.coords)
        rays.append(inp.center_ray)
        d = rec.d_gt
        ds.append(np.nan if d is None else d)
    if not xs:
        return np.zeros((0, 2 * N_JOINTS)), np.zeros((0, 3)), np.zeros(0)
    return np.array(xs), np.array(rays), np.array(ds)


def _read_jsonl(path, parse):
    path = Path(path)
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            if not line.endswith("\n"):
                raise ParseError(f"{path}: truncated final line", lineno)
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: invalid JSON ({exc.msg})", lineno) from None
            try:
                out.append(parse(data))
            except SchemaError as exc:
                raise SchemaError([f"{path}:{lineno}: {p}" for p in exc.problems]) from None
    return out


def write_annotations(path, records) -> None:
    with locked_writer(path) as fh:
        for rec in records:
            fh.write(dumps_canonical(rec.to_dict()) + "\n")


def read_annotations(path) -> list[AnnotationRecord]:
    return _read_jsonl(path, AnnotationRecord.from_dict)


# ---------------------------------------------------------------- predictions


def prediction_to_dict(rec_id: str, image_id: str, bbox, est) -> dict:
    """One prediction line; ``est`` is an ``uncertainty.DistanceEstimate``."""
    return {
        "version": PREDICTION_VERSION,
        "id": rec_id,
        "image_id": image_id,
        "bbox": [float(b) for b in bbox],
        "mu": float(est.mu),
        "b": float(est.b),
        "sigma": float(est.sigma),
        "interval": [float(x) for x in est.interval],
        "aleatoric_interval": [float(x) for x in est.aleatoric_interval],
        # no 3D point for a non-positive distance
        "point": None if est.point is None else [float(est.point.x), float(est.point.y), float(est.point.z)],
    }


_PRED_FIELDS = ("id", "image_id", "bbox", "mu", "b", "sigma", "interval", "aleatoric_interval", "point")


def _parse_prediction(data):
    problems = []
    if not isinstance(data, dict):
        raise SchemaError(["prediction must be an object"])
    if data.get("version") != PREDICTION_VERSION:
        problems.append(f"version: expected {PREDICTION_VERSION}, got {data.get('version')!r}")
    for key in _PRED_FIELDS:
        if key not in data:
            problems.append(f"{key}: missing")
    for key in ("mu", "b", "sigma"):
        if key in data and not _is_num(data[key]):
            problems.append(f"{key}: expected finite number")
    if problems:
        raise SchemaError(problems)
    return data


def write_predictions(path, rows) -> None:
    """``rows`` are dicts as produced by :func:`prediction_to_dict`."""
    with locked_writer(path) as fh:
        for row in rows:
            fh.write(dumps_canonical(row) + "\n")


def read_predictions(path) -> list[dict]:
    return _read_jsonl(path, _parse_prediction)


# ---------------------------------------------------------------- CSV


def write_csv(path, header, rows) -> None:
    with locked_writer(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    """Everything needed to rebuild a trained model.

    ``arrays`` maps parameter/buffer names to float64 arrays; ``meta``
    holds the architecture descriptor, ``p_drop``, the training config,
    segment statistics for the geometric baseline and seed provenance.
    """

    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    names = sorted(ckpt.arrays)
    body = io.BytesIO()
    index = []
    offset = 0
    for name in names:
        arr = np.asarray(ckpt.arrays[name], dtype="<f8", order="C")  # keeps 0-d shapes
        raw = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        body.write(raw)
        offset += len(raw)
    payload = body.getvalue()
    header = {
        "version": CHECKPOINT_VERSION,
        "meta": ckpt.meta,
        "arrays": index,
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    return CHECKPOINT_MAGIC + b"\n" + dumps_canonical(header).encode() + b"\n" + payload


def write_checkpoint(path, ckpt: Checkpoint) -> None:
    data = checkpoint_bytes(ckpt)
    with locked_writer(path, "wb") as fh:
        fh.write(data)


def read_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    magic, sep, rest = raw.partition(b"\n")
    if magic != CHECKPOINT_MAGIC or not sep:
        raise ParseError(f"{path}: not a checkpoint file")
    head, sep, payload = rest.partition(b"\n")
    if not sep:
        raise ParseError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(head)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: corrupt checkpoint header ({exc.msg})") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise VersionMismatchError(
            f"{path}: checkpoint version {header.get('version')!r}, expected {CHECKPOINT_VERSION}"
        )
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise ParseError(f"{path}: checkpoint payload is truncated or corrupt")
    arrays = {}
    for entry in header["arrays"]:
        chunk = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(entry["shape"]).copy()
    return Checkpoint(arrays=arrays, meta=header["meta"])
