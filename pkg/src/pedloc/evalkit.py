"""Localization metrics and experiment orchestration.

ALP is the percentage of predictions within a distance threshold; ALE is
the mean absolute distance error, reported per difficulty regime or per
ground-truth distance bin.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import geo_baseline
from .height_model import HeightMixture, relative_task_error

log = logging.getLogger(__name__)

ALP_THRESHOLDS = (0.5, 1.0, 2.0)
DISTANCE_BINS = (0.0, 10.0, 20.0, 30.0, math.inf)
DIFFICULTIES = ("easy", "moderate", "hard")


@dataclass
class MatchedPair:
    pred_d: float
    gt_d: float
    gt_bbox: tuple
    difficulty: str
    instance_id: str
    pred: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        if not (self.pred_d > 0 and self.gt_d > 0):
            raise ValueError(f"matched distances must be positive ({self.instance_id}: {self.pred_d}, {self.gt_d})")

    @property
    def error(self) -> float:
        return abs(self.pred_d - self.gt_d)


@dataclass
class MatchResult:
    pairs: list[MatchedPair]
    false_positives: int
    missed: int


def iou(box_a, box_b) -> float:
    ax0, ay0, ax1, ay1 = box_a
    bx0, by0, bx1, by1 = box_b
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    if area_a <= 0 or area_b <= 0:
        return 0.0
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def difficulty_of(gt: dict) -> str:
    """KITTI regimes from box height (px), occlusion level and truncation fraction."""
    try:
        height = float(gt["bbox_height"])
        occ = int(gt["occlusion"])
        trunc = float(gt["truncation"])
    except (KeyError, TypeError, ValueError):
        return "hard"
    if height >= 40 and occ <= 0 and trunc <= 0.15:
        return "easy"
    if height >= 25 and occ <= 1 and trunc <= 0.30:
        return "moderate"
    return "hard"


def _gt_distance(gt) -> float:
    if "d" in gt:
        return float(gt["d"])
    return float(np.linalg.norm(gt["D"]))


def match(predictions, ground_truths, iou_threshold: float = 0.3) -> MatchResult:
    """Greedy one-to-one matching by descending IoU within each image.

    ``predictions`` are dicts with ``image_id``, ``id``, ``bbox`` and
    ``mu``; ground truths are dicts with ``image_id``, ``id``, ``bbox``
    and either ``d`` or ``D`` (plus optional occlusion/truncation).
    Equal IoUs are resolved in favor of the lower prediction id, then the
    lower ground-truth id (compared as strings).
    """
    by_image: dict = {}
    for i, p in enumerate(predictions):
        by_image.setdefault(p["image_id"], ([], []))[0].append(i)
    for j, g in enumerate(ground_truths):
        by_image.setdefault(g["image_id"], ([], []))[1].append(j)
    pairs, used_p, used_g = [], set(), set()
    for image_id in sorted(by_image, key=str):
        p_idx, g_idx = by_image[image_id]
        cands = []
        for i in p_idx:
            for j in g_idx:
                o = iou(predictions[i]["bbox"], ground_truths[j]["bbox"])
                if o >= iou_threshold:
                    cands.append((-o, str(predictions[i]["id"]), str(ground_truths[j]["id"]), i, j))
        cands.sort()
        for _, _, _, i, j in cands:
            if i in used_p or j in used_g:
                continue
            used_p.add(i)
            used_g.add(j)
            g = ground_truths[j]
            box = tuple(g["bbox"])
            diff = difficulty_of({
                "bbox_height": box[3] - box[1],
                "occlusion": g.get("occlusion"),
                "truncation": g.get("truncation"),
            })
            pairs.append(MatchedPair(float(predictions[i]["mu"]), _gt_distance(g), box, diff, str(g["id"]),
                                     pred=predictions[i]))
    pairs.sort(key=lambda p: p.instance_id)
    return MatchResult(pairs, len(predictions) - len(used_p), len(ground_truths) - len(used_g))


def _errors(pairs) -> np.ndarray:
    return np.array([p.error if isinstance(p, MatchedPair) else float(p) for p in pairs], dtype=float)


def alp(pairs, threshold: float) -> float | None:
    """Percentage of pairs with error below ``threshold``; None when there are no pairs."""
    err = _errors(pairs)
    if err.size == 0:
        return None
    return 100.0 * int(np.count_nonzero(err < threshold)) / err.size


def _bin_label(lo, hi) -> str:
    return f"{lo:g}-{hi:g}" if math.isfinite(hi) else f"{lo:g}+"


def ale(pairs, grouping: str = "difficulty", bins=DISTANCE_BINS) -> list[dict]:
    """Mean absolute error per group; groups without pairs carry ``ale=None``."""
    if grouping == "difficulty":
        groups = [(d, [p for p in pairs if p.difficulty == d]) for d in DIFFICULTIES]
    elif grouping == "distance_bin":
        groups = [(_bin_label(lo, hi), [p for p in pairs if lo <= p.gt_d < hi]) for lo, hi in zip(bins[:-1], bins[1:])]
    elif grouping == "all":
        groups = [("all", list(pairs))]
    else:
        raise ValueError(f"unknown grouping {grouping!r}")
    rows = []
    for name, members in groups:
        err = _errors(members)
        rows.append({"group": name, "n": int(err.size), "ale": float(err.mean()) if err.size else None,
                     "empty": err.size == 0})
    return rows


def common_subset(pairs_by_method: dict[str, list[MatchedPair]]) -> dict[str, list[MatchedPair]]:
    """Restrict each method's pairs to ground-truth instances matched by every method."""
    ids = None
    for pairs in pairs_by_method.values():
        s = {p.instance_id for p in pairs}
        ids = s if ids is None else ids & s
    ids = ids or set()
    return {m: [p for p in pairs if p.instance_id in ids] for m, pairs in pairs_by_method.items()}


@dataclass
class MetricReport:
    alp: dict
    ale_difficulty: list
    ale_distance: list
    n: int

    def rows(self):
        out = [("ALP", f"<{t:g}m", v, self.n) for t, v in self.alp.items()]
        out += [("ALE", r["group"], r["ale"], r["n"]) for r in self.ale_difficulty]
        out += [("ALE", r["group"], r["ale"], r["n"]) for r in self.ale_distance]
        return out


def metric_report(pairs, thresholds=ALP_THRESHOLDS, bins=DISTANCE_BINS) -> MetricReport:
    return MetricReport(
        alp={t: alp(pairs, t) for t in thresholds},
        ale_difficulty=ale(pairs, "difficulty"),
        ale_distance=ale(pairs, "distance_bin", bins),
        n=len(pairs),
    )


def ale_vs_task_error(pred_d, gt_d, mix: HeightMixture, bins) -> list[dict]:
    """ALE per bin next to the expected task error of the same instances."""
    pred_d = np.asarray(pred_d, dtype=float)
    gt_d = np.asarray(gt_d, dtype=float)
    c = relative_task_error(mix)
    rows = []
    for lo, hi in zip(bins[:-1], bins[1:]):
        sel = (gt_d >= lo) & (gt_d < hi)
        n = int(sel.sum())
        if not n:
            rows.append({"group": _bin_label(lo, hi), "n": 0, "ale": None, "e_hat": None})
            continue
        rows.append({
            "group": _bin_label(lo, hi),
            "n": n,
            "ale": float(np.abs(pred_d[sel] - gt_d[sel]).mean()),
            "e_hat": float(c * gt_d[sel].mean()),
        })
    return rows


# ------------------------------------------------------------------ ablation


@dataclass
class AblationResult:
    bins: tuple
    cells: dict  # (method, seed) -> {"bins": [ale per bin], "all": ale} or {"error": str}
    models: dict = field(default_factory=dict, repr=False)

    def per_method(self, method: str) -> list[dict]:
        return [v for (m, _), v in sorted(self.cells.items(), key=lambda kv: str(kv[0])) if m == method and "error" not in v]

    def table(self) -> tuple[list[str], list[list]]:
        """Rows of ``method, <bin> mean, <bin> std, ..., all mean, all std, n_ok``."""
        labels = [_bin_label(lo, hi) for lo, hi in zip(self.bins[:-1], self.bins[1:])]
        header = ["method"]
        for lab in labels + ["all"]:
            header += [f"ale_{lab}_mean", f"ale_{lab}_std"]
        header.append("n_seeds")
        methods = []
        for m, _ in self.cells:
            if m not in methods:
                methods.append(m)
        rows = []
        for m in methods:
            ok = self.per_method(m)
            row = [m]
            for k in range(len(labels)):
                vals = [c["bins"][k] for c in ok if c["bins"][k] is not None]
                row += [float(np.mean(vals)) if vals else None, float(np.std(vals)) if vals else None]
            vals = [c["all"] for c in ok]
            row += [float(np.mean(vals)) if vals else None, float(np.std(vals)) if vals else None]
            row.append(len(ok))
            rows.append(row)
        return header, rows


def _binned_ale(pred, gt, bins):
    err = np.abs(np.asarray(pred) - np.asarray(gt))
    out = []
    for lo, hi in zip(bins[:-1], bins[1:]):
        sel = (gt >= lo) & (gt < hi)
        out.append(float(err[sel].mean()) if sel.any() else None)
    return {"bins": out, "all": float(err.mean())}


def run_ablation(train_set, val_set, test_set, losses=("laplace", "gaussian", "l1"), seeds=(0, 1, 2),
                 cfg=None, bins=DISTANCE_BINS, keep_models=False) -> AblationResult:
    """Train one model per (loss, seed) and evaluate it next to the geometric baseline.

    Each ``*_set`` is a list of ``AnnotationRecord`` with ground truth.
    A failed training run is recorded in its cell instead of aborting
    the table.
    """
    from dataclasses import replace

    from .dataio import records_to_arrays
    from .net import TrainConfig, predict, train

    cfg = cfg or TrainConfig()
    xtr, _, ytr = records_to_arrays(train_set)
    xva, _, yva = records_to_arrays(val_set)
    xte, _, yte = records_to_arrays(test_set)
    result = AblationResult(tuple(bins), {})

    stats = geo_baseline.fit_segments((r.kp, r.K, r.gt["D"]) for r in train_set)
    geo_pred = np.array([geo_baseline.estimate_distance(r.kp, r.K, stats) for r in test_set])
    for seed in seeds:
        result.cells[("geometric", seed)] = _binned_ale(geo_pred, yte, bins)

    for loss in losses:
        for seed in seeds:
            try:
                t0 = time.perf_counter()
                model, _ = train(xtr, ytr, replace(cfg, loss=loss, seed=seed), xva, yva)
                seconds = time.perf_counter() - t0
                pred = predict(model, xte).mu
                result.cells[(loss, seed)] = {**_binned_ale(pred, yte, bins), "train_seconds": seconds}
                if keep_models:
                    result.models[(loss, seed)] = model
            except Exception as exc:  # recorded per cell, the table goes on
                log.warning("ablation cell (%s, %s) failed: %s", loss, seed, exc)
                result.cells[(loss, seed)] = {"error": f"{type(exc).__name__}: {exc}"}
    return result
