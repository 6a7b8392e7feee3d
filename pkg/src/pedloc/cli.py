"""Command line entry point: ``pedloc <command> [options]``.

Every command resolves its settings as flags > JSON config file >
built-in defaults, prints the resolved settings (including the seed)
as one JSON line, and writes its outputs deterministically.

Exit codes: 0 success, 2 invalid input or configuration, 3 a
``eval --check`` assertion failed.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import dataio, evalkit, geo_baseline
from .errors import PedlocError
from .height_model import HeightMixture, adult_mixture, relative_task_error, task_error_curve, teen_extended_mixture
from .net import LocModel, TrainConfig, train
from .synthgen import SPLITS, SynthConfig, generate_dataset, generate_split, make_lying_variant, split_sizes
from .uncertainty import UncertaintyConfig, coverage_report, high_risk_analysis, mc_predict, spread_vs_task_error

log = logging.getLogger("pedloc")

EXIT_OK, EXIT_INVALID, EXIT_CHECK = 0, 2, 3

DEFAULTS = {
    "gen": {
        "out": "data", "n": 5000, "seed": 0, "split": [0.7, 0.15, 0.15], "d_range": [5.0, 40.0],
        "pixel_noise": 2.0, "lateral_fov": 0.35, "joint_dropout": 0.0, "fixed_height": None,
        "lying": False, "mix": None,
    },
    "train": {
        "data": None, "train": None, "val": None, "out": "model.ckpt", "history": None,
        "epochs": 200, "lr": 1e-3, "batch": 512, "p_drop": 0.2, "weight_decay": 1.0,
        "loss": "laplace", "seed": 0, "width": 256, "n_blocks": 3, "center": "centroid",
    },
    "infer": {"checkpoint": None, "annotations": None, "out": "predictions.jsonl", "T": 50, "I": 100, "seed": 0},
    "eval": {"predictions": None, "gt": None, "out_dir": "reports", "check": False, "iou": 0.3, "mix": None,
             "seed": 0},
    "ablate": {
        "data": None, "out": "ablation.csv", "seeds": [0, 1, 2], "losses": ["laplace", "gaussian", "l1"],
        "epochs": 200, "lr": 1e-3, "batch": 512, "p_drop": 0.2, "weight_decay": 1.0, "seed": 0,
    },
    "taskerror": {"out": "taskerror.csv", "d_max": 50.0, "n_points": 51, "teen": False, "h_mean": None,
                  "mix": None, "seed": 0},
    "calib": {"predictions": None, "gt": None, "out": "calibration.csv", "iou": 0.3, "mix": None, "seed": 0},
}

REQUIRED = {
    "infer": ("checkpoint", "annotations"),
    "eval": ("predictions", "gt"),
    "ablate": ("data",),
    "calib": ("predictions", "gt"),
}


class ConfigError(PedlocError):
    pass


class CheckFailed(Exception):
    pass


# ------------------------------------------------------------------ config


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file (flat keys or a section named after the command), then flags."""
    cfg = dict(DEFAULTS[command])
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        section = data.get(command, {})
        flat = {k: v for k, v in data.items() if k not in DEFAULTS}
        for src in (flat, section):
            unknown = sorted(set(src) - set(cfg))
            if unknown:
                raise ConfigError(f"unknown {command} settings in config file: {unknown}")
            cfg.update(src)
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None and val is not False:
            cfg[key] = val
    for key in REQUIRED.get(command, ()):
        if cfg[key] is None:
            raise ConfigError(f"{command}: --{key.replace('_', '-')} is required")
    return cfg


def _mixture(cfg) -> HeightMixture:
    mix = HeightMixture.from_dict(cfg["mix"]) if cfg.get("mix") else adult_mixture()
    if cfg.get("h_mean") is not None:
        mix = HeightMixture(mix.components, h_mean=float(cfg["h_mean"]))
    return mix


def _announce(command, cfg):
    print(json.dumps({"command": command, "seed": cfg.get("seed"), "config": cfg}, sort_keys=True, default=str))


# ------------------------------------------------------------------ commands


def cmd_gen(cfg):
    synth = SynthConfig(
        d_range=tuple(cfg["d_range"]),
        lateral_fov_fraction=cfg["lateral_fov"],
        pixel_noise_std=cfg["pixel_noise"],
        joint_dropout=cfg["joint_dropout"],
        fixed_height=cfg["fixed_height"],
        mix=_mixture(cfg),
    )
    out = Path(cfg["out"])
    paths = generate_dataset(cfg["n"], cfg["split"], synth, out, seed=cfg["seed"])
    if cfg["lying"]:
        # lying variants of the test split, paired one-to-one by index
        sizes = dict(zip(SPLITS, split_sizes(cfg["n"], cfg["split"])))
        test = generate_split(cfg["seed"], "test", sizes["test"], synth)
        records = [make_lying_variant(s).to_record(f"lying-{i:06d}") for i, s in enumerate(test)]
        dataio.write_annotations(out / "test_lying.jsonl", records)
        paths["test_lying"] = out / "test_lying.jsonl"
    dataio.write_csv(out / "synth_config.csv", ["key", "value"],
                     [[k, json.dumps(v, sort_keys=True)] for k, v in sorted(synth.to_dict().items())])
    for name, p in paths.items():
        print(f"wrote {name}: {p}")


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def cmd_train(cfg):
    if cfg["data"]:
        train_path = Path(cfg["data"]) / "train.jsonl"
        val_path = Path(cfg["data"]) / "val.jsonl"
    else:
        if not cfg["train"]:
            raise ConfigError("train: give --data DIR or --train FILE")
        train_path, val_path = Path(cfg["train"]), Path(cfg["val"]) if cfg["val"] else None
    train_set = dataio.read_annotations(train_path)
    val_set = dataio.read_annotations(val_path) if val_path and val_path.exists() else []
    xtr, _, ytr = dataio.records_to_arrays(train_set, cfg["center"])
    xva, _, yva = dataio.records_to_arrays(val_set, cfg["center"]) if val_set else (None, None, None)
    tcfg = TrainConfig(lr=cfg["lr"], batch=cfg["batch"], epochs=cfg["epochs"], p_drop=cfg["p_drop"],
                       weight_decay=cfg["weight_decay"], loss=cfg["loss"], seed=cfg["seed"],
                       width=cfg["width"], n_blocks=cfg["n_blocks"])
    model, hist = train(xtr, ytr, tcfg, xva, yva)
    stats = geo_baseline.fit_segments((r.kp, r.K, r.gt["D"]) for r in train_set if r.gt)
    meta = {
        "architecture": model.architecture(),
        "p_drop": model.p_drop,
        "train_config": tcfg.to_dict(),
        "center": cfg["center"],
        "segment_stats": stats.to_dict(),
        "seed": cfg["seed"],
        "best_epoch": hist.best_epoch,
        "data_sha256": {"train": _file_digest(train_path), "val": _file_digest(val_path) if val_set else None},
    }
    out = Path(cfg["out"])
    dataio.write_checkpoint(out, dataio.Checkpoint(model.state_arrays(), meta))
    history = Path(cfg["history"]) if cfg["history"] else out.with_suffix(".history.csv")
    dataio.write_csv(history, ["epoch", "train_loss", "val_loss", "val_ALE"],
                     [[e, tl, vl, "" if math.isnan(a) else a] for e, tl, vl, a in hist.rows()])
    print(f"best epoch {hist.best_epoch}; wrote {out} and {history}")


def load_model(path):
    ckpt = dataio.read_checkpoint(path)
    return LocModel.from_state(ckpt.meta["architecture"], ckpt.arrays), ckpt.meta


def cmd_infer(cfg):
    model, meta = load_model(cfg["checkpoint"])
    records = dataio.read_annotations(cfg["annotations"])
    x, rays, _ = dataio.records_to_arrays(records, meta.get("center", "centroid"))
    est = mc_predict(model, x, rays, UncertaintyConfig(T=cfg["T"], I=cfg["I"], seed=cfg["seed"]))
    rows = [dataio.prediction_to_dict(r.id, r.image_id, r.bbox, e) for r, e in zip(records, est)]
    dataio.write_predictions(cfg["out"], rows)
    print(f"wrote {len(rows)} predictions to {cfg['out']}")


def _gt_dicts(records):
    out = []
    for r in records:
        if not r.gt or "D" not in r.gt:
            raise ConfigError(f"ground-truth record {r.id} has no gt.D")
        out.append({"id": r.id, "image_id": r.image_id, "bbox": r.bbox, "D": r.gt["D"],
                    "occlusion": r.gt.get("occlusion"), "truncation": r.gt.get("truncation")})
    return out


def _matched(cfg):
    preds = dataio.read_predictions(cfg["predictions"])
    gts = _gt_dicts(dataio.read_annotations(cfg["gt"]))
    res = evalkit.match(preds, gts, cfg["iou"])
    if not res.pairs:
        raise ConfigError("no prediction matched a ground truth")
    return res


def check_predictions(pairs, mix, bins=(5.0, 10.0, 15.0, 20.0, 25.0, 30.0)) -> list[tuple[str, bool, str]]:
    """The acceptance assertions that can be decided from one prediction file."""
    gt = np.array([p.gt_d for p in pairs])
    est = [p.pred for p in pairs]
    mu = np.array([e["mu"] for e in est])
    b = np.array([e["b"] for e in est])
    c = relative_task_error(mix)
    results = []
    for lo, hi in zip(bins[:-1], bins[1:]):
        sel = (gt >= lo) & (gt < hi)
        if not sel.any():
            results.append((f"ALE {lo:g}-{hi:g} m", False, "no instances"))
            continue
        e_hat = c * gt[sel].mean()
        a = np.abs(mu[sel] - gt[sel]).mean()
        results.append((f"ALE {lo:g}-{hi:g} m in [0.8, 2] e_hat", 0.8 * e_hat <= a <= 2 * e_hat,
                        f"ALE/e_hat = {a / e_hat:.3f}"))
        mb = b[sel].mean()
        results.append((f"mean b {lo:g}-{hi:g} m in [0.7, 1.6] e_hat", 0.7 * e_hat <= mb <= 1.6 * e_hat,
                        f"b/e_hat = {mb / e_hat:.3f}"))
    alea = coverage_report(est, gt, "aleatoric")["recall"]
    comb = coverage_report(est, gt, "combined")["recall"]
    results.append(("aleatoric coverage in [55, 75] %", 55.0 <= alea <= 75.0, f"{alea:.1f} %"))
    results.append(("combined coverage >= aleatoric", comb >= alea, f"{comb:.1f} % vs {alea:.1f} %"))
    alps = [evalkit.alp(pairs, t) for t in evalkit.ALP_THRESHOLDS]
    results.append(("ALP monotone in threshold", all(a <= b for a, b in zip(alps, alps[1:])),
                    " / ".join(f"{v:.1f}" for v in alps)))
    return results


def cmd_eval(cfg):
    res = _matched(cfg)
    mix = _mixture(cfg)
    out = Path(cfg["out_dir"])
    rep = evalkit.metric_report(res.pairs)
    dataio.write_csv(out / "metrics.csv", ["metric", "group", "value", "n"],
                     [[m, g, "" if v is None else v, n] for m, g, v, n in rep.rows()])
    gt = np.array([p.gt_d for p in res.pairs])
    mu = np.array([p.pred_d for p in res.pairs])
    bins = np.arange(0.0, math.ceil(gt.max() / 5.0) * 5.0 + 5.0, 5.0)
    rows = evalkit.ale_vs_task_error(mu, gt, mix, bins)
    dataio.write_csv(out / "ale_vs_task_error.csv", ["bin", "n", "ale", "e_hat"],
                     [[r["group"], r["n"], "" if r["ale"] is None else r["ale"],
                       "" if r["e_hat"] is None else r["e_hat"]] for r in rows])
    est = [p.pred for p in res.pairs]
    spread = spread_vs_task_error(est, gt, mix, bins)
    dataio.write_csv(out / "spread_vs_task_error.csv", ["lo", "hi", "n", "mean_b", "e_hat", "b_minus_e_hat"],
                     [[r["lo"], r["hi"], r["n"], r["mean_b"], r["e_hat"], r["b_minus_e_hat"]]
                      for r in spread if not r["empty"]])
    _write_coverage(out / "coverage.csv", est, gt, mix)
    if cfg["emit_plot_data"]:
        _write_scatter(out / "plot_instances.csv", res.pairs, mix)
    print(f"matched {len(res.pairs)} (false positives {res.false_positives}, missed {res.missed}); reports in {out}")
    if cfg["check"]:
        results = check_predictions(res.pairs, mix)
        for name, ok, detail in results:
            print(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})")
        if not all(ok for _, ok, _ in results):
            raise CheckFailed("one or more checks failed")


def _write_coverage(path, est, gt, mix):
    rows = []
    for kind in ("aleatoric", "combined"):
        r = coverage_report(est, gt, kind, mix)
        rows.append([kind, r["n"], r["recall"], r["mean_interval"], r["abs_err_over_sigma"],
                     r["abs_sigma_minus_task_error"]])
    dataio.write_csv(path, ["interval", "n", "recall_pct", "mean_half_width", "abs_err_over_half_width",
                            "abs_half_width_minus_task_error"], rows)


def _write_scatter(path, pairs, mix):
    c = relative_task_error(mix)
    dataio.write_csv(path, ["id", "gt_d", "mu", "b", "sigma", "e_hat", "difficulty"],
                     [[p.instance_id, p.gt_d, p.pred["mu"], p.pred["b"], p.pred["sigma"], c * p.gt_d, p.difficulty]
                      for p in pairs])


def cmd_calib(cfg):
    res = _matched(cfg)
    mix = _mixture(cfg)
    est = [p.pred for p in res.pairs]
    gt = np.array([p.gt_d for p in res.pairs])
    _write_coverage(cfg["out"], est, gt, mix)
    risk = high_risk_analysis(est, gt)
    risk_path = Path(cfg["out"]).with_name(Path(cfg["out"]).stem + "_high_risk.csv")
    dataio.write_csv(risk_path, ["n", "n_high_risk", "high_risk_pct", "covered_high_risk_pct"],
                     [[risk["n"], risk["n_high_risk"], risk["high_risk_fraction"], risk["covered_high_risk"]]])
    if cfg["emit_plot_data"]:
        _write_scatter(Path(cfg["out"]).with_name(Path(cfg["out"]).stem + "_instances.csv"), res.pairs, mix)
    print(f"wrote {cfg['out']} and {risk_path}")


def cmd_ablate(cfg):
    data = Path(cfg["data"])
    sets = [dataio.read_annotations(data / f"{s}.jsonl") for s in SPLITS]
    tcfg = TrainConfig(lr=cfg["lr"], batch=cfg["batch"], epochs=cfg["epochs"], p_drop=cfg["p_drop"],
                       weight_decay=cfg["weight_decay"])
    result = evalkit.run_ablation(*sets, losses=tuple(cfg["losses"]), seeds=tuple(cfg["seeds"]), cfg=tcfg)
    header, rows = result.table()
    dataio.write_csv(cfg["out"], header, [[("" if v is None else v) for v in r] for r in rows])
    if cfg["emit_plot_data"]:
        labels = header[1:-3:2]
        cells = []
        for (method, seed), cell in sorted(result.cells.items(), key=lambda kv: (kv[0][0], kv[0][1])):
            if "error" in cell:
                cells.append([method, seed, "error", cell["error"]])
                continue
            for lab, v in zip(labels, cell["bins"]):
                cells.append([method, seed, lab[4:-5], "" if v is None else v])
        dataio.write_csv(Path(cfg["out"]).with_name(Path(cfg["out"]).stem + "_cells.csv"),
                         ["method", "seed", "bin", "ale"], cells)
    print(f"wrote {cfg['out']}")


def cmd_taskerror(cfg):
    mix = _mixture(cfg)
    if cfg["teen"]:
        mix = teen_extended_mixture(mix)
    curve = task_error_curve(mix, cfg["d_max"], cfg["n_points"])
    dataio.write_csv(cfg["out"], ["d_m", "e_hat_m"], curve.to_rows())
    if cfg["emit_plot_data"]:
        base = _mixture(cfg)
        adult = task_error_curve(base, cfg["d_max"], cfg["n_points"])
        teen = task_error_curve(teen_extended_mixture(base), cfg["d_max"], cfg["n_points"])
        dataio.write_csv(Path(cfg["out"]).with_name(Path(cfg["out"]).stem + "_plot.csv"),
                         ["d_m", "e_hat_adult_m", "e_hat_with_teens_m"],
                         [[d, a, t] for d, a, t in zip(adult.distances, adult.e_hat, teen.e_hat)])
    print(f"slope {curve.e_hat[-1] / curve.distances[-1]:.6f} m/m; wrote {cfg['out']}")


COMMANDS = {
    "gen": cmd_gen, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
    "ablate": cmd_ablate, "taskerror": cmd_taskerror, "calib": cmd_calib,
}


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pedloc", description="Pedestrian distance from 2D keypoints with uncertainty.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="JSON file with settings (flat or under a section named after the command)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--emit-plot-data", dest="emit_plot_data", action="store_true",
                        help="also write CSVs shaped for external plotting")
        return sp

    sp = command("gen", "generate a synthetic dataset")
    sp.add_argument("--out")
    sp.add_argument("--n", type=int)
    sp.add_argument("--split", type=float, nargs=3, metavar=("TRAIN", "VAL", "TEST"))
    sp.add_argument("--d-range", dest="d_range", type=float, nargs=2, metavar=("LO", "HI"))
    sp.add_argument("--pixel-noise", dest="pixel_noise", type=float)
    sp.add_argument("--lateral-fov", dest="lateral_fov", type=float)
    sp.add_argument("--joint-dropout", dest="joint_dropout", type=float)
    sp.add_argument("--fixed-height", dest="fixed_height", type=float, help="cm; overrides the height mixture")
    sp.add_argument("--lying", action="store_true", help="also write lying variants of the test split")

    sp = command("train", "train the regressor")
    sp.add_argument("--data", help="directory with train.jsonl and val.jsonl")
    sp.add_argument("--train")
    sp.add_argument("--val")
    sp.add_argument("--out")
    sp.add_argument("--history")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--p-drop", dest="p_drop", type=float)
    sp.add_argument("--weight-decay", dest="weight_decay", type=float)
    sp.add_argument("--loss", choices=("laplace", "gaussian", "l1"))
    sp.add_argument("--width", type=int)
    sp.add_argument("--n-blocks", dest="n_blocks", type=int)
    sp.add_argument("--center", choices=("centroid", "bbox"))

    sp = command("infer", "predict distances with MC-dropout uncertainty")
    sp.add_argument("--checkpoint")
    sp.add_argument("--annotations")
    sp.add_argument("--out")
    sp.add_argument("-T", dest="T", type=int, help="stochastic forward passes")
    sp.add_argument("-I", dest="I", type=int, help="Laplace samples per pass")

    sp = command("eval", "metrics and reports for a prediction file")
    sp.add_argument("--predictions")
    sp.add_argument("--gt")
    sp.add_argument("--out-dir", dest="out_dir")
    sp.add_argument("--iou", type=float)
    sp.add_argument("--check", action="store_true", help="assert the acceptance thresholds; exit 3 on failure")

    sp = command("ablate", "loss-function ablation with the geometric baseline")
    sp.add_argument("--data")
    sp.add_argument("--out")
    sp.add_argument("--seeds", type=int, nargs="+")
    sp.add_argument("--losses", nargs="+", choices=("laplace", "gaussian", "l1"))
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--p-drop", dest="p_drop", type=float)
    sp.add_argument("--weight-decay", dest="weight_decay", type=float)

    sp = command("taskerror", "expected localization error from height variation")
    sp.add_argument("--out")
    sp.add_argument("--d-max", dest="d_max", type=float)
    sp.add_argument("--n-points", dest="n_points", type=int)
    sp.add_argument("--teen", action="store_true", help="include 14-17 year olds")
    sp.add_argument("--h-mean", dest="h_mean", type=float, help="assumed height in cm")

    sp = command("calib", "interval coverage and high-risk analysis")
    sp.add_argument("--predictions")
    sp.add_argument("--gt")
    sp.add_argument("--out")
    sp.add_argument("--iou", type=float)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        cfg["emit_plot_data"] = bool(args.emit_plot_data)
        _announce(args.command, cfg)
        COMMANDS[args.command](cfg)
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (PedlocError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
