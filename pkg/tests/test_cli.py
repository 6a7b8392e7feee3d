import json
import math

import pytest

from pedloc import dataio
from pedloc.cli import EXIT_CHECK, EXIT_INVALID, EXIT_OK, main


def run(capsys, *args):
    code = main([str(a) for a in args])
    out = capsys.readouterr()
    return code, out.out, out.err


def announced(out):
    return json.loads(out.splitlines()[0])


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    """A tiny dataset and a briefly trained model without dropout."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--n", "400", "--seed", "3", "--out", str(root / "data"), "--lying"]) == EXIT_OK
    assert main(["train", "--data", str(root / "data"), "--epochs", "60", "--batch", "64", "--width", "32",
                 "--p-drop", "0", "--out", str(root / "m.ckpt")]) == EXIT_OK
    return root


class TestConfig:
    def test_defaults_printed(self, capsys, tmp_path):
        code, out, _ = run(capsys, "taskerror", "--out", tmp_path / "t.csv")
        assert code == EXIT_OK
        cfg = announced(out)
        assert cfg["seed"] == 0 and cfg["config"]["d_max"] == 50.0

    def test_precedence(self, capsys, tmp_path):
        conf = tmp_path / "c.json"
        conf.write_text(json.dumps({"seed": 5, "taskerror": {"d_max": 20.0, "n_points": 5}}))
        code, out, _ = run(capsys, "taskerror", "--config", conf, "--n-points", "3", "--out", tmp_path / "t.csv")
        assert code == EXIT_OK
        cfg = announced(out)
        assert cfg["seed"] == 5
        assert cfg["config"]["d_max"] == 20.0  # file beats default
        assert cfg["config"]["n_points"] == 3  # flag beats file
        rows = dataio.read_csv(tmp_path / "t.csv")
        assert [float(r["d_m"]) for r in rows] == [0.0, 10.0, 20.0]

    def test_unknown_key(self, capsys, tmp_path):
        conf = tmp_path / "c.json"
        conf.write_text('{"colour": 1}')
        code, _, err = run(capsys, "taskerror", "--config", conf)
        assert code == EXIT_INVALID and "colour" in err

    def test_unreadable_config(self, capsys, tmp_path):
        (tmp_path / "c.json").write_text("{not json")
        assert run(capsys, "taskerror", "--config", tmp_path / "c.json")[0] == EXIT_INVALID

    def test_missing_required(self, capsys):
        code, _, err = run(capsys, "infer", "--annotations", "x.jsonl")
        assert code == EXIT_INVALID and "--checkpoint" in err

    def test_invalid_value(self, capsys, tmp_path):
        assert run(capsys, "gen", "--n", "10", "--d-range", "40", "5", "--out", tmp_path)[0] == EXIT_INVALID
        assert run(capsys, "taskerror", "--n-points", "1", "--out", tmp_path / "t.csv")[0] == EXIT_INVALID


class TestGen:
    def test_byte_identical(self, capsys, tmp_path):
        for d in ("a", "b"):
            assert run(capsys, "gen", "--n", "200", "--seed", "7", "--out", tmp_path / d)[0] == EXIT_OK
        for f in ("train.jsonl", "val.jsonl", "test.jsonl", "synth_config.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        assert len(dataio.read_annotations(tmp_path / "a/train.jsonl")) == 140

    def test_lying_pairs(self, small):
        lying = dataio.read_annotations(small / "data/test_lying.jsonl")
        standing = dataio.read_annotations(small / "data/test.jsonl")
        assert len(lying) == len(standing)
        assert all(r.gt["pose_tag"] == "lying" for r in lying)


class TestTrainInfer:
    def test_checkpoint_provenance(self, small):
        meta = dataio.read_checkpoint(small / "m.ckpt").meta
        for key in ("architecture", "train_config", "segment_stats", "seed", "data_sha256"):
            assert key in meta
        assert meta["train_config"]["p_drop"] == 0
        rows = dataio.read_csv(small / "m.history.csv")
        assert len(rows) == 60

    def test_single_pass_no_dropout_sigma_is_aleatoric(self, capsys, small, tmp_path):
        code, _, _ = run(capsys, "infer", "--checkpoint", small / "m.ckpt", "--annotations",
                         small / "data/test.jsonl", "-T", "1", "-I", "20000", "--out", tmp_path / "p.jsonl")
        assert code == EXIT_OK
        for p in dataio.read_predictions(tmp_path / "p.jsonl"):
            # a single deterministic pass leaves only the Laplace spread: sigma = sqrt(2) b
            assert p["sigma"] == pytest.approx(math.sqrt(2) * p["b"], rel=0.05)

    def test_infer_deterministic(self, capsys, small, tmp_path):
        for name in ("a", "b"):
            run(capsys, "infer", "--checkpoint", small / "m.ckpt", "--annotations", small / "data/test.jsonl",
                "-T", "5", "-I", "10", "--out", tmp_path / f"{name}.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_corrupt_checkpoint(self, capsys, small, tmp_path):
        (tmp_path / "bad.ckpt").write_bytes(b"nope")
        code = run(capsys, "infer", "--checkpoint", tmp_path / "bad.ckpt", "--annotations",
                   small / "data/test.jsonl")[0]
        assert code == EXIT_INVALID


class TestEval:
    @pytest.fixture
    def preds(self, capsys, small, tmp_path):
        run(capsys, "infer", "--checkpoint", small / "m.ckpt", "--annotations", small / "data/test.jsonl",
            "-T", "5", "-I", "20", "--out", tmp_path / "p.jsonl")
        return tmp_path / "p.jsonl"

    def test_reports(self, capsys, small, preds, tmp_path):
        code, _, _ = run(capsys, "eval", "--predictions", preds, "--gt", small / "data/test.jsonl",
                         "--out-dir", tmp_path / "r", "--emit-plot-data")
        assert code == EXIT_OK
        for f in ("metrics.csv", "ale_vs_task_error.csv", "spread_vs_task_error.csv", "coverage.csv",
                  "plot_instances.csv"):
            assert (tmp_path / "r" / f).exists()
        metrics = dataio.read_csv(tmp_path / "r/metrics.csv")
        assert {r["group"] for r in metrics} >= {"<1m", "easy", "0-10", "30+"}
        assert len(dataio.read_csv(tmp_path / "r/plot_instances.csv")) == 60

    def test_check_exit_code(self, capsys, small, preds, tmp_path):
        # 60 instances from a 60-epoch toy model do not meet the acceptance bands
        code, out, _ = run(capsys, "eval", "--predictions", preds, "--gt", small / "data/test.jsonl",
                           "--out-dir", tmp_path / "r", "--check")
        assert code == EXIT_CHECK
        assert "FAIL" in out and "ALP monotone" in out

    def test_unmatched(self, capsys, small, preds, tmp_path):
        code = run(capsys, "eval", "--predictions", preds, "--gt", small / "data/val.jsonl",
                   "--out-dir", tmp_path / "r")[0]
        assert code == EXIT_INVALID

    def test_calib(self, capsys, small, preds, tmp_path):
        code, _, _ = run(capsys, "calib", "--predictions", preds, "--gt", small / "data/test.jsonl",
                         "--out", tmp_path / "cal.csv")
        assert code == EXIT_OK
        rows = dataio.read_csv(tmp_path / "cal.csv")
        assert [r["interval"] for r in rows] == ["aleatoric", "combined"]
        assert (tmp_path / "cal_high_risk.csv").exists()


class TestTaskError:
    def test_curve(self, capsys, tmp_path):
        code, out, _ = run(capsys, "taskerror", "--d-max", "40", "--n-points", "5", "--out", tmp_path / "t.csv",
                           "--emit-plot-data")
        assert code == EXIT_OK
        rows = dataio.read_csv(tmp_path / "t.csv")
        assert list(rows[0]) == ["d_m", "e_hat_m"]
        assert float(rows[-1]["e_hat_m"]) == pytest.approx(40 * 0.04594015701303364, rel=1e-12)
        plot = dataio.read_csv(tmp_path / "t_plot.csv")
        assert all(float(r["e_hat_with_teens_m"]) >= float(r["e_hat_adult_m"]) for r in plot)

    def test_h_mean_override(self, capsys, tmp_path):
        run(capsys, "taskerror", "--out", tmp_path / "a.csv")
        run(capsys, "taskerror", "--h-mean", "160", "--out", tmp_path / "b.csv")
        a = dataio.read_csv(tmp_path / "a.csv")[-1]["e_hat_m"]
        b = dataio.read_csv(tmp_path / "b.csv")[-1]["e_hat_m"]
        assert float(b) > float(a)


def test_ablate(capsys, small, tmp_path):
    code, _, _ = run(capsys, "ablate", "--data", small / "data", "--seeds", "0", "--losses", "l1", "--epochs", "2",
                     "--batch", "64", "--out", tmp_path / "ab.csv", "--emit-plot-data")
    assert code == EXIT_OK
    rows = dataio.read_csv(tmp_path / "ab.csv")
    assert [r["method"] for r in rows] == ["geometric", "l1"]
    cells = dataio.read_csv(tmp_path / "ab_cells.csv")
    assert {r["bin"] for r in cells} == {"0-10", "10-20", "20-30", "30+"}
