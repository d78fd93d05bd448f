import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from cnsc.cli import main
from cnsc.model import CnscModel

FAST = {"epochs": 3, "width": 6, "latent_dim": 4, "patience": 3}


def sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def artifacts(out, suffix):
    return sorted(p for p in Path(out).iterdir() if p.name.endswith(suffix) and ".manifest." not in p.name)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "fast.json").write_text(json.dumps(FAST))
    assert main(["generate", "--seed", "4", "--n", "1500", "--scenario", "observational", "--out", str(root / "gen")]) == 0
    cohort = artifacts(root / "gen", ".csv")[0]
    truth = artifacts(root / "gen", ".truth.json")[0]
    assert main(["train", str(cohort), "--config", str(root / "fast.json"), "--k", "3", "--seed", "7",
                 "--out", str(root / "train")]) == 0
    ckpt = [p for p in artifacts(root / "train", ".json") if ".report." not in p.name][0]
    return root, cohort, truth, ckpt


class TestGenerate:
    def test_default_size_and_header(self, tmp_path):
        assert main(["generate", "--out", str(tmp_path)]) == 0
        lines = artifacts(tmp_path, ".csv")[0].read_text().splitlines()
        assert lines[0] == "x0,x1,x2,x3,x4,x5,x6,x7,x8,x9,a,t,d"
        assert len(lines) == 30001

    def test_emit_labels(self, tmp_path):
        assert main(["generate", "--n", "100", "--emit-labels", "--out", str(tmp_path)]) == 0
        assert artifacts(tmp_path, ".csv")[0].read_text().splitlines()[0].endswith(",z")

    def test_byte_identical(self, tmp_path):
        for sub in ("a", "b"):
            main(["generate", "--n", "300", "--seed", "9", "--out", str(tmp_path / sub)])
        a, b = artifacts(tmp_path / "a", ".csv")[0], artifacts(tmp_path / "b", ".csv")[0]
        assert a.name == b.name and a.name.startswith("generate-9-")
        assert sha(a) == sha(b)
        assert sha(artifacts(tmp_path / "a", ".truth.json")[0]) == sha(artifacts(tmp_path / "b", ".truth.json")[0])

    def test_manifest_lists_hashes(self, tmp_path):
        main(["generate", "--n", "100", "--out", str(tmp_path)])
        manifest = json.loads(next(tmp_path.glob("*.manifest.json")).read_text())
        assert manifest["command"] == "generate"
        assert len(manifest["outputs"]) == 2
        for path, digest in manifest["outputs"].items():
            assert sha(path) == digest
        assert manifest["config"]["n"] == 100 and "started" in manifest

    def test_config_file_and_override(self, tmp_path):
        cfg = tmp_path / "g.json"
        cfg.write_text(json.dumps({"n": 120, "seed": 1}))
        main(["generate", "--config", str(cfg), "--seed", "2", "--out", str(tmp_path / "o")])
        csv = artifacts(tmp_path / "o", ".csv")[0]
        assert csv.name.startswith("generate-2-") and len(csv.read_text().splitlines()) == 121

    def test_invalid_config(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"n": 10, "colour": "red"}))
        assert main(["generate", "--config", str(cfg), "--out", str(tmp_path)]) == 2
        cfg.write_text("{not json")
        assert main(["generate", "--config", str(cfg), "--out", str(tmp_path)]) == 2
        assert "error" in capsys.readouterr().err

    def test_unwritable_output(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert main(["generate", "--n", "50", "--out", str(blocker / "sub")]) == 3


class TestTrain:
    def test_identical_checkpoints(self, workdir, tmp_path):
        root, cohort, _, ckpt = workdir
        assert main(["train", str(cohort), "--config", str(root / "fast.json"), "--k", "3", "--seed", "7",
                     "--out", str(tmp_path)]) == 0
        again = tmp_path / ckpt.name
        assert sha(again) == sha(ckpt)
        report = ckpt.with_name(ckpt.name.replace(".json", ".report.json"))
        assert sha(tmp_path / report.name) == sha(report)

    def test_report_contents(self, workdir):
        _, _, _, ckpt = workdir
        report = json.loads(ckpt.with_name(ckpt.name.replace(".json", ".report.json")).read_text())
        assert report["config"]["k"] == 3 and report["seed"] == 7
        assert 1 <= len(report["val_trace"]) <= FAST["epochs"]
        assert np.isfinite(report["test_nll"])

    def test_unadjusted_flag(self, workdir, tmp_path):
        root, cohort, _, _ = workdir
        main(["train", str(cohort), "--config", str(root / "fast.json"), "--unadjusted", "--out", str(tmp_path)])
        ckpt = [p for p in artifacts(tmp_path, ".json") if ".report." not in p.name][0]
        assert CnscModel.load(ckpt).config["adjusted"] is False

    def test_missing_treatment_column(self, workdir, tmp_path, capsys):
        _, cohort, _, _ = workdir
        rows = [l.split(",") for l in cohort.read_text().splitlines()]
        bad = tmp_path / "noa.csv"
        bad.write_text("\n".join(",".join(r[:10] + r[11:]) for r in rows) + "\n")
        assert main(["train", str(bad), "--out", str(tmp_path)]) == 2
        assert "'a'" in capsys.readouterr().err

    def test_malformed_row_line_number(self, workdir, tmp_path, capsys):
        _, cohort, _, _ = workdir
        lines = cohort.read_text().splitlines()
        lines[6] = "1,2,3"
        bad = tmp_path / "bad.csv"
        bad.write_text("\n".join(lines) + "\n")
        assert main(["train", str(bad), "--out", str(tmp_path)]) == 2
        assert "line 7" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert main(["train", str(tmp_path / "nope.csv"), "--out", str(tmp_path)]) == 3


class TestSweep:
    def test_curve_and_final_line(self, workdir, tmp_path, capsys):
        root, cohort, _, _ = workdir
        cfg = tmp_path / "tiny.json"
        cfg.write_text(json.dumps({**FAST, "epochs": 2}))
        code = main(["sweep-k", str(cohort), "--config", str(cfg), "--k-range", "1-6", "--folds", "1",
                     "--out", str(tmp_path)])
        assert code == 0
        out = capsys.readouterr().out.strip().splitlines()
        assert out[-1].startswith("K*=") and 2 <= int(out[-1][3:]) <= 5
        curve = artifacts(tmp_path, ".csv")[0].read_text().splitlines()
        assert curve[0] == "K,mean_nll,std_nll,fold_0"
        assert len(curve) == 7 and [int(r.split(",")[0]) for r in curve[1:]] == [1, 2, 3, 4, 5, 6]

    def test_bad_range(self, workdir, tmp_path):
        _, cohort, _, _ = workdir
        assert main(["sweep-k", str(cohort), "--k-range", "six", "--out", str(tmp_path)]) == 2


class TestEvaluate:
    def test_full_report_on_training_cohort(self, workdir, tmp_path):
        _, cohort, truth, ckpt = workdir
        assert main(["evaluate", str(ckpt), str(cohort), "--truth", str(truth), "--n-perm", "1",
                     "--out", str(tmp_path)]) == 0
        report = json.loads(artifacts(tmp_path, ".json")[0].read_text())
        for key in ("rand_index", "ise_pop", "test_nll", "t_max"):
            assert np.isfinite(report[key]), key
        assert np.all(np.isfinite(report["ise_per_group"])) and len(report["ise_per_group"]) == 3
        assert np.all(np.isfinite(report["rmst_per_group_per_regime"]))
        curves = artifacts(tmp_path, ".curves.csv")[0].read_text().splitlines()
        assert curves[0] == "t,est_0,est_1,est_2,true_0,true_1,true_2" and len(curves) == 201

    def test_without_truth(self, workdir, tmp_path):
        _, cohort, _, ckpt = workdir
        assert main(["evaluate", str(ckpt), str(cohort), "--n-perm", "1", "--out", str(tmp_path)]) == 0
        report = json.loads(artifacts(tmp_path, ".json")[0].read_text())
        assert report["rand_index"] is None and report["ise_pop"] is None and report["ise_per_group"] is None
        assert np.isfinite(report["test_nll"]) and len(report["rmst_per_group_per_regime"]) == 3

    def test_dimension_mismatch(self, workdir, tmp_path):
        _, cohort, _, ckpt = workdir
        rows = [l.split(",") for l in cohort.read_text().splitlines()]
        rows[0] = [f"x{j}" for j in range(9)] + ["a", "t", "d"]
        bad = tmp_path / "nine.csv"
        bad.write_text("\n".join(",".join(r[:9] + r[10:]) if i else ",".join(rows[0]) for i, r in enumerate(rows)) + "\n")
        assert main(["evaluate", str(ckpt), str(bad), "--out", str(tmp_path)]) == 2

    def test_numeric_failure(self, workdir, tmp_path):
        _, cohort, _, ckpt = workdir
        model = CnscModel.load(ckpt)
        model.latents[...] = np.nan
        broken = model.save(tmp_path / "broken.json")
        with np.errstate(all="ignore"):
            assert main(["evaluate", str(broken), str(cohort), "--n-perm", "1", "--out", str(tmp_path / "o")]) == 4


class TestImportance:
    def test_table_schema(self, workdir, tmp_path):
        _, cohort, _, ckpt = workdir
        assert main(["importance", str(ckpt), str(cohort), "--n-perm", "2", "--out", str(tmp_path)]) == 0
        lines = artifacts(tmp_path, ".csv")[0].read_text().splitlines()
        assert lines[0] == "covariate,delta_nll,rank"
        rows = [l.split(",") for l in lines[1:]]
        assert sorted(r[0] for r in rows) == sorted(f"x{j}" for j in range(10))
        assert [int(r[2]) for r in rows] == list(range(1, 11))
        deltas = [float(r[1]) for r in rows]
        assert deltas == sorted(deltas, reverse=True)


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "cnsc", "generate", "--n", "50", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip().endswith(".csv")
