import json
from pathlib import Path

import numpy as np
import pytest

from aucis import scm
from aucis.cli import main
from aucis.datamodel import load_dataset
from aucis.evaluation import EvalReport

TINY_TRAIN = {
    "model": {"d_in": 12, "d_m": 6, "d_out": 8, "backbone_shape": [16], "classifier_hidden": 6},
    "train": {"max_epochs": 2, "patience": 2, "batch_size": 64, "seed": 0},
}


@pytest.fixture(scope="module")
def demo_paths(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = scm.demo_spec(num_subjects=6, num_aus=4, num_hidden_aus=1)
    spec_path = root / "demo.spec.json"
    scm.save_spec(spec, spec_path)
    config_path = root / "tiny.json"
    config_path.write_text(json.dumps(TINY_TRAIN))
    data_dir = root / "data"
    rc = main([
        "gen-data", "--spec", str(spec_path), "--n", "900", "--seed", "1",
        "--out", str(data_dir),
    ])
    assert rc == 0
    return {
        "root": root,
        "spec": spec_path,
        "config": config_path,
        "data": data_dir / "dataset.jsonl",
    }


class TestGenData:
    def test_dataset_written_with_sidecar(self, demo_paths):
        data = demo_paths["data"]
        assert data.exists()
        ds = load_dataset(data)
        assert len(ds) == 900
        sidecar = data.with_suffix(data.suffix + ".scmspec.json")
        assert sidecar.exists()
        side = json.loads(sidecar.read_text())
        assert side["hash"] in ds.provenance

    def test_missing_spec_exit_2(self, tmp_path, capsys):
        rc = main(["gen-data", "--spec", str(tmp_path / "nope.json"), "--n", "5", "--out", str(tmp_path)])
        assert rc == 2
        assert "nope.json" in capsys.readouterr().err

    def test_same_seed_byte_identical(self, demo_paths, tmp_path):
        out_a = tmp_path / "a.jsonl"
        out_b = tmp_path / "b.jsonl"
        for out in (out_a, out_b):
            rc = main(["gen-data", "--spec", str(demo_paths["spec"]), "--n", "50", "--seed", "7", "--out", str(out)])
            assert rc == 0
        assert out_a.read_bytes() == out_b.read_bytes()


class TestTrain:
    def test_kfold_layout(self, demo_paths, tmp_path):
        out = tmp_path / "run"
        rc = main([
            "train", "--data", str(demo_paths["data"]), "--variant", "cisnet",
            "--kfold", "3", "--seed", "1", "--config", str(demo_paths["config"]),
            "--out", str(out),
        ])
        assert rc == 0
        assert (out / "config.json").exists()
        assert (out / "foldplan.json").exists()
        assert (out / "summary.json").exists()
        for fold in range(3):
            fold_dir = out / f"fold_{fold}"
            assert (fold_dir / "checkpoint.ckpt").exists()
            assert (fold_dir / "report.json").exists()
            assert (fold_dir / "training_log.jsonl").exists()
            report = EvalReport.load(fold_dir / "report.json")
            assert report.oracle_alignment is not None  # sidecar auto-detected

    def test_rerun_identical_metrics(self, demo_paths, tmp_path):
        outs = []
        for tag in ("r1", "r2"):
            out = tmp_path / tag
            rc = main([
                "train", "--data", str(demo_paths["data"]), "--variant", "baseline",
                "--kfold", "2", "--seed", "3", "--config", str(demo_paths["config"]),
                "--out", str(out),
            ])
            assert rc == 0
            outs.append(out)
        a = (outs[0] / "fold_0" / "report.json").read_bytes()
        b = (outs[1] / "fold_0" / "report.json").read_bytes()
        assert a == b
        ca = (outs[0] / "fold_0" / "checkpoint.ckpt").read_bytes()
        cb = (outs[1] / "fold_0" / "checkpoint.ckpt").read_bytes()
        assert ca == cb

    def test_training_log_excludes_wall_time_from_determinism(self, demo_paths, tmp_path):
        out = tmp_path / "run"
        main([
            "train", "--data", str(demo_paths["data"]), "--variant", "baseline",
            "--kfold", "2", "--seed", "3", "--config", str(demo_paths["config"]),
            "--out", str(out),
        ])
        lines = (out / "fold_0" / "training_log.jsonl").read_text().splitlines()
        entries = [json.loads(l) for l in lines]
        assert all("wall_time_s" in e for e in entries)

    def test_missing_data_exit_2(self, tmp_path, capsys):
        rc = main(["train", "--data", str(tmp_path / "none.jsonl"), "--variant", "baseline"])
        assert rc == 2

    def test_cisnet_missing_subject_exit_3(self, demo_paths, tmp_path, capsys):
        ds = load_dataset(demo_paths["data"])
        sub = ds.restrict_to_subjects([0, 1, 2], reindex=False)
        from aucis.datamodel import save_dataset

        short = tmp_path / "short.jsonl"
        save_dataset(sub, short)
        rc = main([
            "train", "--data", str(short), "--variant", "cisnet", "--kfold", "2",
            "--config", str(demo_paths["config"]), "--out", str(tmp_path / "run"),
        ])
        assert rc == 3
        assert "subject" in capsys.readouterr().err


@pytest.fixture(scope="module")
def paired_runs(demo_paths, tmp_path_factory):
    root = tmp_path_factory.mktemp("pairs")
    runs = {}
    for variant in ("baseline", "cisnet"):
        out = root / variant
        rc = main([
            "train", "--data", str(demo_paths["data"]), "--variant", variant,
            "--kfold", "2", "--seed", "5", "--config", str(demo_paths["config"]),
            "--out", str(out),
        ])
        assert rc == 0
        runs[variant] = out
    return runs


class TestCompare:
    def test_identical_runs_zero_delta(self, paired_runs, tmp_path):
        out = tmp_path / "cmp"
        rc = main([
            "compare", "--baseline", str(paired_runs["baseline"]),
            "--cisnet", str(paired_runs["baseline"]), "--out", str(out),
        ])
        assert rc == 0
        comparison = json.loads((out / "comparison.json").read_text())
        assert comparison["pairs"][0]["macro_f1_delta"] == 0.0
        assert all(d == 0.0 for d in comparison["pairs"][0]["per_au_f1_delta"])

    def test_reference_context_present(self, paired_runs, tmp_path):
        out = tmp_path / "cmp"
        main([
            "compare", "--baseline", str(paired_runs["baseline"]),
            "--cisnet", str(paired_runs["cisnet"]), "--out", str(out),
        ])
        comparison = json.loads((out / "comparison.json").read_text())
        ref = comparison["reference_full_scale_f1"]
        assert ref["without_cis"] == 60.6
        assert ref["with_cis"] == 64.3
        assert abs(ref["delta"] - 3.7) < 1e-12
        assert (out / "deltas.csv").read_text().startswith("pair,")

    def test_mismatched_fold_plans_refused(self, demo_paths, paired_runs, tmp_path):
        other = tmp_path / "other_plan"
        rc = main([
            "train", "--data", str(demo_paths["data"]), "--variant", "baseline",
            "--kfold", "2", "--seed", "5", "--plan-seed", "9",
            "--config", str(demo_paths["config"]), "--out", str(other),
        ])
        assert rc == 0
        rc = main([
            "compare", "--baseline", str(other),
            "--cisnet", str(paired_runs["cisnet"]), "--out", str(tmp_path / "cmp"),
        ])
        assert rc == 3


class TestEvalCommand:
    def test_eval_checkpoint(self, demo_paths, paired_runs, tmp_path):
        ckpt = paired_runs["cisnet"] / "fold_0" / "checkpoint.ckpt"
        out = tmp_path / "eval"
        rc = main([
            "eval", "--checkpoint", str(ckpt), "--data", str(demo_paths["data"]),
            "--out", str(out),
        ])
        assert rc == 0
        report = EvalReport.load(out / "report.json")
        assert 0.0 <= report.macro_f1 <= 1.0
        assert (out / "f1.csv").exists()


class TestAblate:
    def test_grid_rows_ascending(self, demo_paths, tmp_path):
        out = tmp_path / "ablate"
        rc = main([
            "ablate-subjects", "--data", str(demo_paths["data"]), "--grid", "3,2",
            "--seeds", "1", "--kfold", "3", "--config", str(demo_paths["config"]),
            "--out", str(out),
        ])
        assert rc == 0
        lines = (out / "ablation.csv").read_text().splitlines()
        assert lines[0] == "m,f1_baseline,f1_cisnet"
        ms = [int(l.split(",")[0]) for l in lines[1:]]
        assert ms == sorted(ms) == [2, 3]
        for line in lines[1:]:
            _, fb, fc = line.split(",")
            assert 0.0 <= float(fb) <= 1.0
            assert 0.0 <= float(fc) <= 1.0

    def test_grid_too_large_exit_2(self, demo_paths, tmp_path):
        rc = main([
            "ablate-subjects", "--data", str(demo_paths["data"]), "--grid", "99",
            "--seeds", "1", "--config", str(demo_paths["config"]),
            "--out", str(tmp_path / "x"),
        ])
        assert rc == 2

    def test_full_pool_matches_train_command(self, demo_paths, tmp_path):
        # m = all training subjects of fold 0 reproduces the train command's fold 0
        out_train = tmp_path / "train_run"
        main([
            "train", "--data", str(demo_paths["data"]), "--variant", "baseline",
            "--kfold", "3", "--seed", "1", "--plan-seed", "0",
            "--config", str(demo_paths["config"]), "--out", str(out_train),
        ])
        report = EvalReport.load(out_train / "fold_0" / "report.json")

        out_ablate = tmp_path / "ablate_run"
        rc = main([
            "ablate-subjects", "--data", str(demo_paths["data"]), "--grid", "4",
            "--seeds", "1", "--kfold", "3", "--plan-seed", "0",
            "--config", str(demo_paths["config"]), "--out", str(out_ablate),
        ])
        assert rc == 0
        lines = (out_ablate / "ablation.csv").read_text().splitlines()
        f1_baseline = float(lines[1].split(",")[1])
        assert abs(f1_baseline - report.macro_f1) < 1e-9


class TestAnalyzePcc:
    def test_outputs(self, demo_paths, paired_runs, tmp_path):
        ckpt = paired_runs["cisnet"] / "fold_0" / "checkpoint.ckpt"
        out = tmp_path / "pcc"
        rc = main([
            "analyze-pcc", "--checkpoint", str(ckpt), "--data", str(demo_paths["data"]),
            "--out", str(out),
        ])
        assert rc == 0
        cos_lines = (out / "cosines.csv").read_text().splitlines()
        assert cos_lines[0] == "subject,cosine_full,cosine_upper"
        summary = json.loads((out / "summary.json").read_text())
        assert -1.0 <= summary["mean_cosine_full"] <= 1.0
        gt_files = list(out.glob("subject_*_gt.csv"))
        assert gt_files
        mat = np.loadtxt(gt_files[0], delimiter=",")
        assert mat.shape == (4, 4)


class TestExportFeaturesCommand:
    def test_export(self, demo_paths, paired_runs, tmp_path):
        ckpt = paired_runs["baseline"] / "fold_0" / "checkpoint.ckpt"
        out = tmp_path / "features.jsonl"
        rc = main([
            "export-features", "--checkpoint", str(ckpt), "--data", str(demo_paths["data"]),
            "--out", str(out),
        ])
        assert rc == 0
        assert len(out.read_text().splitlines()) == 901
