"""CLI orchestration tests on a micro-scale experiment."""

import json

import numpy as np
import pytest

from dosediff.anchors import ZoneBoundaries
from dosediff.cli import (
    ExperimentConfig,
    evaluate_methods,
    main,
    run_ablation,
    write_subject,
)
from dosediff.errors import ConfigError
from dosediff.phantom import PhantomSpec, generate_cohort
from dosediff.volio import DOSE_LADDER, FULL_DOSE, read_mask, read_volume, write_volume

MICRO_CONFIG = {
    "seed": 5,
    "phantom": {"dims": [12, 12, 12]},
    "cohort": {"n_train": 2, "n_val": 0, "n_test": 1},
    "schedule": {"T": 200},
    "anchors": {"sweep_stride": 5},
    "denoiser": {"base_channels": 8, "channel_mults": [1, 2], "time_embed_dim": 32},
    "train": {"steps": 25, "batch_size": 2, "patch_size": 8, "stride": 4},
    "sample": {"stride": 8},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config_path = root / "config.json"
    config_path.write_text(json.dumps(MICRO_CONFIG))
    out = root / "run"
    code = main(["pipeline", "--config", str(config_path), "--out", str(out)])
    assert code == 0
    return {"config": config_path, "out": out}


class TestPhantomStage:
    def test_subject_files_on_disk(self, workspace):
        cohort = workspace["out"] / "cohort"
        manifest = json.loads((cohort / "manifest.json").read_text())
        assert manifest["splits"]["train"] == ["train_00", "train_01"]
        assert manifest["splits"]["test"] == ["test_00"]
        subject_dir = cohort / "train_00"
        for code in (0, 1, 2, 3, 4):
            vol = read_volume(subject_dir / f"dose_{code}.mdv")
            assert vol.dims == (12, 12, 12)
        mask = read_mask(subject_dir / "mask.mdm")
        assert mask.n_voxels > 0
        read_volume(subject_dir / "ground_truth.mdv")

    def test_phantom_subcommand_standalone(self, tmp_path, workspace):
        out = tmp_path / "cohort_only"
        code = main([
            "phantom", "--config", str(workspace["config"]), "--out", str(out)
        ])
        assert code == 0
        assert (out / "cohort" / "manifest.json").exists()
        # deterministic regeneration matches the pipeline's cohort bytes
        a = (out / "cohort" / "train_00" / "dose_0.mdv").read_bytes()
        b = (workspace["out"] / "cohort" / "train_00" / "dose_0.mdv").read_bytes()
        assert a == b


class TestCalibrateStage:
    def test_taus_schema(self, workspace):
        data = json.loads((workspace["out"] / "taus.json").read_text())
        assert set(data) >= {"taus", "matches", "sweep_stride", "seed"}
        taus = data["taus"]
        assert len(taus) == 3
        assert taus[0] > taus[1] > taus[2] >= 0
        assert data["sweep_stride"] == 5
        assert len(data["matches"]) == 2 * 3
        for key in data["matches"]:
            sid, dose = key.split("|")
            assert sid.startswith("train_")
            assert dose in ("1/10", "1/4", "1/2")


class TestTrainStage:
    def test_checkpoints_and_logs(self, workspace):
        out = workspace["out"]
        for variant in ("anchored", "baseline"):
            assert (out / f"ckpt_{variant}.mdck").exists()
            log_lines = (out / f"train_{variant}.jsonl").read_text().splitlines()
            assert len(log_lines) == MICRO_CONFIG["train"]["steps"]
            record = json.loads(log_lines[0])
            assert set(record) == {"step", "loss_noise", "loss_anch", "t_bucket"}
        base_log = [
            json.loads(line)
            for line in (out / "train_baseline.jsonl").read_text().splitlines()
        ]
        assert all(rec["loss_anch"] == 0.0 for rec in base_log)

    def test_train_subcommand_variant(self, tmp_path, workspace):
        ckpt_path = tmp_path / "model.mdck"
        code = main([
            "train", "--config", str(workspace["config"]),
            "--cohort", str(workspace["out"] / "cohort"),
            "--calibration", str(workspace["out"] / "taus.json"),
            "--out", str(ckpt_path), "--variant", "baseline",
            "--log", str(tmp_path / "log.jsonl"),
        ])
        assert code == 0
        assert ckpt_path.exists()
        assert (tmp_path / "log.jsonl").exists()


class TestSampleStage:
    def test_progressive_outputs_written(self, workspace):
        out = workspace["out"]
        taus = json.loads((out / "taus.json").read_text())["taus"]
        for variant in ("anchored", "baseline"):
            sample_dir = out / "samples" / variant / "test_00"
            final = read_volume(sample_dir / "final.mdv")
            assert final.dims == (12, 12, 12)
            assert final.dose_fraction == "synthetic-estimate"
            for rank in range(1, len(taus) + 1):
                read_volume(sample_dir / f"inter_tau{rank}.mdv")

    def test_sample_subcommand(self, tmp_path, workspace):
        out_dir = tmp_path / "sampled"
        code = main([
            "sample", "--config", str(workspace["config"]),
            "--ckpt", str(workspace["out"] / "ckpt_anchored.mdck"),
            "--input", str(workspace["out"] / "cohort" / "test_00" / "dose_4.mdv"),
            "--calibration", str(workspace["out"] / "taus.json"),
            "--out", str(out_dir),
        ])
        assert code == 0
        assert (out_dir / "final.mdv").exists()
        assert (out_dir / "inter_tau1.mdv").exists()


class TestEvalStage:
    def test_report_structure(self, workspace):
        report = json.loads((workspace["out"] / "report.json").read_text())
        assert report["config"]["seed"] == 5
        masked = report["masked"]
        assert set(masked["final"]["per_subject"]) == {"input", "baseline", "anchored"}
        for method, reports in masked["final"]["per_subject"].items():
            assert set(reports) == {"test_00"}
            for rep in reports.values():
                assert set(rep) == {"psnr", "ssim", "nmae", "n_voxels_masked"}
        for dose in ("1/10", "1/4", "1/2"):
            assert set(masked["intermediates"][dose]) == {"baseline", "anchored"}
        # only one test subject: the paired test is not applicable
        assert masked["p_values_vs_anchored"] == {}
        assert set(report["input_hashes"]) == {
            "taus.json", "ckpt_anchored.mdck", "ckpt_baseline.mdck", "cohort/manifest.json",
        }
        assert report["boundaries"] == json.loads(
            (workspace["out"] / "taus.json").read_text()
        )["taus"]


class TestResume:
    def test_resume_skips_all_stages(self, workspace):
        out = workspace["out"]
        report_before = (out / "report.json").read_bytes()
        mtimes = {
            p: (out / p).stat().st_mtime_ns
            for p in ("cohort/manifest.json", "taus.json", "ckpt_anchored.mdck", "report.json")
        }
        code = main([
            "pipeline", "--config", str(workspace["config"]),
            "--out", str(out), "--resume",
        ])
        assert code == 0
        for p, stamp in mtimes.items():
            assert (out / p).stat().st_mtime_ns == stamp
        assert (out / "report.json").read_bytes() == report_before

    def test_resume_recomputes_from_deleted_stage(self, workspace):
        out = workspace["out"]
        report_before = (out / "report.json").read_bytes()
        manifest_stamp = (out / "cohort" / "manifest.json").stat().st_mtime_ns
        ckpt_stamp = (out / "ckpt_anchored.mdck").stat().st_mtime_ns
        (out / "taus.json").unlink()
        code = main([
            "pipeline", "--config", str(workspace["config"]),
            "--out", str(out), "--resume",
        ])
        assert code == 0
        # phantom untouched, calibration onward recomputed
        assert (out / "cohort" / "manifest.json").stat().st_mtime_ns == manifest_stamp
        assert (out / "taus.json").exists()
        assert (out / "ckpt_anchored.mdck").stat().st_mtime_ns > ckpt_stamp
        assert (out / "report.json").read_bytes() == report_before


class TestConfigValidation:
    def test_bad_anchor_dose_exits_2(self, tmp_path):
        bad = dict(MICRO_CONFIG, anchors={"doses": ["1/3"], "sweep_stride": 5})
        config_path = tmp_path / "bad.json"
        config_path.write_text(json.dumps(bad))
        code = main(["phantom", "--config", str(config_path), "--out", str(tmp_path / "o")])
        assert code == 2

    def test_incompatible_patch_exits_2(self, tmp_path):
        bad = json.loads(json.dumps(MICRO_CONFIG))
        bad["train"]["patch_size"] = 9  # odd edge cannot be downsampled
        config_path = tmp_path / "bad.json"
        config_path.write_text(json.dumps(bad))
        code = main(["phantom", "--config", str(config_path), "--out", str(tmp_path / "o")])
        assert code == 2

    def test_malformed_json_exits_2(self, tmp_path):
        config_path = tmp_path / "bad.json"
        config_path.write_text("{not json")
        code = main(["phantom", "--config", str(config_path), "--out", str(tmp_path / "o")])
        assert code == 2

    def test_validate_api_raises_config_error(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(raw={"bogus": True}).validate()


class TestStageFailure:
    def test_training_divergence_exits_3(self, tmp_path, workspace):
        bad = json.loads(json.dumps(MICRO_CONFIG))
        bad["train"]["learning_rate"] = 1e8
        bad["train"]["steps"] = 60
        config_path = tmp_path / "diverge.json"
        config_path.write_text(json.dumps(bad))
        code = main([
            "train", "--config", str(config_path),
            "--cohort", str(workspace["out"] / "cohort"),
            "--calibration", str(workspace["out"] / "taus.json"),
            "--out", str(tmp_path / "ckpt.mdck"),
        ])
        assert code == 3


class TestEvaluateMethods:
    def test_p_values_reported_with_five_subjects(self, tmp_path, workspace):
        # fabricate sampled outputs for five subjects: "anchored" returns the
        # full-dose volume itself, "baseline" a blended noisier estimate
        subjects = generate_cohort(PhantomSpec(dims=(12, 12, 12), seed=77), 5, prefix="test")
        samples = tmp_path / "samples"
        boundaries = ZoneBoundaries(taus=(60, 40, 25))
        rng = np.random.default_rng(0)
        for s in subjects:
            full = s.volumes[FULL_DOSE]
            low = s.volumes[sorted(DOSE_LADDER)[0]]
            fake = {
                "anchored": full,
                "baseline": full.with_data(0.5 * full.data + 0.5 * low.data),
            }
            for method, estimate in fake.items():
                method_dir = samples / method / s.subject_id
                method_dir.mkdir(parents=True)
                write_volume(estimate, method_dir / "final.mdv")
                for rank in (1, 2, 3):
                    write_volume(estimate, method_dir / f"inter_tau{rank}.mdv")
        cfg = ExperimentConfig.load(workspace["config"])
        out = evaluate_methods(cfg, subjects, samples, boundaries)
        assert set(out["p_values_vs_anchored"]) == {"psnr", "ssim", "nmae"}
        for metric in ("psnr", "ssim", "nmae"):
            pvals = out["p_values_vs_anchored"][metric]
            assert set(pvals) == {"input", "baseline"}
            assert all(0.0 <= p <= 1.0 for p in pvals.values())
        # anchored == reference: perfect scores, capped psnr
        anchored = out["final"]["summary"]["anchored"]
        assert anchored["psnr"]["mean"] == 99.0
        assert anchored["nmae"]["mean"] == 0.0


class TestAblation:
    def test_grid_structure(self, tmp_path, workspace):
        cfg_small = json.loads(json.dumps(MICRO_CONFIG))
        cfg_small["train"]["steps"] = 6
        config_path = tmp_path / "ablate.json"
        config_path.write_text(json.dumps(cfg_small))
        cfg = ExperimentConfig.load(config_path)
        rows = run_ablation(cfg, tmp_path)
        assert len(rows) == 9
        ids = [row["set_id"] for row in rows]
        assert ids == ["S1", "S2", "S3", "S4", "S5", "S6", "S7", "S8", "baseline"]
        data = json.loads((tmp_path / "ablation.json").read_text())
        assert len(data["rows"]) == 9
        for row in rows:
            assert "failed" in row or set(row["metrics"]["summary"]) == {"psnr", "ssim", "nmae"}
        s1 = rows[0]
        assert s1["anchors"] == ["1/10", "1/4", "1/2"]
        assert s1["weighting"] == "poly"
        assert rows[7]["weighting"] == "const"
        assert rows[8]["n_anchors"] == 0
