"""Experiment orchestration: phantom, calibrate, train, sample, eval, ablate, pipeline.

Configs and reports are JSON; training logs are JSON lines.  Every stage is
deterministic given the config's seed, and the pipeline is resumable from
its on-disk stage artifacts.  Exit codes: 0 success, 2 config error, 3 stage
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .anchors import AnchorSet, CalibrationResult, ZoneBoundaries, calibrate
from .denoiser import Checkpoint, DenoiserConfig, load_checkpoint, save_checkpoint
from .errors import ConfigError, DoseDiffError
from .metrics import metric_report, wilcoxon_holm
from .phantom import MultiDoseSubject, PhantomSpec, cohort_seed, generate_subject
from .sampler import sample_volume
from .schedule import WeightSchedule, linear_schedule
from .trainer import TrainConfig, full_dose_norm_scale, train
from .volio import (
    DOSE_LADDER,
    DOSE_TO_CODE,
    FULL_DOSE,
    ULTRA_LOW_DOSE,
    dose_from_str,
    dose_to_str,
    make_patch_grid,
    read_mask,
    read_volume,
    write_mask,
    write_volume,
)

ABLATION_ROWS = (
    ("S1", ("1/10", "1/4", "1/2"), "poly"),
    ("S2", ("1/10", "1/4"), "poly"),
    ("S3", ("1/10", "1/2"), "poly"),
    ("S4", ("1/4", "1/2"), "poly"),
    ("S5", ("1/10",), "poly"),
    ("S6", ("1/4",), "poly"),
    ("S7", ("1/2",), "poly"),
    ("S8", ("1/10", "1/4", "1/2"), "const"),
    ("baseline", (), None),
)

DEFAULT_CONFIG = {
    "seed": 0,
    "deterministic": True,
    "phantom": {
        "dims": [32, 32, 32],
        "n_ellipsoids": 2,
        "n_lesions": 1,
        "background_activity": 1.0,
        "lesion_activity": 3.0,
        "count_scale": 5.0,
    },
    "cohort": {"n_train": 10, "n_val": 2, "n_test": 5},
    "schedule": {"T": 1000, "beta_start": 1e-4, "beta_end": 2e-2},
    "anchors": {"doses": ["1/10", "1/4", "1/2"], "sweep_stride": 10},
    "denoiser": {"base_channels": 16, "channel_mults": [1, 2, 4], "time_embed_dim": 64},
    "train": {
        "steps": 20000,
        "batch_size": 8,
        "learning_rate": 1e-4,
        "lambda": 1.0,
        "weight": {"kind": "poly", "p": 2.0, "c": 1.0},
        "patch_size": 16,
        "stride": 8,
    },
    "sample": {"stride": 8},
    "eval": {"unmasked": False},
}


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict

    @classmethod
    def load(cls, path=None, seed=None, deterministic=None) -> "ExperimentConfig":
        raw = DEFAULT_CONFIG
        if path is not None:
            try:
                user = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            if not isinstance(user, dict):
                raise ConfigError(f"config {path} must be a JSON object")
            raw = _merge(raw, user)
        if seed is not None:
            raw = _merge(raw, {"seed": seed})
        if deterministic:
            raw = _merge(raw, {"deterministic": True})
        cfg = cls(raw=raw)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        try:
            self.phantom_spec(0)
            anchor_set = self.anchor_set()
            denoiser_cfg = self.denoiser_config()
            denoiser_cfg.validate_patch(self.raw["train"]["patch_size"])
            self.schedule()
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc
        for dose in anchor_set.doses:
            if dose not in DOSE_LADDER:
                raise ConfigError(f"anchor dose {dose} outside the phantom dose ladder")
        cohort = self.raw["cohort"]
        if min(cohort["n_train"], cohort["n_test"]) < 1:
            raise ConfigError("cohort needs at least one training and one test subject")

    def phantom_spec(self, seed: int) -> PhantomSpec:
        p = self.raw["phantom"]
        return PhantomSpec(
            dims=tuple(p["dims"]),
            seed=seed,
            n_ellipsoids=p["n_ellipsoids"],
            n_lesions=p["n_lesions"],
            background_activity=p["background_activity"],
            lesion_activity=p["lesion_activity"],
            count_scale=p["count_scale"],
        )

    def schedule(self):
        s = self.raw["schedule"]
        return linear_schedule(s["T"], s["beta_start"], s["beta_end"])

    def anchor_set(self) -> AnchorSet:
        return AnchorSet.from_partial(self.raw["anchors"]["doses"])

    def denoiser_config(self) -> DenoiserConfig:
        d = self.raw["denoiser"]
        return DenoiserConfig(
            base_channels=d["base_channels"],
            channel_mults=tuple(d["channel_mults"]),
            time_embed_dim=d["time_embed_dim"],
            num_timesteps=self.raw["schedule"]["T"],
        )

    def weight_schedule(self) -> WeightSchedule:
        w = self.raw["train"]["weight"]
        return WeightSchedule(kind=w["kind"], p=w.get("p", 2.0), c=w.get("c", 1.0))

    def train_config(self, boundaries, norm_scale, variant="anchored",
                     anchor_set=None, weight_schedule=None) -> TrainConfig:
        if variant not in ("anchored", "baseline"):
            raise ConfigError(f"unknown train variant {variant!r}")
        t = self.raw["train"]
        baseline = variant == "baseline"
        return TrainConfig(
            steps=t["steps"],
            batch_size=t["batch_size"],
            learning_rate=t["learning_rate"],
            lam=0.0 if baseline else t["lambda"],
            weight_schedule=weight_schedule or self.weight_schedule(),
            anchor_set=anchor_set or self.anchor_set(),
            boundaries=None if baseline else boundaries,
            anchor_enabled=not baseline,
            patch_size=t["patch_size"],
            stride=t["stride"],
            norm_scale=norm_scale,
            seed=self.raw["seed"],
            deterministic=self.raw["deterministic"],
        )

    def subject_ids(self) -> dict[str, list[str]]:
        cohort = self.raw["cohort"]
        return {
            "train": [f"train_{i:02d}" for i in range(cohort["n_train"])],
            "val": [f"val_{i:02d}" for i in range(cohort.get("n_val", 0))],
            "test": [f"test_{i:02d}" for i in range(cohort["n_test"])],
        }

    def build_cohort(self) -> dict[str, list[MultiDoseSubject]]:
        """Regenerate the full cohort deterministically from the config."""
        splits = {}
        offset = 0
        for split, ids in self.subject_ids().items():
            subjects = []
            for sid in ids:
                spec = self.phantom_spec(cohort_seed(self.raw["seed"], offset))
                subjects.append(generate_subject(spec, subject_id=sid))
                offset += 1
            splits[split] = subjects
        return splits


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _derived_seed(seed: int, label: str) -> int:
    digest = hashlib.blake2b(f"{seed}:{label}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


# ---------------------------------------------------------------------------
# cohort disk layout


def write_subject(subject: MultiDoseSubject, subject_dir: Path) -> None:
    subject_dir.mkdir(parents=True, exist_ok=True)
    for dose, volume in subject.volumes.items():
        write_volume(volume, subject_dir / f"dose_{DOSE_TO_CODE[dose]}.mdv")
    write_mask(subject.mask, subject_dir / "mask.mdm")
    write_volume(subject.ground_truth, subject_dir / "ground_truth.mdv")


def read_subject(subject_dir: Path, subject_id: str) -> MultiDoseSubject:
    volumes = {
        dose: read_volume(subject_dir / f"dose_{DOSE_TO_CODE[dose]}.mdv")
        for dose in DOSE_LADDER
    }
    return MultiDoseSubject(
        subject_id=subject_id,
        volumes=volumes,
        mask=read_mask(subject_dir / "mask.mdm"),
        ground_truth=read_volume(subject_dir / "ground_truth.mdv"),
    )


def load_cohort(cohort_dir: Path) -> dict[str, list[MultiDoseSubject]]:
    manifest = json.loads((cohort_dir / "manifest.json").read_text())
    return {
        split: [read_subject(cohort_dir / sid, sid) for sid in ids]
        for split, ids in manifest["splits"].items()
    }


# ---------------------------------------------------------------------------
# calibration JSON round trip


def calibration_to_json(result: CalibrationResult, anchor_set: AnchorSet) -> dict:
    return {
        "taus": list(result.boundaries.taus),
        "matches": {
            f"{sid}|{dose_to_str(dose)}": t
            for (sid, dose), t in sorted(result.per_subject_matches.items(),
                                         key=lambda kv: (kv[0][0], kv[0][1]))
        },
        "per_dose_tau": {dose_to_str(d): t for d, t in sorted(result.per_dose_tau.items())},
        "doses": [dose_to_str(d) for d in anchor_set.doses],
        "sweep_stride": result.sweep_stride,
        "seed": result.seed,
        "norm_scale": result.norm_scale,
    }


def load_calibration(path: Path) -> dict:
    data = json.loads(Path(path).read_text())
    for key in ("taus", "matches", "sweep_stride", "seed"):
        if key not in data:
            raise ConfigError(f"calibration file {path} missing key {key!r}")
    return data


def boundaries_from_json(data: dict, anchor_set: AnchorSet) -> ZoneBoundaries:
    per_dose = {dose_from_str(k): v for k, v in data.get("per_dose_tau", {}).items()}
    if per_dose:
        missing = [d for d in anchor_set.partial_doses if d not in per_dose]
        if missing:
            raise ConfigError(f"calibration lacks boundaries for doses {missing}")
        taus = tuple(per_dose[d] for d in sorted(anchor_set.partial_doses))
    else:
        taus = tuple(data["taus"])
    return ZoneBoundaries(taus=taus)


# ---------------------------------------------------------------------------
# stages


def stage_phantom(cfg: ExperimentConfig, out: Path) -> Path:
    cohort_dir = out / "cohort"
    splits = cfg.build_cohort()
    for subjects in splits.values():
        for subject in subjects:
            write_subject(subject, cohort_dir / subject.subject_id)
    manifest = {
        "splits": {split: [s.subject_id for s in subjects] for split, subjects in splits.items()},
        "phantom": cfg.raw["phantom"],
        "seed": cfg.raw["seed"],
    }
    _write_json(cohort_dir / "manifest.json", manifest)
    return cohort_dir


def stage_calibrate(cfg: ExperimentConfig, out: Path, cohort_dir: Path | None = None) -> Path:
    subjects = (
        load_cohort(cohort_dir)["train"] if cohort_dir is not None
        else cfg.build_cohort()["train"]
    )
    sched = cfg.schedule()
    anchor_set = cfg.anchor_set()
    norm_scale = full_dose_norm_scale(subjects)
    result = calibrate(
        subjects,
        anchor_set,
        sched,
        sweep_stride=cfg.raw["anchors"]["sweep_stride"],
        seed=_derived_seed(cfg.raw["seed"], "calibrate"),
        norm_scale=norm_scale,
    )
    taus_path = out / "taus.json"
    _write_json(taus_path, calibration_to_json(result, anchor_set))
    return taus_path


def train_variant(
    cfg: ExperimentConfig,
    subjects,
    calibration: dict,
    variant: str,
    anchor_doses=None,
    weighting=None,
) -> tuple[Checkpoint, list[dict]]:
    """Train one model variant against a shared calibration."""
    anchor_set = (
        AnchorSet.from_partial(anchor_doses) if anchor_doses is not None else cfg.anchor_set()
    )
    weight_schedule = None
    if weighting is not None:
        weight_schedule = WeightSchedule(
            kind=weighting,
            p=cfg.raw["train"]["weight"].get("p", 2.0),
            c=cfg.raw["train"]["weight"].get("c", 1.0),
        )
    norm_scale = calibration.get("norm_scale") or full_dose_norm_scale(subjects)
    boundaries = None
    if variant != "baseline":
        boundaries = boundaries_from_json(calibration, anchor_set)
    train_cfg = cfg.train_config(
        boundaries, norm_scale, variant=variant,
        anchor_set=anchor_set, weight_schedule=weight_schedule,
    )
    return train(subjects, train_cfg, cfg.denoiser_config(), cfg.schedule())


def stage_train(cfg: ExperimentConfig, out: Path, cohort_dir: Path, taus_path: Path) -> dict:
    subjects = load_cohort(cohort_dir)["train"]
    calibration = load_calibration(taus_path)
    paths = {}
    for variant in ("anchored", "baseline"):
        ckpt, log = train_variant(cfg, subjects, calibration, variant)
        ckpt_path = out / f"ckpt_{variant}.mdck"
        save_checkpoint(ckpt, ckpt_path)
        log_path = out / f"train_{variant}.jsonl"
        log_path.write_text("".join(json.dumps(rec, sort_keys=True) + "\n" for rec in log))
        paths[variant] = ckpt_path
    return paths


def sample_subject(
    ckpt: Checkpoint,
    subject: MultiDoseSubject,
    cfg: ExperimentConfig,
    boundaries: ZoneBoundaries,
    seed: int,
):
    sched = cfg.schedule()
    y = subject.volumes[ULTRA_LOW_DOSE]
    grid = make_patch_grid(
        y.dims, cfg.raw["train"]["patch_size"], cfg.raw["sample"]["stride"]
    )
    norm_scale = ckpt.config["train"]["norm_scale"]
    return sample_volume(ckpt, y, grid, sched, boundaries, seed, norm_scale)


def write_progressive(output, out_dir: Path, boundaries: ZoneBoundaries) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_volume(output.final, out_dir / "final.mdv")
    for rank, tau in enumerate(boundaries.taus, start=1):
        write_volume(output.intermediates[tau], out_dir / f"inter_tau{rank}.mdv")


def stage_sample(cfg: ExperimentConfig, out: Path, cohort_dir: Path,
                 taus_path: Path, ckpt_paths: dict) -> Path:
    test_subjects = load_cohort(cohort_dir)["test"]
    calibration = load_calibration(taus_path)
    anchor_set = cfg.anchor_set()
    boundaries = boundaries_from_json(calibration, anchor_set)
    samples_dir = out / "samples"
    expected = cfg.raw["schedule"]
    for variant, ckpt_path in ckpt_paths.items():
        ckpt = load_checkpoint(ckpt_path, expected_config={"schedule": expected})
        for subject in test_subjects:
            seed = _derived_seed(cfg.raw["seed"], f"sample:{subject.subject_id}")
            output = sample_subject(ckpt, subject, cfg, boundaries, seed)
            write_progressive(output, samples_dir / variant / subject.subject_id, boundaries)
    return samples_dir


def _summarize(per_subject: dict[str, dict]) -> dict:
    metrics = {}
    for metric in ("psnr", "ssim", "nmae"):
        vals = np.array([rep[metric] for rep in per_subject.values()], dtype=np.float64)
        metrics[metric] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=0))}
    return metrics


def evaluate_methods(
    cfg: ExperimentConfig,
    test_subjects: list[MultiDoseSubject],
    samples_dir: Path,
    boundaries: ZoneBoundaries,
    methods=("baseline", "anchored"),
    unmasked: bool = False,
) -> dict:
    """Per-subject and cohort metrics for every method, plus adjusted p-values."""
    anchor_set = cfg.anchor_set()
    stage_doses = sorted(anchor_set.partial_doses)

    def mask_for(subject):
        if unmasked:
            return np.ones(subject.mask.dims, dtype=bool)
        return subject.mask

    final = {"per_subject": {}, "summary": {}}
    final["per_subject"]["input"] = {
        s.subject_id: metric_report(
            s.volumes[ULTRA_LOW_DOSE], s.volumes[FULL_DOSE], mask_for(s)
        ).as_dict()
        for s in test_subjects
    }
    intermediates: dict[str, dict] = {dose_to_str(d): {} for d in stage_doses}
    for method in methods:
        per_subject = {}
        per_stage: dict[str, dict] = {dose_to_str(d): {} for d in stage_doses}
        for subject in test_subjects:
            sample_dir = samples_dir / method / subject.subject_id
            estimate = read_volume(sample_dir / "final.mdv")
            per_subject[subject.subject_id] = metric_report(
                estimate, subject.volumes[FULL_DOSE], mask_for(subject)
            ).as_dict()
            for rank, dose in enumerate(stage_doses, start=1):
                inter = read_volume(sample_dir / f"inter_tau{rank}.mdv")
                per_stage[dose_to_str(dose)][subject.subject_id] = metric_report(
                    inter, subject.volumes[dose], mask_for(subject)
                ).as_dict()
        final["per_subject"][method] = per_subject
        for dose_key, stage_reports in per_stage.items():
            intermediates[dose_key][method] = {
                "per_subject": stage_reports,
                "summary": _summarize(stage_reports),
            }
    for method, reports in final["per_subject"].items():
        final["summary"][method] = _summarize(reports)

    p_values = {}
    if len(test_subjects) >= 5:
        subject_order = [s.subject_id for s in test_subjects]
        for metric in ("psnr", "ssim", "nmae"):
            scores = {
                method: [reports[sid][metric] for sid in subject_order]
                for method, reports in final["per_subject"].items()
            }
            p_values[metric] = wilcoxon_holm(scores, reference_method="anchored")
    return {"final": final, "intermediates": intermediates, "p_values_vs_anchored": p_values}


def stage_eval(cfg: ExperimentConfig, out: Path, cohort_dir: Path,
               taus_path: Path, samples_dir: Path, ckpt_paths: dict) -> Path:
    test_subjects = load_cohort(cohort_dir)["test"]
    calibration = load_calibration(taus_path)
    boundaries = boundaries_from_json(calibration, cfg.anchor_set())
    report = {
        "config": cfg.raw,
        "boundaries": list(boundaries.taus),
        "masked": evaluate_methods(cfg, test_subjects, samples_dir, boundaries),
    }
    if cfg.raw["eval"].get("unmasked"):
        report["unmasked"] = evaluate_methods(
            cfg, test_subjects, samples_dir, boundaries, unmasked=True
        )
    hashes = {"taus.json": _sha256(taus_path)}
    hashes.update({f"ckpt_{v}.mdck": _sha256(Path(p)) for v, p in sorted(ckpt_paths.items())})
    hashes["cohort/manifest.json"] = _sha256(cohort_dir / "manifest.json")
    report["input_hashes"] = hashes
    report_path = out / "report.json"
    _write_json(report_path, report)
    return report_path


def run_ablation(cfg: ExperimentConfig, out: Path) -> list[dict]:
    """Table of anchor-set / weighting variants over one shared cohort."""
    splits = cfg.build_cohort()
    train_subjects, test_subjects = splits["train"], splits["test"]
    sched = cfg.schedule()
    norm_scale = full_dose_norm_scale(train_subjects)
    result = calibrate(
        train_subjects,
        cfg.anchor_set(),
        sched,
        sweep_stride=cfg.raw["anchors"]["sweep_stride"],
        seed=_derived_seed(cfg.raw["seed"], "calibrate"),
        norm_scale=norm_scale,
    )
    calibration = calibration_to_json(result, cfg.anchor_set())

    rows = []
    for set_id, doses, weighting in ABLATION_ROWS:
        row = {
            "set_id": set_id,
            "n_anchors": len(doses),
            "anchors": list(doses),
            "weighting": weighting,
        }
        try:
            variant = "baseline" if set_id == "baseline" else "anchored"
            ckpt, _ = train_variant(
                cfg, train_subjects, calibration, variant,
                anchor_doses=doses or None, weighting=weighting,
            )
            row_dir = out / "ablation" / set_id
            anchor_set = AnchorSet.from_partial(doses) if doses else cfg.anchor_set()
            boundaries = result.boundaries_for(anchor_set)
            per_subject = {}
            for subject in test_subjects:
                seed = _derived_seed(cfg.raw["seed"], f"sample:{subject.subject_id}")
                output = sample_subject(ckpt, subject, cfg, boundaries, seed)
                write_progressive(output, row_dir / subject.subject_id, boundaries)
                per_subject[subject.subject_id] = metric_report(
                    output.final, subject.volumes[FULL_DOSE], subject.mask
                ).as_dict()
            row["metrics"] = {"per_subject": per_subject, "summary": _summarize(per_subject)}
        except DoseDiffError as exc:
            row["failed"] = str(exc)
        rows.append(row)
    _write_json(out / "ablation.json", {"config": cfg.raw, "rows": rows})
    return rows


def run_pipeline(cfg: ExperimentConfig, out: Path, resume: bool = False) -> Path:
    """phantom -> calibrate -> train -> sample -> eval, resumable per stage."""
    out.mkdir(parents=True, exist_ok=True)
    cohort_dir = out / "cohort"
    taus_path = out / "taus.json"
    ckpt_paths = {v: out / f"ckpt_{v}.mdck" for v in ("anchored", "baseline")}
    samples_dir = out / "samples"
    report_path = out / "report.json"
    upstream_ran = False

    def needs(done: bool, name: str) -> bool:
        nonlocal upstream_ran
        if resume and done and not upstream_ran:
            print(f"[pipeline] {name}: reusing existing output")
            return False
        print(f"[pipeline] {name}: running")
        upstream_ran = True
        return True

    try:
        if needs((cohort_dir / "manifest.json").exists(), "phantom"):
            stage_phantom(cfg, out)
        if needs(taus_path.exists(), "calibrate"):
            stage_calibrate(cfg, out, cohort_dir=cohort_dir)
        if needs(all(p.exists() for p in ckpt_paths.values()), "train"):
            stage_train(cfg, out, cohort_dir, taus_path)
        test_ids = json.loads((cohort_dir / "manifest.json").read_text())["splits"]["test"]
        samples_done = all(
            (samples_dir / variant / sid / "final.mdv").exists()
            for variant in ckpt_paths
            for sid in test_ids
        )
        if needs(samples_done, "sample"):
            stage_sample(cfg, out, cohort_dir, taus_path, ckpt_paths)
        if needs(report_path.exists(), "eval"):
            stage_eval(cfg, out, cohort_dir, taus_path, samples_dir, ckpt_paths)
    except DoseDiffError:
        raise
    except (OSError, KeyError) as exc:
        raise DoseDiffError(f"pipeline stage failed: {exc}") from exc
    return report_path


# ---------------------------------------------------------------------------
# argparse front end


def _add_common(parser):
    parser.add_argument("--config", type=Path, default=None, help="experiment config JSON")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", type=Path, required=True, help="output directory or file")
    parser.add_argument("--deterministic", action="store_true",
                        help="force deterministic mode on")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dosediff",
        description="Anchor-guided diffusion denoising experiments on synthetic phantoms",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate the multi-dose phantom cohort")
    _add_common(p)

    p = sub.add_parser("calibrate", help="calibrate anchor boundaries by degradation matching")
    _add_common(p)
    p.add_argument("--cohort", type=Path, default=None, help="cohort dir (else regenerated)")

    p = sub.add_parser("train", help="train a denoiser variant")
    _add_common(p)
    p.add_argument("--calibration", type=Path, required=True, help="taus.json from calibrate")
    p.add_argument("--cohort", type=Path, default=None, help="cohort dir (else regenerated)")
    p.add_argument("--variant", choices=("anchored", "baseline"), default="anchored")
    p.add_argument("--log", type=Path, default=None, help="JSON-lines training log path")

    p = sub.add_parser("sample", help="progressive sampling from an ultra-low-dose volume")
    _add_common(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True, help="ultra-low-dose MDV1 volume")
    p.add_argument("--calibration", type=Path, required=True)

    p = sub.add_parser("eval", help="evaluate sampled estimates against references")
    _add_common(p)
    p.add_argument("--cohort", type=Path, required=True)
    p.add_argument("--samples", type=Path, required=True)
    p.add_argument("--calibration", type=Path, required=True)
    p.add_argument("--ckpts", type=Path, nargs="*", default=[], help="checkpoints to hash")

    p = sub.add_parser("ablate", help="run the anchor-design ablation grid")
    _add_common(p)

    p = sub.add_parser("pipeline", help="run all stages end to end")
    _add_common(p)
    p.add_argument("--resume", action="store_true", help="reuse existing stage outputs")

    return parser


def _cmd_phantom(cfg, args):
    stage_phantom(cfg, args.out)


def _cmd_calibrate(cfg, args):
    args.out.mkdir(parents=True, exist_ok=True)
    stage_calibrate(cfg, args.out, cohort_dir=args.cohort)


def _cmd_train(cfg, args):
    subjects = (
        load_cohort(args.cohort)["train"] if args.cohort is not None
        else cfg.build_cohort()["train"]
    )
    calibration = load_calibration(args.calibration)
    ckpt, log = train_variant(cfg, subjects, calibration, args.variant)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, args.out)
    if args.log is not None:
        args.log.write_text("".join(json.dumps(rec, sort_keys=True) + "\n" for rec in log))


def _cmd_sample(cfg, args):
    ckpt = load_checkpoint(args.ckpt, expected_config={"schedule": cfg.raw["schedule"]})
    calibration = load_calibration(args.calibration)
    anchor_doses = [dose_from_str(d) for d in calibration.get("doses", [])]
    anchor_set = (
        AnchorSet(doses=tuple(anchor_doses)) if anchor_doses else cfg.anchor_set()
    )
    boundaries = boundaries_from_json(calibration, anchor_set)
    y = read_volume(args.input)
    if y.dose_fraction != ULTRA_LOW_DOSE:
        print(f"warning: input dose is {y.dose_fraction}, expected {ULTRA_LOW_DOSE}",
              file=sys.stderr)
    seed = _derived_seed(cfg.raw["seed"], f"sample:{args.input.stem}")
    sched = cfg.schedule()
    grid = make_patch_grid(
        y.dims, cfg.raw["train"]["patch_size"], cfg.raw["sample"]["stride"]
    )
    output = sample_volume(
        ckpt, y, grid, sched, boundaries, seed, ckpt.config["train"]["norm_scale"]
    )
    write_progressive(output, args.out, boundaries)


def _cmd_eval(cfg, args):
    args.out.mkdir(parents=True, exist_ok=True)
    ckpt_paths = {p.stem.replace("ckpt_", ""): p for p in args.ckpts}
    stage_eval(cfg, args.out, args.cohort, args.calibration, args.samples,
               ckpt_paths or {})


def _cmd_ablate(cfg, args):
    args.out.mkdir(parents=True, exist_ok=True)
    run_ablation(cfg, args.out)


def _cmd_pipeline(cfg, args):
    run_pipeline(cfg, args.out, resume=args.resume)


COMMANDS = {
    "phantom": _cmd_phantom,
    "calibrate": _cmd_calibrate,
    "train": _cmd_train,
    "sample": _cmd_sample,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "pipeline": _cmd_pipeline,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = ExperimentConfig.load(
            args.config, seed=args.seed, deterministic=args.deterministic
        )
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DoseDiffError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
