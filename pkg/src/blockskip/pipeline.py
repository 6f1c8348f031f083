"""End-to-end pipeline plumbing: configs, artifacts, commands, ablations.

Every command reads one JSON config; every artifact it writes embeds the
config hash and seed that produced it, and commands that consume artifacts
refuse hash mismatches unless forced. All randomness flows from the config
seed through named streams (teacher / mask / sampling), so two runs differing
in one ablated factor share every other draw.
"""

from __future__ import annotations

import concurrent.futures
import csv
import hashlib
import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datasets import make_dataset
from .diffusion import NoiseSchedule, make_schedule, sample_chain
from .executor import ExecutionStats, MaskMatrix, all_ones_mask, run_masked_chain
from .metrics import (QualityReport, block_macs, feature_distortion, mask_cost,
                      mask_report, mmd, mmd_permutation_threshold,
                      near_binary_fraction, wall_clock)
from .model import BlockChainModel, ModelSpec, load_container, save_container
from .rectifier import rectify, verify_equivalence
from .seeds import stream
from .teacher import TeacherConfig, train_teacher
from .trainer import TrainerConfig, train_mask


class PipelineError(RuntimeError):
    """A command's inputs or artifacts were invalid."""


@dataclass
class RunConfig:
    seed: int
    output_dir: Path
    dataset: dict
    model: dict
    schedule: dict
    sampler: str
    teacher: dict
    mask: dict
    raw: dict

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise PipelineError(f"config file {path} does not exist")
        raw = json.loads(path.read_text())
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        for key in ("seed", "output_dir", "dataset", "model", "schedule"):
            if key not in raw:
                raise PipelineError(f"config is missing required key {key!r}")
        sampler = raw.get("sampler", "ddim")
        if sampler not in ("ddim", "ddpm"):
            raise PipelineError(f"sampler must be ddim or ddpm, got {sampler!r}")
        cfg = cls(seed=int(raw["seed"]), output_dir=Path(raw["output_dir"]),
                  dataset=dict(raw["dataset"]), model=dict(raw["model"]),
                  schedule=dict(raw["schedule"]), sampler=sampler,
                  teacher=dict(raw.get("teacher", {})), mask=dict(raw.get("mask", {})),
                  raw=raw)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.dataset.get("kind") == "tiny-image":
            path = self.dataset.get("path")
            if not path or not Path(path).exists():
                raise PipelineError(f"tiny-image dataset path {path!r} does not exist")

    @property
    def config_hash(self) -> str:
        # identifies the experiment, not its storage location
        semantic = {k: v for k, v in self.raw.items() if k != "output_dir"}
        canonical = json.dumps(semantic, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    def build_schedule(self) -> NoiseSchedule:
        s = self.schedule
        return make_schedule(int(s["timesteps"]), float(s["beta_min"]),
                             float(s["beta_max"]), kind=s.get("kind", "linear"))

    def build_model_spec(self) -> ModelSpec:
        m = self.model
        return ModelSpec(mode=m["mode"], blocks=int(m["blocks"]), width=int(m["width"]),
                         hidden=int(m["hidden"]), timesteps=int(self.schedule["timesteps"]),
                         block_kinds=list(m.get("block_kinds", [])))

    def teacher_config(self) -> TeacherConfig:
        t = self.teacher
        return TeacherConfig(
            epochs=int(t.get("epochs", 30)),
            batch_size=int(t.get("batch_size", 128)),
            lr=float(t.get("lr", 2e-3)),
            holdout_fraction=float(t.get("holdout_fraction", 0.1)),
            target_eps_mse=(None if t.get("target_eps_mse", 0.26) is None
                            else float(t.get("target_eps_mse", 0.26))),
        )

    def trainer_config(self, **overrides) -> TrainerConfig:
        m = dict(self.mask)
        m.update({k: v for k, v in overrides.items() if v is not None})
        return TrainerConfig(
            lambda1=float(m.get("lambda1", 0.05)),
            lambda2=float(m.get("lambda2", 0.02)),
            lr=float(m.get("lr", 0.05)),
            iterations=int(m.get("iterations", 50)),
            batch_size=int(m.get("batch_size", 8)),
            sampling_mode=m.get("sampling_mode", "bernoulli_st"),
            tau=float(m.get("tau", 1.0)),
            threshold=float(m.get("threshold", 0.5)),
            seed=self.seed,
            teacher_input=m.get("teacher_input", "student_state"),
            loss_scaling=bool(m.get("loss_scaling", True)),
        )


def _check_hash(artifact: str, found: str | None, expected: str, force: bool) -> None:
    if found != expected and not force:
        raise PipelineError(
            f"{artifact} was produced under config hash {found}, current config hashes to "
            f"{expected}; refusing to mix runs (pass force to override)")


# -- teacher -------------------------------------------------------------------


def cmd_train_teacher(config: RunConfig, out_dir=None, force: bool = False) -> Path:
    out = Path(out_dir) if out_dir else config.output_dir / "teacher"
    if out.exists() and any(out.iterdir()) and not force:
        raise PipelineError(f"teacher output {out} is not empty (use force to overwrite)")
    schedule = config.build_schedule()
    data = make_dataset(config.dataset, stream(config.seed, "teacher-data"))
    model = BlockChainModel(config.build_model_spec(), stream(config.seed, "teacher-init"))
    curve = train_teacher(model, schedule, data, config.teacher_config(),
                          stream(config.seed, "teacher-train"))
    save_container(model, schedule, out, seed=config.seed,
                   extra={"config_hash": config.config_hash}, force=True)
    lines = ["epoch,train_mse,holdout_mse"]
    for epoch, train_mse, holdout_mse in curve:
        lines.append(f"{epoch},{train_mse:.9g},{holdout_mse:.9g}")
    (out / "training_curve.csv").write_text("\n".join(lines) + "\n")
    return out


def load_teacher(config: RunConfig, model_dir=None, force: bool = False
                 ) -> tuple[BlockChainModel, NoiseSchedule, dict]:
    path = Path(model_dir) if model_dir else config.output_dir / "teacher"
    if not (path / "manifest.json").exists():
        raise PipelineError(f"no model container at {path}")
    model, schedule, manifest = load_container(path)
    _check_hash(f"model container {path}", manifest.get("extra", {}).get("config_hash"),
                config.config_hash, force)
    return model, schedule, manifest


# -- mask training -----------------------------------------------------------------


def cmd_train_mask(config: RunConfig, model_dir=None, out_path=None, force: bool = False,
                   **overrides) -> Path:
    model, schedule, manifest = load_teacher(config, model_dir, force)
    trainer_config = config.trainer_config(**overrides)
    result = train_mask(model, schedule, trainer_config, sampler=config.sampler,
                        model_checksum=manifest["checksum"])
    result.mask.metadata["config_hash"] = config.config_hash
    out = Path(out_path) if out_path else config.output_dir / "masks" / "mask.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    result.mask.save(out)
    result.write_trace_csv(out.with_name(out.stem + "_loss_trace.csv"))
    result.weights.write_csv(out.with_name(out.stem + "_timestep_weights.csv"))
    return out


def cmd_sweep_lambda1(config: RunConfig, values, model_dir=None, force: bool = False,
                      **overrides) -> list[Path]:
    paths = []
    for value in values:
        out = config.output_dir / "masks" / f"mask_l1_{value:g}.json"
        paths.append(cmd_train_mask(config, model_dir=model_dir, out_path=out,
                                    force=force, lambda1=value, **overrides))
    return paths


# -- rectification -----------------------------------------------------------------


def cmd_rectify(config: RunConfig, mask_path, out_path=None, verify_seeds=None,
                model_dir=None, force: bool = False) -> tuple[Path, Path]:
    mask = MaskMatrix.load(mask_path)
    _check_hash(f"mask {mask_path}", mask.metadata.get("config_hash"),
                config.config_hash, force)
    rectified, report = rectify(mask)
    if verify_seeds:
        model, schedule, _ = load_teacher(config, model_dir, force)
        report.per_seed_deviation = verify_equivalence(
            model, mask, rectified, verify_seeds, schedule, mode=config.sampler)
    out = Path(out_path) if out_path else Path(mask_path).with_name(
        Path(mask_path).stem + "_rectified.json")
    rectified.save(out)
    report_path = out.with_name(out.stem + "_report.json")
    report.save(report_path)
    return out, report_path


# -- sampling ----------------------------------------------------------------------


def _write_samples(out_dir: Path, label: str, seed_index: int, samples: np.ndarray,
                   mode: str) -> Path:
    if mode == "points":
        path = out_dir / f"samples_seed{seed_index}.csv"
        lines = ["x,y"] + [f"{row[0]:.8e},{row[1]:.8e}" for row in samples]
        path.write_text("\n".join(lines) + "\n")
    else:
        path = out_dir / f"samples_seed{seed_index}.f32"
        path.write_bytes(samples.astype("<f4").tobytes())
    return path


def load_samples(sample_dir) -> np.ndarray:
    root = Path(sample_dir)
    csvs = sorted(root.glob("samples_seed*.csv"))
    raws = sorted(root.glob("samples_seed*.f32"))
    if csvs:
        chunks = [np.loadtxt(p, delimiter=",", skiprows=1, dtype=np.float64).reshape(-1, 2)
                  for p in csvs]
        return np.concatenate(chunks, axis=0)
    if raws:
        meta = json.loads((root / "meta.json").read_text())
        dim = meta["data_dim"]
        chunks = [np.frombuffer(p.read_bytes(), dtype="<f4").reshape(-1, dim) for p in raws]
        return np.concatenate(chunks, axis=0).astype(np.float64)
    raise PipelineError(f"no sample files found in {root}")


def cmd_sample(config: RunConfig, model_dir=None, mask_path=None, seeds: int = 4,
               count: int = 256, label: str = "samples", out_dir=None,
               force: bool = False) -> Path:
    model, schedule, _ = load_teacher(config, model_dir, force)
    mask = None
    if mask_path is not None:
        mask = MaskMatrix.load(mask_path)
        _check_hash(f"mask {mask_path}", mask.metadata.get("config_hash"),
                    config.config_hash, force)
    out = Path(out_dir) if out_dir else config.output_dir / label
    out.mkdir(parents=True, exist_ok=True)
    stats: ExecutionStats | None = None
    for k in range(seeds):
        rng = stream(config.seed, f"sample/{label}/{k}")
        noise = rng.standard_normal((count, model.data_dim)).astype(np.float32)
        step_rng = stream(config.seed, f"sample-step/{label}/{k}")
        if mask is None:
            samples, _ = sample_chain(model, noise, schedule, mode=config.sampler,
                                      rng=step_rng if config.sampler == "ddpm" else None)
        else:
            samples, _, stats = run_masked_chain(
                model, noise, mask, schedule, mode=config.sampler,
                rng=step_rng if config.sampler == "ddpm" else None)
        _write_samples(out, label, k, samples, model.spec.mode)
    if stats is not None:
        stats.write_csv(out / "stats.csv", cost_model=block_macs(model))
    meta = {"config_hash": config.config_hash, "seed": config.seed, "seeds": seeds,
            "count": count, "label": label, "data_dim": model.data_dim,
            "mask": str(mask_path) if mask_path else None}
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return out


# -- evaluation ---------------------------------------------------------------------


def cmd_evaluate(config: RunConfig, model_dir=None, mask_path=None,
                 baseline_a=None, baseline_b=None, masked=None, out_path=None,
                 timing_repetitions: int = 10, force: bool = False) -> Path:
    model, schedule, _ = load_teacher(config, model_dir, force)
    mask = MaskMatrix.load(mask_path) if mask_path else all_ones_mask(
        schedule.timesteps, model.block_ids)
    if mask_path:
        _check_hash(f"mask {mask_path}", mask.metadata.get("config_hash"),
                    config.config_hash, force)
    base_a = load_samples(baseline_a)
    base_b = load_samples(baseline_b) if baseline_b else None
    masked_samples = load_samples(masked) if masked else None

    cost = block_macs(model)
    masked_macs, speedup = mask_cost(mask, cost)
    # repetitions <= 0 skips timing entirely, keeping the summary
    # byte-reproducible across runs
    timing = (wall_clock(model, mask, schedule, seed=config.seed,
                         repetitions=timing_repetitions, mode=config.sampler)
              if timing_repetitions > 0 else {})
    summary = {
        "config_hash": config.config_hash,
        "seed": config.seed,
        "baseline_macs": cost.baseline_total(mask.num_steps),
        "masked_macs": masked_macs,
        "speedup_macs": speedup,
        "speedup_wallclock": timing.get("speedup_wallclock"),
        "near_binary_fraction": near_binary_fraction(mask.scores),
        "mask_zeros": mask.zeros(),
        "rectified": mask.rectified,
    }
    quality = QualityReport()
    if masked_samples is not None:
        quality.mmd_masked_vs_baseline = mmd(masked_samples, base_a)
        summary["mmd"] = quality.mmd_masked_vs_baseline
    if base_b is not None:
        quality.mmd_baseline_pair = mmd(base_a, base_b)
        quality.mmd_noise_floor = mmd_permutation_threshold(
            base_a, base_b, seed=config.seed)
        summary["mmd_baseline_pair"] = quality.mmd_baseline_pair
        summary["mmd_noise_floor"] = quality.mmd_noise_floor

    # per-step end-feature distortion on a shared probe batch
    probe = stream(config.seed, "distortion-probe").standard_normal(
        (64, model.data_dim)).astype(np.float32)
    _, reference = sample_chain(model, probe, schedule, mode="ddim")
    _, masked_record, _ = run_masked_chain(model, probe, mask, schedule, mode="ddim")
    per_step = feature_distortion(masked_record.end_features, reference.end_features)
    quality.distortion_per_step = per_step[::-1].copy()  # processing -> schedule order
    quality.validate()
    summary["distortion_mean"] = float(quality.distortion_per_step.mean())
    summary["distortion_max"] = float(quality.distortion_per_step.max())

    out = Path(out_path) if out_path else config.output_dir / "evaluation" / "summary.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    quality.write_distortion_csv(out.with_name("distortion_per_timestep.csv"))
    out.write_text(json.dumps(summary, indent=2, sort_keys=True))
    return out


def cmd_report(mask_path, stats_path=None, out_dir=None) -> dict[str, Path]:
    mask = MaskMatrix.load(mask_path)
    stats = None
    if stats_path:
        rows = np.loadtxt(stats_path, delimiter=",", skiprows=1, dtype=np.float64)
        steps = int(rows[:, 0].max()) + 1
        blocks = int(rows[:, 1].max()) + 1
        computed = np.zeros((steps, blocks), dtype=bool)
        for t, b, done, _ in rows:
            computed[int(t), int(b)] = bool(done)
        stats = ExecutionStats(computed=computed)
    out = Path(out_dir) if out_dir else Path(mask_path).parent / "report"
    return mask_report(mask, stats, out)


# -- ablation harness ------------------------------------------------------------------

GRID_FACTORS = {
    "sampling-mode": [{"sampling_mode": "continuous"},
                      {"sampling_mode": "bernoulli_st"},
                      {"sampling_mode": "gumbel_softmax"}],
    "rectify": [{"rectify": True}, {"rectify": False}],
    "loss-scaling": [{"loss_scaling": True}, {"loss_scaling": False}],
    "bimodal": [{"bimodal": True}, {"bimodal": False}],
}

# The classic four-row toggle table: full method, then each refinement
# disabled in turn.
TOGGLE_ROWS = [
    {"rectify": True, "loss_scaling": True, "bimodal": True},
    {"rectify": False, "loss_scaling": True, "bimodal": True},
    {"rectify": True, "loss_scaling": False, "bimodal": True},
    {"rectify": True, "loss_scaling": True, "bimodal": False},
]


def parse_grid(spec: str) -> list[dict]:
    """Expand a grid spec like ``sampling-mode`` or ``sampling-mode x rectify``
    (also the preset ``toggles``) into a list of cell settings."""
    names = [n.strip() for n in spec.replace("×", "x").split("x") if n.strip()]
    if names == ["toggles"]:
        return [dict(row) for row in TOGGLE_ROWS]
    levels = []
    for name in names:
        if name not in GRID_FACTORS:
            raise PipelineError(f"unknown grid factor {name!r}; choose from "
                                f"{sorted(GRID_FACTORS)} or 'toggles'")
        levels.append(GRID_FACTORS[name])
    cells = []
    for combo in itertools.product(*levels):
        cell: dict = {}
        for setting in combo:
            cell.update(setting)
        cells.append(cell)
    return cells


def _cell_name(cell: dict) -> str:
    parts = []
    for key in sorted(cell):
        value = cell[key]
        if isinstance(value, bool):
            parts.append(f"{key}={'on' if value else 'off'}")
        else:
            parts.append(f"{key}={value}")
    return ";".join(parts)


def _run_ablation_cell(args: tuple) -> dict:
    raw_config, model_dir, cell, cell_dir, eval_count = args
    config = RunConfig.from_dict(raw_config)
    cell_dir = Path(cell_dir)
    cell_dir.mkdir(parents=True, exist_ok=True)
    overrides = {}
    if "sampling_mode" in cell:
        overrides["sampling_mode"] = cell["sampling_mode"]
    if not cell.get("loss_scaling", True):
        overrides["loss_scaling"] = False
    if not cell.get("bimodal", True):
        overrides["lambda2"] = 0.0
    mask_path = cmd_train_mask(config, model_dir=model_dir,
                               out_path=cell_dir / "mask.json", **overrides)
    if cell.get("rectify", True):
        mask_path, _ = cmd_rectify(config, mask_path, out_path=cell_dir / "mask_rectified.json",
                                   model_dir=model_dir)
    sample_dir = cmd_sample(config, model_dir=model_dir, mask_path=mask_path,
                            seeds=1, count=eval_count, label="ablation-eval",
                            out_dir=cell_dir / "samples")
    model, schedule, _ = load_teacher(config, model_dir)
    mask = MaskMatrix.load(mask_path)
    _, speedup = mask_cost(mask, block_macs(model))
    return {"cell": _cell_name(cell), **cell,
            "speedup_macs": speedup,
            "near_binary_fraction": near_binary_fraction(mask.scores),
            "mask_zeros": mask.zeros(),
            "sample_dir": str(sample_dir)}


def run_ablation(config: RunConfig, grid_spec: str, model_dir=None, out_dir=None,
                 eval_count: int = 512, workers: int | None = None,
                 force: bool = False) -> Path:
    """Run every grid cell end to end and emit the comparison table.

    All cells share the teacher, the config seed, and the baseline sample
    sets, so rows differ only in the ablated factors. Cells fan out to
    independent worker processes.
    """
    model_dir = Path(model_dir) if model_dir else config.output_dir / "teacher"
    load_teacher(config, model_dir, force)  # fail fast on hash mismatch
    out = Path(out_dir) if out_dir else config.output_dir / "ablation"
    out.mkdir(parents=True, exist_ok=True)
    cells = parse_grid(grid_spec)

    base_a = cmd_sample(config, model_dir=model_dir, seeds=1, count=eval_count,
                        label="ablation-baseline-a", out_dir=out / "baseline_a")
    base_b = cmd_sample(config, model_dir=model_dir, seeds=1, count=eval_count,
                        label="ablation-baseline-b", out_dir=out / "baseline_b")
    baseline_a = load_samples(base_a)
    baseline_b = load_samples(base_b)
    noise_floor = mmd_permutation_threshold(baseline_a, baseline_b, seed=config.seed)

    jobs = [(config.raw, str(model_dir), cell, str(out / f"cell_{i:02d}"), eval_count)
            for i, cell in enumerate(cells)]
    if workers is None:
        workers = min(len(jobs), 4)
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_ablation_cell, jobs))
    else:
        rows = [_run_ablation_cell(job) for job in jobs]
    for row in rows:
        row["mmd"] = mmd(load_samples(row.pop("sample_dir")), baseline_a)
        row["mmd_noise_floor"] = noise_floor

    table_path = out / "table.csv"
    columns = ["cell", "speedup_macs", "mmd", "mmd_noise_floor",
               "near_binary_fraction", "mask_zeros"]
    with table_path.open("w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return table_path
