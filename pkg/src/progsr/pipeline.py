"""Stop-early-and-upsample pipeline: progressive GAN up to ``stop_stage``,
then a 4x super-resolution stage, then side-by-side evaluation.

Configuration is a flat text file of ``section.key = value`` lines with
``#`` comments. Sections are ``pipeline``, ``progan``, ``srgan`` and
``eval``; keys map onto the fields of the matching config dataclass.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint  # noqa: F401  (re-exported)
from .datasets import SyntheticDatasetSpec, ingest_dataset, synth_dataset  # noqa: F401
from .imageio import save_png
from .metrics import ROW_LABELS, EvalConfig, MetricReport, evaluate_arrays, format_table
from .progan import (
    ProganResult,
    TrainConfig,
    fixed_latents,
    generate,
    restore_progan,
    save_progan,
    train_progan,
)
from .srgan import SrConfig, restore_srgan, train_srgan, upscale

log = logging.getLogger(__name__)

PIPELINE_TIMING_HEADER = ("stage", "resolution", "conv_mode", "seconds", "cumulative_seconds")
MANIFEST = "manifest.txt"


class ConfigError(ValueError):
    """Invalid or unreadable configuration (CLI exit code 1)."""


# -- config ------------------------------------------------------------------


def parse_flat_config(text: str) -> dict[str, dict[str, str]]:
    """``section.key = value`` lines into ``{section: {key: value}}``.

    Blank lines and ``#`` comments (whole-line or trailing) are ignored.
    Duplicate keys are an error.
    """
    out: dict[str, dict[str, str]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"line {lineno}: key {key!r} has no section prefix")
        section, name = key.split(".", 1)
        if not section or not name:
            raise ConfigError(f"line {lineno}: malformed key {key!r}")
        bucket = out.setdefault(section, {})
        if name in bucket:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        bucket[name] = value
    return out


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(value: str, annotation: str, key: str):
    t = annotation.replace(" ", "")
    if value.lower() in ("none", "") and "None" in t:
        return None
    try:
        if t.startswith("bool"):
            v = value.lower()
            if v in _TRUE:
                return True
            if v in _FALSE:
                return False
            raise ValueError(value)
        if t.startswith("int"):
            return int(value)
        if t.startswith("float"):
            return float(value)
        if t.startswith("tuple"):
            return tuple(v.strip() for v in value.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot read {value!r} as {t}") from exc
    return value


def _build(cls, section: str, values: dict[str, str], **defaults):
    fields = {f.name: str(f.type) for f in dataclasses.fields(cls) if f.init}
    kw = dict(defaults)
    for name, value in values.items():
        if name not in fields or name == "classifier":
            raise ConfigError(f"unknown key {section}.{name}")
        kw[name] = _coerce(value, fields[name], f"{section}.{name}")
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


@dataclass
class PipelineConfig:
    dataset_dir: Path
    stop_stage: int = 2
    sr_enabled: bool = True
    progan: TrainConfig = field(default_factory=TrainConfig)
    srgan: SrConfig = field(default_factory=SrConfig)
    output_dir: Path = Path("pipeline_out")
    seed: int = 0
    n_samples: int = 64
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.dataset_dir = Path(self.dataset_dir)
        self.output_dir = Path(self.output_dir)
        if self.stop_stage < 0:
            raise ConfigError("stop_stage must be >= 0")
        if self.stop_stage > self.progan.max_stage:
            raise ConfigError(f"stop_stage {self.stop_stage} exceeds progan.max_stage {self.progan.max_stage}")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be positive")

    @property
    def progan_resolution(self) -> int:
        return 4 * 2**self.stop_stage

    @property
    def final_resolution(self) -> int:
        return self.progan_resolution * (4 if self.sr_enabled else 1)


_PIPELINE_KEYS = {"dataset_dir", "stop_stage", "sr_enabled", "output_dir", "seed", "n_samples"}


def config_from_mapping(sections: dict[str, dict[str, str]], base_dir=None) -> PipelineConfig:
    """Build a PipelineConfig; relative paths resolve against ``base_dir``.

    ``pipeline.seed`` seeds every component whose own seed is not given.
    """
    unknown = set(sections) - {"pipeline", "progan", "srgan", "eval"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    top = dict(sections.get("pipeline", {}))
    bad = set(top) - _PIPELINE_KEYS
    if bad:
        raise ConfigError(f"unknown keys: {sorted('pipeline.' + k for k in bad)}")
    if "dataset_dir" not in top:
        raise ConfigError("pipeline.dataset_dir is required")
    base = Path(base_dir) if base_dir is not None else Path.cwd()
    seed = _coerce(top.get("seed", "0"), "int", "pipeline.seed")
    stop = _coerce(top.get("stop_stage", "2"), "int", "pipeline.stop_stage")
    progan = _build(TrainConfig, "progan", sections.get("progan", {}), seed=seed, max_stage=stop)
    srgan = _build(SrConfig, "srgan", sections.get("srgan", {}), seed=seed)
    ev = _build(EvalConfig, "eval", sections.get("eval", {}), seed=seed)
    return PipelineConfig(
        dataset_dir=base / top["dataset_dir"],
        stop_stage=stop,
        sr_enabled=_coerce(top.get("sr_enabled", "true"), "bool", "pipeline.sr_enabled"),
        progan=progan,
        srgan=srgan,
        output_dir=base / top.get("output_dir", "pipeline_out"),
        seed=seed,
        n_samples=_coerce(top.get("n_samples", "64"), "int", "pipeline.n_samples"),
        eval=ev,
    )


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_mapping(parse_flat_config(text), path.parent)


def load_section(path, section: str, cls):
    """One section of a flat config file as ``cls`` (used by the single-model commands)."""
    path = Path(path)
    try:
        sections = parse_flat_config(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return _build(cls, section, sections.get(section, {})), sections


# -- manifest ----------------------------------------------------------------


def read_manifest(out_dir) -> list[str]:
    path = Path(out_dir) / MANIFEST
    if not path.exists():
        return []
    return [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]


def _mark_done(out_dir: Path, entry: str) -> None:
    with (out_dir / MANIFEST).open("a") as fh:
        fh.write(entry + "\n")


# -- run ---------------------------------------------------------------------


@dataclass
class PipelineResult:
    output_dir: Path
    progan_samples: np.ndarray
    sr_samples: np.ndarray | None
    reports: dict[str, MetricReport]
    timings: list[tuple]
    final_resolution: int


def _write_samples(directory: Path, images: np.ndarray) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for old in directory.glob("*.png"):
        old.unlink()
    for i, img in enumerate(images):
        save_png(directory / f"sample_{i:04d}.png", img)


def _read_timing(path: Path) -> list[tuple]:
    if not path.exists():
        return []
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return [(r[0], int(r[1]), r[2], float(r[3])) for r in rows]


def _write_timing(path: Path, rows: list[tuple]) -> None:
    total = 0.0
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PIPELINE_TIMING_HEADER)
        for stage, res, mode, seconds in rows:
            total += seconds
            w.writerow([stage, res, mode, f"{seconds:.6f}", f"{total:.6f}"])


def write_pipeline_report(path, reports: dict[str, MetricReport]) -> None:
    """Table-shaped CSV: one row per metric, one column per pipeline output."""
    names = list(reports)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric"] + names)
        for key, label in ROW_LABELS.items():
            row = [label]
            for rep in reports.values():
                value = {"swd": rep.swd, "msssim": rep.ms_ssim, "is": rep.inception_mean}[key]
                row.append("" if value is None else f"{value:.6g}")
            w.writerow(row)


def run_pipeline(config: PipelineConfig, resume: bool = False) -> PipelineResult:
    """Train, upsample, evaluate. Completed steps are listed in ``manifest.txt``;
    with ``resume`` they are loaded from disk instead of recomputed."""
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    done = read_manifest(out) if resume else []
    if not resume:
        for name in (MANIFEST, "timing.csv"):
            (out / name).unlink(missing_ok=True)

    dataset = ingest_dataset(config.dataset_dir, config.final_resolution)
    pcfg = dataclasses.replace(config.progan, max_stage=config.stop_stage)
    timings = [r for r in _read_timing(out / "timing.csv") if f"progan.stage{r[0]}" in done or
               (r[0] == "sr" and "srgan" in done)]

    # (1) progressive stages
    completed = [int(e.split("stage")[1]) for e in done if e.startswith("progan.stage")]
    resume_from = None
    if completed:
        last = max(completed)
        ckpt = load_checkpoint(out / f"stage{last}.ckpt")
        resume_from = restore_progan(ckpt, pcfg)
        log.info("resuming after completed stage %d", last)

    def stage_done(stage: int, res: ProganResult) -> None:
        save_progan(out / f"stage{stage}.ckpt", res.generator, res.discriminator, res.state, pcfg)
        t = res.timings[-1]
        timings.append((str(stage), t.resolution, t.conv_mode, t.seconds))
        _write_timing(out / "timing.csv", timings)
        _mark_done(out, f"progan.stage{stage}")

    if resume_from is None or resume_from[2].stage < config.stop_stage:
        result = train_progan(pcfg, dataset, resume=resume_from, on_stage_done=stage_done)
        generator = result.generator
    else:
        generator = resume_from[0]

    latents = fixed_latents(pcfg, config.n_samples)
    progan_samples = generate(generator, latents)
    _write_samples(out / "samples_progan", progan_samples)

    # (2) super-resolution
    sr_samples = None
    if config.sr_enabled:
        if "srgan" in done:
            sr_gen, _, _ = restore_srgan(load_checkpoint(out / "srgan.ckpt"), config.srgan)
        else:
            hr = dataset.pyramid[config.final_resolution]
            t0 = time.monotonic()
            sr_res = train_srgan(config.srgan, hr, out)
            seconds = time.monotonic() - t0
            sr_gen = sr_res.generator
            timings.append(("sr", config.final_resolution, f"srgan-{config.srgan.conv_mode}", seconds))
            _write_timing(out / "timing.csv", timings)
            _mark_done(out, "srgan")
        sr_samples = upscale(sr_gen, progan_samples.astype(np.dtype(config.srgan.dtype)))
        _write_samples(out / "samples_sr", sr_samples)

    final = (sr_samples if sr_samples is not None else progan_samples).shape[-1]
    if final != config.final_resolution:
        raise RuntimeError(f"pipeline produced {final}x{final}, expected {config.final_resolution}")

    # (3) evaluation
    to_unit = lambda x: np.clip((np.asarray(x, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)
    reports = {
        "Progressive GAN": evaluate_arrays(
            dataset.unit_range(config.progan_resolution), to_unit(progan_samples), config.eval,
            {"column": "progan", "resolution": str(config.progan_resolution)},
        )
    }
    if sr_samples is not None:
        reports["SRGAN"] = evaluate_arrays(
            dataset.unit_range(config.final_resolution), to_unit(sr_samples), config.eval,
            {"column": "srgan", "resolution": str(config.final_resolution)},
        )
    write_pipeline_report(out / "report.csv", reports)
    (out / "report.txt").write_text(format_table(reports) + "\n")
    if "report" not in done:
        _mark_done(out, "report")
    return PipelineResult(out, progan_samples, sr_samples, reports, timings, final)
