import csv

import numpy as np
import pytest

from progsr import pipeline as pl
from progsr.checkpoint import FORMAT_VERSION, CheckpointError, GrowthState, load_checkpoint, save_checkpoint
from progsr.datasets import SyntheticDatasetSpec, ingest_dataset, synth_dataset
from progsr.imageio import list_pngs, load_png, save_png
from progsr.pipeline import (
    ConfigError,
    PipelineConfig,
    config_from_mapping,
    load_config,
    parse_flat_config,
    read_manifest,
    run_pipeline,
)
from progsr.progan import TrainConfig

# -- checkpoint ----------------------------------------------------------


def params(rng):
    return {"a.weight": rng.standard_normal((3, 2, 3, 3)).astype(np.float32),
            "a.bias": np.array([1e-30, -0.0, np.inf], np.float32),
            "scalar": np.array(2.5, np.float32)}


def test_checkpoint_round_trip_is_bitwise(tmp_path, rng):
    p = params(rng)
    gs = GrowthState(stage=2, alpha=0.375, epochs_in_stage=3, phase="fading", images_seen=99)
    save_checkpoint(tmp_path / "c.ckpt", p, gs, {"kind": "progan", "note": "x = y"})
    ck = load_checkpoint(tmp_path / "c.ckpt")
    assert list(ck.params) == list(p)
    assert all(ck.params[k].tobytes() == p[k].tobytes() and ck.params[k].shape == p[k].shape for k in p)
    assert ck.growth_state == gs
    assert ck.meta == {"kind": "progan", "note": "x = y"}


def test_checkpoint_truncation_diagnostic(tmp_path, rng):
    path = save_checkpoint(tmp_path / "c.ckpt", params(rng))
    raw = path.read_bytes()
    path.write_bytes(raw[:-1])
    with pytest.raises(CheckpointError, match="payload length.*offset"):
        load_checkpoint(path)
    path.write_bytes(raw[:10])
    with pytest.raises(CheckpointError, match="offset"):
        load_checkpoint(path)


def test_checkpoint_bad_magic_and_future_version(tmp_path, rng):
    path = save_checkpoint(tmp_path / "c.ckpt", params(rng))
    raw = bytearray(path.read_bytes())
    path.write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)
    raw[4:8] = (FORMAT_VERSION + 1).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="upgrade"):
        load_checkpoint(path)


def test_payload_is_little_endian_float32(tmp_path):
    path = save_checkpoint(tmp_path / "c.ckpt", {"w": np.array([1.0, 2.0], np.float32)})
    assert path.read_bytes()[-8:] == np.array([1.0, 2.0], "<f4").tobytes()


# -- datasets ------------------------------------------------------------


def test_synth_dataset_deterministic(tmp_path):
    spec = SyntheticDatasetSpec(3, 16, seed=5)
    a, b = synth_dataset(spec, tmp_path / "a"), synth_dataset(spec, tmp_path / "b")
    fa, fb = list_pngs(a), list_pngs(b)
    assert len(fa) == 3
    assert [f.read_bytes() for f in fa] == [f.read_bytes() for f in fb]


def test_synth_dataset_empty_and_invalid(tmp_path):
    out = synth_dataset(SyntheticDatasetSpec(0, 16), tmp_path / "e")
    assert out.is_dir() and list_pngs(out) == []
    with pytest.raises(ValueError):
        SyntheticDatasetSpec(1, 24)
    with pytest.raises(ValueError):
        SyntheticDatasetSpec(1, 8)


def test_ingest_pyramid(tmp_path):
    d = synth_dataset(SyntheticDatasetSpec(10, 64, kind="gradient-stripe"), tmp_path)
    ds = ingest_dataset(d, 64)
    assert sorted(ds.pyramid) == [4, 8, 16, 32, 64]
    assert all(v.shape == (10, 3, r, r) for r, v in ds.pyramid.items())
    again = ingest_dataset(d, 64)
    assert all(ds.pyramid[r].tobytes() == again.pyramid[r].tobytes() for r in ds.pyramid)


def test_ingest_constant_white(tmp_path):
    for i in range(2):
        save_png(tmp_path / f"{i}.png", np.ones((3, 16, 16)), value_range=(0, 1))
    ds = ingest_dataset(tmp_path, 16)
    for level in ds.pyramid.values():
        np.testing.assert_allclose(level, 1.0, atol=1e-6)


def test_ingest_errors(tmp_path):
    with pytest.raises(ValueError, match="no PNG"):
        ingest_dataset(tmp_path, 16)
    save_png(tmp_path / "a.png", np.zeros((3, 16, 16)), value_range=(0, 1))
    save_png(tmp_path / "b.png", np.zeros((3, 16, 16)), value_range=(0, 1))
    save_png(tmp_path / "c.png", np.zeros((3, 32, 32)), value_range=(0, 1))
    with pytest.raises(ValueError, match="c.png"):
        ingest_dataset(tmp_path, 16)
    (tmp_path / "c.png").unlink()
    with pytest.raises(ValueError):
        ingest_dataset(tmp_path, 32)


def test_png_alpha_dropped(tmp_path):
    from PIL import Image

    Image.fromarray(np.full((4, 4, 4), 200, np.uint8), "RGBA").save(tmp_path / "x.png")
    assert load_png(tmp_path / "x.png").shape == (3, 4, 4)


# -- config --------------------------------------------------------------


def test_parse_flat_config():
    text = "# header\npipeline.seed = 3  # trailing\n\nprogan.conv_mode = vanilla\n"
    assert parse_flat_config(text) == {"pipeline": {"seed": "3"}, "progan": {"conv_mode": "vanilla"}}


@pytest.mark.parametrize("text", ["pipeline.seed 3", "seed = 3", "a.b = 1\na.b = 2", ".x = 1"])
def test_parse_flat_config_errors(text):
    with pytest.raises(ConfigError):
        parse_flat_config(text)


def test_config_from_mapping(tmp_path):
    cfg = config_from_mapping({
        "pipeline": {"dataset_dir": "data", "seed": "7", "stop_stage": "1", "sr_enabled": "no"},
        "progan": {"conv_mode": "vanilla", "fade_fraction": "0.25"},
        "eval": {"metrics": "swd, msssim"},
    }, tmp_path)
    assert cfg.dataset_dir == tmp_path / "data"
    assert cfg.progan.seed == cfg.srgan.seed == cfg.eval.seed == 7
    assert cfg.progan.max_stage == 1 and cfg.progan.conv_mode == "vanilla"
    assert cfg.eval.metrics == ("swd", "msssim")
    assert cfg.final_resolution == 8


@pytest.mark.parametrize("sections", [
    {"pipeline": {}},
    {"pipeline": {"dataset_dir": "d"}, "extra": {}},
    {"pipeline": {"dataset_dir": "d", "colour": "red"}},
    {"pipeline": {"dataset_dir": "d"}, "progan": {"epochs": "3"}},
    {"pipeline": {"dataset_dir": "d"}, "progan": {"batch_size": "many"}},
    {"pipeline": {"dataset_dir": "d"}, "progan": {"conv_mode": "fft"}},
    {"pipeline": {"dataset_dir": "d", "stop_stage": "3"}, "progan": {"max_stage": "2"}},
])
def test_config_errors(sections):
    with pytest.raises(ConfigError):
        config_from_mapping(sections)


def test_final_resolution_invariant():
    for stop in range(4):
        for sr in (True, False):
            cfg = PipelineConfig("d", stop_stage=stop, sr_enabled=sr, progan=TrainConfig(max_stage=3))
            assert cfg.final_resolution == 4 * 2**stop * (4 if sr else 1)


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.cfg")


# -- run -----------------------------------------------------------------

TOY = """\
pipeline.dataset_dir = data
pipeline.output_dir = out
pipeline.stop_stage = {stop}
pipeline.sr_enabled = {sr}
pipeline.n_samples = 8
progan.epochs_per_stage = 1
progan.batch_size = 8
progan.base_channels = 16
progan.latent_dim = 16
srgan.pretrain_steps = 2
srgan.train_steps = 1
srgan.channels = 8
srgan.critic_channels = 4
srgan.residual_blocks = 1
eval.metrics = swd, msssim
eval.max_patches = 128
eval.n_projections = 32
"""


def toy(tmp_path, stop=1, sr="true", res=32):
    synth_dataset(SyntheticDatasetSpec(16, res, seed=1), tmp_path / "data")
    path = tmp_path / "p.cfg"
    path.write_text(TOY.format(stop=stop, sr=sr))
    return load_config(path)


def test_pipeline_end_to_end(tmp_path):
    res = run_pipeline(toy(tmp_path))
    out = tmp_path / "out"
    assert res.final_resolution == 32
    assert load_png(out / "samples_sr" / "sample_0000.png").shape == (3, 32, 32)
    assert load_png(out / "samples_progan" / "sample_0000.png").shape == (3, 8, 8)
    assert read_manifest(out) == ["progan.stage0", "progan.stage1", "srgan", "report"]
    rows = list(csv.reader(open(out / "report.csv")))
    assert rows[0] == ["metric", "Progressive GAN", "SRGAN"]
    assert [r[0] for r in rows[1:]] == ["Sliced Wasserstein Distance", "MSSSIM", "Inception Score"]
    timing = list(csv.reader(open(out / "timing.csv")))
    assert timing[0] == ["stage", "resolution", "conv_mode", "seconds", "cumulative_seconds"]
    assert [r[0] for r in timing[1:]] == ["0", "1", "sr"]
    cum = [float(r[4]) for r in timing[1:]]
    assert cum == sorted(cum)
    assert "Sliced Wasserstein Distance" in (out / "report.txt").read_text()


def test_pipeline_without_sr(tmp_path):
    res = run_pipeline(toy(tmp_path, stop=1, sr="false", res=16))
    assert res.sr_samples is None and res.final_resolution == 8
    assert not (tmp_path / "out" / "samples_sr").exists()
    assert list(csv.reader(open(tmp_path / "out" / "report.csv")))[0] == ["metric", "Progressive GAN"]


def test_pipeline_resume_matches_fresh(tmp_path):
    cfg = toy(tmp_path)
    fresh = run_pipeline(cfg)
    out = tmp_path / "out"
    # pretend the run stopped after the first stage
    (out / "manifest.txt").write_text("progan.stage0\n")
    resumed = run_pipeline(cfg, resume=True)
    assert resumed.progan_samples.tobytes() == fresh.progan_samples.tobytes()
    assert resumed.sr_samples.tobytes() == fresh.sr_samples.tobytes()
    assert read_manifest(out) == ["progan.stage0", "progan.stage1", "srgan", "report"]


def test_pipeline_failure_keeps_completed_stages(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("sr failed")

    monkeypatch.setattr(pl, "train_srgan", boom)
    with pytest.raises(RuntimeError):
        run_pipeline(toy(tmp_path))
    out = tmp_path / "out"
    assert (out / "stage0.ckpt").exists() and (out / "stage1.ckpt").exists()
    assert read_manifest(out) == ["progan.stage0", "progan.stage1"]


def test_pipeline_dataset_too_small(tmp_path):
    with pytest.raises(ValueError):
        run_pipeline(toy(tmp_path, stop=1, res=16))
