"""Stop progressive training at 16x16, then upscale 4x with the SR network.

Writes into ./pipeline_demo. Takes a minute or two on a laptop CPU.
Run: python demos/04_stop_early_pipeline.py
"""
# %%
from pathlib import Path

from progsr.datasets import SyntheticDatasetSpec, synth_dataset
from progsr.pipeline import load_config, run_pipeline

root = Path("pipeline_demo")
synth_dataset(SyntheticDatasetSpec(64, 64, seed=0), root / "data")

# %%
# the same flat format the `progsr pipeline --config` command reads
(root / "demo.cfg").write_text("""\
pipeline.dataset_dir = data
pipeline.output_dir = out
pipeline.stop_stage = 2        # 4 -> 8 -> 16, then stop
pipeline.sr_enabled = true     # 16 -> 64 with the SR network
pipeline.n_samples = 32
progan.epochs_per_stage = 4
progan.batch_size = 8
progan.conv_mode = dsep
srgan.pretrain_steps = 150
srgan.train_steps = 30
eval.max_patches = 1024
""")
config = load_config(root / "demo.cfg")
print("final resolution:", config.final_resolution)

# %%
result = run_pipeline(config)
print((result.output_dir / "report.txt").read_text())
print((result.output_dir / "timing.csv").read_text())
