"""``progsr`` command line.

Exit codes: 0 success, 1 configuration or argument error, 2 runtime abort.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


class _ConfigProblem(Exception):
    pass


def _config(fn, *args, **kwargs):
    """Run a config-building step, mapping its failures to exit code 1."""
    try:
        return fn(*args, **kwargs)
    except (ValueError, TypeError, KeyError) as exc:
        raise _ConfigProblem(str(exc)) from exc


def _target(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"target must look like WxH, got {text!r}") from None
    return h, w


# -- commands ----------------------------------------------------------------


def cmd_costmodel(args) -> int:
    from .convkit import ConvGeometry, format_cost_table

    geo = _config(ConvGeometry, d_f=args.df, d_k=args.k, m=args.m, n=args.n, stride=args.stride, padding=args.pad)
    print(format_cost_table(geo))
    return EXIT_OK


def cmd_train_progan(args) -> int:
    from .datasets import ingest_dataset
    from .pipeline import load_config
    from .progan import train_progan

    cfg = _config(load_config, args.config)
    progan = cfg.progan
    data = ingest_dataset(cfg.dataset_dir, 4 * 2**progan.max_stage)
    res = train_progan(progan, data, args.out)
    for t in res.timings:
        print(f"stage {t.stage} ({t.resolution}x{t.resolution}, {t.conv_mode}): {t.seconds:.3f}s")
    return EXIT_OK


def cmd_train_srgan(args) -> int:
    from .datasets import ingest_dataset
    from .pipeline import load_config
    from .srgan import train_srgan

    cfg = _config(load_config, args.config)
    hr_res = 16 * 2**cfg.stop_stage
    data = ingest_dataset(cfg.dataset_dir, hr_res)
    res = train_srgan(cfg.srgan, data.pyramid[hr_res], args.out)
    print(f"wrote {res.checkpoint} ({len(res.losses)} steps, hr {hr_res}x{hr_res})")
    return EXIT_OK


def cmd_upsample(args) -> int:
    from .checkpoint import load_checkpoint
    from .imageio import list_pngs, load_png, save_png
    from .srgan import restore_srgan, upscale

    g, _, cfg = restore_srgan(load_checkpoint(args.checkpoint))
    paths = list_pngs(args.input)
    if not paths:
        raise _ConfigProblem(f"no PNG images in {args.input}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for p in paths:
        lr = (load_png(p) * 2.0 - 1.0)[None].astype(np.dtype(cfg.dtype))
        save_png(out / p.name, upscale(g, lr)[0])
    print(f"upsampled {len(paths)} images into {out}")
    return EXIT_OK


def cmd_resample_bench(args) -> int:
    from .resample import KINDS, ResampleKernel, bench_resample, write_timing_csv

    kernels = KINDS if args.kernels == "all" else tuple(k.strip() for k in args.kernels.split(","))
    for k in kernels:
        _config(ResampleKernel.of, k)
    if args.repeats < 3:
        raise _ConfigProblem("--repeats must be >= 3")
    rows = bench_resample(args.input_dir, args.target, kernels, args.repeats)
    write_timing_csv(rows, args.out)
    for r in rows:
        print(f"{r.kernel:10s} {r.seconds_per_image:.6f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .metrics import EvalConfig, evaluate, format_table, write_report_csv

    metrics = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
    unknown = set(metrics) - {"swd", "msssim", "is"}
    if unknown:
        raise _ConfigProblem(f"unknown metrics: {sorted(unknown)}")
    report = evaluate(args.real_dir, args.fake_dir, EvalConfig(metrics=metrics, seed=args.seed))
    write_report_csv(report, args.out)
    print(format_table({"fake": report}))
    return EXIT_OK


def cmd_pipeline(args) -> int:
    from .pipeline import load_config, run_pipeline

    cfg = _config(load_config, args.config)
    res = run_pipeline(cfg, resume=args.resume)
    print((res.output_dir / "report.txt").read_text(), end="")
    print(f"final samples: {res.final_resolution}x{res.final_resolution} in {res.output_dir}")
    return EXIT_OK


def cmd_synth_data(args) -> int:
    from .datasets import SyntheticDatasetSpec, synth_dataset

    spec = _config(SyntheticDatasetSpec, args.count, args.resolution, args.kind, args.seed)
    out = synth_dataset(spec, args.out)
    print(f"wrote {spec.count} {spec.kind} images at {spec.resolution}x{spec.resolution} to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="progsr", description="Progressive GAN + 4x SR toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("costmodel", help="multiplication counts for one convolution layer")
    s.add_argument("--m", type=int, required=True, help="input channels")
    s.add_argument("--n", type=int, required=True, help="output channels")
    s.add_argument("--k", type=int, required=True, help="kernel extent")
    s.add_argument("--df", type=int, required=True, help="input extent")
    s.add_argument("--stride", type=int, default=1)
    s.add_argument("--pad", type=int, default=0)
    s.set_defaults(func=cmd_costmodel)

    s = sub.add_parser("train-progan", help="progressive GAN training")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_progan)

    s = sub.add_parser("train-srgan", help="4x super-resolution training")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_srgan)

    s = sub.add_parser("upsample", help="apply a trained SR checkpoint to a PNG directory")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_upsample)

    s = sub.add_parser("resample-bench", help="time the resampling kernels")
    s.add_argument("--input-dir", required=True)
    s.add_argument("--target", type=_target, required=True, help="WxH")
    s.add_argument("--kernels", default="all")
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_resample_bench)

    s = sub.add_parser("evaluate", help="SWD / MS-SSIM / inception score report")
    s.add_argument("--real-dir", required=True)
    s.add_argument("--fake-dir", required=True)
    s.add_argument("--metrics", default="swd,msssim,is")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("pipeline", help="progressive GAN, then SR, then evaluation")
    s.add_argument("--config", required=True)
    s.add_argument("--resume", action="store_true")
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("synth-data", help="write a procedural PNG dataset")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--resolution", type=int, required=True)
    s.add_argument("--kind", default="smooth-blob", choices=("smooth-blob", "gradient-stripe"))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except _ConfigProblem as exc:
        print(f"progsr {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001  -- any failure past configuration is a runtime abort
        print(f"progsr {args.command}: aborted: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
