"""``koalanet`` command line: degrade, train, infer, eval, kernel.

Exit codes: 0 success, 2 I/O failure, 3 usage or validation error,
4 numeric failure (training diverged).
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import formats
from .degrade import (SUPPORTED_SCALES, DegradationSpec, InvalidSpecError, compose_kd,
                      generate_dataset, make_bicubic_kernel, make_gaussian_kernel, pad_bicubic)
from .imageio import read_png, write_png
from .inference import super_resolve
from .metrics import (MetricReport, MetricRow, cosine_similarity_map, kernel_l2_shifted,
                      mean_kernel, psnr_y, render_kernel, render_similarity_map, ssim_y)
from .train import TrainingDiverged, load_checkpoint, load_config, run_stage

log = logging.getLogger("koalanet")

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3, 4


class CLIError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _check_scale(s: int) -> None:
    if s not in SUPPORTED_SCALES:
        raise CLIError(EXIT_USAGE, f"unsupported scale {s}; choose from {SUPPORTED_SCALES}")


def _spec_from_args(args) -> Optional[DegradationSpec]:
    given = [args.sigma1, args.sigma2, args.theta]
    if all(v is None for v in given):
        return None
    if any(v is None for v in given):
        raise CLIError(EXIT_USAGE, "--sigma1, --sigma2 and --theta must be given together")
    spec = DegradationSpec(args.sigma1, args.sigma2, args.theta, getattr(args, "seed", 0) or 0)
    try:
        spec.validate()
    except InvalidSpecError as exc:
        raise CLIError(EXIT_USAGE, f"invalid degradation spec: {exc}") from None
    return spec


# ---------------------------------------------------------------------------


def cmd_degrade(args) -> int:
    _check_scale(args.scale)
    fixed = _spec_from_args(args)
    try:
        rows = generate_dataset(args.hr_dir, args.out_dir, args.scale, args.seed, force=args.force,
                                fixed=fixed, padding=args.pad, workers=args.workers)
    except FileExistsError as exc:
        raise CLIError(EXIT_USAGE, str(exc)) from None
    except (OSError, ValueError) as exc:
        raise CLIError(EXIT_IO, f"cannot generate dataset: {exc}") from None
    log.info("wrote %d LR images to %s", len(rows), args.out_dir)
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = dict(stage=args.stage, out_dir=args.out_dir, hr_dir=args.hr_dir,
                     stop_at=args.stop_at)
    try:
        cfg = load_config(args.config, **overrides)
    except OSError as exc:
        raise CLIError(EXIT_IO, f"cannot read config: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise CLIError(EXIT_USAGE, f"bad config: {exc}") from None
    if cfg.stage == 3 and args.resume is None and (args.init_down is None or args.init_up is None):
        raise CLIError(EXIT_USAGE, "stage 3 needs --init-down and --init-up (or --resume)")
    try:
        result = run_stage(cfg, resume=args.resume, init_down=args.init_down, init_up=args.init_up)
    except TrainingDiverged as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC
    except (OSError, formats.FormatError) as exc:
        raise CLIError(EXIT_IO, str(exc)) from None
    except (KeyError, ValueError) as exc:
        raise CLIError(EXIT_USAGE, str(exc)) from None
    log.info("stage %d checkpoint at iteration %d: %s", cfg.stage, result.iteration,
             result.checkpoint)
    return EXIT_OK


def _load_nets(path, scale: int):
    try:
        ck = load_checkpoint(path)
    except (OSError, formats.FormatError) as exc:
        raise CLIError(EXIT_IO, f"cannot load checkpoint: {exc}") from None
    if not ck.meta["has_up"]:
        raise CLIError(EXIT_USAGE, "checkpoint has no upsampling network")
    if ck.meta["scale"] != scale:
        raise CLIError(EXIT_USAGE, f"checkpoint is x{ck.meta['scale']}, --scale is {scale}")
    up = ck.up()
    down = None
    if up.cfg.use_koala:
        if not ck.meta["has_down"]:
            raise CLIError(EXIT_USAGE, "KOALA checkpoint lacks the downsampling network")
        down = ck.down()
    return down, up


def cmd_infer(args) -> int:
    _check_scale(args.scale)
    down, up = _load_nets(args.ckpt, args.scale)
    try:
        lr = read_png(args.lr)
    except OSError as exc:
        raise CLIError(EXIT_IO, f"cannot read {args.lr}: {exc}") from None
    gt_kernel = None
    if args.gt_kernel:
        try:
            gt_kernel = formats.load_kernel(args.gt_kernel)
        except (OSError, formats.FormatError) as exc:
            raise CLIError(EXIT_IO, f"cannot read kernel: {exc}") from None
    t0 = time.perf_counter()
    res = super_resolve(lr, up, down)
    log.info("super-resolved %s in %.2fs", args.lr, time.perf_counter() - t0)
    try:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        write_png(args.out, res.sr)
        if args.dump_kernels:
            if res.F_d is None:
                raise CLIError(EXIT_USAGE, "--dump-kernels needs a checkpoint with a downsampler")
            d = Path(args.dump_kernels)
            d.mkdir(parents=True, exist_ok=True)
            stem = Path(args.lr).stem
            mk = mean_kernel(res.F_d)
            formats.save_kernel(d / f"{stem}.kernel", mk)
            write_png(d / f"{stem}_kernel.png", _gray3(render_kernel(mk)))
            if gt_kernel is not None:
                sim = cosine_similarity_map(res.F_d, gt_kernel)
                write_png(d / f"{stem}_cosine.png", _gray3(render_similarity_map(sim)))
    except OSError as exc:
        raise CLIError(EXIT_IO, f"cannot write output: {exc}") from None
    return EXIT_OK


def _gray3(img: np.ndarray) -> np.ndarray:
    return np.repeat(img[:, :, None], 3, axis=2)


def _match(a_dir: Path, b_dir: Path, pattern: str) -> list[str]:
    a = {p.name for p in a_dir.glob(pattern)}
    b = {p.name for p in b_dir.glob(pattern)}
    if a != b:
        odd = sorted(a ^ b)
        raise CLIError(EXIT_USAGE, "unmatched files: " + ", ".join(odd))
    if not a:
        raise CLIError(EXIT_USAGE, f"no {pattern} files in {a_dir}")
    return sorted(a)


def cmd_eval(args) -> int:
    _check_scale(args.scale)
    sr_dir, gt_dir = Path(args.sr_dir), Path(args.gt_dir)
    for d in (sr_dir, gt_dir):
        if not d.is_dir():
            raise CLIError(EXIT_IO, f"not a directory: {d}")
    names = _match(sr_dir, gt_dir, "*.png")
    use_k = args.est_kernel_dir is not None or args.gt_kernel_dir is not None
    if use_k and (args.est_kernel_dir is None or args.gt_kernel_dir is None):
        raise CLIError(EXIT_USAGE, "--est-kernel-dir and --gt-kernel-dir go together")
    if use_k:
        kdirs = Path(args.est_kernel_dir), Path(args.gt_kernel_dir)
        knames = _match(*kdirs, "*.kernel")
        want = sorted(Path(n).stem + ".kernel" for n in names)
        if knames != want:
            raise CLIError(EXIT_USAGE, "kernel files do not match images: "
                           + ", ".join(sorted(set(knames) ^ set(want))))
    report = MetricReport()
    try:
        for name in names:
            t0 = time.perf_counter()
            sr, gt = read_png(sr_dir / name), read_png(gt_dir / name)
            if sr.shape != gt.shape:
                raise CLIError(EXIT_USAGE, f"{name}: size {sr.shape} vs {gt.shape}")
            kl = None
            if use_k:
                kn = Path(name).stem + ".kernel"
                kl = kernel_l2_shifted(formats.load_kernel(kdirs[0] / kn),
                                       formats.load_kernel(kdirs[1] / kn))
            row = MetricRow(name, psnr_y(sr, gt, args.scale), ssim_y(sr, gt, args.scale), kl)
            row.runtime = time.perf_counter() - t0
            report.add(row)
        report.write_csv(args.out)
    except (OSError, formats.FormatError) as exc:
        raise CLIError(EXIT_IO, str(exc)) from None
    return EXIT_OK


def cmd_kernel(args) -> int:
    try:
        if args.make == "bicubic":
            _check_scale(args.scale)
            k = pad_bicubic(make_bicubic_kernel(args.scale)[1]).values
        else:
            spec = _spec_from_args(args)
            if spec is None:
                raise CLIError(EXIT_USAGE, f"--make {args.make} needs --sigma1 --sigma2 --theta")
            if args.make == "gaussian":
                k = make_gaussian_kernel(spec)
            else:
                _check_scale(args.scale)
                k = compose_kd(make_gaussian_kernel(spec), make_bicubic_kernel(args.scale)[1]).values
    except ValueError as exc:
        raise CLIError(EXIT_USAGE, str(exc)) from None
    try:
        formats.save_kernel(args.out, k)
        if args.png:
            write_png(args.png, _gray3(render_kernel(k)))
    except OSError as exc:
        raise CLIError(EXIT_IO, f"cannot write kernel: {exc}") from None
    return EXIT_OK


# ---------------------------------------------------------------------------


def _add_spec_args(p) -> None:
    p.add_argument("--sigma1", type=float)
    p.add_argument("--sigma2", type=float)
    p.add_argument("--theta", type=float, help="radians, in [0, pi/2]")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="koalanet", description=__doc__.splitlines()[0])
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("degrade", help="synthesise an LR dataset from HR PNGs")
    p.add_argument("--hr-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--scale", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_spec_args(p)
    p.add_argument("--pad", choices=("replicate", "zero"), default="replicate")
    p.add_argument("--force", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--resume")
    p.add_argument("--init-down")
    p.add_argument("--init-up")
    p.add_argument("--out-dir")
    p.add_argument("--hr-dir")
    p.add_argument("--stop-at", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="super-resolve one PNG")
    p.add_argument("--lr", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scale", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-kernels")
    p.add_argument("--gt-kernel")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="PSNR/SSIM (and kernel error) report")
    p.add_argument("--sr-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--est-kernel-dir")
    p.add_argument("--gt-kernel-dir")
    p.add_argument("--scale", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("kernel", help="write a degradation kernel file")
    p.add_argument("--make", choices=("gaussian", "bicubic", "compose"), required=True)
    _add_spec_args(p)
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--out", required=True)
    p.add_argument("--png")
    p.set_defaults(func=cmd_kernel)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage; usage errors are 3 here
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"koalanet {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
