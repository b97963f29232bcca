"""Command-line interface.

Exit codes: 0 success, 1 internal check failure (grad-check or
equiv-check found an error), 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import backend, gradcheck, net as net_mod, viz
from .checkpoint import load_checkpoint
from .config import load_configs
from .errors import KbnetError
from .imgio import load_image, save_image
from .kba import equivalence_sweep
from .metrics import psnr, ssim
from .training import add_gaussian_noise, train


def _cmd_train(args) -> int:
    net_cfg, train_cfg = load_configs(args.config)
    if args.seed is not None:
        import dataclasses

        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    _, history = train(net_cfg, train_cfg, args.out)
    last = history["rows"][-1] if history["rows"] else {}
    print(f"trained {train_cfg.iterations} iterations; metrics: {history['csv_path']}")
    if last.get("eval_psnr"):
        print(f"final eval PSNR {last['eval_psnr']} dB, SSIM {last['eval_ssim']}")
    return 0


def _image_paths(source: Path) -> list[Path]:
    if source.is_dir():
        return sorted(
            p for p in source.iterdir() if p.suffix.lower() in (".png", ".ppm", ".pgm")
        )
    return [source]


def _cmd_denoise(args) -> int:
    from . import net as n

    params, cfg = load_checkpoint(args.ckpt)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in _image_paths(Path(args.input)):
        img = load_image(path)
        padded, rec = n.pad_crop(img[None])
        out, _ = n.forward(padded, params, cfg)
        restored = np.clip(n.unpad(out, rec)[0], 0.0, 1.0)
        save_image(restored, out_dir / path.name)
        print(f"{path.name}: {img.shape[2]}x{img.shape[1]} -> {out_dir / path.name}")
    return 0


def _cmd_eval(args) -> int:
    params, cfg = load_checkpoint(args.ckpt)
    from . import net as n

    paths = _image_paths(Path(args.clean))
    if not paths:
        raise KbnetError(f"no images found in {args.clean}")
    psnrs, ssims = [], []
    for idx, path in enumerate(paths):
        clean = load_image(path)[None]
        noisy = add_gaussian_noise(
            clean, args.sigma, np.random.SeedSequence([args.seed, 3, idx])
        )
        padded, rec = n.pad_crop(noisy)
        out, _ = n.forward(padded, params, cfg)
        denoised = n.unpad(out, rec)
        psnrs.append(psnr(denoised, clean))
        ssims.append(ssim(denoised, clean))
    print(f"mean PSNR {np.mean(psnrs):.4f} dB, mean SSIM {np.mean(ssims):.5f} "
          f"over {len(paths)} images (sigma={args.sigma})")
    return 0


def _cmd_grad_check(args) -> int:
    components = [args.component] if args.component else list(gradcheck.COMPONENTS)
    failed = False
    for comp in components:
        report = gradcheck.grad_check(comp, seed=args.seed)
        worst = max(report.values())
        status = "ok" if worst < args.tol else "FAIL"
        if status == "FAIL":
            failed = True
        print(f"{comp}: max relative error {worst:.3e} [{status}]")
        if args.verbose:
            for name, err in sorted(report.items()):
                print(f"    {name}: {err:.3e}")
    return 1 if failed else 0


def _cmd_equiv_check(args) -> int:
    results = equivalence_sweep(trials=args.trials, seed=args.seed)
    worst = 0.0
    for r in results:
        for key in ("fuse_kernels", "fuse_outputs", "module_fuse_kernels",
                    "module_fuse_outputs"):
            if key in r:
                worst = max(worst, r[key])
    status = "ok" if worst < args.tol else "FAIL"
    print(f"{len(results)} trials (backend: {backend.ACTIVE}), "
          f"max deviation {worst:.3e} [{status}]")
    return 0 if status == "ok" else 1


def _cmd_count_macs(args) -> int:
    net_cfg, _ = load_configs(args.config)
    try:
        h, w = (int(v) for v in args.size.lower().split("x"))
    except ValueError:
        raise KbnetError(f"--size must look like 256x256, got {args.size!r}")
    total, layers = net_mod.count_macs(net_cfg, h, w)
    for name, macs in layers:
        print(f"{name:40s} {macs:>15,}")
    print(f"{'total':40s} {total:>15,}")
    return 0


def _cmd_viz_coeffs(args) -> int:
    params, cfg = load_checkpoint(args.ckpt)
    img = load_image(args.input)
    written = viz.write_coefficient_maps(
        img, params, cfg, args.out, stage=args.stage, seed=args.seed
    )
    for path in written:
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kbnet", description="kernel-basis-attention image restoration"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="train_out")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("denoise", help="restore an image or directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_denoise)

    p = sub.add_parser("eval", help="PSNR/SSIM against a clean image set")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--clean", required=True)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    p.add_argument("--component", choices=gradcheck.COMPONENTS, default=None)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=_cmd_grad_check)

    p = sub.add_parser("equiv-check", help="oracle vs fast-path equivalence sweep")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_equiv_check)

    p = sub.add_parser("count-macs", help="per-layer multiply-accumulate counts")
    p.add_argument("--config", required=True)
    p.add_argument("--size", required=True, help="input size, e.g. 256x256")
    p.set_defaults(func=_cmd_count_macs)

    p = sub.add_parser("viz-coeffs", help="write per-stage coefficient RGB maps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stage", type=int, default=None)
    p.add_argument("--seed", type=int, default=viz.DEFAULT_PROJECTION_SEED)
    p.set_defaults(func=_cmd_viz_coeffs)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        return args.func(args)
    except (KbnetError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
