"""``swinmr`` command line: mask, phantom, degrade, train, reconstruct, eval, bench, report.

Exit codes: 0 success, 2 configuration/parameter error, 3 NaN abort, 4 IO error.
"""
import os

_threads = os.environ.get("SWINMR_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import smrt  # noqa: E402
from .kspace import ParameterError, UndersamplingMask, degrade, make_mask, synth_phantom  # noqa: E402
from .metrics import display_psnr, psnr, ssim  # noqa: E402
from .train import (EXIT_CONFIG, EXIT_IO, EXIT_NAN, ConfigError, ExperimentConfig, MaskSpec,  # noqa: E402
                    NaNLossError, build_dataset, evaluate, load_checkpoint, metrics_table, reconstruct, train)

logger = logging.getLogger("swinmr")


def _print_config(command: str, cfg: dict):
    print(json.dumps({"command": command, "config": cfg}, sort_keys=True, default=str), flush=True)


def _size(text: str):
    parts = text.lower().split("x")
    try:
        dims = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must be N or HxW, got {text!r}")
    if len(dims) == 1:
        dims = dims * 2
    if len(dims) != 2:
        raise argparse.ArgumentTypeError(f"size must be N or HxW, got {text!r}")
    return tuple(dims)


def _int_list(text: str):
    return [int(t) for t in text.split(",") if t]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_mask(args):
    H, W = args.size
    _print_config("mask", {"trajectory": args.trajectory, "size": [H, W], "ratio": args.ratio,
                           "center_fraction": args.center_fraction, "seed": args.seed, "out": args.out})
    mask = make_mask(args.trajectory, H, W, args.ratio, args.center_fraction, args.seed)
    mask.save(args.out)
    print(f"achieved_ratio {mask.achieved_ratio:.6f}")


def cmd_phantom(args):
    H, W = args.size
    _print_config("phantom", {"kind": args.kind, "size": [H, W], "seed": args.seed, "out": args.out})
    img = synth_phantom(H, W, args.kind, args.seed)
    smrt.save(args.out, img.astype(np.float32))
    if args.png:
        from .report import render_gray
        render_gray(img, args.png)


def cmd_degrade(args):
    _print_config("degrade", vars_clean(args))
    x = smrt.load(args.input)
    mask = UndersamplingMask.load(args.mask)
    x_u, y_u = degrade(np.asarray(x, dtype=np.float64), mask, args.nl, args.seed)
    smrt.save(args.out, x_u.astype(np.float32))
    if args.kspace_out:
        smrt.save(args.kspace_out, y_u.astype(np.complex64))


def _experiment_from_args(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {
        ("optim", "steps"): args.steps, ("optim", "lr"): args.lr, ("optim", "batch"): args.batch,
        ("dataset", "count"): args.count, ("dataset", "size"): args.size,
        ("dataset", "phantom_kind"): args.phantom_kind,
        ("mask", "trajectory"): args.trajectory, ("mask", "ratio"): args.ratio,
    }
    for (section, key), value in overrides.items():
        if value is not None:
            setattr(getattr(cfg, section), key, value)
    if args.split is not None:
        cfg.dataset.split = tuple(args.split)
    if args.nl is not None:
        cfg.noise_level = args.nl
    if args.seed is not None:
        cfg.seed = args.seed
    if args.crop is not None:
        cfg.crop = args.crop
    if args.eval_every is not None:
        cfg.eval_every = args.eval_every
    if args.out is not None:
        cfg.out_dir = args.out
    return cfg.validate()


def cmd_train(args):
    cfg = _experiment_from_args(args)
    _print_config("train", cfg.to_dict())
    ckpt, log = train(cfg, progress=True)
    final = log.losses[-1] if len(log.losses) else float("nan")
    print(json.dumps({"checkpoint": str(ckpt), "steps": len(log.steps), "final_loss": final}))


def cmd_reconstruct(args):
    _print_config("reconstruct", vars_clean(args))
    model, cfg, _ = load_checkpoint(args.checkpoint)
    img = np.asarray(smrt.load(args.input), dtype=np.float64)
    gt = None
    if args.mask:
        mask = UndersamplingMask.load(args.mask)
        gt = img
        x_u = degrade(img, mask, args.nl, args.seed)[0]
    else:
        x_u = img
    if args.ground_truth:
        gt = np.asarray(smrt.load(args.ground_truth), dtype=np.float64)
    x_u = x_u.astype(np.dtype(cfg.model.dtype))
    rec = reconstruct(model, x_u)
    smrt.save(args.out, rec)
    if args.png:
        from .report import render_gray
        render_gray(rec, args.png)
    if gt is not None:
        dr = float(gt.max())
        print(json.dumps({
            "psnr_recon": display_psnr(psnr(gt, rec, dr)), "ssim_recon": ssim(gt, rec, dr),
            "psnr_zf": display_psnr(psnr(gt, x_u, dr)), "ssim_zf": ssim(gt, x_u, dr),
        }))


def cmd_eval(args):
    _print_config("eval", vars_clean(args))
    model, cfg, manifest = load_checkpoint(args.checkpoint)
    data = build_dataset(cfg)
    samples = data[args.split]
    mask_spec = MaskSpec(args.trajectory or cfg.mask.trajectory,
                         args.ratio if args.ratio is not None else cfg.mask.ratio,
                         cfg.mask.center_fraction, cfg.mask.seed)
    result = evaluate(model, samples, mask_spec, args.nl, seed=args.seed)
    table = metrics_table(result)
    if args.out:
        from .report import write_csv
        write_csv(table, args.out)
    summary = {k: result[k] for k in ("zf", "recon", "extractor")}
    summary.update(step=manifest["step"], split=args.split, n=len(samples))
    print(json.dumps(summary, sort_keys=True))


def cmd_bench(args):
    from .bench import bench_attention
    from .report import write_csv
    grid = [(s, s, args.channels, args.window) for s in args.sizes]
    _print_config("bench", {"grid": grid, "heads": args.heads, "budget_mb": args.budget_mb,
                            "repeats": args.repeats, "out": args.out})
    rows = bench_attention(grid, heads=args.heads, repeats=args.repeats,
                           budget_bytes=int(args.budget_mb * 2 ** 20))
    for r in rows:
        print(json.dumps(r, sort_keys=True))
    if args.out:
        write_csv(rows, args.out)


def _latest_checkpoint(run_dir: Path) -> Path:
    ckpts = sorted((run_dir / "checkpoints").glob("step-*"), key=lambda p: int(p.name.split("-")[1]))
    if not ckpts:
        raise FileNotFoundError(f"no checkpoints under {run_dir / 'checkpoints'}")
    return ckpts[-1]


def cmd_report(args):
    from .report import render_triplet, write_csv
    run = Path(args.run_dir)
    _print_config("report", vars_clean(args))
    if not (run / "config.json").is_file():
        raise FileNotFoundError(f"{run} is not a run directory (missing config.json)")
    out = Path(args.out) if args.out else run / "reports"
    ckpt = _latest_checkpoint(run)
    model, cfg, manifest = load_checkpoint(ckpt)
    data = build_dataset(cfg)
    split = next(s for s in ("test", "val", "train") if data[s])
    result = evaluate(model, data[split], cfg.mask, cfg.noise_level, seed=cfg.seed)
    for i, (gt, rec, zf) in enumerate(zip(result["images"]["gt"], result["images"]["recon"], result["images"]["zf"])):
        render_triplet(gt, rec, out / f"{split}-{i:03d}-recon.png")
        render_triplet(gt, zf, out / f"{split}-{i:03d}-zf.png")
    write_csv(metrics_table(result), out / f"{split}-metrics.csv")
    metrics_log = run / "logs" / "metrics.jsonl"
    if metrics_log.is_file():
        rows = [json.loads(line) for line in metrics_log.read_text().splitlines() if line.strip()]
        flat = [{k: (json.dumps(v) if isinstance(v, dict) else v) for k, v in r.items()} for r in rows]
        if flat:
            write_csv(flat, out / "metrics-log.csv")
    print(json.dumps({"report_dir": str(out), "split": split, "checkpoint": str(ckpt), "n": len(data[split])}))


def vars_clean(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func", "command", "verbose")}


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="swinmr", description="Swin-transformer MRI reconstruction toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("mask", help="generate an undersampling mask (SMRT1 + JSON sidecar)")
    s.add_argument("--trajectory", choices=["gaussian1d", "radial", "spiral"], default="gaussian1d",
                   help="sampling trajectory")
    s.add_argument("--size", type=_size, default=(256, 256), help="k-space size, N or HxW")
    s.add_argument("--ratio", type=float, required=True, help="target sampling ratio in (0, 1]")
    s.add_argument("--center-fraction", type=float, default=None,
                   help="fully sampled centre (columns for gaussian1d, disk diameter otherwise)")
    s.add_argument("--seed", type=int, default=0, help="random seed")
    s.add_argument("--out", default="mask.smrt", help="output SMRT1 file; sidecar is <out>.json")
    s.set_defaults(func=cmd_mask)

    s = sub.add_parser("phantom", help="write a synthetic phantom")
    s.add_argument("--kind", choices=["shepp_logan", "random_ellipses"], default="shepp_logan",
                   help="phantom family")
    s.add_argument("--size", type=_size, default=(256, 256), help="image size, N or HxW")
    s.add_argument("--seed", type=int, default=0, help="random seed (random_ellipses)")
    s.add_argument("--out", required=True, help="output SMRT1 file")
    s.add_argument("--png", default=None, help="optional 8-bit PNG render")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("degrade", help="undersample (and add noise to) an image's k-space")
    s.add_argument("--input", required=True, help="real image, SMRT1")
    s.add_argument("--mask", required=True, help="mask SMRT1 file (with sidecar)")
    s.add_argument("--nl", type=float, default=0.0, help="noise level N'/(S'+N') in [0, 1)")
    s.add_argument("--seed", type=int, default=0, help="noise seed")
    s.add_argument("--out", required=True, help="zero-filled magnitude image, SMRT1")
    s.add_argument("--kspace-out", default=None, help="optional undersampled k-space, complex SMRT1")
    s.set_defaults(func=cmd_degrade)

    s = sub.add_parser("train", help="train a model and write a run directory")
    s.add_argument("--config", default=None, help="ExperimentConfig JSON; flags below override it")
    s.add_argument("--out", default=None, help="run directory")
    s.add_argument("--steps", type=int, default=None, help="optimizer steps")
    s.add_argument("--lr", type=float, default=None, help="learning rate")
    s.add_argument("--batch", type=int, default=None, help="batch size")
    s.add_argument("--seed", type=int, default=None, help="model/loop seed")
    s.add_argument("--count", type=int, default=None, help="number of phantom slices")
    s.add_argument("--size", type=int, default=None, help="phantom side length")
    s.add_argument("--phantom-kind", choices=["shepp_logan", "random_ellipses", "mixed"], default=None,
                   help="phantom family")
    s.add_argument("--split", type=_int_list, default=None, help="train,val,test weights, e.g. 5,2,3")
    s.add_argument("--trajectory", choices=["gaussian1d", "radial", "spiral"], default=None,
                   help="mask trajectory")
    s.add_argument("--ratio", type=float, default=None, help="mask sampling ratio")
    s.add_argument("--nl", type=float, default=None, help="training noise level")
    s.add_argument("--crop", type=int, default=None, help="training crop side")
    s.add_argument("--eval-every", type=int, default=None, help="evaluation cadence in steps (0 = off)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("reconstruct", help="run a checkpoint on one image")
    s.add_argument("--checkpoint", required=True, help="checkpoint directory (contains manifest.json)")
    s.add_argument("--input", required=True,
                   help="zero-filled image (SMRT1); with --mask it is treated as ground truth and degraded first")
    s.add_argument("--mask", default=None, help="mask file to degrade --input with")
    s.add_argument("--nl", type=float, default=0.0, help="noise level when degrading")
    s.add_argument("--seed", type=int, default=0, help="noise seed when degrading")
    s.add_argument("--ground-truth", default=None, help="ground-truth image for PSNR/SSIM")
    s.add_argument("--out", required=True, help="reconstruction, SMRT1")
    s.add_argument("--png", default=None, help="optional 8-bit PNG render")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("eval", help="evaluate a checkpoint against the zero-filled baseline")
    s.add_argument("--checkpoint", required=True, help="checkpoint directory")
    s.add_argument("--split", choices=["train", "val", "test"], default="test", help="dataset split")
    s.add_argument("--trajectory", choices=["gaussian1d", "radial", "spiral"], default=None,
                   help="override mask trajectory")
    s.add_argument("--ratio", type=float, default=None, help="override mask ratio")
    s.add_argument("--nl", type=float, default=0.0, help="noise level")
    s.add_argument("--seed", type=int, default=0, help="noise seed")
    s.add_argument("--out", default=None, help="optional CSV metric table")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="global vs windowed attention MACs and wall-clock")
    s.add_argument("--sizes", type=_int_list, default=[16, 32, 48, 64], help="square sizes, comma separated")
    s.add_argument("--channels", type=int, default=32, help="channel count C")
    s.add_argument("--window", type=int, default=8, help="window size M")
    s.add_argument("--heads", type=int, default=2, help="attention heads")
    s.add_argument("--repeats", type=int, default=3, help="timing repeats (best of)")
    s.add_argument("--budget-mb", type=float, default=512, help="memory budget for full-attention logits")
    s.add_argument("--out", default=None, help="optional CSV report")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("report", help="PNG triplets and CSV tables for a finished run")
    s.add_argument("--run-dir", required=True, help="run directory written by train")
    s.add_argument("--out", default=None, help="output directory (default <run-dir>/reports)")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NaNLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NAN
    except (OSError, smrt.FormatError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
