"""Command line entry point: ``pnrdiff <subcommand> [flags]``.

Exit codes: 0 success, 2 usage error, 3 IO error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from .data import ImageFormatError, atomic_write_bytes, encode_pnm, read_ppm, write_ppm
from .metrics import diversity_stats, metric_report, psnr, ssim
from .sampler import DEFAULT_NAVG_GRID, SampleConfig, pd_sweep, sample_set
from .schedule import DEFAULT_T_GRID, DEFAULT_VAR_GRID, ScheduleError
from .trainer import CheckpointError, Checkpoint, NonFiniteLoss, TrainerConfig, load_checkpoint, save_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("size must be positive")
    return h, w


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pnrdiff", description="Predict-and-refine diffusion deblurring toolkit.")
    p.add_argument("--config", help="JSON file with flag values (explicit flags win)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic blur dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=100)
    g.add_argument("--size", type=_size, default=(64, 64))
    g.add_argument("--max-kernel", type=int, default=data_mod.MAX_KERNEL)
    g.add_argument("--noise-max", type=float, default=15.0)
    g.add_argument("--gaussian-fraction", type=float, default=0.0,
                   help="share of pairs blurred by a Gaussian instead of a camera-shake kernel")
    g.add_argument("--source", help="directory of sharp PPM/PGM images (default: procedural)")
    g.add_argument("--seed", type=_u64, default=0)

    t = sub.add_parser("train", help="jointly train predictor and denoiser")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--log", help="loss CSV path (default: <out>.loss.csv)")
    t.add_argument("--steps", type=int, default=20000)
    t.add_argument("--batch", type=int, default=16)
    t.add_argument("--crop", type=int, default=32)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--weight-decay", type=float, default=1e-4)
    t.add_argument("--ema", type=float, default=0.9999)
    t.add_argument("--base-ch-pred", type=int, default=32)
    t.add_argument("--base-ch-den", type=int, default=16)
    t.add_argument("--blocks", type=int, default=1, help="residual blocks per depth")
    t.add_argument("--no-wall-clock", action="store_true", help="write wall_ms as 0 (byte-reproducible log)")
    t.add_argument("--seed", type=_u64, default=0)

    s = sub.add_parser("sample", help="restore one image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, default=10)
    s.add_argument("--final-var", type=float, default=0.1)
    s.add_argument("--n", type=int, default=1)
    s.add_argument("--average", action="store_true")
    s.add_argument("--debug-singles", action="store_true", help="with --average, also write every sample")
    s.add_argument("--raw-weights", action="store_true", help="use raw instead of EMA weights")
    s.add_argument("--seed", type=_u64, default=0)

    w = sub.add_parser("sweep", help="perception-distortion grid over inference hyperparameters")
    w.add_argument("--ckpt", required=True)
    w.add_argument("--data", required=True)
    w.add_argument("--t-grid", type=_int_list, default=list(DEFAULT_T_GRID))
    w.add_argument("--var-grid", type=_float_list, default=list(DEFAULT_VAR_GRID))
    w.add_argument("--navg-grid", type=_int_list, default=list(DEFAULT_NAVG_GRID))
    w.add_argument("--limit", type=int, help="use only the first N pairs")
    w.add_argument("--out", required=True)
    w.add_argument("--no-wall-clock", action="store_true", help="write wall_ms as 0 (byte-reproducible CSV)")
    w.add_argument("--seed", type=_u64, default=0)

    e = sub.add_parser("eval", help="PSNR/SSIM of a prediction directory against references")
    e.add_argument("--pred", required=True)
    e.add_argument("--ref", required=True)
    e.add_argument("--out", required=True)

    d = sub.add_parser("diversity", help="per-pixel std map and sharpness/diversity statistics")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--input", required=True)
    d.add_argument("--ref", help="sharp reference (enables sharpness and diversity ratios)")
    d.add_argument("--n", type=int, default=8)
    d.add_argument("--steps", type=int, default=10)
    d.add_argument("--final-var", type=float, default=0.1)
    d.add_argument("--same-seed", action="store_true", help="give every sample the same noise stream")
    d.add_argument("--out-prefix", required=True)
    d.add_argument("--seed", type=_u64, default=0)

    c = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.add_argument("--seed", type=_u64, default=0)
    return p


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        with open(args.config) as f:
            cfg = json.load(f)
        explicit = {a.split("=")[0].lstrip("-").replace("-", "_") for a in argv if a.startswith("--")}
        known = set(vars(args))
        for key, value in cfg.items():
            k = key.replace("-", "_")
            if k not in known or k in ("command", "config"):
                raise UsageError(f"unknown config key {key!r}")
            if k not in explicit:
                setattr(args, k, value)
    return args


def _echo_config(args: argparse.Namespace) -> None:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k != "config"}
    print(json.dumps({"config": cfg}, default=list))


def _load_image(path) -> np.ndarray:
    return read_ppm(path)


def _suffix(path: Path, index: int) -> Path:
    return path.with_name(f"{path.stem}_{index:03d}{path.suffix}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(a) -> int:
    h, w = a.size
    if a.n < 0:
        raise UsageError("--n must be non-negative")
    if a.max_kernel < 1 or a.max_kernel % 2 == 0:
        raise UsageError("--max-kernel must be a positive odd integer")
    if a.max_kernel > min(h, w):
        raise UsageError(f"--max-kernel {a.max_kernel} exceeds image size {h}x{w}")
    if not 0 <= a.noise_max <= 255:
        raise UsageError("--noise-max must lie in [0, 255]")
    manifest = data_mod.make_dataset(a.out, a.n, (h, w), a.seed, a.max_kernel, a.noise_max,
                                     a.gaussian_fraction, a.source)
    print(f"wrote {len(manifest['pairs'])} pairs to {a.out}")
    return EXIT_OK


def cmd_train(a) -> int:
    try:
        cfg = TrainerConfig(steps=a.steps, batch=a.batch, crop=a.crop, lr=a.lr, weight_decay=a.weight_decay,
                            ema_decay=a.ema, seed=a.seed, pred_channels=a.base_ch_pred,
                            den_channels=a.base_ch_den, blocks_per_depth=a.blocks)
    except ValueError as e:
        raise UsageError(str(e)) from None
    pairs = data_mod.load_pairs(a.data)
    if len(pairs) == 0:
        raise UsageError(f"no training pairs in {a.data}")
    if cfg.crop > min(pairs.sharp.shape[-2:]):
        raise UsageError(f"--crop {cfg.crop} exceeds image size {pairs.sharp.shape[-2:]}")
    log_path = a.log or f"{a.out}.loss.csv"
    every = max(1, cfg.steps // 20)

    def progress(step, loss):
        if step % every == 0 or step == cfg.steps - 1:
            print(f"step {step:6d} loss {loss:.5f}", flush=True)

    result = train(cfg, pairs, log_path, record_time=not a.no_wall_clock, progress=progress)
    save_checkpoint(a.out, Checkpoint.from_training(result.nets, cfg, result.step))
    print(f"wrote {a.out} and {log_path}")
    return EXIT_OK


def _sample_cfg(a, n: int, average: bool = False) -> SampleConfig:
    try:
        return SampleConfig(T=a.steps, var_end=a.final_var, n_samples=n, average=average, seed=a.seed)
    except ValueError as e:
        raise UsageError(str(e)) from None


def cmd_sample(a) -> int:
    cfg = _sample_cfg(a, a.n, a.average)
    nets = load_checkpoint(a.ckpt).nets(use_ema=not a.raw_weights)
    y = _load_image(a.input)
    samples = sample_set(nets, y, cfg)[:, 0]
    out = Path(a.out)
    if a.average:
        write_ppm(out, np.clip(samples.mean(axis=0), -1, 1))
        if a.debug_singles:
            for i, s in enumerate(samples):
                write_ppm(_suffix(out, i), s)
    elif cfg.n_samples == 1:
        write_ppm(out, samples[0])
    else:
        for i, s in enumerate(samples):
            write_ppm(_suffix(out, i), s)
    print(f"wrote {cfg.n_samples} sample(s) to {out.parent}")
    return EXIT_OK


def cmd_sweep(a) -> int:
    if not a.t_grid or not a.var_grid or not a.navg_grid:
        raise UsageError("grids must be non-empty")
    if min(a.t_grid) < 1 or min(a.navg_grid) < 1 or not all(0 < v < 1 for v in a.var_grid):
        raise UsageError("invalid grid values")
    nets = load_checkpoint(a.ckpt).nets()
    pairs = data_mod.load_pairs(a.data)
    if a.limit is not None:
        pairs = pairs.subset(range(min(a.limit, len(pairs))))
    if len(pairs) == 0:
        raise UsageError(f"no evaluation pairs in {a.data}")

    def progress(T, v):
        print(f"T={T} var_end={v} done", flush=True)

    rows = pd_sweep(nets, pairs.blurry, pairs.sharp, a.out, a.t_grid, a.var_grid, a.navg_grid, a.seed,
                    record_time=not a.no_wall_clock, progress=progress)
    print(f"wrote {len(rows)} rows to {a.out}")
    return EXIT_OK


def _image_files(d: Path) -> dict[str, Path]:
    if d.is_file():
        return {"": d}
    return {p.name: p for p in sorted(d.iterdir()) if p.suffix.lower() in (".ppm", ".pgm", ".pnm")}


def cmd_eval(a) -> int:
    pred, ref = _image_files(Path(a.pred)), _image_files(Path(a.ref))
    names = sorted(set(pred) & set(ref))
    if not names:
        raise UsageError("no matching image names between --pred and --ref")
    p_vals, s_vals = [], []
    for n in names:
        x, r = read_ppm(pred[n])[0], read_ppm(ref[n])[0]
        if x.shape != r.shape:
            raise UsageError(f"{n}: shape mismatch {x.shape} vs {r.shape}")
        p_vals.append(psnr(x, r))
        s_vals.append(ssim(x, r))
    report = metric_report({"psnr": p_vals, "ssim": s_vals})
    atomic_write_bytes(a.out, (json.dumps(report, indent=1) + "\n").encode())
    print(f"psnr {report['psnr']['mean']:.3f} ssim {report['ssim']['mean']:.4f} over {len(names)} images")
    return EXIT_OK


def cmd_diversity(a) -> int:
    if a.n < 2:
        raise UsageError("--n must be at least 2")
    cfg = _sample_cfg(a, a.n)
    nets = load_checkpoint(a.ckpt).nets()
    y = _load_image(a.input)
    samples = sample_set(nets, y, cfg, same_stream=a.same_seed)[:, 0]
    std_map = samples.std(axis=0, ddof=1)
    stats = {"n": a.n, "pixel_std_mean": float(std_map.mean())}
    if a.ref:
        ref = _load_image(a.ref)[0]
        sharpness, diversity, std_map = diversity_stats(y[0], ref, samples)
        stats.update(sharpness=sharpness, diversity=diversity, pixel_std_mean=float(std_map.mean()))
    peak = std_map.max()
    heat = np.zeros(std_map.shape, np.uint8) if peak == 0 else np.round(std_map / peak * 255).astype(np.uint8)
    prefix = a.out_prefix
    atomic_write_bytes(f"{prefix}_std.pgm", encode_pnm(heat.reshape(-1, *heat.shape[-2:])[:1]))
    atomic_write_bytes(f"{prefix}_stats.json", (json.dumps(stats, sort_keys=True) + "\n").encode())
    print(json.dumps(stats, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(a) -> int:
    from .gradchecks import run_suite

    reports = run_suite(a.seed, a.tolerance)
    ok = True
    for name, rep in reports.items():
        worst = max(rep.errors.values())
        print(f"{'PASS' if rep.ok else 'FAIL'} {name}: max rel err {worst:.2e}")
        if not rep.ok:
            ok = False
            for tensor in rep.failures():
                print(f"    {tensor}: {rep.errors[tensor]:.2e}", file=sys.stderr)
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
    "diversity": cmd_diversity,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
        _echo_config(args)
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLoss, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError, ImageFormatError, json.JSONDecodeError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, ScheduleError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
