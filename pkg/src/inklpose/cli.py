"""Command line entry point: ``inkl <command> [flags]``.

Exit codes: 0 ok, 1 a check failed, 2 usage or IO error.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from inklpose import geometry, keypoint_net as kn, metrics, synthdata, trainer, verify
from inklpose.config import TrainConfig, load_config
from inklpose.errors import InklError
from inklpose.model import InstanceCache, make_batch
from inklpose.substrate.params import ParamRegistry
from inklpose.substrate.tensor import Tensor, count_flops, no_grad, precision

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
ARMS = {
    "bi-mamba": {},
    "uni-mamba": {"uni_mamba": True},
    "attention": {"attention_gkfa": True},
}
GRAY = (128, 128, 128)


class UsageError(Exception):
    pass


def _print_config(cfg: TrainConfig) -> None:
    print("# resolved config")
    print(cfg.dumps(), end="")


def _seed_override(seed: int) -> int:
    raw = os.environ.get("INKL_SEED")
    if raw is None:
        return seed
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"INKL_SEED must be an integer, got {raw!r}") from None


def _read_data(path) -> list:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"data file not found: {p}")
    return synthdata.read_dataset(p)


# -- commands -----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    seed = _seed_override(args.seed)
    cats = [c.strip() for c in args.categories.split(",") if c.strip()]
    print(f"# resolved config\ngen.out={args.out}\ngen.count={args.count}\ngen.seed={seed}\n"
          f"gen.categories={','.join(cats)}")
    samples = synthdata.generate_dataset(args.count, seed, cats)
    out = Path(args.out)
    try:
        synthdata.write_dataset(samples, out, seed=seed)
    except OSError as exc:
        raise UsageError(f"cannot write {out}: {exc}") from None
    back = synthdata.read_dataset(out)
    if len(back) != len(samples):
        print(f"round trip read {len(back)} of {len(samples)} samples", file=sys.stderr)
        return EXIT_FAIL
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    _print_config(cfg)
    samples = _read_data(args.data)
    if args.resume is not None and not Path(args.resume).is_file():
        raise UsageError(f"checkpoint not found: {args.resume}")
    t0 = time.perf_counter()

    def report(tr, rec):
        if rec["step"] % 50 == 0 or rec["step"] == tr.cfg.max_steps:
            print(f"step {rec['step']:6d}  lr {rec['lr']:.2e}  total {rec['total']:.4f}  "
                  f"({time.perf_counter() - t0:.0f}s)", flush=True)

    tr = trainer.train(cfg, samples, args.out, resume=args.resume, callback=report)
    print(f"finished at step {tr.step}; checkpoints in {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    samples = _read_data(args.data)
    net, _ = trainer.load_model(args.ckpt)
    _print_config(net.cfg)
    report = trainer.evaluate(net, samples)
    metrics.write_report(report, args.out)
    print(metrics.format_summary(report.aggregates))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = verify.run_scale(args.scale, tamper=args.tamper)
    ok = True
    for r in results:
        flag = "PASS" if r.passed else "FAIL"
        print(f"{flag} {r.name:<32} max rel err {r.report.max_rel_error:.2e} (tol {r.report.tol:.0e}, "
              f"{r.report.entries_checked} entries, {r.seconds:.1f}s)")
        ok &= r.passed
    return EXIT_OK if ok else EXIT_FAIL


def bench_arm(arm: str, length: int, dim: int, reps: int = 3, seed: int = 0) -> dict:
    """FLOP estimate and wall times of one GKFA forward over a [1, length, dim] sequence."""
    heads = 4 if dim % 4 == 0 else 1
    cfg = TrainConfig(d=dim, heads=heads, S=1, **ARMS[arm])
    reg = ParamRegistry(seed, np.float32)
    kn.register_stage(reg, cfg, 0)
    x = np.random.default_rng(seed).normal(size=(1, length, dim)).astype(np.float32)
    times = []
    flops = None
    with precision(np.float32), no_grad():
        # untimed warm-up so kernel compilation is not counted
        kn.gkfa_forward(reg, cfg, 0, Tensor(x))
        for _ in range(max(reps, 1)):
            with count_flops() as fc:
                t0 = time.perf_counter()
                kn.gkfa_forward(reg, cfg, 0, Tensor(x))
                times.append(time.perf_counter() - t0)
            flops = fc.total
    n_params = sum(v.size for k, v in reg.items() if ".gkfa." in k)
    return {"arm": arm, "len": length, "dim": dim, "flops": flops, "params": n_params,
            "min_ms": 1e3 * min(times), "median_ms": 1e3 * float(np.median(times))}


def cmd_bench(args) -> int:
    print(f"# resolved config\nbench.arm={','.join(args.arm)}\nbench.len={','.join(map(str, args.len))}\n"
          f"bench.dim={args.dim}\nbench.reps={args.reps}")
    print(f"{'arm':<10}{'L':>6}{'flops':>14}{'flops/L':>11}{'min ms':>10}{'median ms':>11}")
    for arm in args.arm:
        for length in args.len:
            r = bench_arm(arm, length, args.dim, args.reps)
            print(f"{arm:<10}{length:>6}{r['flops']:>14d}{r['flops'] / length:>11.0f}"
                  f"{r['min_ms']:>10.2f}{r['median_ms']:>11.2f}")
    return EXIT_OK


def keypoint_ply_data(net, sample) -> tuple[np.ndarray, np.ndarray]:
    """Predicted NOCS keypoints coloured by their error, followed by the gray NOCS-space cloud."""
    batch = make_batch([sample], net.cfg, InstanceCache(net.cfg))
    with no_grad():
        res = net.forward(batch)
    pred = res.pose.nocs_kpts.data[0].astype(np.float64)
    gt = res.nocs_gt.data[0].astype(np.float64)
    cloud = geometry.to_nocs(sample.cloud.points.astype(np.float64), sample.gt)
    pts = np.concatenate([pred, cloud])
    cols = np.concatenate([metrics.nocs_error_colors(pred, gt),
                           np.tile(np.array(GRAY, dtype=np.uint8), (len(cloud), 1))])
    return pts, cols


def cmd_plot_keypoints(args) -> int:
    samples = _read_data(args.data)
    net, _ = trainer.load_model(args.ckpt)
    _print_config(net.cfg)
    if not 0 <= args.instance < len(samples):
        raise UsageError(f"instance {args.instance} out of range (dataset has {len(samples)})")
    pts, cols = keypoint_ply_data(net, samples[args.instance])
    try:
        metrics.write_ply(args.out, pts, cols)
    except OSError as exc:
        raise UsageError(f"cannot write {args.out}: {exc}") from None
    print(f"wrote {len(pts)} vertices ({net.cfg.n_kpt} keypoints) to {args.out}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def _positive(raw: str) -> int:
    v = int(raw)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {raw}")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="inkl", description="Keypoint-based category-level pose estimation.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=_positive, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--categories", default=",".join(synthdata.CATEGORY_NAMES))
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--scale", choices=verify.SCALES, default="unit")
    p.add_argument("--tamper", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="GKFA arm FLOP and timing microbenchmark")
    p.add_argument("--arm", nargs="+", choices=list(ARMS), default=list(ARMS))
    p.add_argument("--len", nargs="+", type=_positive, default=[64, 256, 1024])
    p.add_argument("--dim", type=_positive, default=64)
    p.add_argument("--reps", type=_positive, default=3)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("plot-keypoints", help="export NOCS keypoints coloured by error as PLY")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--instance", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot_keypoints)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (UsageError, InklError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
