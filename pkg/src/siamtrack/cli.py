"""Command-line entry point: synth, train, track, eval, bench, gradcheck."""
from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import config as config_mod
from . import data, evaluate, gradcheck, synth, tracker
from .errors import DataError, SiamTrackError, UsageError
from .tensor import checkpoint

log = logging.getLogger("siamtrack")

PUBLISHED_GPU_LATENCY_MS = 9.4  # published GPU figure, quoted for context only


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _add_config_flags(p, names):
    """Expose RunConfig fields as --flags; unset flags stay None so lower layers apply."""
    types = {f: t for f, t in config_mod._FIELDS.items()}
    for name in names:
        kind = types[name]
        flag = "--" + name.replace("_", "-")
        if kind == "bool":
            continue
        p.add_argument(flag, dest=name, default=None,
                       type={"int": int, "float": float}.get(kind, str), metavar=name.upper())


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="siamtrack", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="render synthetic ultrasound-like sequences")
    p.add_argument("--suite", choices=["default"], help="write the canned train/val/test suite")
    p.add_argument("--scene", type=Path, help="render one scene.txt description")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--frames", type=int, default=200)

    p = sub.add_parser("train", help="train the embedding network")
    p.add_argument("--data", type=Path, required=True, help="directory with train/ and val/ splits")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--config", type=Path)
    _add_config_flags(p, ["batch_size", "lr", "epochs", "pairs_per_epoch", "val_pairs", "seed", "loss",
                          "logistic_weighting", "train_search_size", "profile", "sigma_loss_mm",
                          "sigma_loss_grid", "checkpoint_every", "spacing_mm"])

    p = sub.add_parser("track", help="track the landmarks of one sequence")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--seq", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="trajectory CSV (one per landmark: _<id> suffix)")
    p.add_argument("--landmark", action="append", help="landmark id(s) to track; default all")
    p.add_argument("--no-regularizer", action="store_true")
    p.add_argument("--deterministic", action="store_true", help="write latency_ms as 0 for bitwise-stable output")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--config", type=Path)
    _add_config_flags(p, ["k", "tau", "sigma_prior_mm", "d_max_mm", "search_size", "spacing_mm"])

    p = sub.add_parser("eval", help="score trajectories against ground truth")
    p.add_argument("--pred", type=Path, required=True, nargs="+")
    p.add_argument("--gt", type=Path, required=True, nargs="+")
    p.add_argument("--report", type=Path, help="report CSV path")
    p.add_argument("--strict", action="store_true", help="exit 1 when any switch failure is flagged")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--config", type=Path)
    _add_config_flags(p, ["d_max_mm", "spacing_mm"])

    p = sub.add_parser("bench", help="single-threaded per-frame latency")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--seq", type=Path, required=True)
    p.add_argument("--landmark")
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--config", type=Path)
    _add_config_flags(p, ["search_size", "spacing_mm"])

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--tol", type=float, default=1e-4)
    return ap


def _resolve(args, extra=None) -> config_mod.RunConfig:
    flags = {k: v for k, v in vars(args).items() if k in config_mod._FIELDS}
    flags.update(extra or {})
    cfg = config_mod.resolve(getattr(args, "config", None), flags=flags)
    config_mod.echo(cfg)
    return cfg


def cmd_synth(args) -> int:
    if (args.suite is None) == (args.scene is None):
        raise UsageError("synth needs exactly one of --suite or --scene")
    if args.suite:
        written = synth.write_suite(args.out, seed=args.seed, n_frames=args.frames)
        for split, dirs in written.items():
            print(f"{split}: {len(dirs)} sequences under {args.out / split}")
    else:
        spec = synth.load_spec(args.scene)
        print(f"wrote {synth.write_scene(spec, args.out)}")
    return 0


def cmd_train(args) -> int:
    from . import train

    cfg = _resolve(args)
    args.out.mkdir(parents=True, exist_ok=True)
    cfg.save(args.out / "config.txt")
    tcfg = cfg.train_config()
    tr = train.load_split(args.data / "train", cfg.spacing_mm)
    va = train.load_split(args.data / "val", cfg.spacing_mm) if (args.data / "val").is_dir() else []
    result = train.train(tcfg, tr, va, args.out, metadata={"profile": cfg.profile, "seed": cfg.seed})
    print(f"initial val loss {result.initial_val_loss:.6g}, best {result.best_val_loss:.6g} "
          f"at epoch {result.best_epoch}, {result.seconds / 60:.1f} min")
    print(f"wrote {args.out / 'best.ckpt'} and {args.out / 'loss_curve.csv'}")
    return 0


def _track_one(job):
    from threadpoolctl import threadpool_limits

    ckpt, seq_dir, lm_path, out_path, tcfg, spacing, deterministic = job
    net, _ = checkpoint.load(ckpt)
    seq = data.load_sequence(seq_dir)
    anns = data.load_annotations(lm_path, seq)
    seq, anns = data.resample(seq, spacing, anns)
    first = [a for a in anns if a.frame == 0]
    if len(first) != 1:
        raise UsageError(f"{lm_path}: need exactly one frame-0 annotation, found {len(first)}")
    with threadpool_limits(limits=1):  # single-threaded BLAS keeps runs bitwise reproducible
        traj = tracker.track_sequence(seq, (first[0].x, first[0].y), net, tcfg, first[0].landmark_id)
    tracker.write_trajectory(out_path, traj, record_latency=not deterministic)
    return out_path, sum(r.lost for r in traj.results)


def cmd_track(args) -> int:
    cfg = _resolve(args, {"regularize": False if args.no_regularizer else None})
    tcfg = cfg.tracker_config()
    files = data.landmark_files(args.seq)
    if args.landmark:
        files = [f for f in files if f.stem.removeprefix("landmark_") in args.landmark]
    if not files:
        raise UsageError(f"no landmark annotations to track in {args.seq}")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    jobs = []
    for f in files:
        out = args.out if len(files) == 1 else args.out.with_name(
            f"{args.out.stem}_{f.stem.removeprefix('landmark_')}{args.out.suffix}")
        jobs.append((args.ckpt, args.seq, f, out, tcfg, cfg.spacing_mm, args.deterministic))
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_track_one, jobs))
    else:
        results = [_track_one(j) for j in jobs]
    cfg.save(args.out.with_name(args.out.stem + ".config.txt"))
    for path, lost in results:
        print(f"wrote {path}" + (f" ({lost} lost frame(s))" if lost else ""))
    return 0


def _load_positions(path):
    """{frame: (x, y)} from either a trajectory CSV or a frame,x,y annotation CSV."""
    try:
        with Path(path).open() as fh:
            header = fh.readline().strip().split(",")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if header == tracker.TRAJECTORY_HEADER:
        return tracker.read_trajectory(path)
    anns = data.load_annotations(path)
    return tracker.Trajectory(Path(path).stem, (1.0, 1.0),
                              [tracker.FrameResult(a.frame, (a.x, a.y), float("nan"), 0.0) for a in anns])


def _eval_one(job):
    pred_path, gt_path, spacing, d_max = job
    pred = _load_positions(pred_path)
    pred.spacing = (spacing, spacing)
    gt = _load_positions(gt_path).positions()
    return evaluate.evaluate_trajectory(pred, gt, Path(gt_path).parent.name or gt_path.stem, d_max)


def cmd_eval(args) -> int:
    if len(args.pred) != len(args.gt):
        raise UsageError(f"{len(args.pred)} prediction file(s) but {len(args.gt)} ground-truth file(s)")
    cfg = _resolve(args)
    jobs = [(p, g, cfg.spacing_mm, cfg.d_max_mm) for p, g in zip(args.pred, args.gt)]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            reports = list(pool.map(_eval_one, jobs))
    else:
        reports = [_eval_one(j) for j in jobs]
    print(evaluate.summary_table(reports))
    if args.report:
        evaluate.write_report(args.report, reports)
        cfg.save(args.report.with_name(args.report.stem + ".config.txt"))
    if args.strict and any(r.switch_failure for r in reports):
        print("switch failure flagged", file=sys.stderr)
        return 1
    return 0


def cmd_bench(args) -> int:
    cfg = _resolve(args)
    net, _ = checkpoint.load(args.ckpt)
    seq = data.load_sequence(args.seq)
    files = data.landmark_files(args.seq)
    if args.landmark:
        files = [f for f in files if f.stem.removeprefix("landmark_") == args.landmark]
    if not files:
        raise UsageError(f"no landmark annotation in {args.seq}")
    anns = data.load_annotations(files[0], seq)
    seq, anns = data.resample(seq, cfg.spacing_mm, anns)
    first = next(a for a in anns if a.frame == 0)
    tcfg = cfg.tracker_config()
    runs = evaluate.benchmark_latency(lambda: tracker.Tracker(net, tcfg), seq, (first.x, first.y),
                                      args.warmup, args.repeats)
    for i, s in enumerate(runs):
        print(f"run {i}: {s.n_frames} frames, mean {s.mean_ms:.2f} ms, median {s.median_ms:.2f} ms, "
              f"p99 {s.p99_ms:.2f} ms")
    print(f"search {cfg.search_size}px, single thread, CPU; published GPU figure {PUBLISHED_GPU_LATENCY_MS} ms/frame "
          f"(different hardware, not a parity claim)")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(range(args.seeds), args.tol)
    for r in results:
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:<24} seed {r.seed}  max rel err {r.max_rel_error:.2e}")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 3 if failed else 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "track": cmd_track, "eval": cmd_eval,
            "bench": cmd_bench, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        return COMMANDS[args.command](args)
    except SiamTrackError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
