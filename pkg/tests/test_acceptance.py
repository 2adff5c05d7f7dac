"""End-to-end acceptance criteria, one test each.

The trained network and the benchmark suite are cached under
``$SIAMTRACK_ACCEPTANCE_DIR`` (default ``~/.cache/siamtrack/acceptance``).
A missing or stale cache is rebuilt with the CLI, which trains for 100 epochs.
"""
import itertools
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from siamtrack import config, data, evaluate, gradcheck, siamese, synth, tracker, train
from siamtrack.cli import main
from siamtrack.tensor import checkpoint
from siamtrack.tensor.network import DEFAULT_PROFILE, Network

from .conftest import record_acceptance
from .test_siamese import loop_correlation
from .test_tracker import scan_argmax

CACHE = Path(os.environ.get("SIAMTRACK_ACCEPTANCE_DIR", Path.home() / ".cache" / "siamtrack" / "acceptance"))
TEST_SEQUENCES = ["test00", "test01", "test02", "test03"]
TWINS = ["twin0", "twin1"]


def _suite_is_current(root: Path, splits) -> bool:
    suite = synth.default_suite()
    for split in splits:
        for spec in suite[split]:
            path = root / split / spec.name / "scene.txt"
            if not path.exists() or synth.load_spec(path) != spec:
                return False
    return True


def _ensure_suite(root: Path) -> None:
    if not _suite_is_current(root, ("train", "val", "test")):
        synth.write_suite(root)


def _ensure_run(root: Path, run: Path) -> None:
    expected = config.RunConfig().to_dict()
    fresh = (run / "best.ckpt").exists() and (run / "summary.txt").exists() \
        and data.read_keyvalue(run / "config.txt") == expected \
        and (run / "suite.txt").exists() and (run / "suite.txt").read_text() == _train_fingerprint()
    if not fresh:
        assert main(["train", "--data", str(root), "--out", str(run)]) == 0
        (run / "suite.txt").write_text(_train_fingerprint())


def _train_fingerprint() -> str:
    suite = synth.default_suite()
    return "".join(f"{k}={v}\n" for split in ("train", "val") for spec in suite[split]
                   for k, v in synth.spec_to_dict(spec).items())


@pytest.fixture(scope="module")
def artifacts():
    root, run = CACHE / "suite", CACHE / "run"
    CACHE.mkdir(parents=True, exist_ok=True)
    train_ok = _suite_is_current(root, ("train", "val"))
    _ensure_suite(root)
    if not train_ok and (run / "suite.txt").exists():
        (run / "suite.txt").unlink()
    _ensure_run(root, run)
    net, _ = checkpoint.load(run / "best.ckpt")
    return root, run, net


def _load_test(root, name):
    d = root / "test" / name
    seq = data.load_sequence(d)
    gt = {a.frame: a.xy for a in data.load_annotations(d / "landmark_lm0.csv", seq)}
    return seq, gt


@pytest.fixture(scope="module")
def tracked(artifacts):
    """Reports for every test sequence, regularized, plus unregularized runs of the twins."""
    root, _, net = artifacts
    out = {}
    for name in TEST_SEQUENCES + TWINS:
        seq, gt = _load_test(root, name)
        modes = (True, False) if name in TWINS else (True,)
        for reg in modes:
            traj = tracker.track_sequence(seq, gt[0], net, tracker.TrackerConfig(regularize=reg))
            out[name, reg] = (traj, evaluate.evaluate_trajectory(traj, gt, name))
    return out


def test_1_gradient_suite():
    start = time.perf_counter()
    results = gradcheck.run_suite(range(5), 1e-4)
    elapsed = time.perf_counter() - start
    worst = max(results, key=lambda r: r.max_rel_error)
    ok = all(r.passed for r in results) and elapsed < 60
    record_acceptance(1, "gradient suite", ok,
                      f"{len(results)} checks over 5 seeds, max rel err {worst.max_rel_error:.1e} "
                      f"({worst.name}), {elapsed:.1f} s")
    assert ok


def test_2_oracle_equivalence():
    rng = np.random.default_rng(0)
    exact = 0
    for th, tw, sh, sw in itertools.product(range(1, 9), repeat=4):
        if th > sh or tw > sw:
            continue
        t = rng.standard_normal((th, tw, 2))
        s = rng.standard_normal((sh, sw, 2))
        assert np.array_equal(siamese.cross_correlate_direct(t, s), loop_correlation(t, s)), (th, tw, sh, sw)
        exact += 1
    net = Network(DEFAULT_PROFILE, seed=0)
    tpl, _ = siamese.embed(rng.standard_normal((127, 127)).astype(np.float32), net)
    srch, _ = siamese.embed(rng.standard_normal((407, 407)).astype(np.float32), net)
    fast = siamese.cross_correlate(tpl[0], srch[0], "fft")
    ref = siamese.cross_correlate_direct(tpl[0].astype(np.float64), srch[0].astype(np.float64))
    rel = float(np.max(np.abs(fast - ref)) / np.max(np.abs(ref)))
    ok = rel < 1e-4 and fast.shape == (71, 71)
    record_acceptance(2, "oracle equivalence", ok,
                      f"{exact} shapes <= 8x8 bit-exact, 407-scale FFT rel err {rel:.1e}")
    assert ok


def test_3_temporal_model(tracked):
    rng = np.random.default_rng(3)
    state = tracker.TrackerState(np.zeros((61, 61)), (30.0, 30.0), (0.0, 0.0), sigma_prior=16.0, d_max=8.0)
    centers = rng.uniform(0, 60, (50, 2))
    for c in centers:
        tracker.update_prior(state, c)
    mean = np.mean([siamese.gaussian_map((61, 61), c, 16.0).values for c in centers], axis=0)
    prior_err = float(np.max(np.abs(state.prior - mean)))
    w = [tracker.time_weight(t) for t in range(2000)]
    weights_ok = w[0] == 0 and all(b >= a for a, b in zip(w, w[1:])) and max(w) <= 0.5 \
        and abs(w[-1] - 0.5) < 1e-6 and abs(tracker.time_weight(50) - 0.5 * math.tanh(1.0)) < 1e-12
    argmax_ok = True
    for seed in range(100):
        r = np.random.default_rng(seed)
        v = np.round(r.random((25, 25)), 1)
        prev = tuple(r.uniform(-2, 26, 2))
        d = r.uniform(1, 10)
        argmax_ok &= tracker.constrained_argmax(v, prev, d) == scan_argmax(v, prev, d)
    steps = [np.linalg.norm(np.diff(np.array([res.xy for res in traj.results]), axis=0), axis=1).max()
             for traj, _ in tracked.values()]
    step_ok = max(steps) < 32.0
    ok = prior_err < 1e-6 and weights_ok and argmax_ok and step_ok
    record_acceptance(3, "temporal-model algebra", ok,
                      f"prior err {prior_err:.1e}, w_50 {tracker.time_weight(50):.6f} "
                      f"{'ok' if weights_ok else 'WRONG'}, argmax 100/100 "
                      f"{'ok' if argmax_ok else 'MISMATCH'}, max step {max(steps):.2f} px over {len(steps)} runs")
    assert ok


def test_4_learnability(artifacts):
    root, run, _ = artifacts
    tracks = train.load_split(root / "train")
    net = Network(DEFAULT_PROFILE, seed=0)
    trainer = train.Trainer(net, train.TrainConfig(search_size=191))
    batch = train.PairCropper(tracks, 127, 191, net.total_stride)([train.Pair(0, 10, 40)])
    losses = [trainer.step(batch, i) for i in range(500)]
    first = next((i for i, v in enumerate(losses) if v < 0.01 * losses[0]), None)
    summary = data.read_keyvalue(run / "summary.txt")
    minutes = float(summary["seconds"]) / 60
    ok = first is not None and minutes < 30 and int(summary["epochs"]) == 100
    record_acceptance(4, "learnability", ok,
                      f"overfit below 1% at step {first}; 100-epoch training {minutes:.1f} min "
                      f"on {os.cpu_count()} core(s), val loss {float(summary['initial_val_loss']):.3g} -> "
                      f"{float(summary['best_val_loss']):.3g}")
    assert ok


def test_5_synthetic_benchmark(tracked):
    means = {name: tracked[name, True][1].summary[0] for name in TEST_SEQUENCES}
    passing = sum(m < 1.0 for m in means.values())
    ok = passing >= 3
    record_acceptance(5, "synthetic benchmark", ok,
                      f"{passing}/4 sequences under 1.0 mm mean: "
                      + ", ".join(f"{k} {v:.3f}" for k, v in means.items()))
    assert ok


def test_6_regularizer_ablation(tracked):
    rows = []
    ok = True
    for name in TWINS:
        reg, plain = tracked[name, True][1], tracked[name, False][1]
        ok &= plain.switch_failure and not reg.switch_failure
        rows.append(f"{name} max err reg {reg.max_mm:.1f} mm / plain {plain.max_mm:.1f} mm")
    record_acceptance(6, "regularizer ablation", ok, "; ".join(rows) + " (switch above 43.2 mm)")
    assert ok


def test_7_latency(artifacts):
    root, _, net = artifacts
    seq, gt = _load_test(root, "test00")
    short = data.Sequence(seq.frames[:60], seq.spacing, seq.fps, seq.id)
    stats = evaluate.benchmark_latency(lambda: tracker.Tracker(net), short, gt[0], warmup=5, repeats=2)
    mean = min(s.mean_ms for s in stats)
    ok = mean < 50
    record_acceptance(7, "latency", ok,
                      f"{mean:.1f} ms/frame single-threaded CPU, 407 px search (published GPU figure 9.4 ms, "
                      f"not a parity claim)")
    assert ok


def test_8_determinism(artifacts, tmp_path):
    root, run, _ = artifacts
    env = dict(os.environ, OMP_NUM_THREADS="1", OPENBLAS_NUM_THREADS="1", MKL_NUM_THREADS="1")
    outs = []
    for i in range(2):
        out = tmp_path / f"run{i}.csv"
        cmd = [sys.executable, "-m", "siamtrack.cli", "track", "--ckpt", str(run / "best.ckpt"),
               "--seq", str(root / "test" / "test01"), "--out", str(out), "--deterministic"]
        subprocess.run(cmd, check=True, env=env, capture_output=True)
        outs.append(out.read_bytes())
    rows = outs[0].decode().count("\n") - 1
    ok = outs[0] == outs[1] and rows == 200
    record_acceptance(8, "determinism", ok, f"two track runs, {rows} rows, "
                      f"{'bitwise identical' if outs[0] == outs[1] else 'DIFFER'}")
    assert ok
