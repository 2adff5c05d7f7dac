import math

import numpy as np
import pytest

from siamtrack import evaluate, synth, tracker
from siamtrack.errors import DataError, UsageError
from siamtrack.tensor.network import DEFAULT_PROFILE, Network

from .conftest import small_scene


def trajectory(n, rng):
    return {f: tuple(rng.uniform(0, 200, 2)) for f in range(n)}


class TestErrors:
    def test_identical_is_zero(self, rng):
        t = trajectory(10, rng)
        frames, err = evaluate.euclidean_errors(t, t)
        assert frames == list(range(1, 10)) and np.all(err == 0)

    def test_three_four_five(self):
        gt = {f: (10.0 + f, 20.0) for f in range(5)}
        pred = {f: (x + 3, y + 4) for f, (x, y) in gt.items()}
        _, err = evaluate.euclidean_errors(pred, gt)
        np.testing.assert_allclose(err, 1.35, rtol=1e-12)

    def test_matches_direct_oracle(self, rng):
        p, g = trajectory(50, rng), trajectory(50, rng)
        _, err = evaluate.euclidean_errors(p, g, (0.3, 0.2), skip=())
        direct = [math.sqrt(((p[f][0] - g[f][0]) * 0.3) ** 2 + ((p[f][1] - g[f][1]) * 0.2) ** 2) for f in range(50)]
        np.testing.assert_allclose(err, direct, rtol=1e-12)

    def test_missing_frames_listed(self, rng):
        g = trajectory(6, rng)
        p = {f: g[f] for f in (0, 1, 2, 5)}
        with pytest.raises(UsageError, match="3, 4"):
            evaluate.euclidean_errors(p, g)


class TestAggregate:
    def test_constant(self):
        assert evaluate.aggregate([2.5] * 7) == (2.5, 0.0, 2.5)

    def test_p95_of_one_to_hundred(self):
        assert evaluate.aggregate(np.arange(1, 101))[2] == pytest.approx(95.05, abs=1e-12)

    def test_two_pass_reference(self, rng):
        x = rng.gamma(2.0, 1.5, 1000)
        mean = sum(x) / len(x)
        var = sum((v - mean) ** 2 for v in x) / len(x)
        m, s, _ = evaluate.aggregate(x)
        assert m == pytest.approx(mean, abs=1e-12) and s == pytest.approx(math.sqrt(var), abs=1e-12)

    def test_permutation_invariant(self, rng):
        x = rng.random(101)
        a, b = evaluate.aggregate(x), evaluate.aggregate(rng.permutation(x))
        np.testing.assert_allclose(a, b, rtol=1e-14)

    def test_empty(self):
        with pytest.raises(UsageError):
            evaluate.aggregate([])


class TestReport:
    def make(self, rng, errors=None):
        e = rng.random(9) if errors is None else np.asarray(errors)
        return evaluate.TrackingReport("seq", "lm0", e, rng.random(e.size) * 10)

    def test_switch_flag(self, rng):
        assert not self.make(rng, [1.0, 43.2]).switch_failure
        assert self.make(rng, [1.0, 43.21]).switch_failure

    def test_round_trip_lossless(self, tmp_path, rng):
        reports = [self.make(rng), self.make(rng, [0.1, 50.0, 1e-17])]
        evaluate.write_report(tmp_path / "r.csv", reports)
        back = evaluate.read_report(tmp_path / "r.csv")
        for a, b in zip(reports, back):
            assert (a.sequence, a.landmark) == (b.sequence, b.landmark)
            assert np.array_equal(a.errors_mm, b.errors_mm) and np.array_equal(a.latency_ms, b.latency_ms)
            assert a.summary == b.summary and a.switch_failure == b.switch_failure

    def test_aggregates_recomputable(self, tmp_path, rng):
        evaluate.write_report(tmp_path / "r.csv", [self.make(rng)])
        import csv
        row = next(csv.DictReader((tmp_path / "r.csv").open()))
        series = [float(v) for v in row["errors_mm"].split(";")]
        assert evaluate.aggregate(series) == (float(row["mean_mm"]), float(row["std_mm"]), float(row["p95_mm"]))

    def test_not_a_report(self, tmp_path):
        (tmp_path / "x.csv").write_text("a,b\n1,2\n")
        with pytest.raises(DataError):
            evaluate.read_report(tmp_path / "x.csv")

    def test_summary_table(self, rng):
        text = evaluate.summary_table([self.make(rng, [1.0, 2.0, 3.0])])
        assert evaluate.REPORT_NOTE in text and "2.000" in text


@pytest.fixture(scope="module")
def net():
    return Network(DEFAULT_PROFILE, seed=0)


class TestTrackingReport:
    def test_frame_count_is_length_minus_one(self, net):
        seq, truth = synth.generate(small_scene(n_frames=5))
        gt = {a.frame: a.xy for a in truth["lm0"]}
        traj = tracker.track_sequence(seq, gt[0], net)
        rep = evaluate.evaluate_trajectory(traj, gt, "small")
        assert rep.n_frames == rep.latency.n_frames == len(seq) - 1


class TestLatency:
    def test_repeats_are_stable(self, net):
        seq, truth = synth.generate(small_scene(n_frames=8))
        xy = truth["lm0"][0].xy
        stats = evaluate.benchmark_latency(lambda: tracker.Tracker(net), seq, xy, warmup=3, repeats=2)
        assert [s.n_frames for s in stats] == [7, 7]
        a, b = stats[0].median_ms, stats[1].median_ms
        assert abs(a - b) / min(a, b) < 0.2

    def test_sub_linear_in_search_area(self, net):
        seq, truth = synth.generate(small_scene(n_frames=25))
        xy = truth["lm0"][0].xy
        med = {203: math.inf, 407: math.inf}
        # interleaved blocks so machine-load drift hits both sizes alike
        for _ in range(6):
            for size in med:
                cfg = tracker.TrackerConfig(search_size=size)
                stats = evaluate.benchmark_latency(lambda: tracker.Tracker(net, cfg), seq, xy, warmup=3, repeats=1)
                med[size] = min(med[size], stats[0].median_ms)
        ratio = med[407] / med[203]
        assert ratio < (407 / 203) ** 2, (
            f"407/203 latency ratio {ratio:.2f} vs area ratio {(407 / 203) ** 2:.2f} "
            f"({med[203]:.1f} ms -> {med[407]:.1f} ms)")

    def test_warmup_must_be_positive(self, net):
        seq, _ = synth.generate(small_scene(n_frames=3))
        with pytest.raises(UsageError):
            evaluate.benchmark_latency(lambda: tracker.Tracker(net), seq, (48, 48), warmup=0)
