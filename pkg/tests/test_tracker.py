import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from siamtrack import data, siamese, synth, tracker
from siamtrack.tensor.network import DEFAULT_PROFILE, Network

from .conftest import small_scene


def scan_argmax(values, prev, d_max):
    """Exhaustive scan: max value inside the open disk, then nearest, then row-major."""
    best = None
    for r in range(values.shape[0]):
        for c in range(values.shape[1]):
            d = math.hypot(r - prev[0], c - prev[1])
            if d >= d_max:
                continue
            key = (-values[r, c], d, r, c)
            if best is None or key < best:
                best = key
    return None if best is None else (best[2], best[3])


class TestTimeWeight:
    def test_values(self):
        assert tracker.time_weight(0) == 0
        assert tracker.time_weight(50) == pytest.approx(0.38079, abs=1e-5)
        assert tracker.time_weight(50) == pytest.approx(0.5 * math.tanh(1.0), abs=1e-12)
        assert tracker.time_weight(10_000) == pytest.approx(0.5)

    @settings(max_examples=50, deadline=None)
    @given(t=st.integers(0, 500), k=st.floats(0.01, 1.0), tau=st.floats(1.0, 200.0))
    def test_monotone_and_bounded(self, t, k, tau):
        w0, w1 = tracker.time_weight(t, k, tau), tracker.time_weight(t + 1, k, tau)
        assert 0 <= w0 <= w1 <= k


class TestRegularize:
    def test_identity_at_zero_weight(self, rng):
        s = rng.standard_normal((5, 5))
        assert np.array_equal(tracker.regularize(s, rng.random((5, 5)), 0.0), s)

    def test_prior_peak_unpenalized(self):
        s = np.full((3, 3), 2.0)
        prior = np.zeros((3, 3))
        prior[1, 1] = 1.0
        assert tracker.regularize(s, prior, 0.4)[1, 1] == 2.0

    def test_uniform(self):
        np.testing.assert_array_equal(tracker.regularize(np.ones((4, 4)), np.zeros((4, 4)), 0.5), 0.5)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), w=st.floats(0, 0.5))
    def test_sign_and_magnitude(self, seed, w):
        r = np.random.default_rng(seed)
        s = r.standard_normal((6, 6))
        out = tracker.regularize(s, r.random((6, 6)), w)
        assert np.all(np.sign(out) == np.sign(s))
        assert np.all(np.abs(out) <= np.abs(s))

    def test_shape_mismatch(self):
        with pytest.raises(RuntimeError):
            tracker.regularize(np.zeros((3, 3)), np.zeros((4, 4)), 0.1)


class TestConstrainedArgmax:
    def test_global_max_inside(self, rng):
        v = rng.random((15, 15))
        idx = np.unravel_index(np.argmax(v), v.shape)
        assert tracker.constrained_argmax(v, idx, 5) == tuple(int(i) for i in idx)

    def test_inside_beats_outside_tie(self):
        v = np.zeros((11, 11))
        v[5, 7] = v[5, 10] = 1.0
        assert tracker.constrained_argmax(v, (5, 5), 3) == (5, 7)

    def test_tie_break_nearest_then_row_major(self):
        v = np.zeros((9, 9))
        v[2, 4] = v[6, 4] = v[4, 5] = 1.0
        assert tracker.constrained_argmax(v, (4, 4), 4) == (4, 5)
        v[4, 5] = 0.0
        assert tracker.constrained_argmax(v, (4, 4), 4) == (2, 4)

    def test_matches_scan_oracle_100_maps(self):
        for seed in range(100):
            r = np.random.default_rng(seed)
            v = np.round(r.random((21, 21)), 1)  # coarse values force ties
            prev = tuple(r.uniform(-2, 22, 2))
            d_max = r.uniform(1, 8)
            assert tracker.constrained_argmax(v, prev, d_max) == scan_argmax(v, prev, d_max), seed

    def test_open_disk(self):
        v = np.zeros((5, 5))
        v[0, 2] = 1.0
        assert tracker.constrained_argmax(v, (2, 2), 2.0) != (0, 2)

    def test_empty_feasible_set(self):
        assert tracker.constrained_argmax(np.zeros((5, 5)), (30, 30), 4) is None

    def test_origin_and_step(self):
        v = np.zeros((5, 5))
        v[3, 1] = 1.0
        assert tracker.constrained_argmax(v, (16.0, 12.0), 3.0, origin=(10.0, 10.0), step=2.0) == (3, 1)


class TestPrior:
    def make_state(self, shape=(31, 31)):
        return tracker.TrackerState(np.zeros(shape), (15.0, 15.0), (0.0, 0.0), sigma_prior=4.0, d_max=8.0)

    def test_first_update_is_gaussian(self):
        st_ = tracker.update_prior(self.make_state(), (12.0, 17.5))
        g = siamese.gaussian_map((31, 31), (12.0, 17.5), 4.0).values
        assert np.array_equal(st_.prior, g)
        assert st_.t == 1

    def test_fixed_point(self):
        st_ = self.make_state()
        tracker.update_prior(st_, (10.0, 10.0))
        tracker.update_prior(st_, (10.0, 10.0))
        np.testing.assert_allclose(st_.prior, siamese.gaussian_map((31, 31), (10, 10), 4.0).values, rtol=1e-15)

    def test_running_mean(self, rng):
        st_ = self.make_state()
        centers = rng.uniform(0, 30, (40, 2))
        for c in centers:
            tracker.update_prior(st_, c)
        mean = np.mean([siamese.gaussian_map((31, 31), c, 4.0).values for c in centers], axis=0)
        np.testing.assert_allclose(st_.prior, mean, atol=1e-6)
        assert st_.prior.min() >= 0 and st_.prior.max() <= 1

    def test_outside_grid(self):
        with pytest.raises(Exception):
            tracker.update_prior(self.make_state(), (80.0, 0.0))


class TestUpsample:
    def test_corner_aligned_linear(self):
        v = np.array([[0.0, 4.0], [8.0, 12.0]])
        up = tracker.upsample_bilinear(v, 4)
        assert up.shape == (5, 5)
        np.testing.assert_allclose(up[0], [0, 1, 2, 3, 4])
        np.testing.assert_allclose(up[:, 0], [0, 2, 4, 6, 8])
        np.testing.assert_allclose(up[2, 2], 6.0)

    def test_preserves_grid_values(self, rng):
        v = rng.standard_normal((7, 6))
        np.testing.assert_allclose(tracker.upsample_bilinear(v, 4)[::4, ::4], v, rtol=1e-14)


@pytest.fixture(scope="module")
def net():
    return Network(DEFAULT_PROFILE, seed=0)


class TestTracking:
    def test_static_sequence(self, net):
        spec = small_scene(n_frames=5, static=True)
        seq, anns = synth.generate(spec)
        first = anns["lm0"][0]
        traj = tracker.track_sequence(seq, (first.x, first.y), net, tracker.TrackerConfig())
        for r in traj.results:
            assert math.hypot(r.xy[0] - first.x, r.xy[1] - first.y) < 1.0

    def test_step_bound_and_first_frame_equivalence(self, net):
        seq, anns = synth.generate(small_scene(n_frames=8))
        first = anns["lm0"][0]
        reg = tracker.track_sequence(seq, (first.x, first.y), net, tracker.TrackerConfig())
        plain = tracker.track_sequence(seq, (first.x, first.y), net, tracker.TrackerConfig(regularize=False))
        assert reg.results[1].xy == plain.results[1].xy
        for traj in (reg, plain):
            pts = np.array([r.xy for r in traj.results])
            assert np.all(np.linalg.norm(np.diff(pts, axis=0), axis=1) < 32.0)

    def test_deterministic(self, net):
        seq, anns = synth.generate(small_scene(n_frames=4))
        first = anns["lm0"][0]
        a = tracker.track_sequence(seq, (first.x, first.y), net)
        b = tracker.track_sequence(seq, (first.x, first.y), net)
        assert [r.xy for r in a.results] == [r.xy for r in b.results]
        assert [r.score for r in a.results[1:]] == [r.score for r in b.results[1:]]

    def test_too_short(self, net):
        seq, _ = synth.generate(small_scene(n_frames=1))
        with pytest.raises(Exception, match="at least 2"):
            tracker.track_sequence(seq, (48, 48), net)

    def test_clamped_window_can_lose_target(self, net):
        # 420 px wide image: a 407 window around a landmark near the edge is shifted inside
        frames = np.random.default_rng(0).integers(0, 255, (3, 420, 420)).astype(np.uint8)
        seq = data.Sequence(frames, (0.27, 0.27), 20.0, "wide")
        t = tracker.Tracker(net, tracker.TrackerConfig())
        t.start(frames[0], (5.0, 210.0))
        assert t.search_offset == (0, 7)
        result = t.step(frames[1], 1)
        assert result.lost and result.xy == (5.0, 210.0)
        assert len(seq) == 3

    def test_csv_round_trip(self, tmp_path, net):
        seq, anns = synth.generate(small_scene(n_frames=3))
        first = anns["lm0"][0]
        traj = tracker.track_sequence(seq, (first.x, first.y), net)
        path = tmp_path / "t.csv"
        tracker.write_trajectory(path, traj)
        assert path.read_text().splitlines()[0] == "frame,x_px,y_px,x_mm,y_mm,score,latency_ms,lost_flag"
        back = tracker.read_trajectory(path)
        assert back.positions() == traj.positions()
