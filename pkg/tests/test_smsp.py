from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wisense.channel import (CsiStream, ReceiverSpec, Scene, ground_truth_paths, noise_var_for_snr,
                             path_csi, synthesize_csi)
from wisense.smsp import (MIN_LINK_DISTANCE, FeatureMatrix, LinkScores, SmspConfig, UnderdeterminedError,
                          UserLocation, beam_power_series, beam_weights, build_feature_matrix, coherence_ratio,
                          large_scale_scores, link_distance, localize_user, perceive, rotate_csi,
                          rotation_factor, small_scale_scores, user_component_energy)
from wisense.spectral import EstimationGrid, PathEstimate

from conftest import make_default_scene


def scene_with_links(rx_pos, user=(0.0, 0.0), tx=(-10.0, 0.0)):
    rx = tuple(ReceiverSpec(p, 0.0, i) for i, p in enumerate(rx_pos))
    return Scene(tx, rx, user)


def user_only(scene, q, truth):
    u = next(p for p in truth[q] if p.kind == "user_reflection")
    return u, path_csi(scene.frequencies, scene.n_antennas, scene.antenna_spacing, u.aoa, u.tof, u.attenuation)


class TestLinkDistance:
    def test_axis_line(self):
        assert link_distance((3.0, 2.0), (0.0, 0.0), (10.0, 0.0)) == pytest.approx(2.0)

    def test_diagonal(self):
        # line y = x, point (0, 2) -> sqrt(2)
        assert link_distance((0.0, 2.0), (0.0, 0.0), (1.0, 1.0)) == pytest.approx(np.sqrt(2))

    def test_beyond_segment_uses_line(self):
        assert link_distance((20.0, 1.0), (0.0, 0.0), (10.0, 0.0)) == pytest.approx(1.0)


class TestLargeScale:
    def test_single_receiver(self):
        sc = scene_with_links([(10.0, 3.0)])
        assert np.array_equal(large_scale_scores(UserLocation((0.0, 0.0), 0.0), sc), [1.0])

    def test_distances_1_2_4(self):
        # tx at the origin, user at (10, 0): a link at angle phi passes 10 |sin phi| from the user
        rx = tuple(ReceiverSpec((20 * np.cos(a), 20 * np.sin(a)), 0.0, i)
                   for i, a in enumerate(np.arcsin([0.1, 0.2, 0.4])))
        sc = Scene((0.0, 0.0), rx, (10.0, 0.0))
        s1 = large_scale_scores(UserLocation((10.0, 0.0), 0.0), sc)
        assert np.allclose(s1, [1.0, 0.5, 0.25], rtol=0, atol=1e-12)

    def test_user_on_link_is_clamped(self):
        rx = (ReceiverSpec((20.0, 0.0), 0.0, 0), ReceiverSpec((20.0, 20 * np.tan(np.arcsin(0.1))), 0.0, 1))
        sc = Scene((0.0, 0.0), rx, (10.0, 0.0))
        s1 = large_scale_scores(UserLocation((10.0, 0.0), 0.0), sc)
        assert s1[0] == 1.0
        assert s1[1] == pytest.approx(MIN_LINK_DISTANCE / 1.0, rel=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.floats(-20, 20), st.floats(-20, 20)), min_size=2, max_size=6),
           st.tuples(st.floats(-5, 5), st.floats(-5, 5)), st.randoms(use_true_random=False))
    def test_closest_link_scores_one_and_permutes(self, rx_pos, user, rnd):
        tx = (-30.0, 0.0)
        rx = tuple(ReceiverSpec(p, 0.0, i) for i, p in enumerate(rx_pos))
        sc = Scene(tx, rx, user)
        loc = UserLocation(user, 0.0)
        s1 = large_scale_scores(loc, sc)
        d = [link_distance(user, tx, p) for p in rx_pos]
        assert s1[int(np.argmin(d))] == 1.0
        assert np.all((s1 > 0) & (s1 <= 1))
        perm = list(range(len(rx)))
        rnd.shuffle(perm)
        sc2 = Scene(tx, tuple(ReceiverSpec(rx_pos[i], 0.0, k) for k, i in enumerate(perm)), user)
        assert np.array_equal(large_scale_scores(loc, sc2), s1[perm])


class TestBeamPower:
    def test_coherent_single_path(self):
        sc = make_default_scene()
        th = 0.3
        H = path_csi(sc.frequencies, 3, sc.antenna_spacing, th, 0.0, 1.0)
        s = CsiStream(H[None], np.zeros(1), 0, np.zeros(1), 0.0)
        assert beam_power_series(s, th, sc)[0] == pytest.approx((3 * 256) ** 2, rel=1e-12)

    def test_zero_csi(self):
        sc = make_default_scene()
        s = CsiStream(np.zeros((4, 3, 256), complex), np.arange(4.0), 0, np.zeros(4), 0.0)
        assert np.array_equal(beam_power_series(s, 0.2, sc), np.zeros(4))

    def test_broadside_is_plain_sum(self):
        sc = make_default_scene()
        rng = np.random.default_rng(0)
        H = rng.normal(size=(2, 3, 256)) + 1j * rng.normal(size=(2, 3, 256))
        assert np.array_equal(beam_weights(0.0, sc), np.ones((3, 256)))
        s = CsiStream(H, np.arange(2.0), 0, np.zeros(2), 0.0)
        assert np.allclose(beam_power_series(s, 0.0, sc), np.abs(H.sum((1, 2))) ** 2, rtol=1e-12)


class TestSmallScale:
    def test_two_samples(self):
        assert small_scale_scores([[1.0, 3.0]])[0] == 1.0
        assert np.var([1.0, 3.0], ddof=1) == 2.0

    def test_variance_ratio(self):
        # unbiased variances 2, 4, 8
        series = [np.array([1.0, 3.0]), np.array([0.0, 2 * np.sqrt(2)]), np.array([0.0, 4.0])]
        assert np.allclose(small_scale_scores(series), [0.25, 0.5, 1.0], atol=1e-15)

    def test_constant_gives_zeros(self):
        assert np.array_equal(small_scale_scores([np.ones(5), 2 * np.ones(5)]), [0.0, 0.0])

    def test_too_short(self):
        with pytest.raises(ValueError):
            small_scale_scores([np.ones(1)])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 5), st.integers(2, 8), st.floats(0.01, 100), st.integers(0, 2 ** 16))
    def test_scale_invariance_and_max(self, Q, U, c, seed):
        P = [np.random.default_rng(seed + q).exponential(size=U) for q in range(Q)]
        s2 = small_scale_scores(P)
        assert s2.max() == 1.0
        # scaling CSI by c scales power by c^2
        assert np.allclose(small_scale_scores([c ** 2 * p for p in P]), s2, rtol=1e-12)


class TestRotation:
    def test_real_positive_after_rotation(self):
        sc = make_default_scene()
        th, tau = np.deg2rad(-17), 31e-9
        H = path_csi(sc.frequencies, 3, sc.antenna_spacing, th, tau, 0.8)
        R = rotate_csi(H, th, tau, sc)
        assert np.allclose(R.imag, 0, atol=1e-9)
        assert np.all(R.real > 0)
        assert np.allclose(np.angle(R), 0, atol=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-1.5, 1.5), st.floats(0, 2e-7), st.integers(0, 1000))
    def test_magnitude_preserved(self, th, tau, seed):
        sc = make_default_scene()
        rng = np.random.default_rng(seed)
        H = rng.normal(size=(3, 256)) + 1j * rng.normal(size=(3, 256))
        assert np.allclose(np.abs(rotate_csi(H, th, tau, sc)), np.abs(H), rtol=1e-13)
        assert np.allclose(np.abs(rotation_factor(th, tau, sc)), 1.0, rtol=1e-14)

    def test_two_receiver_constructive_sum(self):
        sc = make_default_scene()
        truth = ground_truth_paths(sc, seed=4)
        Z = []
        for q in (0, 1):
            u, H = user_only(sc, q, truth)
            Z.append(rotate_csi(H, u.aoa, u.tof, sc))
        total = np.abs(Z[0] + Z[1])
        assert np.allclose(total, np.abs(Z[0]) + np.abs(Z[1]), atol=1e-6)

    def test_stack_rotation(self):
        sc = make_default_scene()
        H = np.ones((4, 3, 256), complex)
        R = rotate_csi(H, 0.1, 1e-8, sc)
        assert R.shape == (4, 3, 256)
        assert np.array_equal(R[2], rotation_factor(0.1, 1e-8, sc))


class TestFeatureMatrix:
    def test_single_receiver(self):
        H = np.array([[1j, -1.0], [1.0, 2 + 2j]])
        fm = build_feature_matrix([H], LinkScores(np.array([1.0]), np.array([1.0])))
        assert np.array_equal(fm.h_ph, 2 * np.angle(H))
        assert np.array_equal(fm.h_am, 2 * np.abs(H))

    def test_zero_frames(self):
        fm = build_feature_matrix([np.zeros((3, 4), complex)] * 2, LinkScores(np.ones(2), np.ones(2)))
        assert np.array_equal(fm.h_am, np.zeros((3, 4)))

    def test_two_receiver_fixture(self):
        A = np.array([[1.0, 1j], [-1.0, -1j]])
        B = np.array([[2j, 2.0], [1 + 1j, 3.0]])
        fm = build_feature_matrix([A, B], LinkScores(np.array([1.0, 0.5]), np.array([0.0, 0.5])))
        half_pi = np.pi / 2
        assert np.array_equal(fm.h_ph, np.array([[0 + half_pi, half_pi + 0], [np.pi + np.pi / 4, -half_pi + 0]]))
        assert np.allclose(fm.h_am, np.array([[3.0, 3.0], [1 + np.sqrt(2), 4.0]]), rtol=0, atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            build_feature_matrix([np.zeros((2, 2)), np.zeros((2, 3))], LinkScores(np.ones(2), np.ones(2)))
        with pytest.raises(ValueError):
            build_feature_matrix([np.zeros((2, 2))], LinkScores(np.ones(2), np.ones(2)))
        with pytest.raises(ValueError):
            FeatureMatrix(np.zeros((2, 2)), np.zeros((3, 2)))


class TestLocalization:
    def test_noiseless(self, default_scene):
        truth = ground_truth_paths(default_scene, seed=0)
        res = perceive(synthesize_csi(default_scene, truth, 0.0, seed=0), default_scene)
        err = np.hypot(res.location.pos[0] - 3.0, res.location.pos[1] - 4.0)
        assert err < 0.1
        assert res.location.residual >= 0
        for q, (th, tau) in res.location.user_paths.items():
            u = next(p for p in truth[q] if p.kind == "user_reflection")
            assert abs(th - u.aoa) < np.deg2rad(1) and abs(tau - u.tof) < 2e-9

    def test_parallel_bearings(self):
        # both receivers see the peak straight ahead along parallel lines
        rx = (ReceiverSpec((0.0, 0.0), np.pi / 2, 0), ReceiverSpec((5.0, 0.0), np.pi / 2, 1))
        sc = Scene((2.5, -10.0), rx, (2.5, 5.0), include_direct=False)
        grid = EstimationGrid()
        est = {q: PathEstimate([(0.0, 3e-8, 1.0)], grid, 1) for q in (0, 1)}
        with pytest.raises(UnderdeterminedError):
            localize_user(est, sc)

    def test_single_receiver(self, default_scene):
        est = {0: PathEstimate([(0.1, 3e-8, 1.0)], EstimationGrid(), 1)}
        with pytest.raises(UnderdeterminedError):
            localize_user(est, default_scene)

    def test_exact_peaks_recover_position(self, default_scene):
        truth = ground_truth_paths(default_scene)
        est = {q: PathEstimate([(p.aoa, p.tof, 1.0) for p in ps], EstimationGrid(), len(ps))
               for q, ps in truth.items()}
        loc = localize_user(est, default_scene)
        assert np.hypot(loc.pos[0] - 3, loc.pos[1] - 4) < 1e-3
        assert loc.residual < 1e-3


class TestPerceive:
    def test_outputs(self, default_scene):
        truth = ground_truth_paths(default_scene, seed=1)
        nv = {q: noise_var_for_snr(default_scene, v, 20) for q, v in truth.items()}
        res = perceive(synthesize_csi(default_scene, truth, nv, U=6, seed=1), default_scene)
        assert len(res.features) == 6
        assert res.features[0].h_ph.shape == (3, 256)
        assert all(np.all(f.h_am >= 0) for f in res.features)
        assert res.scores.s1.max() == 1.0 and res.scores.s2.max() == 1.0
        assert set(res.rotation_params) == {0, 1, 2}

    def test_common_gain_leaves_scores(self, default_scene):
        truth = ground_truth_paths(default_scene, seed=2)
        nv = {q: noise_var_for_snr(default_scene, v, 25) for q, v in truth.items()}
        streams = synthesize_csi(default_scene, truth, nv, U=8, seed=2)
        scaled = {q: replace(s, frames=3.5 * s.frames) for q, s in streams.items()}
        a, b = perceive(streams, default_scene), perceive(scaled, default_scene)
        assert np.allclose(a.scores.s1, b.scores.s1, atol=1e-6)
        assert np.allclose(a.scores.s2, b.scores.s2, rtol=1e-9)

    def test_ground_truth_rotation_is_coherent(self, default_scene):
        truth = ground_truth_paths(default_scene, seed=5)
        res = perceive(synthesize_csi(default_scene, truth, 0.0, U=4, seed=5), default_scene,
                       SmspConfig(ground_truth=True))
        Z = [rotate_csi(user_only(default_scene, q, truth)[1], *res.rotation_params[q], default_scene)
             for q in (0, 1, 2)]
        assert coherence_ratio(Z) >= 0.999


def test_coherence_ratio_trivial():
    assert coherence_ratio([np.ones(3), np.ones(3)]) == 1.0
    assert coherence_ratio([np.ones(3), -np.ones(3)]) == 0.0
    assert coherence_ratio([np.zeros(3)]) == 1.0


@pytest.mark.slow
@pytest.mark.parametrize("snr", [10, 20, 30])
def test_rotation_raises_user_energy(default_scene, snr):
    sc = default_scene
    on, off = [], []
    for seed in range(20):
        truth = ground_truth_paths(sc, seed=seed)
        nv = {q: noise_var_for_snr(sc, v, snr) for q, v in truth.items()}
        res = perceive(synthesize_csi(sc, truth, nv, seed=seed), sc)
        H = [user_only(sc, q, truth)[1] for q in (0, 1, 2)]
        rot = [rotation_factor(*res.rotation_params[q], sc) for q in (0, 1, 2)]
        on.append(user_component_energy(H, res.scores.weights, rot))
        off.append(user_component_energy(H, res.scores.weights))
    assert np.mean(on) > np.mean(off)
