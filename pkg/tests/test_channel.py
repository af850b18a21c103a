import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wisense.channel import (SPEED_OF_LIGHT, CsiStream, DegenerateGeometryError, PathSpec,
                             ReceiverSpec, Scene, arrival_angle, cancel_phase_error,
                             ground_truth_paths, noiseless_csi, path_csi, synthesize_csi)


def one_rx_scene(**kw):
    base = dict(tx_pos=(0.0, 0.0), rx=(ReceiverSpec((6.0, 0.0), np.pi / 2, 0),), user_pos=(3.0, 4.0))
    base.update(kw)
    return Scene(**base)


class TestScene:
    def test_frequencies_span_band(self):
        sc = one_rx_scene()
        f = sc.frequencies
        assert f[0] == pytest.approx(5.805e9 - 40e6)
        assert f[-1] == pytest.approx(5.805e9 + 40e6)
        assert np.allclose(np.diff(f), sc.subcarrier_spacing)

    def test_default_spacing_half_wavelength(self):
        sc = one_rx_scene()
        assert sc.antenna_spacing == pytest.approx(SPEED_OF_LIGHT / 5.805e9 / 2)

    @pytest.mark.parametrize("kw", [dict(n_subcarriers=1), dict(n_antennas=1), dict(antenna_spacing=-1.0),
                                    dict(bandwidth=0.0), dict(rx=())])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            one_rx_scene(**kw)

    def test_duplicate_ids(self):
        with pytest.raises(ValueError):
            one_rx_scene(rx=(ReceiverSpec((1, 0), 0, 0), ReceiverSpec((2, 0), 0, 0)))


class TestGroundTruth:
    def test_user_at_broadside(self):
        # receiver faces +y, user straight ahead
        sc = Scene((-5.0, 0.0), (ReceiverSpec((0.0, 0.0), np.pi / 2, 0),), (0.0, 3.0))
        user = [p for p in ground_truth_paths(sc)[0] if p.kind == "user_reflection"]
        assert len(user) == 1
        assert user[0].aoa == pytest.approx(0.0, abs=1e-12)

    def test_user_tof_by_hand(self):
        # distances 5 (tx->user) and 5 (user->rx)
        paths = ground_truth_paths(one_rx_scene())[0]
        user = next(p for p in paths if p.kind == "user_reflection")
        assert user.tof == pytest.approx(10.0 / SPEED_OF_LIGHT, rel=1e-14)

    def test_direct_tof(self):
        sc = Scene((0.0, 0.0), (ReceiverSpec((10.0, 0.0), 0.0, 0),), (5.0, 5.0))
        direct = next(p for p in ground_truth_paths(sc)[0] if p.kind == "direct")
        assert direct.tof == pytest.approx(10.0 / SPEED_OF_LIGHT, rel=1e-14)

    def test_collocated_user(self):
        with pytest.raises(DegenerateGeometryError):
            ground_truth_paths(one_rx_scene(user_pos=(6.0, 0.0)))

    def test_exactly_one_user_path(self):
        sc = one_rx_scene(reflectors=((1.0, -2.0),))
        paths = ground_truth_paths(sc, seed=3)[0]
        assert [p.kind for p in paths].count("user_reflection") == 1
        assert len(paths) == 3

    def test_user_phase_shared(self):
        sc = Scene((0.0, 0.0), (ReceiverSpec((6.0, 0.0), 0, 0), ReceiverSpec((0.0, 6.0), 0, 1)), (3.0, 3.0))
        gt = ground_truth_paths(sc, seed=11)
        ph = [np.angle(next(p for p in gt[q] if p.kind == "user_reflection").attenuation) for q in (0, 1)]
        assert ph[0] == pytest.approx(ph[1])

    def test_arrival_angle_folds_backside(self):
        rx = ReceiverSpec((0.0, 0.0), 0.0, 0)
        assert arrival_angle((-1.0, 1.0), rx) == pytest.approx(np.pi / 4)

    def test_pathspec_validation(self):
        with pytest.raises(ValueError):
            PathSpec(2.0, 0.0, 1.0, "direct")
        with pytest.raises(ValueError):
            PathSpec(0.0, -1.0, 1.0, "direct")
        with pytest.raises(ValueError):
            PathSpec(0.0, 0.0, 1.0, "ghost")


class TestSynthesis:
    def test_trivial_single_path(self):
        sc = one_rx_scene()
        st_ = synthesize_csi(sc, {0: [PathSpec(0.0, 0.0, 1.0, "user_reflection")]}, 0.0, "none", U=2)
        assert np.array_equal(st_[0].frames, np.ones((2, 3, 256)))

    def test_antenna_ratio_30deg(self):
        sc = one_rx_scene()
        st_ = synthesize_csi(sc, {0: [PathSpec(np.deg2rad(30), 0.0, 1.0, "user_reflection")]}, 0.0, "none", U=1)
        H = st_[0].frames[0]
        expect = np.exp(-2j * np.pi * sc.frequencies * sc.antenna_spacing * 0.5 / SPEED_OF_LIGHT)
        assert np.allclose(H[1] / H[0], expect, atol=1e-12)

    def test_symmetric_pair_reference_antenna(self):
        sc = one_rx_scene()
        th = np.deg2rad(25)
        paths = [PathSpec(th, 2e-8, 0.7, "direct"), PathSpec(-th, 2e-8, 0.7, "user_reflection")]
        H = noiseless_csi(sc, paths)
        assert np.allclose(np.abs(H[0]), 1.4, atol=1e-12)

    def test_linearity(self):
        sc = one_rx_scene()
        gt = ground_truth_paths(sc, seed=1)[0]
        total = noiseless_csi(sc, gt)
        parts = sum(path_csi(sc.frequencies, sc.n_antennas, sc.antenna_spacing, p.aoa, p.tof, p.attenuation)
                    for p in gt)
        assert np.allclose(total, parts, atol=1e-14)

    def test_noise_power(self):
        sc = one_rx_scene(n_subcarriers=64)
        gt = ground_truth_paths(sc, seed=0)
        sigma2 = 0.03
        st_ = synthesize_csi(sc, gt, sigma2, U=100, seed=5)[0]
        clean = noiseless_csi(sc, gt[0]) * np.exp(-1j * st_.phase_error)[:, None, None]
        emp = np.mean(np.abs(st_.frames - clean) ** 2)
        assert st_.frames.size >= 1e4
        assert abs(emp / sigma2 - 1) < 0.05

    def test_magnitude_invariant_to_phase_error(self):
        sc = one_rx_scene()
        gt = ground_truth_paths(sc, seed=2)
        a = synthesize_csi(sc, gt, 0.0, "uniform", U=4, seed=1)[0]
        b = synthesize_csi(sc, gt, 0.0, "none", U=4, seed=1)[0]
        assert np.allclose(np.abs(a.frames), np.abs(b.frames), atol=1e-14)

    def test_seed_determinism(self):
        sc = one_rx_scene()
        gt = ground_truth_paths(sc, seed=2)
        a = synthesize_csi(sc, gt, 0.1, U=5, seed=9)[0]
        b = synthesize_csi(sc, gt, 0.1, U=5, seed=9)[0]
        assert a.frames.tobytes() == b.frames.tobytes()
        c = synthesize_csi(sc, gt, 0.1, U=5, seed=10)[0]
        assert not np.array_equal(a.frames, c.frames)

    def test_cancel_phase_error(self):
        sc = one_rx_scene()
        gt = ground_truth_paths(sc, seed=2)
        a = cancel_phase_error(synthesize_csi(sc, gt, 0.0, "uniform", U=3, seed=1)[0])
        assert np.allclose(a.frames, noiseless_csi(sc, gt[0])[None], atol=1e-13)

    def test_preconditions(self):
        sc = one_rx_scene()
        gt = ground_truth_paths(sc)
        with pytest.raises(ValueError):
            synthesize_csi(sc, gt, -1.0)
        with pytest.raises(ValueError):
            synthesize_csi(sc, gt, 0.0, U=0)
        with pytest.raises(ValueError):
            synthesize_csi(sc, gt, 0.0, phase_error=np.zeros(3), U=4)
        with pytest.raises(ValueError):
            CsiStream(np.zeros((0, 3, 4)), np.zeros(0), 0, np.zeros(0), 0.0)


@settings(max_examples=30, deadline=None)
@given(eps=st.floats(0, 2 * np.pi), th=st.floats(-1.5, 1.5), tau=st.floats(0, 2e-7))
def test_global_phase_keeps_magnitude(eps, th, tau):
    sc = one_rx_scene(n_subcarriers=16)
    p = {0: [PathSpec(th, tau, 0.5, "user_reflection"), PathSpec(0.1, 1e-8, 1.0, "direct")]}
    a = synthesize_csi(sc, p, 0.0, np.array([eps]), U=1)[0].frames
    b = synthesize_csi(sc, p, 0.0, "none", U=1)[0].frames
    assert np.allclose(np.abs(a), np.abs(b), atol=1e-12)
