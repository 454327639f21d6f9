import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from asndiar.interp import fractional_delay_taps, interpolate, sinc_kernel
from asndiar.ism import image_source_rir, sabine_reflection
from asndiar.pairs import cyclic_residuals, delays_from_tdoa, mic_pairs
from asndiar.scene import (SceneConfig, apply_sto_sro, ground_truth_tdoa,
                           load_wav, random_meeting, save_wav,
                           simulate_scene)
from asndiar.wav import read_wav, write_wav

from _util import FROZEN, bandlimited_noise

points = st.lists(st.floats(-5, 5, allow_nan=False), min_size=3, max_size=3)


class TestInterp:
    def test_kernel_is_cardinal(self):
        x = np.arange(-20, 21)
        k = sinc_kernel(x)
        assert k[20] == 1.0
        np.testing.assert_allclose(np.delete(k, 20), 0.0, atol=1e-15)

    def test_integer_positions_reproduce_samples(self):
        x = np.random.default_rng(0).standard_normal(200)
        np.testing.assert_allclose(interpolate(x, np.arange(200.0)), x,
                                   atol=1e-12)

    def test_out_of_range_is_zero(self):
        y = interpolate(np.ones(50), [-0.5, 49.5, 1e4])
        np.testing.assert_array_equal(y, 0.0)

    def test_fractional_shift_of_bandlimited_signal(self):
        x = bandlimited_noise(4000, seed=1)
        n = np.arange(4000)
        y = interpolate(x, n + 0.5)
        z = interpolate(y, n - 0.5)
        inner = slice(100, -100)
        assert np.max(np.abs(z[inner] - x[inner])) < 1e-3 * np.max(np.abs(x))


class TestIsm:
    def test_sabine_oracle(self):
        o = FROZEN['sabine']
        assert sabine_reflection(o['room_dims'], o['t60']) == pytest.approx(
            o['beta'], rel=1e-12)

    def test_too_short_t60_rejected(self):
        with pytest.raises(ValueError):
            sabine_reflection([6, 5, 3], 0.01)

    def test_direct_path_delay_and_gain(self):
        o = FROZEN['ism_direct']
        h = image_source_rir(o['src'], o['mic'], o['fs'], o['c'])
        n = np.arange(len(h))
        assert np.sum(h) == pytest.approx(o['gain'], rel=1e-3)
        assert np.sum(n * h) / np.sum(h) == pytest.approx(o['delay'],
                                                          abs=1e-2)

    def test_reverberant_rir_starts_with_direct_path(self):
        o = FROZEN['ism_direct']
        h0 = image_source_rir(o['src'], o['mic'], o['fs'], o['c'])
        h = image_source_rir(o['src'], o['mic'], o['fs'], o['c'],
                             room_dims=[6, 5, 3], t60=0.3)
        assert len(h) > len(h0)
        peak = int(np.argmax(np.abs(h)))
        assert abs(peak - o['delay']) <= 1
        tail = np.sum(h[int(o['delay']) + 40:] ** 2)
        assert tail > 0

    def test_coincident_source_rejected(self):
        with pytest.raises(ValueError):
            image_source_rir([1, 1, 1], [1, 1, 1], 16000)


class TestGroundTruthTdoa:
    def test_hand_example(self):
        o = FROZEN['tdoa_hand']
        tau = ground_truth_tdoa(o['src'], o['mics'], o['fs'], o['c'])
        assert tau == pytest.approx([o['tau']], rel=1e-12)
        assert o['tau'] == pytest.approx(-46.65, abs=5e-3)

    def test_equidistant_source(self):
        mics = [[1, 0, 0], [0, 1, 0], [-1, 0, 0], [0, -1, 0]]
        np.testing.assert_allclose(
            ground_truth_tdoa([0, 0, 2], mics, 16000), 0, atol=1e-12)

    def test_pair_order(self):
        assert mic_pairs(4) == ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3),
                                (2, 3))

    def test_coincident_source_rejected(self):
        with pytest.raises(ValueError):
            ground_truth_tdoa([0, 0, 0], [[0, 0, 0], [1, 0, 0]], 16000)

    def test_invalid_constants_rejected(self):
        with pytest.raises(ValueError):
            ground_truth_tdoa([2, 0, 0], [[0, 0, 0], [1, 0, 0]], 16000, c=0)

    @settings(max_examples=200, deadline=None)
    @given(src=points, mics=st.lists(points, min_size=3, max_size=7))
    def test_cyclic_consistency(self, src, mics):
        src = np.asarray(src)
        mics = np.asarray(mics)
        if np.min(np.linalg.norm(mics - src, axis=1)) < 1e-3:
            return
        tau = ground_truth_tdoa(src, mics, 16000)
        res = cyclic_residuals(tau)
        scale = max(np.max(np.abs(tau)), 1.0)
        assert np.all(np.abs(res) <= 1e-9 * scale)

    def test_delays_from_tdoa(self):
        mics = np.random.default_rng(0).uniform(0, 2, (5, 3))
        tau = ground_truth_tdoa([3, 3, 1], mics, 16000)
        d = delays_from_tdoa(tau)
        dist = np.linalg.norm(mics - [3, 3, 1], axis=1) * 16000 / 343
        np.testing.assert_allclose(d, dist - dist[0], atol=1e-9)


class TestApplyStoSro:
    def test_identity(self):
        x = bandlimited_noise(3000, seed=2)
        np.testing.assert_allclose(apply_sto_sro(x, 0, 0.0), x, atol=1e-12)

    def test_integer_advance(self):
        x = np.random.default_rng(3).standard_normal(1000)
        y = apply_sto_sro(x, 100, 0.0)
        np.testing.assert_array_equal(y[:900], x[100:])
        np.testing.assert_array_equal(y[900:], 0)

    def test_drift_accumulates(self):
        o = FROZEN['sro_drift']
        n = int(o['seconds'] * o['fs'])
        f = 1e-3  # cycles per sample
        x = np.sin(2 * np.pi * f * np.arange(n + 200))
        y = apply_sto_sro(x, 0, o['ppm'])
        # near the end the output lags the input clock by the drift
        end = np.arange(n - 400, n)
        expected = np.sin(2 * np.pi * f * (end + o['drift']))
        assert np.max(np.abs(y[end] - expected)) < 1e-3
        assert np.max(np.abs(y[end] - x[end])) > 0.1

    def test_rejects_large_sro(self):
        with pytest.raises(ValueError):
            apply_sto_sro(np.zeros(10), 0, 1000)

    @settings(max_examples=25, deadline=None)
    @given(sto=st.floats(-200, 200), ppm=st.floats(-100, 100))
    def test_inverse_composition(self, sto, ppm):
        x = bandlimited_noise(8000, seed=4)
        e = ppm * 1e-6
        y = apply_sto_sro(apply_sto_sro(x, sto, ppm), -sto / (1 + e),
                          -ppm / (1 + e))
        inner = slice(300, -300)
        assert np.max(np.abs(y[inner] - x[inner])) < 1e-3


def _two_mic_scene(**kw):
    cfg = dict(mic_positions=[[1, 1, 1], [3, 1, 1], [1, 3, 1], [3, 3, 1]],
               source_positions=[[2, 2, 1.5]],
               utterances=[(0, 0.1, 0.9, 'synth:5')], snr_db=None)
    cfg.update(kw)
    return SceneConfig(**cfg)


class TestSimulateScene:
    def test_equidistant_mics_identical(self):
        rec, truth = simulate_scene(_two_mic_scene())
        for ch in rec.channels[1:]:
            np.testing.assert_allclose(ch, rec.channels[0], atol=1e-12)
        np.testing.assert_allclose(truth.true_tdoa_vectors, 0, atol=1e-12)

    def test_silence_plan_noiseless(self):
        cfg = _two_mic_scene(utterances=[], duration_s=1.0,
                             snr_db=float('inf'))
        rec, _ = simulate_scene(cfg)
        np.testing.assert_array_equal(rec.channels, 0)

    def test_unknown_speaker_rejected(self):
        with pytest.raises(ValueError, match='unknown speaker'):
            simulate_scene(_two_mic_scene(
                utterances=[(1, 0.1, 0.5, 'synth:1')]))

    def test_overlapping_same_speaker_rejected(self):
        with pytest.raises(ValueError, match='overlapping'):
            simulate_scene(_two_mic_scene(
                utterances=[(0, 0.1, 0.5, 'synth:1'),
                            (0, 0.4, 0.8, 'synth:2')]))

    def test_position_outside_room_rejected(self):
        with pytest.raises(ValueError, match='outside room'):
            _two_mic_scene(room_dims=[2.5, 5, 3], t60_s=0.2).validate()

    def test_short_source_audio_rejected(self):
        cfg = _two_mic_scene(utterances=[(0, 0.1, 0.9, 'a')])
        with pytest.raises(ValueError, match='shorter'):
            simulate_scene(cfg, source_audio={'a': np.ones(100)})

    def test_given_source_audio_is_used(self):
        cfg = _two_mic_scene(utterances=[(0, 0.0, 0.5, 'a')])
        audio = bandlimited_noise(8000, seed=5)
        rec, truth = simulate_scene(cfg, source_audio={'a': audio})
        np.testing.assert_allclose(truth.clean_sources[0, :8000], audio)
        assert np.sum(rec.channels ** 2) > 0

    def test_snr(self):
        cfg = _two_mic_scene(utterances=[(0, 0.0, 2.0, 'a')], snr_db=10.0,
                             duration_s=2.0)
        audio = bandlimited_noise(32000, seed=6)
        rec, truth = simulate_scene(cfg, source_audio={'a': audio}, seed=1)
        clean = truth.images.sum(0)
        noise = rec.channels - clean
        snr = 10 * np.log10(np.mean(clean ** 2) / np.mean(noise ** 2))
        assert snr == pytest.approx(10.0, abs=0.2)

    def test_images_sum_to_noiseless_mixture(self):
        cfg = random_meeting(3, n_speakers=2, duration_s=6.0, snr_db=None,
                             max_sto_s=0.1, max_sro_ppm=50)
        rec, truth = simulate_scene(cfg)
        np.testing.assert_allclose(truth.images.sum(0), rec.channels,
                                   atol=1e-4)

    def test_deterministic_given_seed(self):
        cfg = random_meeting(5, n_speakers=2, duration_s=5.0)
        a, _ = simulate_scene(cfg, seed=3)
        b, _ = simulate_scene(cfg, seed=3)
        c, _ = simulate_scene(cfg, seed=4)
        np.testing.assert_array_equal(a.channels, b.channels)
        assert not np.array_equal(a.channels, c.channels)

    def test_scene_json_round_trip(self, tmp_path):
        cfg = random_meeting(6, t60_s=0.2, max_sto_s=1.0, max_sro_ppm=20)
        cfg.to_json(tmp_path / 'scene.json')
        back = SceneConfig.from_json(tmp_path / 'scene.json')
        assert back.to_dict() == cfg.to_dict()

    def test_random_meeting_speakers_separated(self):
        cfg = random_meeting(7, n_speakers=4)
        tau = np.array([ground_truth_tdoa(s, cfg.mic_positions, 16000)
                        for s in cfg.source_positions])
        for a in range(4):
            for b in range(a + 1, 4):
                assert np.sum(np.abs(tau[a] - tau[b]) >= 8) >= 2


class TestWav:
    def test_float32_bit_exact(self, tmp_path):
        x = np.random.default_rng(0).uniform(-1, 1, (3, 1000)).astype(
            np.float32)
        write_wav(tmp_path / 'a.wav', x, 16000)
        y, fs = read_wav(tmp_path / 'a.wav')
        assert fs == 16000
        np.testing.assert_array_equal(y.astype(np.float32), x)

    def test_int16_within_one_lsb(self, tmp_path):
        x = np.random.default_rng(1).uniform(-0.9, 0.9, (2, 1000))
        write_wav(tmp_path / 'b.wav', x, 8000, dtype='int16')
        y, fs = read_wav(tmp_path / 'b.wav')
        assert fs == 8000
        assert np.max(np.abs(y - x)) <= 1 / 32768 + 1e-12

    def test_stereo_file_gives_two_channels(self, tmp_path):
        write_wav(tmp_path / 's.wav', np.zeros((2, 100)), 16000)
        assert load_wav(tmp_path / 's.wav').n_channels == 2

    def test_recording_round_trip(self, tmp_path):
        rec, _ = simulate_scene(_two_mic_scene())
        save_wav(tmp_path / 'r.wav', rec)
        back = load_wav(tmp_path / 'r.wav')
        np.testing.assert_array_equal(back.channels,
                                      rec.channels.astype(np.float32))

    def test_malformed_header(self, tmp_path):
        (tmp_path / 'bad.wav').write_bytes(b'RIFX0000garbage')
        with pytest.raises(ValueError):
            read_wav(tmp_path / 'bad.wav')
