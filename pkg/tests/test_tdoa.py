import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from asndiar.pairs import cyclic_residuals
from asndiar.scene import SceneConfig, simulate_scene
from asndiar.stft import StftConfig, stft
from asndiar.tdoa import (GccTensor, TdoaEstConfig, TdoaVector,
                          combine_candidates, detect_peaks, energy_vad,
                          estimate_tdoas, frame_candidates, gcc_phat,
                          read_tdoa_jsonl, select_frame_tdoas, srp_phat,
                          unique_filter, write_tdoa_jsonl)

from _util import (FROZEN, bandlimited_noise, exhaustive_combinations,
                   random_combination_instance)

CFG = TdoaEstConfig()
MICS = [[2.0, 2.0, 0.8], [2.9, 2.2, 0.8], [2.4, 2.8, 0.85], [1.6, 2.9, 0.8]]


def gcc_of(values, lag_max):
    values = np.asarray(values, dtype=np.float32)
    if values.ndim == 2:
        values = values[:, None]
    return GccTensor(values, lag_max, 1)


def plan_scene(sources, utterances, seed=0, snr_db=30.0, duration_s=None):
    cfg = SceneConfig(mic_positions=MICS, source_positions=sources,
                      utterances=utterances, snr_db=snr_db,
                      duration_s=duration_s)
    return simulate_scene(cfg, seed=seed)


@pytest.fixture(scope='module')
def single_talker():
    rec, truth = plan_scene([[4.0, 3.5, 1.2]],
                            [(0, 0.5, 3.5, 'synth:1'),
                             (0, 4.5, 7.5, 'synth:2')], duration_s=8.0)
    return rec, truth, stft(rec.channels)


@pytest.fixture(scope='module')
def overlapped():
    rec, truth = plan_scene([[4.0, 3.5, 1.2], [0.6, 1.0, 1.25]],
                            [(0, 0.3, 5.8, 'synth:3'),
                             (1, 0.3, 5.8, 'synth:4')], duration_s=6.0)
    return rec, truth, stft(rec.channels)


@pytest.fixture(scope='module')
def overlapped_stationary():
    """Two equal-power stationary sources talking all the time."""
    audio = {'a': bandlimited_noise(96000, seed=1, cutoff=0.25),
             'b': bandlimited_noise(96000, seed=2, cutoff=0.25)}
    cfg = SceneConfig(mic_positions=MICS,
                      source_positions=[[4.0, 3.5, 1.2], [0.6, 1.0, 1.25]],
                      utterances=[(0, 0.3, 5.8, 'a'), (1, 0.3, 5.8, 'b')],
                      snr_db=30.0, duration_s=6.0)
    rec, truth = simulate_scene(cfg, audio)
    return rec, truth, stft(rec.channels)


class TestGccPhat:
    def test_identical_channels(self):
        x = np.random.default_rng(0).standard_normal(8000)
        g = gcc_phat(stft(np.stack([x, x])))
        assert g.values.shape == (1, stft(x).n_frames, 2 * CFG.lag_max + 1)
        assert np.all(np.argmax(g.values[0], axis=-1) == CFG.lag_max)

    def test_integer_delay_oracle(self):
        o = FROZEN['gcc_integer_delay']
        x = np.random.default_rng(o['seed']).standard_normal(o['n'])
        y = np.concatenate([np.zeros(o['delay']), x[:-o['delay']]])
        g = gcc_phat(stft(np.stack([x, y])))
        lags = np.argmax(g.values[0, 4:-4], axis=-1) - g.lag_max
        assert np.all(lags == o['lag'])

    def test_single_talker_peak_at_truth(self, single_talker):
        rec, truth, spec = single_talker
        g = gcc_phat(spec)
        act = truth.activity(spec.n_frames, spec.frame_shift_s).active[0]
        frames = np.flatnonzero(act)[10:-10]
        for p, tau in enumerate(truth.true_tdoa_vectors[0]):
            lags = np.argmax(g.values[p, frames], axis=-1) - g.lag_max
            assert np.mean(np.abs(lags - tau) <= 1) > 0.98

    def test_two_sources_two_maxima(self, overlapped):
        rec, truth, spec = overlapped
        g = gcc_phat(spec)
        frames = range(40, spec.n_frames - 40, 10)
        hits = 0
        total = 0
        for f in frames:
            for p in range(g.n_pairs):
                peaks = [lag for lag, _ in detect_peaks(g.values[p, f], CFG)]
                for tau in truth.true_tdoa_vectors[:, p]:
                    total += 1
                    hits += any(abs(lag - tau) <= 1 for lag in peaks)
        assert hits / total > 0.9

    def test_averaging_span_validated(self):
        with pytest.raises(ValueError):
            TdoaEstConfig(L=0)


class TestDetectPeaks:
    def test_zeros(self):
        assert detect_peaks(np.zeros(41), CFG) == []

    def test_triangular_pulse(self):
        g = np.zeros(41)
        g[20 + 4:20 + 7] = [0.5, 1.0, 0.5]
        assert detect_peaks(g, CFG) == [(5, 1.0)]

    def test_at_most_c_sorted(self):
        g = np.zeros(101)
        for i, lag in enumerate(range(-40, 41, 10)):
            g[50 + lag] = 1.0 + 0.1 * i
        peaks = detect_peaks(g, CFG)
        assert len(peaks) == CFG.C
        vals = [v for _, v in peaks]
        assert vals == sorted(vals, reverse=True)

    def test_negative_maxima_ignored(self):
        g = -np.ones(41)
        g[10] = -0.5
        assert detect_peaks(g, CFG) == []

    def test_true_lags_ranked_first(self, overlapped):
        rec, truth, spec = overlapped
        g = gcc_phat(spec)
        good = total = 0
        for f in range(40, spec.n_frames - 40, 10):
            for p in range(g.n_pairs):
                peaks = [lag for lag, _ in detect_peaks(g.values[p, f], CFG)]
                true = truth.true_tdoa_vectors[:, p]
                is_true = [np.min(np.abs(true - lag)) <= 1 for lag in peaks]
                n_true = sum(is_true)
                total += 1
                good += all(is_true[:n_true])
        assert good / total > 0.8

    def test_matches_vectorised_candidates(self, single_talker):
        g = gcc_phat(single_talker[2])
        cands = frame_candidates(g, CFG)
        for f in range(0, g.n_frames, 7):
            for p in range(g.n_pairs):
                assert cands[f][p] == detect_peaks(g.values[p, f], CFG)


class TestCombineCandidates:
    def test_single_consistent(self):
        M3 = [[(3, 1.0)], [(5, 1.0)], [(2, 1.0)]]
        g = gcc_of(np.zeros((3, 21)), 10)
        out = combine_candidates(M3, g, 0, TdoaEstConfig(tau_th=0))
        assert [v.tau for v in out] == [(3.0, 5.0, 2.0)]

    def test_inconsistent_rejected(self):
        cands = [[(3, 1.0)], [(5, 1.0)], [(4, 1.0)]]
        g = gcc_of(np.zeros((3, 21)), 10)
        assert combine_candidates(cands, g, 0, TdoaEstConfig(tau_th=1)) == []

    def test_empty_pair_aborts(self):
        cands = [[(3, 1.0)], [], [(2, 1.0)]]
        g = gcc_of(np.zeros((3, 21)), 10)
        assert combine_candidates(cands, g, 0) == []

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2 ** 32 - 1), tau_th=st.sampled_from([0, 1, 2]),
           n_mics=st.sampled_from([3, 4]))
    def test_exhaustive_oracle(self, seed, tau_th, n_mics):
        rng = np.random.default_rng(seed)
        cands, gvals = random_combination_instance(rng, n_mics)
        g = gcc_of(gvals, 20)
        out = combine_candidates(cands, g, 0, TdoaEstConfig(tau_th=tau_th))
        ref = exhaustive_combinations(cands, gvals, 20, tau_th)
        assert [v.tau for v in out] == [t for t, _ in ref]
        np.testing.assert_allclose([v.srp for v in out],
                                   [s for _, s in ref], rtol=1e-6)

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2 ** 32 - 1), tau_th=st.sampled_from([0, 1, 2]))
    def test_emitted_vectors_consistent_and_unique(self, seed, tau_th):
        rng = np.random.default_rng(seed)
        cands, gvals = random_combination_instance(rng, 5)
        g = gcc_of(np.repeat(gvals[:, None], 4, axis=1), 20)
        out = combine_candidates(cands, g, 3,
                                 TdoaEstConfig(tau_th=tau_th))
        for v in out:
            assert v.frame == 3
            assert np.all(np.abs(cyclic_residuals(v.tau)) <= tau_th)
        for i, a in enumerate(out):
            for b in out[i + 1:]:
                assert np.sum(np.abs(np.subtract(a.tau, b.tau))
                              <= tau_th) <= 1

    def test_deterministic(self):
        rng = np.random.default_rng(9)
        cands, gvals = random_combination_instance(rng, 4)
        a = combine_candidates(cands, gcc_of(gvals, 20), 0)
        b = combine_candidates(cands, gcc_of(gvals, 20), 0)
        assert a == b

    def test_unique_filter_prefers_higher_srp(self):
        a = TdoaVector((1.0, 2.0, 1.0), 2.0, 0)
        b = TdoaVector((1.0, 2.0, 9.0), 3.0, 0)
        c = TdoaVector((7.0, 8.0, 1.0), 1.0, 0)
        assert unique_filter([a, b, c], 0) == [b, c]


class TestSrpPhat:
    def test_zero_gcc(self):
        g = gcc_of(np.zeros((6, 41)), 20)
        assert srp_phat((1, 2, 3, 1, 2, 1), g, 0) == 0.0

    def test_linear_interpolation(self):
        vals = np.zeros((1, 41))
        vals[0, 20 + 3] = 1.0
        g = gcc_of(vals, 20)
        assert srp_phat((2.5,), g, 0) == pytest.approx(0.5)
        assert srp_phat((3.25,), g, 0) == pytest.approx(0.75)

    def test_true_vector_beats_perturbations(self, single_talker):
        rec, truth, spec = single_talker
        g = gcc_phat(spec)
        tau = truth.true_tdoa_vectors[0]
        act = truth.activity(spec.n_frames, spec.frame_shift_s).active[0]
        frames = np.flatnonzero(act)[10:-10:5]
        wins = total = 0
        for f in frames:
            s0 = srp_phat(tau, g, f)
            for p in range(len(tau)):
                for d in (-3, 3, -5, 5):
                    t = tau.copy()
                    t[p] += d
                    total += 1
                    wins += s0 > srp_phat(t, g, f)
        assert wins / total > 0.98

    def test_true_beats_negated(self, single_talker):
        rec, truth, spec = single_talker
        g = gcc_phat(spec)
        tau = truth.true_tdoa_vectors[0]
        act = truth.activity(spec.n_frames, spec.frame_shift_s).active[0]
        frames = np.flatnonzero(act)[10:-10]
        assert all(srp_phat(tau, g, f) >= srp_phat(-tau, g, f)
                   for f in frames)


class TestVad:
    def test_silence(self):
        assert not energy_vad(np.zeros(16000)).any()

    def test_speech_on_silence(self, single_talker):
        rec, truth, spec = single_talker
        vad = energy_vad(rec.channels[0])
        # oracle: frames whose speech image clearly exceeds the noise
        img = stft(truth.images[0, 0]).data[0]
        noise = stft(rec.channels[0] - truth.images[0, 0]).data[0]
        speech = (np.sum(np.abs(img) ** 2, -1)
                  > 10 * np.sum(np.abs(noise) ** 2, -1))
        assert np.mean(vad[speech]) >= 0.95

    def test_all_speech(self):
        x = np.random.default_rng(0).standard_normal(32000) * 0.1
        assert np.mean(energy_vad(x)) >= 0.99

    def test_percentile_floor(self):
        rng = np.random.default_rng(1)
        x = 1e-3 * rng.standard_normal(48000)
        x[16000:32000] += rng.standard_normal(16000)
        vad = energy_vad(x)
        frames = np.arange(len(vad)) * 256
        assert vad[(frames > 17000) & (frames < 31000)].all()
        assert not vad[(frames < 15000) | (frames > 33000)].any()


class TestSelection:
    def test_silent_frames_empty(self):
        vecs = [[TdoaVector((1.0,), 1.0, f)] for f in range(5)]
        out = select_frame_tdoas(vecs, np.zeros(5, bool))
        assert out == [[]] * 5

    def test_single_talker_one_vector(self, single_talker):
        rec, truth, spec = single_talker
        selected, _, vad = estimate_tdoas(spec, rec.channels[0])
        act = truth.activity(spec.n_frames, spec.frame_shift_s).active[0]
        frames = np.flatnonzero(act & vad)
        counts = np.array([len(selected[f]) for f in frames])
        assert np.mean(counts == 1) >= 0.9
        tau = truth.true_tdoa_vectors[0]
        first = [selected[f][0].tau for f in frames if selected[f]]
        err = np.max(np.abs(np.array(first) - tau), axis=1)
        assert np.mean(err <= 1) >= 0.9

    def test_overlapped_two_vectors(self, overlapped_stationary):
        rec, truth, spec = overlapped_stationary
        selected, _, vad = estimate_tdoas(spec, rec.channels[0])
        act = truth.activity(spec.n_frames, spec.frame_shift_s).active
        frames = np.flatnonzero(act.all(0) & vad)[15:-15]
        counts = np.array([len(selected[f]) for f in frames])
        assert np.mean(counts >= 2) >= 0.6

    def test_overlapped_speech_finds_both_before_counting(self, overlapped):
        # with speech one talker dominates most frames; the combination
        # still returns both vectors, the counting rule then keeps the
        # weaker one only when it is strong enough
        rec, truth, spec = overlapped
        g = gcc_phat(spec)
        cands = frame_candidates(g, CFG)
        vad = energy_vad(rec.channels[0])
        frames = np.flatnonzero(vad)[15:-15]
        both = 0
        for f in frames:
            vecs = combine_candidates(cands[f], g, f, CFG)
            both += all(any(np.max(np.abs(np.subtract(v.tau, t))) <= 2
                            for v in vecs)
                        for t in truth.true_tdoa_vectors)
        assert both / len(frames) >= 0.6

    def test_jsonl_round_trip(self, tmp_path, single_talker):
        rec, _, spec = single_talker
        selected, _, _ = estimate_tdoas(spec, rec.channels[0])
        write_tdoa_jsonl(tmp_path / 't.jsonl', selected)
        back = read_tdoa_jsonl(tmp_path / 't.jsonl', len(selected))
        assert back == selected

    def test_stft_config_independent_grid(self):
        spec = stft(np.random.default_rng(2).standard_normal((3, 8000)),
                    StftConfig(frame_len=512, frame_shift=128))
        g = gcc_phat(spec)
        assert g.lag_max == 255
