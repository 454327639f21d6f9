"""Synthetic meeting scenes for ad-hoc microphone networks.

A scene is a set of static talkers and microphones (one microphone per
device), an utterance plan, and per-device clock errors. Simulation yields
the asynchronous multichannel recording together with its exact ground
truth: per-speaker TDOA vectors, activity intervals, dry sources and the
per-channel speaker images.
"""
import json
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
from scipy.signal import fftconvolve

from .activity import ActivityMatrix
from .interp import interpolate
from .ism import image_source_rir
from .pairs import mic_pairs
from .wav import read_wav, write_wav


@dataclass
class Utterance:
    speaker: int
    onset: float
    offset: float
    source: str

    @property
    def duration(self):
        return self.offset - self.onset


@dataclass
class SceneConfig:
    mic_positions: list
    source_positions: list
    utterances: list
    sample_rate_hz: int = 16000
    snr_db: Optional[float] = 20.0
    t60_s: float = 0.0
    room_dims: Optional[list] = None
    per_device_sto_samples: Optional[list] = None
    per_device_sro_ppm: Optional[list] = None
    speed_of_sound: float = 343.0
    duration_s: Optional[float] = None

    def __post_init__(self):
        self.utterances = [u if isinstance(u, Utterance) else Utterance(*u)
                           if isinstance(u, (list, tuple)) else Utterance(**u)
                           for u in self.utterances]
        n_mics = len(self.mic_positions)
        if self.per_device_sto_samples is None:
            self.per_device_sto_samples = [0] * n_mics
        if self.per_device_sro_ppm is None:
            self.per_device_sro_ppm = [0.0] * n_mics

    @property
    def n_mics(self):
        return len(self.mic_positions)

    @property
    def n_speakers(self):
        return len(self.source_positions)

    @property
    def n_samples(self):
        if self.duration_s is not None:
            return int(round(self.duration_s * self.sample_rate_hz))
        end = max((u.offset for u in self.utterances), default=0.0)
        return int(np.ceil((end + 0.5) * self.sample_rate_hz))

    def validate(self, min_mics=2):
        if self.n_mics < min_mics:
            raise ValueError(f'need at least {min_mics} microphones, '
                             f'got {self.n_mics}')
        if self.n_speakers < 1:
            raise ValueError('need at least one speaker')
        for name in ('per_device_sto_samples', 'per_device_sro_ppm'):
            if len(getattr(self, name)) != self.n_mics:
                raise ValueError(f'{name} needs one entry per microphone')
        if self.room_dims is not None:
            room = np.asarray(self.room_dims, dtype=float)
            for pos in list(self.mic_positions) + list(self.source_positions):
                pos = np.asarray(pos, dtype=float)
                if np.any(pos <= 0) or np.any(pos >= room):
                    raise ValueError(f'position {pos.tolist()} outside room')
        per_speaker = {}
        for u in self.utterances:
            if not 0 <= u.speaker < self.n_speakers:
                raise ValueError(f'utterance references unknown speaker '
                                 f'{u.speaker}')
            if u.offset <= u.onset or u.onset < 0:
                raise ValueError(f'invalid utterance interval '
                                 f'[{u.onset}, {u.offset}]')
            per_speaker.setdefault(u.speaker, []).append((u.onset, u.offset))
        for spk, ivals in per_speaker.items():
            ivals.sort()
            for (_, end), (start, _) in zip(ivals, ivals[1:]):
                if start < end:
                    raise ValueError(f'speaker {spk} has overlapping '
                                     f'utterances')

    def to_dict(self):
        d = asdict(self)
        d['mic_positions'] = [list(map(float, p)) for p in self.mic_positions]
        d['source_positions'] = [list(map(float, p))
                                 for p in self.source_positions]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_json(self, path):
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass
class MultichannelRecording:
    channels: np.ndarray
    sample_rate_hz: int
    device_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.channels = np.atleast_2d(np.asarray(self.channels, dtype=float))
        if not self.device_ids:
            self.device_ids = [f'dev{m}' for m in range(len(self.channels))]

    @property
    def n_channels(self):
        return self.channels.shape[0]

    @property
    def n_samples(self):
        return self.channels.shape[1]


@dataclass
class GroundTruth:
    true_tdoa_vectors: np.ndarray
    utterances: list
    clean_sources: np.ndarray
    images: Optional[np.ndarray] = None

    @property
    def n_speakers(self):
        return len(self.true_tdoa_vectors)

    def activity(self, n_frames, frame_shift_s):
        return ActivityMatrix.from_intervals(
            [(u.speaker, u.onset, u.offset) for u in self.utterances],
            self.n_speakers, n_frames, frame_shift_s)


def ground_truth_tdoa(src, mics, fs, c=343.0):
    """All-pairs TDOA vector of a source, in samples.

    Element (m, m') is the delay of microphone m' relative to m:
    ``(|src - mic_m'| - |src - mic_m|) * fs / c``.
    """
    if c <= 0 or fs <= 0:
        raise ValueError('speed of sound and sampling rate must be positive')
    src = np.asarray(src, dtype=float)
    mics = np.asarray(mics, dtype=float)
    dist = np.linalg.norm(mics - src, axis=1)
    if np.any(dist == 0):
        raise ValueError('source coincides with a microphone')
    return np.array([(dist[n] - dist[m]) * fs / c
                     for m, n in mic_pairs(len(mics))])


def apply_sto_sro(signal, sto_samples=0, sro_ppm=0.0):
    """Resample ``signal`` onto the clock of a device with STO and SRO.

    ``out[n] = signal(n * (1 + sro_ppm * 1e-6) + sto_samples)``; positive
    STO advances the signal, positions outside the input yield zeros.
    """
    if abs(sro_ppm) >= 1000:
        raise ValueError('|SRO| must be below 1000 ppm')
    signal = np.asarray(signal, dtype=float)
    n = signal.shape[-1]
    if sro_ppm == 0 and float(sto_samples).is_integer():
        shift = int(sto_samples)
        out = np.zeros_like(signal)
        if shift >= 0:
            out[..., :max(n - shift, 0)] = signal[..., shift:]
        else:
            out[..., -shift:] = signal[..., :n + shift]
        return out
    pos = np.arange(n) * (1 + sro_ppm * 1e-6) + sto_samples
    if signal.ndim == 1:
        return interpolate(signal, pos)
    return np.stack([interpolate(s, pos) for s in signal])


def synth_speech(duration_s, fs, rng, f0=None):
    """Speech-like test signal: syllables of formant-shaped harmonics and
    fricative noise, separated by short pauses. Unit RMS over the active
    part."""
    n = int(round(duration_s * fs))
    out = np.zeros(n)
    if n == 0:
        return out
    f0 = rng.uniform(95, 230) if f0 is None else f0
    t = int(rng.uniform(0.0, 0.05) * fs)
    while t < n:
        seg = min(int(rng.uniform(0.12, 0.32) * fs), n - t)
        if seg < 16:
            break
        tt = np.arange(seg) / fs
        if rng.random() < 0.8:
            f0_syl = f0 * (1 + 0.08 * rng.standard_normal())
            track = f0_syl * (1 + 0.06 * np.sin(
                2 * np.pi * rng.uniform(1, 4) * tt + rng.uniform(0, 2 * np.pi)))
            phase = 2 * np.pi * np.cumsum(track) / fs
            harm = np.arange(1, int(4000 / f0_syl) + 1)
            formants = np.array([rng.uniform(300, 850), rng.uniform(900, 2400),
                                 rng.uniform(2400, 3400)])
            bws = np.array([90.0, 120.0, 180.0])
            freqs = harm * f0_syl
            amps = np.sum(1 / (1 + ((freqs[:, None] - formants) / bws) ** 2),
                          axis=1)
            amps = amps * (freqs / 500.0) ** -0.3 + 0.02
            offsets = rng.uniform(0, 2 * np.pi, size=harm.size)
            sig = np.sin(harm[:, None] * phase[None, :]
                         + offsets[:, None]).T @ amps
            sig /= np.sqrt(np.mean(sig ** 2)) + 1e-12
            sig += 0.08 * rng.standard_normal(seg)
        else:
            noise = rng.standard_normal(seg)
            spec = np.fft.rfft(noise)
            f = np.fft.rfftfreq(seg, 1 / fs)
            lo = rng.uniform(1500, 3000)
            spec *= 1 / (1 + np.exp(-(f - lo) / 200))
            sig = np.fft.irfft(spec, seg)
            sig /= np.sqrt(np.mean(sig ** 2)) + 1e-12
            sig *= 0.5
        ramp = min(int(0.02 * fs), seg // 2)
        env = np.ones(seg)
        env[:ramp] = np.sin(np.linspace(0, np.pi / 2, ramp)) ** 2
        env[seg - ramp:] = env[:ramp][::-1]
        out[t:t + seg] = sig * env * rng.uniform(0.5, 1.0)
        gap = rng.uniform(0.2, 0.35) if rng.random() < 0.1 else \
            rng.uniform(0.02, 0.12)
        t += seg + int(gap * fs)
    active = out != 0
    out /= np.sqrt(np.mean(out[active] ** 2)) + 1e-12
    return out


def _synth_from_ref(ref, duration_s, fs):
    seed = int(ref.split(':', 1)[1])
    return synth_speech(duration_s + 2 / fs, fs, np.random.default_rng(seed))


def simulate_scene(cfg: SceneConfig, source_audio=None, seed=0,
                   keep_images=True):
    """Render the asynchronous recording of a scene.

    Args:
        cfg: scene description
        source_audio: mapping from utterance source reference to a 1-D
            array at ``cfg.sample_rate_hz``; references of the form
            ``'synth:<seed>'`` that are missing are synthesised
        seed: seed of the sensor noise
        keep_images: also return the per-channel speaker images
    Returns:
        (MultichannelRecording, GroundTruth)
    """
    cfg.validate()
    fs = cfg.sample_rate_hz
    source_audio = dict(source_audio or {})
    n = cfg.n_samples
    n_spk, n_mics = cfg.n_speakers, cfg.n_mics

    dry = np.zeros((n_spk, n))
    speech_active = np.zeros(n, dtype=bool)
    for u in cfg.utterances:
        start = int(round(u.onset * fs))
        stop = min(int(round(u.offset * fs)), n)
        length = stop - start
        if length <= 0:
            continue
        if u.source in source_audio:
            audio = np.asarray(source_audio[u.source], dtype=float)
        elif u.source.startswith('synth:'):
            audio = _synth_from_ref(u.source, u.duration, fs)
        else:
            raise ValueError(f'no audio for source reference {u.source!r}')
        if audio.shape[-1] < length:
            raise ValueError(f'source audio {u.source!r} is shorter than '
                             f'its utterance')
        dry[u.speaker, start:stop] += audio[:length]
        speech_active[start:stop] = True

    images = np.zeros((n_spk, n_mics, n))
    for i, src in enumerate(cfg.source_positions):
        if not np.any(dry[i]):
            continue
        for m, mic in enumerate(cfg.mic_positions):
            rir = image_source_rir(src, mic, fs, cfg.speed_of_sound,
                                   cfg.room_dims, cfg.t60_s)
            images[i, m] = fftconvolve(dry[i], rir)[:n]

    mix = images.sum(axis=0)
    rng = np.random.default_rng(seed)
    if cfg.snr_db is not None and np.isfinite(cfg.snr_db):
        region = mix[:, speech_active] if np.any(speech_active) else mix
        power = np.mean(region ** 2)
        if power > 0:
            std = np.sqrt(power / 10 ** (cfg.snr_db / 10))
            mix = mix + std * rng.standard_normal(mix.shape)

    channels = np.empty_like(mix)
    for m in range(n_mics):
        sto = cfg.per_device_sto_samples[m]
        sro = cfg.per_device_sro_ppm[m]
        channels[m] = apply_sto_sro(mix[m], sto, sro)
        if keep_images:
            for i in range(n_spk):
                images[i, m] = apply_sto_sro(images[i, m], sto, sro)

    tdoas = np.array([ground_truth_tdoa(src, cfg.mic_positions, fs,
                                        cfg.speed_of_sound)
                      for src in cfg.source_positions])
    truth = GroundTruth(tdoas, list(cfg.utterances), dry,
                        images.astype(np.float32) if keep_images else None)
    rec = MultichannelRecording(channels, fs)
    return rec, truth


def meeting_plan(n_speakers, duration_s, overlap_ratio, rng,
                 utt_range=(1.5, 4.5), gap_range=(0.3, 1.0), lead_in=0.5):
    """Utterance plan with a target overlap ratio.

    Consecutive utterances alternate between different speakers; with a
    positive ``overlap_ratio`` each utterance starts before the previous
    one ends so that overlapped time / speech time approaches the target.
    At most two speakers are active at once.
    """
    plan = []
    prev_spk = None
    ends = []
    t = lead_in
    while True:
        length = rng.uniform(*utt_range)
        if plan:
            if overlap_ratio > 0:
                ov = overlap_ratio * length / (1 + overlap_ratio)
                ov = min(ov, 0.8 * length, 0.8 * plan[-1].duration)
                start = ends[-1] - ov
                if len(ends) > 1:
                    start = max(start, ends[-2] + 0.05)
            else:
                start = ends[-1] + rng.uniform(*gap_range)
        else:
            start = t
        if start + length > duration_s - 0.3:
            break
        choices = [s for s in range(n_speakers) if s != prev_spk]
        spk = int(rng.choice(choices))
        seed = int(rng.integers(0, 2 ** 31))
        plan.append(Utterance(spk, round(start, 4), round(start + length, 4),
                              f'synth:{seed}'))
        prev_spk = spk
        ends.append(start + length)
    return plan


def meeting_geometry(n_speakers, n_mics, rng, room_dims=(6.0, 5.0, 3.0),
                     fs=16000, c=343.0, min_sep=8.0, max_tries=1000):
    """Table-top microphones and speakers seated around the table.

    Rejection-samples until every two speakers differ by at least
    ``min_sep`` samples in at least two TDOA elements.
    """
    room = np.asarray(room_dims, dtype=float)
    centre = np.array([room[0] / 2, room[1] / 2])
    for _ in range(max_tries):
        mics = []
        while len(mics) < n_mics:
            p = np.array([centre[0] + rng.uniform(-1.0, 1.0),
                          centre[1] + rng.uniform(-0.6, 0.6),
                          0.75 + rng.uniform(0, 0.1)])
            if all(np.linalg.norm(p - q) >= 0.4 for q in mics):
                mics.append(p)
        base = rng.uniform(0, 2 * np.pi)
        spk = []
        for i in range(n_speakers):
            ang = base + 2 * np.pi * i / n_speakers + rng.uniform(-0.3, 0.3)
            rad = rng.uniform(1.3, 1.7)
            spk.append(np.array([centre[0] + rad * np.cos(ang),
                                 centre[1] + 0.85 * rad * np.sin(ang),
                                 rng.uniform(1.15, 1.3)]))
        tdoas = np.array([ground_truth_tdoa(s, mics, fs, c) for s in spk])
        ok = True
        for a in range(n_speakers):
            for b in range(a + 1, n_speakers):
                if np.sum(np.abs(tdoas[a] - tdoas[b]) >= min_sep) < 2:
                    ok = False
        if ok:
            return [m.tolist() for m in mics], [s.tolist() for s in spk]
    raise RuntimeError('could not place well separated speakers')


def random_meeting(seed, n_speakers=4, n_mics=4, duration_s=60.0,
                   overlap_ratio=0.0, t60_s=0.0, snr_db=20.0,
                   max_sto_s=0.0, max_sro_ppm=0.0, fs=16000):
    """Seeded meeting scene; device 0 is the clock reference."""
    rng = np.random.default_rng(seed)
    mics, spks = meeting_geometry(n_speakers, n_mics, rng, fs=fs)
    plan = meeting_plan(n_speakers, duration_s, overlap_ratio, rng)
    sto = [0] + [int(rng.uniform(-1, 1) * max_sto_s * fs)
                 for _ in range(n_mics - 1)]
    sro = [0.0] + [float(rng.uniform(-1, 1) * max_sro_ppm)
                   for _ in range(n_mics - 1)]
    return SceneConfig(
        mic_positions=mics, source_positions=spks, utterances=plan,
        sample_rate_hz=fs, snr_db=snr_db, t60_s=t60_s,
        room_dims=[6.0, 5.0, 3.0] if t60_s > 0 else None,
        per_device_sto_samples=sto, per_device_sro_ppm=sro,
        duration_s=duration_s)


def load_wav(path):
    """Read a (multichannel) WAV file as a MultichannelRecording."""
    signals, fs = read_wav(path)
    return MultichannelRecording(signals, fs)


def load_wavs(paths):
    """One WAV per device (e.g. pre-downloaded LibriWASN channels).

    Channels are zero-padded to a common length; only the first channel of
    each file is used.
    """
    sigs, rates = [], set()
    for p in paths:
        s, fs = read_wav(p)
        sigs.append(s[0])
        rates.add(fs)
    if len(rates) != 1:
        raise ValueError(f'devices disagree on nominal sample rate: {rates}')
    n = max(len(s) for s in sigs)
    out = np.zeros((len(sigs), n))
    for m, s in enumerate(sigs):
        out[m, :len(s)] = s
    return MultichannelRecording(out, rates.pop(),
                                 [str(p) for p in paths])


def save_wav(path, recording, dtype='float32'):
    write_wav(path, recording.channels, recording.sample_rate_hz, dtype)
