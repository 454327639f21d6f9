"""Blind synchronisation of asynchronous device recordings.

Coarse sampling time offset (STO) compensation by cross-correlation of
the first seconds of the recordings, followed by sampling rate offset
(SRO) compensation through band-limited resampling. The SRO is estimated
by tracking the GCC-PhaT peak lag between the reference and the other
channel on overlapping segments and fitting a common drift slope.
"""
import json
import logging
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.signal import fftconvolve

from .interp import interpolate
from .scene import MultichannelRecording
from .stft import StftConfig, stft

logger = logging.getLogger(__name__)


@dataclass
class SyncConfig:
    reference_channel: int = 0
    search_window_s: float = 10.0
    max_lag_s: float = 5.0
    segment_s: float = 4.0
    segment_overlap: float = 0.5
    band_low_hz: float = 125.0
    band_high_hz: float = 3500.0
    peak_std_factor: float = 2.0
    upsample: int = 8
    n_refinements: int = 3
    refine_window_s: float = 10.0


@dataclass
class SyncReport:
    sto_samples: list
    sro_ppm: list
    reference_channel: int = 0
    details: dict = field(default_factory=dict)

    def to_json(self, path):
        with open(path, 'w') as f:
            json.dump(asdict(self), f, indent=2)

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            return cls(**json.load(f))


class InsufficientSegmentsError(ValueError):
    pass


def estimate_sto(ref, other, fs=16000, search_window_s=10.0, max_lag_s=5.0,
                 phat=False):
    """Integer offset of ``other`` w.r.t. ``ref`` from the first window.

    The returned value ``s`` is such that ``other[n] ~ ref[n + s]`` (a device
    that started recording ``s`` samples later yields ``s``). With ``phat``
    the cross-spectrum is whitened before the inverse transform, which
    sharpens the peak for low-pass signals such as speech.
    """
    win = int(round(search_window_s * fs))
    if win > len(ref) or win > len(other):
        raise ValueError(f'search window of {win} samples exceeds the signal '
                         f'length')
    a = np.asarray(ref[:win], dtype=float)
    b = np.asarray(other[:win], dtype=float)
    lags = np.arange(-(win - 1), win)
    if phat:
        n_fft = 2 * win
        cross = np.fft.rfft(b, n_fft) * np.conj(np.fft.rfft(a, n_fft))
        mag = np.abs(cross)
        cross = np.where(mag > 0, cross / np.where(mag > 0, mag, 1), 0)
        circ = np.fft.irfft(cross, n_fft)
        corr = np.concatenate([circ[n_fft - (win - 1):], circ[:win]])
    else:
        # corr[k] = sum_n ref[n] * other[n + lag], lag = k - (win - 1)
        corr = fftconvolve(b, a[::-1], mode='full')
    max_lag = int(round(max_lag_s * fs))
    keep = np.abs(lags) <= max_lag
    lag = lags[keep][np.argmax(corr[keep])]
    return int(-lag)


def compensate_sto(rec: MultichannelRecording, report: SyncReport):
    """Shift every channel by its STO and trim to the common length."""
    shifted = []
    for ch, sto in zip(rec.channels, report.sto_samples):
        sto = int(sto)
        if sto > 0:
            ch = np.concatenate([np.zeros(sto), ch])
        elif sto < 0:
            ch = ch[-sto:]
        shifted.append(ch)
    n = min(len(ch) for ch in shifted)
    return MultichannelRecording(np.stack([ch[:n] for ch in shifted]),
                                 rec.sample_rate_hz, list(rec.device_ids))


def resample_sro(x, sro_ppm):
    """Undo the drift of a device with SRO ``sro_ppm``: ``y[n] = x(n / (1 + e))``.

    The output keeps the input length; positions beyond the input are zero.
    """
    if abs(sro_ppm) >= 1000:
        raise ValueError('|SRO| must be below 1000 ppm')
    x = np.asarray(x, dtype=float)
    if sro_ppm == 0:
        return x.copy()
    pos = np.arange(x.shape[-1]) / (1 + sro_ppm * 1e-6)
    return interpolate(x, pos)


def _segment_lags(ref, other, fs, cfg: SyncConfig):
    """Sub-sample GCC-PhaT peak lag of ``other`` vs ``ref`` per segment.

    Returns segment centres (samples), lags (samples) and a usable flag.
    """
    scfg = StftConfig(frame_len=4096, frame_shift=2048)
    n = min(len(ref), len(other))
    spec = stft(np.stack([ref[:n], other[:n]]), scfg, fs).data
    cross = spec[1] * np.conj(spec[0])
    freqs = scfg.bin_frequencies(fs)
    band = (freqs >= cfg.band_low_hz) & (freqs <= cfg.band_high_hz)

    seg_frames = max(int(round(cfg.segment_s * fs / scfg.frame_shift)), 1)
    hop_frames = max(int(round(seg_frames * (1 - cfg.segment_overlap))), 1)
    n_fft = scfg.fft_len * cfg.upsample
    max_lag = scfg.fft_len // 2 - 1
    lag_axis = np.arange(-max_lag * cfg.upsample, max_lag * cfg.upsample + 1)

    centres, lags, usable = [], [], []
    for start in range(0, max(spec.shape[1] - seg_frames, 0) + 1, hop_frames):
        avg = cross[start:start + seg_frames].sum(axis=0)
        mag = np.abs(avg)
        phat = np.where((mag > 0) & band, avg / np.where(mag > 0, mag, 1), 0)
        g = np.fft.irfft(phat, n=n_fft)
        g = np.concatenate([g[-max_lag * cfg.upsample:],
                            g[:max_lag * cfg.upsample + 1]])
        k = int(np.argmax(g))
        peak = g[k]
        if 0 < k < len(g) - 1:
            den = g[k - 1] - 2 * peak + g[k + 1]
            frac = 0.5 * (g[k - 1] - g[k + 1]) / den if den < 0 else 0.0
        else:
            frac = 0.0
        # quality test on the critically sampled lag grid
        coarse = g[::cfg.upsample]
        ok = peak > 0 and peak > cfg.peak_std_factor * np.std(coarse)
        centre = (start + (seg_frames - 1) / 2) * scfg.frame_shift
        centres.append(centre)
        lags.append((lag_axis[k] + frac) / cfg.upsample)
        usable.append(bool(ok))
    return np.array(centres), np.array(lags), np.array(usable, dtype=bool)


def _cluster_1d(values, gap):
    order = np.argsort(values)
    labels = np.empty(len(values), dtype=int)
    label = 0
    for a, b in zip(order, order[1:]):
        labels[a] = label
        if values[b] - values[a] > gap:
            label += 1
    if len(order):
        labels[order[-1]] = label
    return labels


def fit_drift(t, lag, max_slope=1e-3, resolution=2.5e-7, kernel=0.3,
              tol=0.5):
    """Common slope of lag trajectories with per-source intercepts.

    Different talkers produce parallel lines (same drift, different TDOAs).
    A grid search maximises the concentration of the de-trended lags, then
    least squares with one intercept per cluster of de-trended lags refines
    the slope. Returns (slope, inlier mask).
    """
    t = np.asarray(t, dtype=float)
    lag = np.asarray(lag, dtype=float)
    tc = t - t.mean()
    slopes = np.arange(-max_slope, max_slope + resolution / 2, resolution)
    scores = np.empty(len(slopes))
    for start in range(0, len(slopes), 256):
        s = slopes[start:start + 256]
        r = lag[None, :] - s[:, None] * tc[None, :]
        d = r[:, :, None] - r[:, None, :]
        scores[start:start + 256] = np.exp(-0.5 * (d / kernel) ** 2).sum(
            axis=(1, 2))
    slope = slopes[np.argmax(scores)]

    inliers = np.ones(len(t), dtype=bool)
    for _ in range(5):
        resid = lag - slope * tc
        labels = _cluster_1d(resid, 2 * tol)
        counts = np.bincount(labels)
        inliers = counts[labels] >= 2
        if inliers.sum() < 3:
            break
        groups = np.unique(labels[inliers])
        design = np.zeros((inliers.sum(), len(groups) + 1))
        design[:, 0] = tc[inliers]
        for g_idx, g in enumerate(groups):
            design[:, g_idx + 1] = labels[inliers] == g
        coef, *_ = np.linalg.lstsq(design, lag[inliers], rcond=None)
        fitted = design @ coef
        err = np.abs(lag[inliers] - fitted)
        new_slope = coef[0]
        if np.all(err <= tol):
            slope = new_slope
            break
        keep = np.flatnonzero(inliers)[err <= max(tol, np.median(err) * 3)]
        slope = new_slope
        inliers = np.zeros(len(t), dtype=bool)
        inliers[keep] = True
    return float(slope), inliers


def _estimate_sro_once(ref, other, fs, cfg):
    centres, lags, usable = _segment_lags(ref, other, fs, cfg)
    if usable.sum() < 3:
        raise InsufficientSegmentsError('insufficient coherent segments')
    slope, inliers = fit_drift(centres[usable], lags[usable])
    if inliers.sum() < 3:
        raise InsufficientSegmentsError('insufficient coherent segments')
    # delay of other grows as -e / (1 + e) per reference sample
    return -slope / (1 + slope) * 1e6


def estimate_sro(ref, other, fs=16000, cfg: SyncConfig = SyncConfig()):
    """SRO of ``other`` relative to ``ref`` in ppm.

    ``resample_sro(other, estimate)`` removes the drift. The estimate is
    refined by re-estimating the residual drift after resampling, which
    removes the smearing of the GCC peak within long segments.
    """
    ref = np.asarray(ref, dtype=float)
    other = np.asarray(other, dtype=float)
    total = 0.0
    current = other
    for it in range(max(cfg.n_refinements, 1)):
        residual = _estimate_sro_once(ref, current, fs, cfg)
        total = ((1 + total * 1e-6) * (1 + residual * 1e-6) - 1) * 1e6
        logger.debug('SRO iteration %d: residual %.3f ppm, total %.3f ppm',
                     it, residual, total)
        if abs(residual) < 0.02:
            break
        current = resample_sro(other, total)
    return float(total)


def apply_sync(rec: MultichannelRecording, report: SyncReport):
    """SRO resampling of every channel followed by STO compensation.

    Resampling first keeps the STO on the reference clock: a device with
    ``apply_sto_sro(x, sto, sro)`` is restored by the report ``(sto, sro)``.
    """
    chans = np.stack([resample_sro(ch, ppm) if ppm else ch
                      for ch, ppm in zip(rec.channels, report.sro_ppm)])
    return compensate_sto(
        MultichannelRecording(chans, rec.sample_rate_hz, list(rec.device_ids)),
        report)


def sync_recording(rec: MultichannelRecording, cfg: SyncConfig = SyncConfig()):
    """Estimate STOs and SROs w.r.t. the reference channel and apply them.

    Order: coarse STO, SRO estimation on the STO-compensated signals, then
    a residual STO re-estimate (PhaT-weighted) on the drift-free signals.
    """
    fs = rec.sample_rate_hz
    ref_idx = cfg.reference_channel
    n = rec.n_samples
    window = min(cfg.search_window_s, n / fs)
    max_lag = min(cfg.max_lag_s, window)

    ref = rec.channels[ref_idx]
    sto = [0 if m == ref_idx else
           estimate_sto(ref, ch, fs, window, max_lag)
           for m, ch in enumerate(rec.channels)]
    coarse = compensate_sto(rec, SyncReport(sto, [0.0] * rec.n_channels,
                                            ref_idx))
    sro = [0.0 if m == ref_idx else
           estimate_sro(coarse.channels[ref_idx], ch, fs, cfg)
           for m, ch in enumerate(coarse.channels)]

    refine_window = min(cfg.refine_window_s, coarse.n_samples / fs)
    for m, ch in enumerate(rec.channels):
        if m == ref_idx:
            continue
        drift_free = resample_sro(ch, sro[m])
        shifted = compensate_sto(
            MultichannelRecording(np.stack([ref, drift_free]), fs),
            SyncReport([0, sto[m]], [0.0, 0.0]))
        sto[m] += estimate_sto(shifted.channels[0], shifted.channels[1], fs,
                               refine_window, min(0.1, refine_window),
                               phat=True)
    report = SyncReport([int(s) for s in sto], [float(p) for p in sro],
                        ref_idx)
    return apply_sync(rec, report), report
