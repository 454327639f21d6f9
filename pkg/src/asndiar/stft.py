"""STFT analysis/synthesis on a centred frame grid.

Frame ``l`` is centred at sample ``l * frame_shift``; signals are
zero-padded by half a frame at the start so that every sample is covered
by the full overlap and the weighted overlap-add inverse is exact.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import check_COLA, get_window


@dataclass(frozen=True)
class StftConfig:
    frame_len: int = 1024
    frame_shift: int = 256
    window: str = 'hann'
    fft_len: Optional[int] = None

    def __post_init__(self):
        if self.fft_len is None:
            object.__setattr__(self, 'fft_len', self.frame_len)
        if self.fft_len < self.frame_len:
            raise ValueError('fft_len must be at least frame_len')
        if self.frame_len % self.frame_shift:
            raise ValueError('frame_shift must divide frame_len')
        if not check_COLA(self.window, self.frame_len,
                          self.frame_len - self.frame_shift):
            raise ValueError(f'{self.window} window violates COLA at shift '
                             f'{self.frame_shift}')

    @property
    def n_bins(self):
        return self.fft_len // 2 + 1

    def window_array(self):
        return get_window(self.window, self.frame_len, fftbins=True)

    def n_frames(self, n_samples):
        return 1 + n_samples // self.frame_shift

    def bin_frequencies(self, fs):
        return np.arange(self.n_bins) * fs / self.fft_len


@dataclass
class SpectrogramTensor:
    """Complex STFT, shape (channels, frames, bins)."""
    data: np.ndarray
    cfg: StftConfig
    sample_rate_hz: int
    n_samples: int

    @property
    def n_channels(self):
        return self.data.shape[0]

    @property
    def n_frames(self):
        return self.data.shape[1]

    @property
    def n_bins(self):
        return self.data.shape[2]

    @property
    def frame_shift_s(self):
        return self.cfg.frame_shift / self.sample_rate_hz


def frames(x, cfg: StftConfig):
    """Zero-padded frames, shape (..., n_frames, frame_len), unwindowed."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    if n < cfg.frame_len:
        raise ValueError(f'signal of {n} samples is shorter than one frame '
                         f'({cfg.frame_len})')
    n_frames = cfg.n_frames(n)
    pad_front = cfg.frame_len // 2
    total = (n_frames - 1) * cfg.frame_shift + cfg.frame_len
    pad_back = total - n - pad_front
    widths = [(0, 0)] * (x.ndim - 1) + [(pad_front, pad_back)]
    xp = np.pad(x, widths)
    view = sliding_window_view(xp, cfg.frame_len, axis=-1)
    return view[..., ::cfg.frame_shift, :][..., :n_frames, :]


def stft(x, cfg: StftConfig = StftConfig(), sample_rate_hz=16000):
    """Windowed one-sided DFT of every frame of every channel."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    fr = frames(x, cfg) * cfg.window_array()
    data = np.fft.rfft(fr, n=cfg.fft_len, axis=-1)
    return SpectrogramTensor(data, cfg, sample_rate_hz, x.shape[-1])


def istft(spec: SpectrogramTensor):
    """Weighted overlap-add inverse; returns (channels, n_samples)."""
    cfg = spec.cfg
    data = np.asarray(spec.data)
    squeeze = data.ndim == 2
    if squeeze:
        data = data[None]
    n_ch, n_frames, _ = data.shape
    win = cfg.window_array()
    fr = np.fft.irfft(data, n=cfg.fft_len, axis=-1)[..., :cfg.frame_len]
    fr = fr * win
    shift = cfg.frame_shift
    ratio = cfg.frame_len // shift
    total = (n_frames - 1) * shift + cfg.frame_len
    out = np.zeros((n_ch, total))
    norm = np.zeros(total)
    win_sq = (win ** 2).reshape(ratio, shift)
    for r in range(ratio):
        block = fr[..., r * shift:(r + 1) * shift].reshape(n_ch, -1)
        out[:, r * shift:r * shift + n_frames * shift] += block
        norm[r * shift:r * shift + n_frames * shift] += np.tile(
            win_sq[r], n_frames)
    nz = norm > 1e-10
    out[:, nz] /= norm[nz]
    pad_front = cfg.frame_len // 2
    out = out[:, pad_front:pad_front + spec.n_samples]
    return out[0] if squeeze else out
