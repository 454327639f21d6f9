"""WAV input/output (PCM16 and float32)."""
import numpy as np
from scipy.io import wavfile


def write_wav(path, signals, sample_rate, dtype='float32'):
    """Write ``signals`` of shape (channels, samples) or (samples,).

    ``dtype`` is ``'float32'`` or ``'int16'``; int16 output is scaled from
    the [-1, 1) range and clipped.
    """
    signals = np.asarray(signals)
    data = signals.T if signals.ndim == 2 else signals
    if dtype == 'float32':
        data = data.astype(np.float32)
    elif dtype == 'int16':
        data = np.clip(np.rint(data * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise ValueError(f'unsupported WAV dtype {dtype!r}')
    wavfile.write(str(path), int(sample_rate), data)


def read_wav(path):
    """Return (signals (channels, samples) float64, sample_rate)."""
    try:
        fs, data = wavfile.read(str(path))
    except ValueError as exc:
        raise ValueError(f'malformed WAV file {path}: {exc}') from exc
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        data = data.astype(np.float64)
    else:
        raise ValueError(f'unsupported WAV sample format {data.dtype}')
    if data.ndim == 1:
        data = data[None, :]
    else:
        data = data.T
    return np.ascontiguousarray(data), int(fs)
