"""Band-limited (windowed-sinc) interpolation helpers.

Used for fractional propagation delays in the simulator and for the
STO/SRO resampling in both directions.
"""
import numba
import numpy as np

N_TAPS = 32
KAISER_BETA = 8.0
TABLE_PHASES = 4096


def sinc_kernel(x, n_taps=N_TAPS, beta=KAISER_BETA):
    """Kaiser-windowed sinc evaluated at offsets ``x`` (in samples).

    The kernel is 1 at ``x == 0`` and vanishes (to rounding) at every other
    integer offset, so integer shifts are reproduced.
    """
    x = np.asarray(x, dtype=float)
    half = n_taps / 2
    inside = np.abs(x) < half
    arg = np.clip(1.0 - (x / half) ** 2, 0.0, None)
    win = np.i0(beta * np.sqrt(arg)) / np.i0(beta)
    return np.where(inside, np.sinc(x) * win, 0.0)


_tables = {}


def _phase_table(n_taps, beta):
    """Kernel weights for fractional offsets k / TABLE_PHASES, k = 0..P."""
    key = (n_taps, beta)
    if key not in _tables:
        half = n_taps // 2
        offsets = np.arange(-half + 1, half + 1)
        frac = np.arange(TABLE_PHASES + 1) / TABLE_PHASES
        _tables[key] = sinc_kernel(frac[:, None] - offsets[None, :],
                                   n_taps, beta)
    return _tables[key]


@numba.njit(cache=True)
def _interp_kernel(padded, positions, table, half, n, out):
    n_phases = table.shape[0] - 1
    n_taps = table.shape[1]
    for j in range(positions.shape[0]):
        p = positions[j]
        if p < 0 or p > n - 1:
            out[j] = 0.0
            continue
        base = int(np.floor(p))
        phase = (p - base) * n_phases
        k = min(int(phase), n_phases - 1)
        a = phase - k
        acc = 0.0
        first = base + 1  # padded index of sample base - half + 1
        for t in range(n_taps):
            w = table[k, t] * (1.0 - a) + table[k + 1, t] * a
            acc += padded[first + t] * w
        out[j] = acc


def interpolate(signal, positions, n_taps=N_TAPS, beta=KAISER_BETA):
    """Evaluate ``signal`` at fractional sample ``positions``.

    Positions outside ``[0, len(signal) - 1]`` yield zeros, samples beyond
    the signal borders are treated as zeros inside the kernel support.
    """
    signal = np.asarray(signal, dtype=float)
    positions = np.asarray(positions, dtype=float)
    n = signal.shape[-1]
    half = n_taps // 2
    padded = np.concatenate([np.zeros(half), signal, np.zeros(half + 1)])
    out = np.empty(positions.size)
    _interp_kernel(padded, np.ascontiguousarray(positions.ravel()),
                   _phase_table(n_taps, beta), half, n, out)
    return out.reshape(positions.shape)


def fractional_delay_taps(delays, gains, length, n_taps=N_TAPS,
                          beta=KAISER_BETA):
    """Sum of fractionally delayed, scaled impulses as an FIR of ``length``.

    Args:
        delays: delays in samples (any shape, flattened)
        gains: amplitude per delay, broadcastable to ``delays``
        length: number of output taps; contributions beyond are dropped
    """
    delays = np.ravel(np.asarray(delays, dtype=float))
    gains = np.ravel(np.broadcast_to(gains, np.shape(delays)).astype(float))
    half = n_taps // 2
    offsets = np.arange(-half + 1, half + 1)
    base = np.floor(delays).astype(np.int64)
    frac = delays - base
    idx = base[:, None] + offsets[None, :]
    w = sinc_kernel(frac[:, None] - offsets[None, :], n_taps, beta)
    w = w * gains[:, None]
    keep = (idx >= 0) & (idx < length)
    return np.bincount(idx[keep], weights=w[keep], minlength=length)[:length]
