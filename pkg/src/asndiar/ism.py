"""Image-source room impulse responses for shoebox rooms."""
import numpy as np

from .interp import fractional_delay_taps

MAX_ORDER = 20


def sabine_reflection(room_dims, t60):
    """Uniform wall reflection coefficient from Sabine's formula."""
    lx, ly, lz = room_dims
    volume = lx * ly * lz
    surface = 2 * (lx * ly + lx * lz + ly * lz)
    alpha = 0.161 * volume / (surface * t60)
    if alpha > 1:
        raise ValueError(
            f'T60 of {t60} s is too short for a {lx}x{ly}x{lz} m room')
    return np.sqrt(1 - alpha)


def image_source_rir(src, mic, fs, c=343.0, room_dims=None, t60=0.0,
                     length=None, max_order=None):
    """Impulse response from ``src`` to ``mic``.

    Every image contributes a fractionally delayed impulse of amplitude
    ``beta**n_reflections / distance``. Without room or with ``t60 == 0``
    only the direct path is modelled.

    Args:
        src, mic: 3-D positions in meters
        fs: sampling rate in Hz
        c: speed of sound in m/s
        room_dims: (Lx, Ly, Lz) in meters or None for free field
        t60: reverberation time in seconds
        length: number of taps; defaults to direct path + t60 + kernel
        max_order: reflection order per axis, derived from t60 if None
    Returns:
        1-D impulse response
    """
    src = np.asarray(src, dtype=float)
    mic = np.asarray(mic, dtype=float)
    direct = np.linalg.norm(src - mic)
    if direct == 0:
        raise ValueError('source coincides with a microphone')

    if room_dims is None or t60 <= 0:
        delay = direct / c * fs
        if length is None:
            length = int(np.ceil(delay)) + 32
        return fractional_delay_taps([delay], [1.0 / direct], length)

    room = np.asarray(room_dims, dtype=float)
    beta = sabine_reflection(room, t60)
    if length is None:
        length = int(np.ceil((direct / c + t60) * fs)) + 32
    max_dist = length / fs * c
    if max_order is None:
        max_order = min(int(np.ceil(max_dist / room.min())) + 1, MAX_ORDER)

    n = np.arange(-max_order, max_order + 1)
    grids = []
    refl = []
    for axis in range(3):
        # image coordinate (1 - 2q) * s + 2 n L, reflections |n - q| + |n|
        q = np.array([0, 1])
        coord = (1 - 2 * q)[None, :] * src[axis] + 2 * n[:, None] * room[axis]
        count = np.abs(n[:, None] - q[None, :]) + np.abs(n[:, None])
        grids.append(coord.ravel())
        refl.append(count.ravel())
    px, py, pz = np.meshgrid(*grids, indexing='ij')
    rx, ry, rz = np.meshgrid(*refl, indexing='ij')
    dist = np.sqrt((px - mic[0]) ** 2 + (py - mic[1]) ** 2
                   + (pz - mic[2]) ** 2).ravel()
    order = (rx + ry + rz).ravel()
    keep = dist < max_dist
    dist, order = dist[keep], order[keep]
    gains = beta ** order / dist
    return fractional_delay_taps(dist / c * fs, gains, length)
