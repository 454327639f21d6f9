"""Guided source separation with a cACGMM and time-varying mixture weights.

One class per diarized speaker plus a trailing noise class. Speaker
activity guides the EM by forcing posteriors of inactive speakers to zero.
Initial posteriors come either from the activity alone (T-Init) or from
steering-vector MVDR beamformers built from the speakers' TDOA vectors
(TF-Init).
"""
import struct
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter
from scipy.special import logsumexp

from .activity import ActivityMatrix
from .pairs import delays_from_tdoa
from .stft import SpectrogramTensor

REG = 1e-6
MVDR_LOADING = 1e-3


class NonFiniteLikelihoodError(FloatingPointError):
    pass


@dataclass
class MaskSet:
    """Class posteriors, shape (classes, frames, bins); noise is last."""
    gamma: np.ndarray

    @property
    def n_classes(self):
        return self.gamma.shape[0]


@dataclass
class CacgmmState:
    """B: (classes, bins, M, M); pi: (classes, frames); class_activity
    (classes, frames) with the noise class always active."""
    B: np.ndarray
    pi: np.ndarray
    class_activity: np.ndarray


def class_activity(active):
    """Append the always-active noise class to a speaker activity matrix."""
    active = np.asarray(active, dtype=bool)
    return np.concatenate([active, np.ones((1, active.shape[1]), bool)])


@dataclass
class Observations:
    """Unit-norm observation vectors of one spectrogram excerpt.

    Z: (K, L, M); valid: (L, K) bins with energy; zz: (K, M * M, L) flattened
    outer products z z^H, shared by the E- and M-step.
    """
    Z: np.ndarray
    valid: np.ndarray
    zz: np.ndarray

    @classmethod
    def from_stft(cls, Y):
        Z, valid = normalize_observations(Y)
        K, L, M = Z.shape
        zz = (Z[:, :, :, None] * np.conj(Z[:, :, None, :])).reshape(K, L, -1)
        return cls(Z, valid, np.ascontiguousarray(zz.transpose(0, 2, 1)))

    @property
    def n_mics(self):
        return self.Z.shape[-1]


def normalize_observations(Y):
    """Unit-norm direction vectors, (M, L, K) -> (K, L, M), and validity."""
    Y = np.asarray(Y)
    norm = np.linalg.norm(Y, axis=0)
    valid = norm > 0
    Z = np.zeros(Y.shape, dtype=complex)
    np.divide(Y, norm, out=Z, where=valid[None])
    return np.ascontiguousarray(Z.transpose(2, 1, 0)), valid


def t_init(active, n_bins):
    """Activity broadcast over frequency, noise gets an equal share.

    Args:
        active: speaker activity (speakers, frames)
    Returns:
        MaskSet with speakers + noise classes
    """
    act = class_activity(active).astype(float)
    share = act / act.sum(0, keepdims=True)
    return MaskSet(np.repeat(share[:, :, None], n_bins, axis=2))


def steering_vector(delays, k, fft_len, fs=None):
    """Anechoic steering vector(s), unit norm.

    ``delays`` are per-channel delays in samples relative to channel 0;
    ``k`` may be an array of bins (result shape (..., len(k), M)). ``fs``
    cancels out and is accepted for symmetry with the frequency form.
    """
    delays = np.asarray(delays, dtype=float)
    k = np.asarray(k, dtype=float)
    d = delays.reshape(delays.shape[:-1] + (1,) * k.ndim + delays.shape[-1:])
    phase = -2j * np.pi * k[..., None] * d / fft_len
    return np.exp(phase) / np.sqrt(delays.shape[-1])


def dominance_test(Y, context=(3, 3), eig_ratio_threshold=5.0):
    """Bins dominated by a single source.

    The local SCM averages Y Y^H over ``context`` (frames, bins); a bin is
    dominated iff the ratio of the two largest eigenvalues exceeds the
    threshold. Bins without energy in their context are never dominated.

    Args:
        Y: STFT (M, L, K)
    Returns:
        boolean (L, K)
    """
    Y = np.asarray(Y)
    if Y.shape[0] < 2:
        raise ValueError('dominance test needs at least two channels')
    outer = Y[:, None] * np.conj(Y[None])
    size = (1, 1) + tuple(context)
    scm = (uniform_filter(outer.real, size, mode='constant')
           + 1j * uniform_filter(outer.imag, size, mode='constant'))
    scm = scm.transpose(2, 3, 0, 1)
    scm = (scm + np.conj(np.swapaxes(scm, -1, -2))) / 2
    ev = np.linalg.eigvalsh(scm)
    lam1, lam2 = ev[..., -1], np.maximum(ev[..., -2], 0)
    with np.errstate(divide='ignore', invalid='ignore'):
        ratio = lam1 / lam2
    return (lam1 > 0) & (ratio > eig_ratio_threshold)


def tf_init(active, representatives, spec: SpectrogramTensor,
            dominance=None, eig_ratio_threshold=5.0):
    """Bin-wise hard initial masks from steering-vector MVDR beamformers.

    For each frame only the active speakers compete; speaker i's beamformer
    treats all other active speakers as interferers. The bin goes to the
    speaker with the largest output power (ties to the lower index) unless
    it fails the dominance test or carries no energy, then it is noise.

    Args:
        active: speaker activity (speakers, frames) on the grid of ``spec``
        representatives: TDOA vector per speaker (speakers, pairs)
        spec: observations (M, L, K)
        dominance: optional precomputed dominance map (L, K)
    """
    active = np.asarray(active, dtype=bool)
    n_spk, n_frames = active.shape
    reps = np.asarray(representatives, dtype=float)
    if len(reps) != n_spk or np.any(~np.isfinite(reps)):
        raise ValueError('every speaker needs a representative TDOA vector')
    Y = spec.data
    n_mics, _, n_bins = Y.shape
    if dominance is None:
        dominance = dominance_test(Y, eig_ratio_threshold=eig_ratio_threshold)
    gamma = np.zeros((n_spk + 1, n_frames, n_bins))
    gamma[-1] = 1.0
    if n_spk == 0:
        return MaskSet(gamma)

    delays = delays_from_tdoa(reps)
    a = steering_vector(delays, np.arange(n_bins), spec.cfg.fft_len)
    energy = np.sum(np.abs(Y) ** 2, axis=0) > 0
    eye = MVDR_LOADING * n_mics * np.eye(n_mics)

    sets = {}
    for frame in range(n_frames):
        key = tuple(np.flatnonzero(active[:, frame]))
        if key:
            sets.setdefault(key, []).append(frame)
    for key, frame_list in sets.items():
        frame_list = np.array(frame_list)
        powers = []
        for i in key:
            others = [j for j in key if j != i]
            R = np.broadcast_to(eye, (n_bins, n_mics, n_mics)).astype(complex)
            for j in others:
                R += a[j][:, :, None] * np.conj(a[j][:, None, :])
            Ra = np.linalg.solve(R, a[i][..., None])[..., 0]
            w = Ra / np.sum(np.conj(a[i]) * Ra, axis=-1, keepdims=True)
            out = np.einsum('km,mlk->lk', np.conj(w), Y[:, frame_list])
            powers.append(np.abs(out) ** 2)
        best = np.argmax(np.array(powers), axis=0)
        winner = np.array(key)[best]
        ok = dominance[frame_list] & energy[frame_list]
        for pos, i in enumerate(key):
            sel = ok & (winner == i)
            gamma[i, frame_list] = sel
        gamma[-1, frame_list] = ~ok
    return MaskSet(gamma)


def _regularize(B):
    M = B.shape[-1]
    B = (B + np.conj(np.swapaxes(B, -1, -2))) / 2
    tr = np.real(np.trace(B, axis1=-2, axis2=-1))
    return B + (REG * tr / M)[..., None, None] * np.eye(M)


def _quadratic(obs: Observations, B_inv):
    """z^H B^-1 z for every class, bin and frame -> (classes, K, L)."""
    n_cls, K, M, _ = B_inv.shape
    # tr(B^-1 z z^H) = sum_mn B^-1_nm (z z^H)_mn
    flat = np.swapaxes(B_inv, -1, -2).reshape(n_cls, K, 1, M * M)
    q = np.real(np.matmul(flat, obs.zz[None]))[:, :, 0]
    return np.maximum(q, 1e-300)


def m_step(obs: Observations, gamma, q=None):
    """Weights and shape matrices from posteriors.

    Args:
        obs: observations
        gamma: posteriors (classes, L, K)
        q: z^H B_old^-1 z of the previous shape matrices (classes, K, L);
            None means B_old = I
    Returns:
        (B, pi)
    """
    n_cls = gamma.shape[0]
    K, L, M = obs.Z.shape
    g = gamma * obs.valid[None]
    denom = g.sum(axis=(0, 2))
    pi = np.empty((n_cls, L))
    has = denom > 0
    pi[:, has] = g[:, has].sum(axis=2) / denom[has]
    pi[:, ~has] = 0
    pi[-1, ~has] = 1.0

    gk = g.transpose(0, 2, 1)  # (classes, K, L)
    weight = gk if q is None else gk / q
    B = M * np.matmul(obs.zz[None], weight[..., None])[..., 0]
    B = B.reshape(n_cls, K, M, M)
    norm = gk.sum(axis=2)
    empty = norm <= 1e-10
    B = B / np.where(empty, 1.0, norm)[..., None, None]
    B[empty] = np.eye(M)
    return _regularize(B), pi


def e_step(obs: Observations, state: CacgmmState, guided):
    """Posteriors and the observed-data log-likelihood of ``state``.

    Returns:
        (gamma (classes, L, K), log-likelihood, quadratic forms)
    """
    M = obs.n_mics
    valid = obs.valid.T
    _, logdet = np.linalg.slogdet(state.B)
    q = _quadratic(obs, np.linalg.inv(state.B))
    with np.errstate(divide='ignore'):
        log_pi = np.log(state.pi)
    if guided:
        log_pi = np.where(state.class_activity, log_pi, -np.inf)
    log_p = (log_pi[:, None, :] - logdet[:, :, None]
             - M * np.log(q))  # (classes, K, L)
    norm = logsumexp(log_p, axis=0)
    bad = valid & ~np.isfinite(norm)
    if np.any(bad):
        k, l = np.argwhere(bad)[0]
        raise NonFiniteLikelihoodError(
            f'non-finite likelihood at frame {l}, bin {k}')
    with np.errstate(invalid='ignore'):
        gamma = np.exp(log_p - norm[None])
    gamma = np.where(valid[None], gamma, 0.0)
    gamma[-1][~valid] = 1.0
    if guided:
        gamma = gamma * state.class_activity[:, None, :]
    ll = float(np.sum(norm[valid]))
    return gamma.transpose(0, 2, 1), ll, q


def em_iterate(state: CacgmmState, obs: Observations, guided=True):
    """One EM iteration.

    Args:
        state: current model
        obs: normalised observations
        guided: zero the posteriors of inactive classes
    Returns:
        (new state, MaskSet from the E-step, log-likelihood of ``state``)
    """
    gamma, ll, q = e_step(obs, state, guided)
    B, pi = m_step(obs, gamma, q)
    return CacgmmState(B, pi, state.class_activity), MaskSet(gamma), ll


def init_state(obs: Observations, init: MaskSet, active):
    """Initial M-step from an initial mask set (identity as previous B)."""
    B, pi = m_step(obs, init.gamma)
    return CacgmmState(B, pi, class_activity(active))


@dataclass
class GssResult:
    gamma: np.ndarray
    pi: np.ndarray
    start: int
    stop: int
    log_likelihoods: list
    guided_gammas: list = None


def run_gss(spec: SpectrogramTensor, activity: ActivityMatrix,
            representatives, segment, n_guided=10, n_unguided=2,
            context_s=5.0, init_mode='tf', keep_guided=False, dominance=None):
    """GSS on one segment extended by ``context_s`` on both sides.

    Args:
        spec: observations (M, L, K)
        activity: diarized speaker activity on the grid of ``spec``
        representatives: TDOA vector per speaker (needed for ``'tf'``)
        segment: (start, stop) frames of the target segment
        init_mode: ``'t'`` (T-Init) or ``'tf'`` (TF-Init)
        keep_guided: also keep the posteriors of all guided iterations
        dominance: optional dominance map (L, K) of the whole recording
    Returns:
        GssResult with masks and priors restricted to the segment
    """
    start, stop = segment
    if stop <= start:
        raise ValueError(f'empty segment {segment}')
    ctx = int(round(context_s / spec.frame_shift_s))
    lo, hi = max(start - ctx, 0), min(stop + ctx, spec.n_frames)
    sub = SpectrogramTensor(spec.data[:, lo:hi], spec.cfg,
                            spec.sample_rate_hz, spec.n_samples)
    active = activity.active[:, lo:hi]
    obs = Observations.from_stft(sub.data)
    if init_mode == 't':
        init = t_init(active, sub.n_bins)
    elif init_mode == 'tf':
        init = tf_init(active, representatives, sub,
                       None if dominance is None else dominance[lo:hi])
    else:
        raise ValueError(f'unknown init mode {init_mode!r}')
    state = init_state(obs, init, active)
    lls, guided = [], []
    for it in range(n_guided + n_unguided):
        is_guided = it < n_guided
        state, masks, ll = em_iterate(state, obs, guided=is_guided)
        lls.append(ll)
        if keep_guided and is_guided:
            guided.append(masks.gamma)
    # posteriors of the final state
    gamma, ll, _ = e_step(obs, state, guided=n_unguided == 0)
    lls.append(ll)
    a, b = start - lo, stop - lo
    return GssResult(gamma[:, a:b], state.pi[:, a:b], start, stop, lls,
                     guided if keep_guided else None)


MASK_MAGIC = b'ASNMASK1'


def write_masks(path, gamma):
    """Binary container: magic, (C, L, K) as uint32 LE, float32 LE data."""
    gamma = np.asarray(gamma, dtype='<f4')
    if gamma.ndim != 3:
        raise ValueError('masks must have shape (classes, frames, bins)')
    with open(path, 'wb') as f:
        f.write(MASK_MAGIC)
        f.write(struct.pack('<3I', *gamma.shape))
        f.write(np.ascontiguousarray(gamma).tobytes())


def read_masks(path):
    with open(path, 'rb') as f:
        raw = f.read()
    if raw[:len(MASK_MAGIC)] != MASK_MAGIC:
        raise ValueError(f'{path}: not a mask container')
    off = len(MASK_MAGIC)
    dims = struct.unpack('<3I', raw[off:off + 12])
    payload = raw[off + 12:]
    if len(payload) != 4 * int(np.prod(dims)):
        raise ValueError(f'{path}: truncated mask payload')
    return np.frombuffer(payload, dtype='<f4').reshape(dims).copy()
