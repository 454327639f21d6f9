"""Frame-wise multi-speaker TDOA vector estimation.

Pipeline per frame: GCC-PhaT of every microphone pair (band-limited and
averaged over ``L`` frames), candidate lags at the strongest positive
local maxima, combination of one candidate per pair into cyclically
consistent TDOA vectors, SRP-PhaT scoring with a uniqueness filter, and
finally an energy VAD plus SRP statistics to decide how many vectors
(speakers) a frame carries.
"""
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .pairs import mic_pairs, mic_triples, n_mics_from_pairs
from .stft import SpectrogramTensor, StftConfig, frames


@dataclass
class TdoaEstConfig:
    band_low_hz: float = 125.0
    band_high_hz: float = 3500.0
    L: int = 13
    C: int = 5
    tau_th: float = 2.0
    peak_std_factor: float = 2.0
    lag_max: Optional[int] = 256
    vad_margin_db: float = 10.0
    vad_percentile: float = 10.0
    vad_channel: int = 0

    def __post_init__(self):
        if not 0 < self.band_low_hz < self.band_high_hz:
            raise ValueError('need 0 < band_low_hz < band_high_hz')
        if self.C < 1 or self.L < 1:
            raise ValueError('C and L must be at least 1')
        if self.tau_th < 0:
            raise ValueError('tau_th must be non-negative')


@dataclass
class GccTensor:
    """Averaged GCC-PhaT, shape (pairs, frames, 2 * lag_max + 1)."""
    values: np.ndarray
    lag_max: int
    averaging_span: int

    @property
    def n_pairs(self):
        return self.values.shape[0]

    @property
    def n_frames(self):
        return self.values.shape[1]

    @property
    def lags(self):
        return np.arange(-self.lag_max, self.lag_max + 1)


@dataclass(frozen=True)
class TdoaVector:
    tau: tuple
    srp: float
    frame: int

    def to_dict(self):
        return {'frame': int(self.frame), 'tau': [float(t) for t in self.tau],
                'srp': float(self.srp)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d['tau']), float(d['srp']), int(d['frame']))


def _moving_average(x, span, axis):
    """Centred moving average; windows are truncated at the borders."""
    x = np.moveaxis(x, axis, 0)
    n = x.shape[0]
    csum = np.concatenate([np.zeros((1,) + x.shape[1:], dtype=x.dtype),
                           np.cumsum(x, axis=0)])
    lo = np.clip(np.arange(n) - (span - 1) // 2, 0, n)
    hi = np.clip(np.arange(n) + span // 2 + 1, 0, n)
    shape = (n,) + (1,) * (x.ndim - 1)
    out = (csum[hi] - csum[lo]) / (hi - lo).reshape(shape)
    return np.moveaxis(out, 0, axis)


def gcc_phat(spec: SpectrogramTensor, cfg: TdoaEstConfig = TdoaEstConfig()):
    """Band-limited GCC-PhaT of all pairs, averaged over ``cfg.L`` frames.

    Lag ``lam`` of pair (m, m') peaks at the delay of channel m' relative
    to channel m.
    """
    data = spec.data
    n_mics = data.shape[0]
    if n_mics < 2:
        raise ValueError('GCC-PhaT needs at least two channels')
    fft_len = spec.cfg.fft_len
    lag_max = cfg.lag_max if cfg.lag_max is not None else fft_len // 2 - 1
    lag_max = min(lag_max, fft_len // 2 - 1)
    freqs = spec.cfg.bin_frequencies(spec.sample_rate_hz)
    band = (freqs >= cfg.band_low_hz) & (freqs <= cfg.band_high_hz)

    pairs = mic_pairs(n_mics)
    out = np.empty((len(pairs), data.shape[1], 2 * lag_max + 1),
                   dtype=np.float32)
    for p, (m, n) in enumerate(pairs):
        cross = data[n][:, band] * np.conj(data[m][:, band])
        mag = np.abs(cross)
        nz = mag > 0
        phat = np.zeros_like(cross)
        phat[nz] = cross[nz] / mag[nz]
        phat = _moving_average(phat, cfg.L, axis=0)
        full = np.zeros((data.shape[1], spec.cfg.n_bins), dtype=complex)
        full[:, band] = phat
        g = np.fft.irfft(full, n=fft_len, axis=-1)
        out[p] = np.concatenate([g[:, fft_len - lag_max:], g[:, :lag_max + 1]],
                                axis=-1)
    return GccTensor(out, lag_max, cfg.L)


def _peak_mask(g, factor):
    """Strict positive local maxima above ``factor`` x std over the lag axis."""
    g = np.asarray(g)
    mask = np.zeros(g.shape, dtype=bool)
    inner = g[..., 1:-1]
    mask[..., 1:-1] = (inner > g[..., :-2]) & (inner > g[..., 2:])
    std = np.std(g, axis=-1, keepdims=True)
    return mask & (g > 0) & (g > factor * std)


def detect_peaks(g_slice, cfg: TdoaEstConfig = TdoaEstConfig(), lag_max=None):
    """Up to ``C`` candidate lags of one pair/frame GCC slice.

    Returns a list of ``(lag, value)`` sorted by value (descending), ties by
    lag (ascending). ``lag_max`` defaults to ``(len(g_slice) - 1) // 2``.
    """
    g_slice = np.asarray(g_slice, dtype=float)
    if lag_max is None:
        lag_max = (len(g_slice) - 1) // 2
    idx = np.flatnonzero(_peak_mask(g_slice, cfg.peak_std_factor))
    order = sorted(idx, key=lambda i: (-g_slice[i], i))[:cfg.C]
    return [(int(i) - lag_max, float(g_slice[i])) for i in order]


def srp_phat(tau, g: GccTensor, frame):
    """Sum over pairs of the GCC at the hypothesised lags (linear interp.)."""
    tau = np.asarray(tau, dtype=float)
    vals = g.values[:, frame, :]
    pos = np.clip(tau + g.lag_max, 0, 2 * g.lag_max)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, 2 * g.lag_max)
    frac = pos - lo
    p = np.arange(len(tau))
    return float(np.sum(vals[p, lo] * (1 - frac) + vals[p, hi] * frac))


def _consistent_selections(candidates, n_mics, tau_th):
    """Depth-first search over one candidate lag per pair.

    Pairs are visited in the order (0,1); (0,2),(1,2); (0,3),(1,3),(2,3); ...
    so that every microphone triple is checked as soon as its last pair is
    assigned.
    """
    pidx = {pair: p for p, pair in enumerate(mic_pairs(n_mics))}
    order = [(m, o) for o in range(1, n_mics) for m in range(o)]
    checks = []
    for m, o in order:
        # triples (a, m, o), a < m: |tau_am - tau_ao + tau_mo| <= th
        checks.append([(pidx[a, m], pidx[a, o]) for a in range(m)])
    order_idx = [pidx[pair] for pair in order]
    lags = [np.array([c[0] for c in candidates[p]], dtype=float)
            for p in range(len(candidates))]

    results = []
    tau = np.zeros(len(candidates))

    def visit(depth):
        if depth == len(order_idx):
            results.append(tau.copy())
            return
        p = order_idx[depth]
        for lag in lags[p]:
            ok = True
            for p_am, p_ao in checks[depth]:
                if abs(tau[p_am] - tau[p_ao] + lag) > tau_th:
                    ok = False
                    break
            if ok:
                tau[p] = lag
                visit(depth + 1)

    visit(0)
    return results


def unique_filter(vectors, tau_th):
    """Keep vectors by descending SRP; a vector is dropped when it shares
    more than one element (within ``tau_th``) with an already kept one."""
    ranked = sorted(vectors, key=lambda v: (-v.srp, v.tau))
    kept = []
    for v in ranked:
        tv = np.asarray(v.tau)
        if all(np.sum(np.abs(tv - np.asarray(k.tau)) <= tau_th) <= 1
               for k in kept):
            kept.append(v)
    return kept


def combine_candidates(candidates, g: GccTensor, frame,
                       cfg: TdoaEstConfig = TdoaEstConfig()):
    """Cyclically consistent, unique TDOA vectors from per-pair candidates.

    Args:
        candidates: one list of ``(lag, score)`` per pair (pair order)
        g: GCC tensor used for SRP-PhaT scoring
        frame: frame index
    Returns:
        TdoaVectors sorted by SRP (descending), ties by tau (ascending)
    """
    if any(len(c) == 0 for c in candidates):
        return []
    n_mics = n_mics_from_pairs(len(candidates))
    selections = _consistent_selections(candidates, n_mics, cfg.tau_th)
    vectors = [TdoaVector(tuple(float(t) for t in tau),
                          srp_phat(tau, g, frame), int(frame))
               for tau in selections]
    return unique_filter(vectors, cfg.tau_th)


def frame_energies_db(x, stft_cfg: StftConfig):
    """Log-energy of the windowed frames on the STFT grid."""
    fr = frames(np.asarray(x, dtype=float), stft_cfg) * stft_cfg.window_array()
    energy = np.sum(fr ** 2, axis=-1)
    with np.errstate(divide='ignore'):
        return 10 * np.log10(energy)


def energy_vad(x, stft_cfg: StftConfig = StftConfig(), margin_db=10.0,
               percentile=10.0, abs_floor_db=-100.0):
    """Frame-wise energy VAD on the STFT frame grid.

    A frame is active when its log-energy exceeds the noise floor (the
    ``percentile``-th percentile of frame log-energies) by ``margin_db``.
    When the energy distribution has no distinct low-energy population
    (spread between the 95th and the floor percentile below the margin) the
    percentile is no noise estimate; frames are then active iff above the
    absolute floor ``abs_floor_db`` (relative to unit mean-square power).
    """
    e = frame_energies_db(x, stft_cfg)
    power_db = e - 10 * np.log10(np.sum(stft_cfg.window_array() ** 2))
    finite = np.isfinite(e)
    if not np.any(finite):
        return np.zeros(e.shape, dtype=bool)
    e_f = np.where(finite, e, np.min(e[finite]) - 200)
    floor = np.percentile(e_f, percentile)
    spread = np.percentile(e_f, 95) - floor
    if spread < margin_db:
        return power_db > abs_floor_db
    return e_f > floor + margin_db


def select_frame_tdoas(frame_vectors, vad):
    """Speaker counting per frame.

    On VAD-active frames the highest-SRP vector is always kept; further
    vectors are kept when their SRP exceeds mean - 2 std of the per-frame
    maximum SRP over all active frames. Inactive frames keep nothing.
    """
    vad = np.asarray(vad, dtype=bool)
    maxima = [vecs[0].srp for vecs, a in zip(frame_vectors, vad)
              if a and vecs]
    if not maxima:
        return [[] for _ in frame_vectors]
    thr = np.mean(maxima) - 2 * np.std(maxima)
    out = []
    for vecs, a in zip(frame_vectors, vad):
        if not a or not vecs:
            out.append([])
            continue
        ranked = sorted(vecs, key=lambda v: (-v.srp, v.tau))
        out.append([ranked[0]] + [v for v in ranked[1:] if v.srp > thr])
    return out


def frame_candidates(g: GccTensor, cfg: TdoaEstConfig = TdoaEstConfig()):
    """Per-frame, per-pair candidate lists (vectorised peak picking)."""
    mask = _peak_mask(g.values, cfg.peak_std_factor)
    out = []
    for frame in range(g.n_frames):
        per_pair = []
        for p in range(g.n_pairs):
            idx = np.flatnonzero(mask[p, frame])
            vals = g.values[p, frame, idx]
            order = np.lexsort((idx, -vals))[:cfg.C]
            per_pair.append([(int(idx[i]) - g.lag_max, float(vals[i]))
                             for i in order])
        out.append(per_pair)
    return out


def estimate_tdoas(spec: SpectrogramTensor, x_ref,
                   cfg: TdoaEstConfig = TdoaEstConfig()):
    """Selected TDOA vectors for every frame of a (synchronised) recording.

    Returns ``(selected, gcc, vad)`` where ``selected[l]`` is the list of
    TdoaVectors kept for frame ``l``.
    """
    g = gcc_phat(spec, cfg)
    cands = frame_candidates(g, cfg)
    vad = energy_vad(x_ref, spec.cfg, cfg.vad_margin_db, cfg.vad_percentile)
    vad = vad[:g.n_frames]
    vectors = [combine_candidates(c, g, f, cfg) if vad[f] else []
               for f, c in enumerate(cands)]
    return select_frame_tdoas(vectors, vad), g, vad


def write_tdoa_jsonl(path, selected):
    with open(path, 'w') as f:
        for vecs in selected:
            for v in vecs:
                f.write(json.dumps(v.to_dict()) + '\n')


def read_tdoa_jsonl(path, n_frames=None):
    vecs = []
    with open(path) as f:
        for line in f:
            if line.strip():
                vecs.append(TdoaVector.from_dict(json.loads(line)))
    if n_frames is None:
        n_frames = max((v.frame for v in vecs), default=-1) + 1
    out = [[] for _ in range(n_frames)]
    for v in vecs:
        out[v.frame].append(v)
    return out


def check_consistency(vectors, tau_th):
    """Max cyclic residual over all triples of every vector (0 if none)."""
    from .pairs import cyclic_residuals
    if not vectors:
        return 0.0
    tau = np.array([v.tau for v in vectors])
    res = cyclic_residuals(tau)
    return float(np.max(np.abs(res))) if res.size else 0.0


__all__ = ['TdoaEstConfig', 'GccTensor', 'TdoaVector', 'gcc_phat',
           'detect_peaks', 'combine_candidates', 'srp_phat', 'energy_vad',
           'select_frame_tdoas', 'estimate_tdoas', 'unique_filter',
           'mic_triples']
