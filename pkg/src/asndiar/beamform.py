"""Mask-based MVDR extraction of the diarized speakers.

Target activity is re-derived from the GSS priors. Each target segment is
split wherever the set of active interferers changes; the target SCM is
estimated per segment and the interference SCM per sub-segment, and a
Souden MVDR is applied with the reference channel that maximises the
worst-case expected SDR of the segment.
"""
from dataclasses import dataclass, field

import numpy as np

from .activity import ActivityMatrix, runs
from .diarize import smooth_activity
from .stft import SpectrogramTensor, istft

TRACE_EPS = 1e-12
LOADING = 1e-6


@dataclass
class BeamformConfig:
    activity_threshold: float = 0.2
    dilate_frames: int = 25
    erode_frames: int = 15
    min_subsegment_frames: int = 5


@dataclass
class Segment:
    start: int
    stop: int
    subsegments: list = field(default_factory=list)  # (start, stop, interferers)


@dataclass
class SegmentPlan:
    speaker: int
    segments: list


def _merge_short(subs, min_len):
    """Merge sub-segments shorter than ``min_len`` into a neighbour."""
    subs = [list(s) for s in subs]
    while len(subs) > 1:
        lengths = [s[1] - s[0] for s in subs]
        short = [i for i, n in enumerate(lengths) if n < min_len]
        if not short:
            break
        i = min(short, key=lambda i: (lengths[i], i))
        if i == 0:
            j = 1
        elif i == len(subs) - 1:
            j = i - 1
        else:
            # the longer neighbour absorbs it
            j = i - 1 if lengths[i - 1] >= lengths[i + 1] else i + 1
        lo, hi = min(i, j), max(i, j)
        keep = subs[j]
        merged = [subs[lo][0], subs[hi][1], keep[2]]
        subs[lo:hi + 1] = [merged]
        subs = _coalesce(subs)
    return [tuple(s) for s in subs]


def _coalesce(subs):
    """Join neighbouring sub-segments with the same interferer set."""
    out = [subs[0]]
    for s in subs[1:]:
        if s[2] == out[-1][2]:
            out[-1] = [out[-1][0], s[1], s[2]]
        else:
            out.append(s)
    return out


def resegment(priors, speaker, cfg: BeamformConfig = BeamformConfig(),
              frame_shift_s=1.0):
    """Segments and sub-segments of one target from the GSS priors.

    Args:
        priors: (classes, frames) mixture weights; the last class is noise
        speaker: target class index
    Returns:
        SegmentPlan
    """
    priors = np.asarray(priors, dtype=float)
    active = priors[:-1] > cfg.activity_threshold
    smoothed = smooth_activity(ActivityMatrix(active, frame_shift_s),
                               cfg.dilate_frames, cfg.erode_frames).active
    target = smoothed[speaker]
    others = [j for j in range(active.shape[0]) if j != speaker]
    segments = []
    for start, stop in runs(target):
        subs = []
        cur = None
        for frame in range(start, stop):
            key = tuple(j for j in others if active[j, frame])
            if cur is None or key != cur[2]:
                if cur is not None:
                    subs.append((cur[0], frame, cur[2]))
                cur = (frame, None, key)
        subs.append((cur[0], stop, cur[2]))
        segments.append(Segment(start, stop, _merge_short(
            subs, cfg.min_subsegment_frames)))
    return SegmentPlan(speaker, segments)


def _scm(Y, weights):
    """Weighted average of Y Y^H over frames -> (K, M, M).

    Y: (M, L, K); weights: (L, K)
    """
    L = Y.shape[1]
    if L == 0:
        raise ValueError('cannot estimate an SCM from zero frames')
    Yw = Y * weights[None]
    scm = np.einsum('mlk,nlk->kmn', Yw, np.conj(Y)) / L
    return (scm + np.conj(np.swapaxes(scm, -1, -2))) / 2


def estimate_target_scm(Y, gamma, frames=None):
    """Average of gamma^2 Y Y^H over the segment frames.

    Args:
        Y: (M, L, K) observations
        gamma: (L, K) target mask
        frames: frame indices or slice (default: all)
    """
    if frames is not None:
        Y, gamma = Y[:, frames], gamma[frames]
    return _scm(Y, np.asarray(gamma, dtype=float) ** 2)


def estimate_interference_scm(Y, gamma, frames=None, loading=0.0):
    """Average of (1 - gamma)^2 Y Y^H over the sub-segment frames.

    ``loading`` adds ``loading * trace / M`` to the diagonal (``loading``
    times identity where the trace vanishes).
    """
    if frames is not None:
        Y, gamma = Y[:, frames], gamma[frames]
    scm = _scm(Y, (1 - np.asarray(gamma, dtype=float)) ** 2)
    if loading:
        M = scm.shape[-1]
        tr = np.real(np.trace(scm, axis1=-2, axis2=-1))
        tr = np.where(tr > 0, tr, M)
        scm = scm + (loading * tr / M)[:, None, None] * np.eye(M)
    return scm


def mvdr_souden(target, interference, ref):
    """Souden MVDR weights w(k) = Phi_n^-1 Phi_s u / tr(Phi_n^-1 Phi_s).

    Args:
        target: (..., M, M) target SCM(s)
        interference: (..., M, M) interference SCM(s), invertible
        ref: reference channel
    Returns:
        weights (..., M); bins with a trace <= 1e-12 pass the reference
        channel through
    """
    target = np.asarray(target)
    interference = np.asarray(interference)
    M = target.shape[-1]
    num = np.linalg.solve(interference, target)
    tr = np.trace(num, axis1=-2, axis2=-1)
    u = np.zeros(M)
    u[ref] = 1.0
    degenerate = np.abs(tr) <= TRACE_EPS
    safe = np.where(degenerate, 1.0, tr)
    w = num[..., :, ref] / safe[..., None]
    return np.where(degenerate[..., None], u, w)


def expected_sdr(w, target, interference):
    """10 log10 of target over interference power at the output (dB)."""
    ps = np.real(np.einsum('...m,...mn,...n->...', np.conj(w), target, w))
    pn = np.real(np.einsum('...m,...mn,...n->...', np.conj(w), interference,
                           w))
    ps, pn = np.sum(ps), np.sum(pn)
    if pn <= 0:
        return np.inf if ps > 0 else -np.inf
    if ps <= 0:
        return -np.inf
    return 10 * np.log10(ps / pn)


def select_reference(target, interferences):
    """Channel maximising the minimum expected SDR over sub-segments.

    Args:
        target: (K, M, M) target SCM of the segment
        interferences: list of (K, M, M) interference SCMs
    Returns:
        (reference channel, weights per sub-segment for that channel)
    """
    M = target.shape[-1]
    best, best_val, best_w = 0, None, None
    for ref in range(M):
        ws = [mvdr_souden(target, phi, ref) for phi in interferences]
        val = min(expected_sdr(w, target, phi)
                  for w, phi in zip(ws, interferences))
        if best_val is None or val > best_val:
            best, best_val, best_w = ref, val, ws
    return best, best_w


def extract_speaker(spec: SpectrogramTensor, gamma, plan: SegmentPlan,
                    return_stft=False):
    """Beamformed time-domain signal of one speaker.

    Args:
        spec: observations (M, L, K)
        gamma: target mask (L, K) on the full recording
        plan: segment plan of the target
    Returns:
        (signal of ``spec.n_samples`` samples, manifest entries) where each
        manifest entry is (start frame, stop frame, reference channel)
    """
    Y = spec.data
    gamma = np.asarray(gamma, dtype=float)
    out = np.zeros(Y.shape[1:], dtype=complex)
    manifest = []
    for seg in plan.segments:
        phi_s = estimate_target_scm(Y, gamma, slice(seg.start, seg.stop))
        phis_n = [estimate_interference_scm(Y, gamma, slice(a, b), LOADING)
                  for a, b, _ in seg.subsegments]
        ref, ws = select_reference(phi_s, phis_n)
        for (a, b, _), w in zip(seg.subsegments, ws):
            out[a:b] = np.einsum('km,mlk->lk', np.conj(w), Y[:, a:b])
        manifest.append((seg.start, seg.stop, ref))
    enhanced = SpectrogramTensor(out[None], spec.cfg, spec.sample_rate_hz,
                                 spec.n_samples)
    signal = istft(enhanced)[0]
    if return_stft:
        return signal, manifest, out
    return signal, manifest
