"""Evaluation metrics: DER, TDOA error and SI-SDR."""
import numpy as np
from scipy.optimize import linear_sum_assignment

from .activity import ActivityMatrix

SI_SDR_CAP_DB = 60.0


def _collar_mask(ref: ActivityMatrix, collar_s):
    """Frames within ``collar_s`` of any reference segment boundary."""
    mask = np.zeros(ref.n_frames, dtype=bool)
    width = int(round(collar_s / ref.frame_shift_s))
    if width <= 0:
        return mask
    edges = np.zeros(ref.n_frames + 1, dtype=bool)
    for spk in range(ref.n_speakers):
        for start, stop in ref.segments(spk):
            edges[start] = True
            edges[stop] = True
    # boundary b sits between frames b-1 and b
    for b in np.flatnonzero(edges):
        mask[max(b - width, 0):min(b + width, ref.n_frames)] = True
    return mask


def speaker_mapping(ref: ActivityMatrix, hyp: ActivityMatrix, scored=None):
    """Overlap-maximising hyp -> ref assignment as a dict."""
    if scored is None:
        scored = np.ones(ref.n_frames, dtype=bool)
    if ref.n_speakers == 0 or hyp.n_speakers == 0:
        return {}
    r = ref.active[:, scored].astype(float)
    h = hyp.active[:, scored].astype(float)
    overlap = h @ r.T
    rows, cols = linear_sum_assignment(-overlap)
    return {int(a): int(b) for a, b in zip(rows, cols)}


def der_details(ref: ActivityMatrix, hyp: ActivityMatrix, collar_s=0.25):
    """DER and its components (in frames) plus the speaker mapping."""
    hyp = hyp.resample_to(ref.n_frames, ref.frame_shift_s)
    scored = ~_collar_mask(ref, collar_s)
    n_ref = ref.active[:, scored].sum(0)
    total = int(n_ref.sum())
    if total == 0:
        raise ValueError('reference contains no scored speech')
    n_hyp = hyp.active[:, scored].sum(0)
    mapping = speaker_mapping(ref, hyp, scored)
    correct = np.zeros(int(scored.sum()), dtype=int)
    for h, r in mapping.items():
        correct += hyp.active[h, scored] & ref.active[r, scored]
    miss = np.maximum(n_ref - n_hyp, 0).sum()
    fa = np.maximum(n_hyp - n_ref, 0).sum()
    conf = (np.minimum(n_ref, n_hyp) - correct).sum()
    return {'der': float(miss + fa + conf) / total, 'miss': int(miss),
            'false_alarm': int(fa), 'confusion': int(conf),
            'total': total, 'mapping': mapping}


def compute_der(ref: ActivityMatrix, hyp: ActivityMatrix, collar_s=0.25):
    """Diarization error rate with optimal speaker mapping.

    ``hyp`` is resampled onto the grid of ``ref``; frames within
    ``collar_s`` of a reference boundary are not scored.
    """
    return der_details(ref, hyp, collar_s)['der']


def tdoa_rmse(est, truth):
    """RMSE of matched TDOA vectors.

    Args:
        est: per frame, a list of estimated vectors (array-likes)
        truth: per frame, a list of ground-truth vectors
    Returns:
        (rmse in samples, spurious rate = unmatched estimates / estimates)
    """
    sq, n_el, n_est, n_spur = 0.0, 0, 0, 0
    for e, t in zip(est, truth):
        n_est += len(e)
        if len(e) == 0 or len(t) == 0:
            n_spur += len(e)
            continue
        e = np.asarray(e, dtype=float).reshape(len(e), -1)
        t = np.asarray(t, dtype=float).reshape(len(t), -1)
        cost = np.mean((e[:, None] - t[None]) ** 2, axis=-1)
        rows, cols = linear_sum_assignment(cost)
        n_spur += len(e) - len(rows)
        sq += float(np.sum((e[rows] - t[cols]) ** 2))
        n_el += len(rows) * e.shape[1]
    rmse = np.sqrt(sq / n_el) if n_el else float('nan')
    return float(rmse), (n_spur / n_est if n_est else 0.0)


def si_sdr(est, ref):
    """Scale-invariant SDR in dB, capped at 60 dB."""
    est = np.asarray(est, dtype=float)
    ref = np.asarray(ref, dtype=float)
    n = min(est.shape[-1], ref.shape[-1])
    est, ref = est[..., :n], ref[..., :n]
    ref_energy = np.sum(ref ** 2, axis=-1, keepdims=True)
    if np.any(ref_energy == 0):
        raise ValueError('reference signal is all zeros')
    alpha = np.sum(est * ref, axis=-1, keepdims=True) / ref_energy
    target = alpha * ref
    noise = est - target
    t_e = np.sum(target ** 2, axis=-1)
    n_e = np.sum(noise ** 2, axis=-1)
    with np.errstate(divide='ignore', invalid='ignore'):
        val = 10 * np.log10(t_e / n_e)
    val = np.minimum(np.nan_to_num(val, nan=-np.inf), SI_SDR_CAP_DB)
    return float(val) if val.ndim == 0 else val


__all__ = ['compute_der', 'der_details', 'speaker_mapping', 'tdoa_rmse',
           'si_sdr']
