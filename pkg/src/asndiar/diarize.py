"""Spatial diarization from frame-wise TDOA vectors.

Vectors are first grouped into temporally local clusters (leader-follower),
these are merged into global speakers by single-linkage clustering of their
median TDOA vectors, redundant speakers are pruned and the resulting
activity is smoothed morphologically.
"""
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_dilation, binary_erosion

from .activity import ActivityMatrix


@dataclass
class DiarizeConfig:
    eps_lf: float = 2.0
    recency_s: float = 1.0
    msd_abort_threshold: float = 4.0
    tau_match: float = 2.0
    overlap_fraction: float = 0.5
    containment_fraction: float = 0.9
    dilate_frames: int = 25
    erode_frames: int = 15
    min_speaker_frames: int = 32

    def __post_init__(self):
        for name in ('dilate_frames', 'erode_frames'):
            v = getattr(self, name)
            if v < 1 or v % 2 == 0:
                raise ValueError(f'{name} must be a positive odd number')
        if self.eps_lf < 0 or self.msd_abort_threshold < 0:
            raise ValueError('thresholds must be non-negative')


@dataclass
class LocalCluster:
    members: list = field(default_factory=list)

    @property
    def leader(self):
        return self.members[-1]

    @property
    def frames(self):
        return np.array([v.frame for v in self.members], dtype=int)

    @property
    def taus(self):
        return np.array([v.tau for v in self.members], dtype=float)

    @property
    def representative(self):
        return np.median(self.taus, axis=0)


def max_abs_distance(a, b):
    return float(np.max(np.abs(np.asarray(a, float) - np.asarray(b, float))))


def leader_follower(selected, frame_shift_s, eps_lf=2.0, recency_s=1.0):
    """Temporally local clustering of per-frame TDOA vectors.

    A vector joins the cluster with the nearest leader (max-abs distance
    ``<= eps_lf``) among the clusters whose leader lies at most
    ``recency_s`` in the past and which have no member in the current frame
    yet; otherwise it founds a new cluster. Within a frame vectors are
    handled by descending SRP.
    """
    recency = recency_s / frame_shift_s
    clusters = []
    live = []
    for vecs in selected:
        if not vecs:
            continue
        frame = vecs[0].frame
        live = [c for c in live if frame - clusters[c].leader.frame <= recency]
        taken = set()
        for v in sorted(vecs, key=lambda v: (-v.srp, v.tau)):
            best, best_d = None, None
            for c in live:
                if c in taken:
                    continue
                d = max_abs_distance(v.tau, clusters[c].leader.tau)
                if d <= eps_lf and (best_d is None or d < best_d):
                    best, best_d = c, d
            if best is None:
                clusters.append(LocalCluster([v]))
                best = len(clusters) - 1
                live.append(best)
            else:
                clusters[best].members.append(v)
            taken.add(best)
    return clusters


def single_linkage(representatives, msd_abort_threshold=4.0):
    """Single-linkage grouping under the mean-squared-difference metric.

    Merging stops once the closest two groups are further apart than
    ``msd_abort_threshold``, i.e. groups are the connected components of
    the graph linking representatives with MSD at most the threshold.

    Returns:
        group label per representative, numbered by first appearance
    """
    reps = np.asarray(representatives, dtype=float)
    n = len(reps)
    if n == 0:
        return np.zeros(0, dtype=int)
    reps = reps.reshape(n, -1)
    msd = np.mean((reps[:, None] - reps[None]) ** 2, axis=-1)
    labels = -np.ones(n, dtype=int)
    n_groups = 0
    for start in range(n):
        if labels[start] >= 0:
            continue
        labels[start] = n_groups
        stack = [start]
        while stack:
            i = stack.pop()
            for j in np.flatnonzero((msd[i] <= msd_abort_threshold)
                                    & (labels < 0)):
                labels[j] = n_groups
                stack.append(j)
        n_groups += 1
    return labels


def prune_groups(activity, representatives, tau_match=2.0,
                 overlap_fraction=0.5, containment_fraction=0.9):
    """Indices of the groups surviving the redundancy pruning.

    Groups are ranked by their number of active frames. A group is dropped
    when some group with more activity covers more than ``overlap_fraction``
    of its active frames and more than one representative element matches
    within ``tau_match``. Groups that are almost entirely contained in a
    larger one (more than ``containment_fraction`` of their frames) are
    dropped regardless of the element match: these are reflection paths,
    only observable while their direct-path speaker talks. Pass
    ``containment_fraction >= 1`` to disable this rule.
    """
    activity = np.asarray(activity, dtype=bool)
    reps = np.asarray(representatives, dtype=float)
    counts = activity.sum(1)
    order = sorted(range(len(counts)), key=lambda g: (-counts[g], g))
    keep = []
    for rank, g in enumerate(order):
        redundant = False
        for h in order[:rank]:
            if counts[h] <= counts[g] or counts[g] == 0:
                continue
            ov = np.sum(activity[g] & activity[h]) / counts[g]
            matches = np.sum(np.abs(reps[g] - reps[h]) <= tau_match)
            if (ov > overlap_fraction and matches > 1
                    or ov > containment_fraction):
                redundant = True
                break
        if not redundant:
            keep.append(g)
    return keep


def smooth_activity(act: ActivityMatrix, dilate_frames=25, erode_frames=15):
    """Per speaker: binary dilation followed by binary erosion in time.

    Erosion treats frames outside the recording as active so that activity
    touching the borders is not shortened there.
    """
    if dilate_frames % 2 == 0 or erode_frames % 2 == 0:
        raise ValueError('kernel sizes must be odd')
    out = np.zeros_like(act.active)
    for i, row in enumerate(act.active):
        d = binary_dilation(row, np.ones(dilate_frames, dtype=bool))
        out[i] = binary_erosion(d, np.ones(erode_frames, dtype=bool),
                                border_value=1)
    return ActivityMatrix(out, act.frame_shift_s)


@dataclass
class DiarizationResult:
    activity: ActivityMatrix
    representatives: np.ndarray
    raw_activity: ActivityMatrix
    n_local_clusters: int

    @property
    def n_speakers(self):
        return self.activity.n_speakers


def diarize(selected, n_frames, frame_shift_s, cfg: DiarizeConfig = None):
    """Speaker activity and representative TDOA vectors from a TDOA stream.

    Args:
        selected: per frame, the selected TdoaVectors
        n_frames: frame count of the recording
        frame_shift_s: hop of the frame grid in seconds
    Returns:
        DiarizationResult; speakers are ordered by activity (descending)
    """
    cfg = cfg or DiarizeConfig()
    clusters = leader_follower(selected, frame_shift_s, cfg.eps_lf,
                               cfg.recency_s)
    if not clusters:
        empty = ActivityMatrix.empty(n_frames, frame_shift_s)
        n_pairs = len(selected[0][0].tau) if any(selected) else 0
        return DiarizationResult(empty, np.zeros((0, n_pairs)), empty, 0)
    labels = single_linkage([c.representative for c in clusters],
                            cfg.msd_abort_threshold)
    n_groups = labels.max() + 1
    raw = np.zeros((n_groups, n_frames), dtype=bool)
    reps = []
    for g in range(n_groups):
        members = [c for c, lab in zip(clusters, labels) if lab == g]
        for c in members:
            raw[g, c.frames] = True
        reps.append(np.median(np.concatenate([c.taus for c in members]),
                              axis=0))
    reps = np.array(reps)
    keep = prune_groups(raw, reps, cfg.tau_match, cfg.overlap_fraction,
                        cfg.containment_fraction)
    keep = [g for g in keep if raw[g].sum() >= cfg.min_speaker_frames]
    keep.sort(key=lambda g: (-raw[g].sum(), g))
    raw_act = ActivityMatrix(raw[keep], frame_shift_s)
    act = smooth_activity(raw_act, cfg.dilate_frames, cfg.erode_frames)
    return DiarizationResult(act, reps[keep], raw_act, len(clusters))


def write_rttm(path, act: ActivityMatrix, session='session', labels=None):
    """One SPEAKER line per contiguous activity segment."""
    lines = []
    for spk, onset, offset in act.intervals():
        label = labels[spk] if labels is not None else f'spk{spk}'
        lines.append(f'SPEAKER {session} 1 {onset:.3f} {offset - onset:.3f} '
                     f'<NA> <NA> {label} <NA> <NA>')
    with open(path, 'w') as f:
        f.write('\n'.join(lines) + ('\n' if lines else ''))


def read_rttm(path):
    """SPEAKER lines as (session, onset_s, duration_s, label) tuples."""
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts or parts[0] != 'SPEAKER':
                continue
            if len(parts) < 8:
                raise ValueError(f'{path}:{lineno}: malformed RTTM line')
            onset, dur = float(parts[3]), float(parts[4])
            if onset < 0 or dur <= 0:
                raise ValueError(f'{path}:{lineno}: invalid segment timing')
            out.append((parts[1], onset, dur, parts[7]))
    return out


def rttm_to_activity(entries, n_frames, frame_shift_s, labels=None):
    """Rasterise RTTM entries; returns (ActivityMatrix, labels)."""
    if labels is None:
        labels = sorted({e[3] for e in entries})
    index = {lab: i for i, lab in enumerate(labels)}
    intervals = [(index[lab], onset, onset + dur)
                 for _, onset, dur, lab in entries]
    return (ActivityMatrix.from_intervals(intervals, len(labels), n_frames,
                                          frame_shift_s), labels)


def write_representatives(path, representatives, labels=None):
    reps = np.asarray(representatives, dtype=float)
    labels = labels or [f'spk{i}' for i in range(len(reps))]
    with open(path, 'w') as f:
        json.dump({lab: r.tolist() for lab, r in zip(labels, reps)}, f,
                  indent=1)


def read_representatives(path):
    with open(path) as f:
        d = json.load(f)
    return list(d), np.array(list(d.values()), dtype=float)
