"""Speaker x frame activity matrices ("who spoke when")."""
from dataclasses import dataclass

import numpy as np


@dataclass
class ActivityMatrix:
    """Boolean activity, shape (speakers, frames), on a uniform frame grid.

    Frame ``l`` is centred at ``l * frame_shift_s`` seconds.
    """
    active: np.ndarray
    frame_shift_s: float

    def __post_init__(self):
        active = np.asarray(self.active, dtype=bool)
        if active.ndim != 2:
            raise ValueError(f'activity must be 2-D, got shape {active.shape}')
        self.active = active

    @property
    def n_speakers(self):
        return self.active.shape[0]

    @property
    def n_frames(self):
        return self.active.shape[1]

    @classmethod
    def empty(cls, n_frames, frame_shift_s):
        return cls(np.zeros((0, n_frames), dtype=bool), frame_shift_s)

    @classmethod
    def from_intervals(cls, intervals, n_speakers, n_frames, frame_shift_s):
        """Rasterise ``(speaker, onset_s, offset_s)`` intervals."""
        active = np.zeros((n_speakers, n_frames), dtype=bool)
        for spk, onset, offset in intervals:
            # frames l with onset <= l * shift < offset, robust to rounding
            start = max(int(np.ceil(onset / frame_shift_s - 1e-6)), 0)
            stop = max(int(np.ceil(offset / frame_shift_s - 1e-6)), 0)
            active[spk, start:stop] = True
        return cls(active, frame_shift_s)

    def segments(self, speaker):
        """Maximal runs of activity of one speaker as (start, stop) frames."""
        return runs(self.active[speaker])

    def intervals(self):
        """All activity as (speaker, onset_s, offset_s) tuples."""
        out = []
        for spk in range(self.n_speakers):
            for start, stop in self.segments(spk):
                out.append((spk, start * self.frame_shift_s,
                            stop * self.frame_shift_s))
        return out

    def resample_to(self, n_frames, frame_shift_s):
        """Nearest-frame resampling onto another grid."""
        if (n_frames == self.n_frames
                and np.isclose(frame_shift_s, self.frame_shift_s)):
            return ActivityMatrix(self.active.copy(), self.frame_shift_s)
        times = np.arange(n_frames) * frame_shift_s
        idx = np.rint(times / self.frame_shift_s).astype(int)
        inside = idx < self.n_frames
        active = np.zeros((self.n_speakers, n_frames), dtype=bool)
        active[:, inside] = self.active[:, idx[inside]]
        return ActivityMatrix(active, frame_shift_s)


def runs(mask):
    """(start, stop) index pairs of the True runs of a 1-D boolean array."""
    mask = np.asarray(mask, dtype=bool)
    if mask.size == 0:
        return []
    edges = np.diff(np.concatenate([[0], mask.astype(np.int8), [0]]))
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)
    return list(zip(starts.tolist(), stops.tolist()))
