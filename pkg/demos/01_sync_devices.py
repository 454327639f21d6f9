"""
Synchronising a distributed recording
=====================================

Four devices record the same two talkers, but each starts at its own time
and runs on its own clock. We estimate the offsets and clock skews and
undo them.
"""
import numpy as np

from asndiar.scene import random_meeting, simulate_scene
from asndiar.sync import apply_sync, sync_recording

# A 40 s meeting; device 0 is the clock reference, the others start up to
# one second off and drift by up to 80 ppm.
cfg = random_meeting(7, n_speakers=2, n_mics=4, duration_s=40.0,
                     max_sto_s=1.0, max_sro_ppm=80.0)
rec, truth = simulate_scene(cfg, seed=7)
print('recording:', rec.channels.shape, 'at', rec.sample_rate_hz, 'Hz')

synced, report = sync_recording(rec)
for m in range(1, rec.n_channels):
    print(f'device {m}: STO {report.sto_samples[m]:9.1f} '
          f'(true {cfg.per_device_sto_samples[m]:6d})  '
          f'SRO {report.sro_ppm[m]:7.2f} ppm '
          f'(true {cfg.per_device_sro_ppm[m]:7.2f})')

# The residual drift is what is left of the clock skew after resampling,
# accumulated over the whole recording.
drift = np.abs(np.subtract(report.sro_ppm, cfg.per_device_sro_ppm))
print('residual drift over the recording [samples]:',
      np.round(drift * 1e-6 * rec.n_samples, 3))
print('synchronised:', synced.channels.shape)

# The report alone is enough to apply the same correction again later.
again = apply_sync(rec, report)
print('re-applied matches:', np.allclose(again.channels, synced.channels))
