"""End-to-end orchestration: sync, TDOA, diarization, GSS, beamforming.

``run_pipeline`` works in memory. The ``stage_*`` functions do the same
work on disk: each reads the artifacts of its predecessor from the output
directory, writes its own artifact plus a ``report_<stage>.json``.
"""
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .activity import ActivityMatrix
from .beamform import BeamformConfig, extract_speaker, resegment
from .diarize import (DiarizeConfig, diarize, read_representatives,
                      read_rttm, rttm_to_activity, write_representatives,
                      write_rttm)
from .gss import dominance_test, run_gss, write_masks
from .metrics import der_details, si_sdr, tdoa_rmse
from .scene import (GroundTruth, MultichannelRecording, SceneConfig,
                    random_meeting, simulate_scene)
from .stft import SpectrogramTensor, StftConfig, istft, stft
from .sync import SyncConfig, SyncReport, apply_sync, sync_recording
from .tdoa import (TdoaEstConfig, estimate_tdoas, read_tdoa_jsonl,
                   write_tdoa_jsonl)
from .wav import read_wav, write_wav

logger = logging.getLogger(__name__)


@dataclass
class GssConfig:
    n_guided: int = 5
    n_unguided: int = 1
    context_s: float = 5.0
    init_mode: str = 'tf'
    eig_ratio_threshold: float = 5.0


def _sub(cls, d):
    d = dict(d or {})
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f'unknown {cls.__name__} keys: {sorted(unknown)}')
    return cls(**d)


@dataclass
class PipelineConfig:
    session: str = 'session'
    sync: SyncConfig = field(default_factory=SyncConfig)
    stft: StftConfig = field(default_factory=StftConfig)
    tdoa: TdoaEstConfig = field(default_factory=TdoaEstConfig)
    diarize: DiarizeConfig = field(default_factory=DiarizeConfig)
    gss: GssConfig = field(default_factory=GssConfig)
    beamform: BeamformConfig = field(default_factory=BeamformConfig)
    skip_sync: bool = False
    save_masks: bool = False
    collar_s: float = 0.25

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        kw = {}
        for key, sub in [('sync', SyncConfig), ('stft', StftConfig),
                         ('tdoa', TdoaEstConfig), ('diarize', DiarizeConfig),
                         ('gss', GssConfig), ('beamform', BeamformConfig)]:
            kw[key] = _sub(sub, d.pop(key, None))
        for key in ('session', 'skip_sync', 'save_masks', 'collar_s'):
            if key in d:
                kw[key] = d.pop(key)
        if d:
            raise ValueError(f'unknown pipeline keys: {sorted(d)}')
        return cls(**kw)

    def to_dict(self):
        return asdict(self)


def n_workers():
    """Worker count from ``ASN_WORKERS`` (default 1)."""
    try:
        return max(1, int(os.environ.get('ASN_WORKERS', '1')))
    except ValueError:
        raise ValueError('ASN_WORKERS must be an integer') from None


@dataclass
class EnhancedSpeaker:
    signal: np.ndarray
    manifest: list
    gamma: np.ndarray = None
    masks: np.ndarray = None


def enhance_speaker(spec, activity: ActivityMatrix, representatives, speaker,
                    gss_cfg: GssConfig = GssConfig(),
                    bf_cfg: BeamformConfig = BeamformConfig(), dominance=None,
                    keep_masks=False):
    """GSS on every diarized segment of one speaker, then beamforming."""
    n_cls = activity.n_speakers + 1
    L, K = spec.n_frames, spec.n_bins
    gamma = np.zeros((L, K))
    pi = np.zeros((n_cls, L))
    pi[-1] = 1.0
    masks = None
    if keep_masks:
        masks = np.zeros((n_cls, L, K), dtype=np.float32)
        masks[-1] = 1.0
    for start, stop in activity.segments(speaker):
        res = run_gss(spec, activity, representatives, (start, stop),
                      gss_cfg.n_guided, gss_cfg.n_unguided, gss_cfg.context_s,
                      gss_cfg.init_mode, dominance=dominance)
        gamma[start:stop] = res.gamma[speaker]
        pi[:, start:stop] = res.pi
        if keep_masks:
            masks[:, start:stop] = res.gamma
    plan = resegment(pi, speaker, bf_cfg, spec.frame_shift_s)
    signal, manifest = extract_speaker(spec, gamma, plan)
    return EnhancedSpeaker(signal, manifest, gamma, masks)


def enhance(spec, activity, representatives, gss_cfg=GssConfig(),
            bf_cfg=BeamformConfig(), keep_masks=False):
    """Extract all diarized speakers (parallel over ``ASN_WORKERS``)."""
    dominance = None
    if gss_cfg.init_mode == 'tf' and activity.n_speakers:
        dominance = dominance_test(
            spec.data, eig_ratio_threshold=gss_cfg.eig_ratio_threshold)

    def one(i):
        return enhance_speaker(spec, activity, representatives, i, gss_cfg,
                               bf_cfg, dominance, keep_masks)

    speakers = range(activity.n_speakers)
    workers = n_workers()
    if workers == 1:
        return [one(i) for i in speakers]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(one, speakers))


@dataclass
class PipelineResult:
    synced: MultichannelRecording
    sync_report: SyncReport
    spec: object
    selected: list
    vad: np.ndarray
    diarization: object
    speakers: list
    timings: dict


def run_pipeline(rec: MultichannelRecording, cfg: PipelineConfig = None):
    """Full processing chain on an (asynchronous) recording."""
    cfg = cfg or PipelineConfig()
    timings = {}
    t = time.perf_counter()
    if cfg.skip_sync or rec.n_channels < 2:
        report = SyncReport([0] * rec.n_channels, [0.0] * rec.n_channels)
        synced = rec
    else:
        synced, report = sync_recording(rec, cfg.sync)
    timings['sync'] = time.perf_counter() - t

    t = time.perf_counter()
    spec = stft(synced.channels, cfg.stft, synced.sample_rate_hz)
    selected, _, vad = estimate_tdoas(
        spec, synced.channels[cfg.tdoa.vad_channel], cfg.tdoa)
    timings['tdoa'] = time.perf_counter() - t

    t = time.perf_counter()
    diar = diarize(selected, spec.n_frames, spec.frame_shift_s, cfg.diarize)
    timings['diarize'] = time.perf_counter() - t

    t = time.perf_counter()
    speakers = enhance(spec, diar.activity, diar.representatives, cfg.gss,
                       cfg.beamform)
    timings['enhance'] = time.perf_counter() - t
    return PipelineResult(synced, report, spec, selected, vad, diar, speakers,
                          timings)


def synced_images(truth: GroundTruth, report: SyncReport, fs):
    """Clean speaker images brought onto the synchronised time base."""
    out = []
    for img in truth.images:
        rec = apply_sync(MultichannelRecording(img, fs), report)
        out.append(rec.channels)
    return np.array(out)


def reference_image(image, manifest, stft_cfg=StftConfig(), fs=16000):
    """Clean image as seen by the beamformer of one speaker.

    The MVDR output of a segment estimates the image at that segment's
    reference channel. The reference is assembled frame-wise in the STFT
    domain accordingly; frames outside all segments use the channel that
    served as reference for most frames.

    Args:
        image: (M, N) clean speaker image on the synchronised time base
        manifest: (start frame, stop frame, reference channel) entries
    """
    spec = stft(image, stft_cfg, fs)
    n_ch = image.shape[0]
    channel = np.full(spec.n_frames, _majority_reference(manifest, n_ch))
    for start, stop, ref in manifest:
        channel[start:stop] = ref
    data = spec.data[channel, np.arange(spec.n_frames)]
    return istft(SpectrogramTensor(data[None], stft_cfg, fs,
                                   spec.n_samples))[0]


def evaluate(ref_activity: ActivityMatrix, hyp_activity: ActivityMatrix,
             synced: MultichannelRecording = None, images=None,
             enhanced=None, manifests=None, collar_s=0.25,
             stft_cfg=StftConfig()):
    """DER and, given clean images, per-speaker SI-SDR improvements.

    The SI-SDR of an enhanced signal is measured against the clean image at
    the reference channels the beamformer used (see ``reference_image``);
    the baseline is the best unprocessed channel, each measured against its
    own image. Hypothesis speakers are matched to reference speakers by the
    DER mapping.
    """
    d = der_details(ref_activity, hyp_activity, collar_s)
    result = {'der': d['der'], 'miss_frames': d['miss'],
              'false_alarm_frames': d['false_alarm'],
              'confusion_frames': d['confusion'],
              'scored_frames': d['total'],
              'mapping': {str(k): v for k, v in d['mapping'].items()},
              'n_hyp_speakers': hyp_activity.n_speakers,
              'n_ref_speakers': ref_activity.n_speakers}
    if images is None or enhanced is None:
        return result
    fs = synced.sample_rate_hz
    per = {}
    for h, r in d['mapping'].items():
        img = images[r]
        if not np.any(img):
            continue
        n = min(img.shape[-1], synced.n_samples)
        raw = [si_sdr(synced.channels[m, :n], img[m, :n])
               for m in range(img.shape[0])]
        target = reference_image(img[:, :n], manifests[h], stft_cfg, fs)
        out = si_sdr(enhanced[h][:n], target)
        per[str(h)] = {'ref_speaker': r, 'si_sdr_db': float(out),
                       'best_input_si_sdr_db': float(max(raw)),
                       'improvement_db': float(out - max(raw))}
    result['si_sdr'] = per
    return result


def _majority_reference(manifest, n_channels):
    counts = np.zeros(n_channels)
    for start, stop, ref in manifest:
        counts[ref] += stop - start
    return int(np.argmax(counts))


# ---------------------------------------------------------------- stages

STAGES = ('simulate', 'sync', 'tdoa', 'diarize', 'enhance', 'eval')


def _require(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f'missing stage input: {path}')
    return path


def _write_json(path, obj):
    with open(path, 'w') as f:
        json.dump(obj, f, indent=2, sort_keys=True)


def _read_json(path):
    with open(_require(path)) as f:
        return json.load(f)


def stage_simulate(cfg_dict, out, seed=0):
    """Render a scene: ``scene`` gives a SceneConfig, ``meeting`` the
    keyword arguments of ``random_meeting`` (seeded by ``seed``)."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if 'scene' in cfg_dict:
        scene = SceneConfig.from_dict(cfg_dict['scene'])
    else:
        scene = random_meeting(seed, **cfg_dict.get('meeting', {}))
    t = time.perf_counter()
    rec, truth = simulate_scene(scene, seed=seed)
    scene.to_json(out / 'scene.json')
    write_wav(out / 'mixture.wav', rec.channels, rec.sample_rate_hz)
    np.savez_compressed(out / 'truth.npz', images=truth.images,
                        clean_sources=truth.clean_sources.astype(np.float32),
                        true_tdoa_vectors=truth.true_tdoa_vectors)
    _write_json(out / 'report_simulate.json',
                {'seed': seed, 'n_samples': rec.n_samples,
                 'n_channels': rec.n_channels,
                 'seconds': time.perf_counter() - t})


def _input_recording(cfg_dict, out):
    if 'input_wavs' in cfg_dict:
        from .scene import load_wavs
        return load_wavs(cfg_dict['input_wavs'])
    signals, fs = read_wav(_require(Path(out) / 'mixture.wav'))
    return MultichannelRecording(signals, fs)


def stage_sync(cfg_dict, out, seed=0):
    cfg = PipelineConfig.from_dict(cfg_dict.get('pipeline'))
    out = Path(out)
    rec = _input_recording(cfg_dict, out)
    t = time.perf_counter()
    if cfg.skip_sync:
        report = SyncReport([0] * rec.n_channels, [0.0] * rec.n_channels)
        synced = rec
    else:
        synced, report = sync_recording(rec, cfg.sync)
    report.to_json(out / 'sync.json')
    write_wav(out / 'synced.wav', synced.channels, synced.sample_rate_hz)
    _write_json(out / 'report_sync.json',
                {'sto_samples': report.sto_samples,
                 'sro_ppm': report.sro_ppm,
                 'seconds': time.perf_counter() - t})


def _synced(out):
    signals, fs = read_wav(_require(Path(out) / 'synced.wav'))
    return MultichannelRecording(signals, fs)


def stage_tdoa(cfg_dict, out, seed=0):
    cfg = PipelineConfig.from_dict(cfg_dict.get('pipeline'))
    out = Path(out)
    rec = _synced(out)
    t = time.perf_counter()
    spec = stft(rec.channels, cfg.stft, rec.sample_rate_hz)
    selected, _, vad = estimate_tdoas(
        spec, rec.channels[cfg.tdoa.vad_channel], cfg.tdoa)
    write_tdoa_jsonl(out / 'tdoa.jsonl', selected)
    _write_json(out / 'tdoa_meta.json',
                {'n_frames': spec.n_frames,
                 'frame_shift_s': spec.frame_shift_s,
                 'sample_rate_hz': rec.sample_rate_hz,
                 'n_channels': rec.n_channels,
                 'vad_active_frames': int(vad.sum())})
    _write_json(out / 'report_tdoa.json',
                {'n_vectors': sum(len(s) for s in selected),
                 'seconds': time.perf_counter() - t})


def stage_diarize(cfg_dict, out, seed=0):
    cfg = PipelineConfig.from_dict(cfg_dict.get('pipeline'))
    out = Path(out)
    meta = _read_json(out / 'tdoa_meta.json')
    selected = read_tdoa_jsonl(_require(out / 'tdoa.jsonl'), meta['n_frames'])
    t = time.perf_counter()
    res = diarize(selected, meta['n_frames'], meta['frame_shift_s'],
                  cfg.diarize)
    labels = [f'spk{i}' for i in range(res.n_speakers)]
    write_rttm(out / f'{cfg.session}.rttm', res.activity, cfg.session, labels)
    write_representatives(out / 'speakers.json', res.representatives, labels)
    _write_json(out / 'report_diarize.json',
                {'n_speakers': res.n_speakers,
                 'n_local_clusters': res.n_local_clusters,
                 'seconds': time.perf_counter() - t})


def stage_enhance(cfg_dict, out, seed=0):
    cfg = PipelineConfig.from_dict(cfg_dict.get('pipeline'))
    out = Path(out)
    rec = _synced(out)
    spec = stft(rec.channels, cfg.stft, rec.sample_rate_hz)
    labels, reps = read_representatives(_require(out / 'speakers.json'))
    entries = read_rttm(_require(out / f'{cfg.session}.rttm'))
    activity, _ = rttm_to_activity(entries, spec.n_frames,
                                   spec.frame_shift_s, labels)
    t = time.perf_counter()
    speakers = enhance(spec, activity, reps, cfg.gss, cfg.beamform,
                       keep_masks=cfg.save_masks)
    manifest = {}
    for label, sp in zip(labels, speakers):
        name = f'{cfg.session}_{label}'
        write_wav(out / f'{name}.wav', sp.signal[None], rec.sample_rate_hz)
        if cfg.save_masks:
            write_masks(out / f'{name}.mask', sp.masks)
        manifest[label] = {
            'wav': f'{name}.wav',
            'segments': [{'start_s': a * spec.frame_shift_s,
                          'end_s': b * spec.frame_shift_s,
                          'ref_channel': int(ref)}
                         for a, b, ref in sp.manifest]}
    _write_json(out / 'enhance.json', manifest)
    _write_json(out / 'report_enhance.json',
                {'n_speakers': len(speakers),
                 'seconds': time.perf_counter() - t})


def stage_eval(cfg_dict, out, seed=0):
    """DER against the scene's utterances (or a reference RTTM given as
    ``reference_rttm``); SI-SDR when clean images are available."""
    cfg = PipelineConfig.from_dict(cfg_dict.get('pipeline'))
    out = Path(out)
    t = time.perf_counter()
    meta = _read_json(out / 'tdoa_meta.json')
    n_frames, shift = meta['n_frames'], meta['frame_shift_s']
    entries = read_rttm(_require(out / f'{cfg.session}.rttm'))
    labels, _ = read_representatives(_require(out / 'speakers.json'))
    hyp, _ = rttm_to_activity(entries, n_frames, shift, labels)
    if 'reference_rttm' in cfg_dict:
        ref, _ = rttm_to_activity(read_rttm(_require(
            cfg_dict['reference_rttm'])), n_frames, shift)
        result = evaluate(ref, hyp, collar_s=cfg.collar_s)
    else:
        scene = SceneConfig.from_json(_require(out / 'scene.json'))
        ref = ActivityMatrix.from_intervals(
            [(u.speaker, u.onset, u.offset) for u in scene.utterances],
            scene.n_speakers, n_frames, shift)
        synced = _synced(out)
        images = enhanced = manifests = None
        truth_path = out / 'truth.npz'
        if truth_path.exists() and (out / 'enhance.json').exists():
            truth = np.load(truth_path)
            gt = GroundTruth(truth['true_tdoa_vectors'], scene.utterances,
                             truth['clean_sources'], truth['images'])
            report = SyncReport.from_json(_require(out / 'sync.json'))
            images = synced_images(gt, report, synced.sample_rate_hz)
            man = _read_json(out / 'enhance.json')
            enhanced, manifests = [], []
            for lab in labels:
                sig, _ = read_wav(_require(out / man[lab]['wav']))
                enhanced.append(sig[0])
                manifests.append([
                    (int(round(s['start_s'] / shift)),
                     int(round(s['end_s'] / shift)), s['ref_channel'])
                    for s in man[lab]['segments']])
        result = evaluate(ref, hyp, synced, images, enhanced, manifests,
                          cfg.collar_s)
    _write_json(out / 'eval.json', result)
    _write_json(out / 'report_eval.json',
                {'der': result['der'], 'seconds': time.perf_counter() - t})
    return result


STAGE_FUNCS = {'simulate': stage_simulate, 'sync': stage_sync,
               'tdoa': stage_tdoa, 'diarize': stage_diarize,
               'enhance': stage_enhance, 'eval': stage_eval}


def tdoa_error(selected, truth_vectors, activity: ActivityMatrix, offsets=0):
    """TDOA RMSE of selected vectors against the active speakers' truth."""
    truth = np.asarray(truth_vectors) + offsets
    est, ref = [], []
    for frame, vecs in enumerate(selected):
        est.append([v.tau for v in vecs])
        ref.append(list(truth[activity.active[:, frame]]))
    return tdoa_rmse(est, ref)
