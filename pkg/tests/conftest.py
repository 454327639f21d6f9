"""Shared fixtures plus suite-wide invariant monitors.

Every TDOA vector emitted by ``combine_candidates``, every GSS run and
every guided EM iteration anywhere in the suite is checked: cyclic
consistency, monotone likelihood and the guided zero constraint. The
totals are reported in the terminal summary and any violation fails the
session.
"""
import functools

import numpy as np
import pytest

import asndiar.gss as gss_mod
import asndiar.pipeline as pipeline_mod
import asndiar.tdoa as tdoa_mod
from asndiar.pairs import cyclic_residuals
from asndiar.scene import random_meeting, simulate_scene

MONITOR = {'vectors': 0, 'consistency_violations': 0,
           'gss_runs': 0, 'em_steps': 0, 'monotonicity_violations': 0,
           'guided_iterations': 0, 'guided_violations': 0}
ACCEPTANCE = {}
LL_RTOL = 1e-6


def _wrap_combine(orig):
    @functools.wraps(orig)
    def combine(candidates, g, frame, cfg=tdoa_mod.TdoaEstConfig()):
        out = orig(candidates, g, frame, cfg)
        if out:
            res = cyclic_residuals(np.array([v.tau for v in out]))
            MONITOR['vectors'] += len(out)
            MONITOR['consistency_violations'] += int(
                np.sum(np.any(np.abs(res) > cfg.tau_th, axis=-1)))
        return out
    return combine


def ll_steps_ok(lls, rtol=LL_RTOL):
    lls = np.asarray(lls, dtype=float)
    if len(lls) < 2:
        return np.ones(0, dtype=bool)
    return np.diff(lls) >= -rtol * np.abs(lls[:-1])


def _wrap_run_gss(orig):
    @functools.wraps(orig)
    def run(*args, **kwargs):
        res = orig(*args, **kwargs)
        ok = ll_steps_ok(res.log_likelihoods)
        MONITOR['gss_runs'] += 1
        MONITOR['em_steps'] += len(ok)
        MONITOR['monotonicity_violations'] += int(np.sum(~ok))
        return res
    return run


def _wrap_em_iterate(orig):
    @functools.wraps(orig)
    def step(state, obs, guided=True):
        new, masks, ll = orig(state, obs, guided)
        if guided:
            inactive = ~state.class_activity
            MONITOR['guided_iterations'] += 1
            if np.any(masks.gamma[inactive] != 0):
                MONITOR['guided_violations'] += 1
        return new, masks, ll
    return step


def pytest_configure(config):
    # before collection, so that test modules import the wrapped functions
    tdoa_mod.combine_candidates = _wrap_combine(tdoa_mod.combine_candidates)
    wrapped = _wrap_run_gss(gss_mod.run_gss)
    gss_mod.run_gss = wrapped
    pipeline_mod.run_gss = wrapped
    gss_mod.em_iterate = _wrap_em_iterate(gss_mod.em_iterate)


def pytest_collection_modifyitems(items):
    # acceptance runs last so that its suite-wide checks see every test
    items.sort(key=lambda item: item.module.__name__ == 'test_acceptance')


def record(key, passed, text):
    """Store and print one acceptance line."""
    line = f"{key} {'PASS' if passed else 'FAIL'}: {text}"
    ACCEPTANCE[key] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    tr = terminalreporter
    if ACCEPTANCE:
        tr.section('acceptance criteria')
        for key in sorted(ACCEPTANCE):
            tr.write_line(ACCEPTANCE[key])
    tr.section('suite-wide invariants')
    m = MONITOR
    tr.write_line(f"cyclic consistency: {m['vectors']} emitted vectors, "
                  f"{m['consistency_violations']} violations")
    tr.write_line(f"EM monotonicity: {m['gss_runs']} GSS runs, "
                  f"{m['em_steps']} steps, {m['monotonicity_violations']} "
                  f"violations")
    tr.write_line(f"guided constraint: {m['guided_iterations']} guided "
                  f"iterations, {m['guided_violations']} violations")


def pytest_sessionfinish(session, exitstatus):
    if (MONITOR['consistency_violations'] or MONITOR['monotonicity_violations']
            or MONITOR['guided_violations']):
        session.exitstatus = 1


@functools.lru_cache(maxsize=None)
def cached_scene(seed, **kwargs):
    cfg = random_meeting(seed, **kwargs)
    rec, truth = simulate_scene(cfg, seed=seed)
    return cfg, rec, truth


def scene(seed, **kwargs):
    return cached_scene(seed, **kwargs)


@pytest.fixture(scope='session')
def two_speaker_scene():
    """20 s, anechoic, 2 speakers without overlap, synchronous."""
    return scene(11, n_speakers=2, n_mics=4, duration_s=20.0)


@pytest.fixture(scope='session')
def overlap_scene():
    """20 s, anechoic, 2 speakers with 40 % overlap, synchronous."""
    return scene(12, n_speakers=2, n_mics=4, duration_s=20.0,
                 overlap_ratio=0.4)
