"""Microphone-pair bookkeeping.

Pairs are ordered (0,1), (0,2), ..., (0,M-1), (1,2), ..., (M-2,M-1).
"""
from functools import lru_cache
from itertools import combinations

import numpy as np


@lru_cache(maxsize=None)
def mic_pairs(n_mics):
    return tuple(combinations(range(n_mics), 2))


@lru_cache(maxsize=None)
def pair_index(n_mics):
    return {pair: p for p, pair in enumerate(mic_pairs(n_mics))}


@lru_cache(maxsize=None)
def mic_triples(n_mics):
    """Triples (m, n, o), m < n < o, with pair indices of (m,n), (m,o), (n,o)."""
    idx = pair_index(n_mics)
    return tuple((m, n, o, idx[m, n], idx[m, o], idx[n, o])
                 for m, n, o in combinations(range(n_mics), 3))


def n_mics_from_pairs(n_pairs):
    m = int(round((1 + np.sqrt(1 + 8 * n_pairs)) / 2))
    if m * (m - 1) // 2 != n_pairs:
        raise ValueError(f'{n_pairs} is not a valid number of mic pairs')
    return m


def cyclic_residuals(tau):
    """tau_mn - tau_mo + tau_no for every triple m < n < o.

    ``tau`` has the pair axis last; zero for geometrically exact TDOAs.
    """
    tau = np.asarray(tau, dtype=float)
    triples = mic_triples(n_mics_from_pairs(tau.shape[-1]))
    if not triples:
        return np.zeros(tau.shape[:-1] + (0,))
    a = np.array([t[3] for t in triples])
    b = np.array([t[4] for t in triples])
    c = np.array([t[5] for t in triples])
    return tau[..., a] - tau[..., b] + tau[..., c]


def delays_from_tdoa(tau):
    """Per-channel delays relative to channel 0, i.e. tau_(0,m)."""
    tau = np.asarray(tau, dtype=float)
    n_mics = n_mics_from_pairs(tau.shape[-1])
    return np.concatenate([np.zeros(tau.shape[:-1] + (1,)),
                           tau[..., :n_mics - 1]], axis=-1)
