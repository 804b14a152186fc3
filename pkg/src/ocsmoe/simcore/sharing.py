"""Max-min fair bandwidth sharing by progressive filling."""

from __future__ import annotations

from typing import Hashable, Sequence

import numpy as np
import scipy.sparse as sp


def incidence(paths: Sequence[Sequence[int]], num_links: int) -> sp.csr_matrix:
    """Link x flow 0/1 matrix from per-flow lists of link indices."""
    lens = [len(p) for p in paths]
    rows = np.fromiter((l for p in paths for l in p), dtype=np.int64, count=sum(lens))
    cols = np.repeat(np.arange(len(paths), dtype=np.int64), lens)
    data = np.ones(rows.shape[0])
    return sp.csr_matrix((data, (rows, cols)), shape=(num_links, len(paths)))


def max_min_rates(A: sp.csr_matrix, capacity: np.ndarray) -> np.ndarray:
    """Progressive filling: raise every unfrozen flow equally until some link saturates,
    freeze the flows crossing it, repeat. Flows crossing no link get an infinite rate."""
    num_links, num_flows = A.shape
    rates = np.zeros(num_flows)
    if num_flows == 0:
        return rates
    AT = A.T.tocsr()
    hops = np.diff(AT.indptr)
    active = hops > 0
    rates[~active] = np.inf
    rem = np.asarray(capacity, dtype=float).copy()
    while active.any():
        cnt = A @ active.astype(float)
        used = cnt > 0
        share = np.full(num_links, np.inf)
        share[used] = np.maximum(rem[used], 0.0) / cnt[used]
        delta = share.min()
        rates[active] += delta
        rem[used] -= delta * cnt[used]
        sat = used & (share <= delta * (1 + 1e-12))
        frozen = (AT @ sat.astype(float)) > 0
        active &= ~frozen
    return rates


def share_bandwidth(flows: Sequence[Sequence[Hashable]], capacity: dict) -> np.ndarray:
    """Max-min fair rates for flows given as link-id paths over a capacity table."""
    index: dict = {}
    paths = []
    for path in flows:
        paths.append([index.setdefault(l, len(index)) for l in path])
    cap = np.array([capacity[l] for l in index], dtype=float)
    return max_min_rates(incidence(paths, len(index)), cap)
