import logging

import numpy as np
from scipy.spatial import cKDTree

from cashash.types import MatchRecord
from cashash.hashing import hamming_many, reduce_sum, DEFAULT_SWITCH_ROUNDS
from cashash.util import HashParameterError

log = logging.getLogger(__name__)

DEFAULT_K = 10
DEFAULT_TAU = 40
DEFAULT_RATIO = 0.8
# Brute-force distance rows computed per matrix product.
QUERY_CHUNK = 256


class MatchConfig(object):
    """Knobs of one cascade match: ``k`` ranked candidates survive the
    Hamming ranking, ``tau`` discards candidates farther than it, and
    ``ratio`` is Lowe's ratio on distances (squared internally)."""

    def __init__(self, k=DEFAULT_K, tau=DEFAULT_TAU, ratio=DEFAULT_RATIO,
                 min_candidates_for_ratio=2, switch_rounds=DEFAULT_SWITCH_ROUNDS):
        if k < 2:
            raise ValueError("k must be >= 2 for the ratio test: %r" % k)
        if not 0 <= tau <= 128:
            raise ValueError("tau must be in 0..128: %r" % tau)
        if not 0 < ratio < 1:
            raise ValueError("ratio must be in (0, 1): %r" % ratio)
        if min_candidates_for_ratio < 2:
            raise ValueError("min_candidates_for_ratio must be >= 2")
        self.k = int(k)
        self.tau = int(tau)
        self.ratio = float(ratio)
        self.min_candidates_for_ratio = int(min_candidates_for_ratio)
        self.switch_rounds = int(switch_rounds)

    def __repr__(self):
        return "<MatchConfig(k=%d, tau=%d, ratio=%r)>" % (self.k, self.tau, self.ratio)


def passes_ratio(nearest, second, ratio):
    """Lowe's test on squared distances. A zero second distance (exact
    duplicates) is a rejection."""
    if second <= 0:
        return False
    return nearest / second < ratio * ratio


class BucketIndex(object):
    """Per-table lookup from short code to the train points carrying it.

    Each table is stored as the train point indices stably sorted by code,
    so a bucket is a contiguous slice in ascending point order.
    """

    def __init__(self, short, tables, m):
        short = np.asarray(short, dtype=np.uint32).reshape(-1, tables)
        self.tables = tables
        self.m = m
        self.point_count = len(short)
        self._order = []
        self._codes = []
        for t in range(tables):
            order = np.argsort(short[:, t], kind="stable")
            self._order.append(order)
            self._codes.append(short[order, t])

    def bucket(self, table, code):
        codes = self._codes[table]
        lo = np.searchsorted(codes, code, side="left")
        hi = np.searchsorted(codes, code, side="right")
        return self._order[table][lo:hi]

    def buckets(self, table):
        """Iterate ``(code, indices)`` over the non-empty buckets of a table."""
        codes = self._codes[table]
        values, starts = np.unique(codes, return_index=True)
        ends = list(starts[1:]) + [len(codes)]
        for code, lo, hi in zip(values, starts, ends):
            yield int(code), self._order[table][lo:hi]

    @property
    def size(self):
        return sum(len(order) for order in self._order)

    @property
    def nbytes(self):
        return sum(o.nbytes + c.nbytes for o, c in zip(self._order, self._codes))


def build_bucket_index(train_codes, point_count=None):
    if point_count is not None and point_count != len(train_codes):
        raise ValueError("%d codes for %d points" % (len(train_codes), point_count))
    return BucketIndex(train_codes.short, train_codes.tables, train_codes.m)


def lookup_candidates(query_short, index):
    """Union of the query's buckets over all tables, deduplicated, in
    ascending train index order."""
    parts = [index.bucket(t, query_short[t]) for t in range(index.tables)]
    if not parts:
        return np.zeros(0, dtype=np.int64)
    return np.unique(np.concatenate(parts)).astype(np.int64)


class RankHistogram(object):
    """Candidates bucketed by Hamming distance 0..tau; farther candidates
    are never stored. Within a bucket candidates keep ascending index
    order."""

    def __init__(self, distances, candidates, threshold):
        distances = np.asarray(distances, dtype=np.int64)
        candidates = np.asarray(candidates, dtype=np.int64)
        keep = distances <= threshold
        distances = distances[keep]
        self.threshold = threshold
        self.counts = np.bincount(distances, minlength=threshold + 1)
        self.offsets = np.concatenate(([0], np.cumsum(self.counts)))
        order = np.argsort(distances, kind="stable")
        self.entries = candidates[keep][order]
        self.distances = distances[order]

    def bucket(self, distance):
        return self.entries[self.offsets[distance] : self.offsets[distance + 1]]

    def top(self, k):
        return self.entries[:k]

    def __len__(self):
        return len(self.entries)


def _words(code):
    return getattr(code, "words", code)


def rank_by_hamming(query_long, candidates, train_longs, cfg):
    """Up to ``cfg.k`` candidates by ascending Hamming distance to the query
    (ties by ascending train index), after discarding distances > tau."""
    candidates = np.asarray(candidates, dtype=np.int64)
    if len(candidates) == 0:
        return candidates
    distances = hamming_many(_words(query_long), np.asarray(train_longs)[candidates])
    return RankHistogram(distances, candidates, cfg.tau).top(cfg.k)


def squared_distances(query_desc, train_descs, switch_rounds=DEFAULT_SWITCH_ROUNDS):
    """Squared Euclidean distances as the inner product of each difference
    with itself."""
    diff = np.asarray(train_descs, dtype=np.float64) - np.asarray(query_desc, dtype=np.float64)
    return reduce_sum(diff * diff, switch_rounds)


def euclidean_verify(query_desc, ranked, train_descs, cfg, query_index=0):
    ranked = np.asarray(ranked, dtype=np.int64)
    if len(ranked) < max(2, cfg.min_candidates_for_ratio):
        return None
    dist = squared_distances(query_desc, train_descs[ranked], cfg.switch_rounds)
    order = np.lexsort((ranked, dist))
    nearest, second = dist[order[0]], dist[order[1]]
    if not passes_ratio(nearest, second, cfg.ratio):
        return None
    return MatchRecord(int(query_index), int(ranked[order[0]]), float(nearest))


def match_pair(fsI, fsJ, codesI, codesJ, cfg, index=None, candidate_filter=None):
    """Cascade-match every point of ``fsI`` against ``fsJ``.

    ``candidate_filter(query_row, candidates)`` may shrink each candidate
    set between lookup and ranking; the guided stage uses it.
    """
    if codesI.params != codesJ.params:
        raise HashParameterError(
            "Codes come from different hash families: %r vs %r"
            % (codesI.params, codesJ.params)
        )
    if cfg.tau > codesI.n:
        raise ValueError("tau %d exceeds code length %d" % (cfg.tau, codesI.n))
    matches = []
    if len(fsI) and len(fsJ):
        if index is None:
            index = build_bucket_index(codesJ, len(fsJ))
        for row in range(len(fsI)):
            candidates = lookup_candidates(codesI.short[row], index)
            if candidate_filter is not None and len(candidates):
                candidates = candidate_filter(row, candidates)
            ranked = rank_by_hamming(codesI.long[row], candidates, codesJ.long, cfg)
            match = euclidean_verify(
                fsI.descriptors[row], ranked, fsJ.descriptors, cfg, query_index=row
            )
            if match is not None:
                matches.append(match)
    return matches


def _all_squared_distances(query_descs, train_descs):
    # Integer descriptors: every product and partial sum is an exact
    # float64 integer, so the expansion is exact.
    q = np.asarray(query_descs, dtype=np.float64)
    t = np.asarray(train_descs, dtype=np.float64)
    qq = np.einsum("ij,ij->i", q, q)
    tt = np.einsum("ij,ij->i", t, t)
    return qq[:, None] + tt[None, :] - 2.0 * (q @ t.T)


def brute_force_match(fsI, fsJ, ratio=DEFAULT_RATIO):
    """Exact nearest and second-nearest over all of ``fsJ`` per query, with
    the same ratio test as the cascade."""
    matches = []
    if len(fsJ) < 2:
        return matches
    for start in range(0, len(fsI), QUERY_CHUNK):
        dist = _all_squared_distances(
            fsI.descriptors[start : start + QUERY_CHUNK], fsJ.descriptors
        )
        rows = np.arange(len(dist))
        nearest = np.argmin(dist, axis=1)
        best = dist[rows, nearest].copy()
        dist[rows, nearest] = np.inf
        second = dist.min(axis=1)
        for row in rows:
            if passes_ratio(best[row], second[row], ratio):
                matches.append(
                    MatchRecord(start + int(row), int(nearest[row]), float(best[row]))
                )
    return matches


def kdtree_match(fsI, fsJ, ratio=DEFAULT_RATIO, leafsize=16):
    """Kd-tree baseline: two nearest neighbours from ``cKDTree``, exact
    squared distances recomputed for the reported match."""
    matches = []
    if len(fsJ) < 2 or not len(fsI):
        return matches
    tree = cKDTree(fsJ.descriptors.astype(np.float64), leafsize=leafsize)
    _, idx = tree.query(fsI.descriptors.astype(np.float64), k=2)
    for row in range(len(fsI)):
        nearest, second = idx[row]
        d1 = float(np.sum((fsI.descriptors[row].astype(np.int64)
                           - fsJ.descriptors[nearest].astype(np.int64)) ** 2))
        d2 = float(np.sum((fsI.descriptors[row].astype(np.int64)
                           - fsJ.descriptors[second].astype(np.int64)) ** 2))
        if passes_ratio(d1, d2, ratio):
            matches.append(MatchRecord(row, int(nearest), d1))
    return matches


def compare_matches(found, reference):
    """``(common, recall, precision)`` of ``found`` against ``reference``,
    comparing (query, train) pairs. Empty denominators count as 1.0."""
    found = set((m.query_index, m.train_index) for m in found)
    reference = set((m.query_index, m.train_index) for m in reference)
    common = len(found & reference)
    recall = common / len(reference) if reference else 1.0
    precision = common / len(found) if found else 1.0
    return common, recall, precision
