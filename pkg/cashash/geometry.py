"""Two-view epipolar geometry and the geometry-guided matching stage.

Stage one matches the top-scale share of both feature sets with the plain
cascade and fits a fundamental matrix with RANSAC over normalized
eight-point hypotheses. A pair whose fit passes :py:func:`gate` goes on to
stage two, where every query only ranks candidates lying within a band
around its epipolar line.
"""
import math
import logging
from collections import namedtuple
from functools import partial

import numpy as np

from cashash.feature_io import top_scale_rows
from cashash.hashing import compute_codes
from cashash.cascade_matcher import match_pair
from cashash.util import DegenerateGeometry

log = logging.getLogger(__name__)

MIN_SEED_MATCHES = 16
SAMPLE_SIZE = 8
DEFAULT_BAND = 4.0
DEFAULT_FRACTION = 0.2
# Hypotheses per round. Early termination is only checked between rounds.
HYPOTHESIS_BATCH = 64
RANK_TOLERANCE = 1e-10

EpipolarLine = namedtuple("EpipolarLine", ["a", "b", "c"])


def _homogeneous(points):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return np.hstack([points, np.ones((len(points), 1))])


def normalize_fundamental(F):
    """Scale to unit Frobenius norm with the largest-magnitude entry
    positive."""
    F = np.asarray(F, dtype=np.float64)
    F = F / np.linalg.norm(F)
    if F.flat[np.argmax(np.abs(F))] < 0:
        F = -F
    return F


def normalize_points(points):
    """Similarity ``T`` moving the centroid to the origin with mean
    distance sqrt(2); returns ``(transformed, T)``."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if not len(points):
        raise DegenerateGeometry("Cannot normalize an empty point set")
    centroid = points.mean(axis=0)
    mean_dist = np.mean(np.hypot(*(points - centroid).T))
    if mean_dist <= 0:
        raise DegenerateGeometry("All points coincide; scale is undefined")
    s = math.sqrt(2) / mean_dist
    T = np.array(
        [[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]]
    )
    transformed = (_homogeneous(points) @ T.T)[:, :2]
    return transformed, T


def eight_point(pts1, pts2):
    """Fundamental matrix with ``p2^T F p1 = 0`` from at least eight
    correspondences, by the normalized linear method with rank-2
    enforcement."""
    pts1 = np.asarray(pts1, dtype=np.float64).reshape(-1, 2)
    pts2 = np.asarray(pts2, dtype=np.float64).reshape(-1, 2)
    if len(pts1) != len(pts2):
        raise ValueError("%d points against %d" % (len(pts1), len(pts2)))
    if len(pts1) < SAMPLE_SIZE:
        raise DegenerateGeometry("Eight-point needs 8 correspondences, got %d" % len(pts1))
    n1, T1 = normalize_points(pts1)
    n2, T2 = normalize_points(pts2)
    x1, y1 = n1[:, 0], n1[:, 1]
    x2, y2 = n2[:, 0], n2[:, 1]
    A = np.stack(
        [x2 * x1, x2 * y1, x2, y2 * x1, y2 * y1, y2, x1, y1, np.ones(len(x1))], axis=1
    )
    _, s, vt = np.linalg.svd(A)
    if s[SAMPLE_SIZE - 1] <= RANK_TOLERANCE * s[0]:
        raise DegenerateGeometry("Correspondences do not determine F")
    F = vt[-1].reshape(3, 3)
    u, s, vt = np.linalg.svd(F)
    F = u @ np.diag([s[0], s[1], 0.0]) @ vt
    return normalize_fundamental(T2.T @ F @ T1)


def epipolar_line(F, point):
    """Line ``F (x, y, 1)^T`` in the second image."""
    a, b, c = np.asarray(F, dtype=np.float64) @ np.array([point[0], point[1], 1.0])
    return EpipolarLine(float(a), float(b), float(c))


def epipolar_lines(F, points):
    return _homogeneous(points) @ np.asarray(F, dtype=np.float64).T


def is_degenerate(line):
    return line[0] == 0 and line[1] == 0


def epipolar_distance(line, point):
    """Unsigned point-to-line distance in pixels."""
    if is_degenerate(line):
        raise DegenerateGeometry("Epipolar line %r has no direction" % (line,))
    a, b, c = line
    return abs(a * point[0] + b * point[1] + c) / math.hypot(a, b)


def _line_distances(lines, points):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    num = np.abs(lines[:, 0] * points[:, 0] + lines[:, 1] * points[:, 1] + lines[:, 2])
    den = np.hypot(lines[:, 0], lines[:, 1])
    out = np.full(len(points), np.inf)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


def symmetric_epipolar_distances(F, pts1, pts2):
    """Per correspondence, the larger of the two directed point-to-line
    distances."""
    F = np.asarray(F, dtype=np.float64)
    forward = _line_distances(_homogeneous(pts1) @ F.T, pts2)
    backward = _line_distances(_homogeneous(pts2) @ F, pts1)
    return np.maximum(forward, backward)


class RansacConfig(object):
    def __init__(self, max_iterations=2048, inlier_threshold=2.0, confidence=0.999, seed=0):
        if max_iterations < 1:
            raise ValueError("max_iterations must be >= 1: %r" % max_iterations)
        if inlier_threshold <= 0:
            raise ValueError("inlier_threshold must be > 0: %r" % inlier_threshold)
        if not 0 < confidence < 1:
            raise ValueError("confidence must be in (0, 1): %r" % confidence)
        self.max_iterations = int(max_iterations)
        self.inlier_threshold = float(inlier_threshold)
        self.confidence = float(confidence)
        self.seed = int(seed)

    def with_seed(self, seed):
        return RansacConfig(self.max_iterations, self.inlier_threshold, self.confidence, seed)


def pair_seed(seed, i, j):
    """Per-pair RANSAC seed derived from the run seed and the image pair."""
    state = np.random.SeedSequence([seed, i, j]).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


class TwoViewGeometry(object):
    def __init__(self, F, seed_match_count, inlier_count, accepted, inliers=None):
        self.F = None if F is None else np.asarray(F, dtype=np.float64)
        self.seed_match_count = int(seed_match_count)
        self.inlier_count = int(inlier_count)
        self.accepted = bool(accepted)
        self.inliers = inliers

    def __repr__(self):
        return "<TwoViewGeometry(accepted=%s, %d/%d inliers)>" % (
            self.accepted, self.inlier_count, self.seed_match_count)


def gate(seed_count, inlier_count):
    """At least 16 seed matches, of which at least two thirds are inliers."""
    return seed_count >= MIN_SEED_MATCHES and 3 * inlier_count >= 2 * seed_count


def _required_iterations(inliers, total, confidence):
    w = inliers / float(total)
    if w <= 0:
        return math.inf
    p = w ** SAMPLE_SIZE
    if p >= 1:
        return 0
    denom = math.log1p(-p)
    if denom == 0:
        return math.inf
    return math.ceil(math.log1p(-confidence) / denom)


def _score_hypothesis(pts1, pts2, threshold, sample):
    try:
        F = eight_point(pts1[sample], pts2[sample])
    except DegenerateGeometry:
        return -1, None
    inliers = int(np.count_nonzero(symmetric_epipolar_distances(F, pts1, pts2) <= threshold))
    return inliers, F


def ransac_fundamental(pts1, pts2, cfg, executor=None):
    """Fit F to seed correspondences and apply the stage-one gate.

    Hypotheses are minimal samples drawn from a PCG64 stream seeded with
    ``cfg.seed``, scored by symmetric epipolar distance, in fixed-size
    rounds that may be spread over ``executor``. The best hypothesis (ties
    to the earliest) is refit on its inliers.
    """
    pts1 = np.asarray(pts1, dtype=np.float64).reshape(-1, 2)
    pts2 = np.asarray(pts2, dtype=np.float64).reshape(-1, 2)
    count = len(pts1)
    if count < MIN_SEED_MATCHES:
        return TwoViewGeometry(None, count, 0, False)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed)))
    mapper = map if executor is None else executor.map
    score = partial(_score_hypothesis, pts1, pts2, cfg.inlier_threshold)
    best_inliers, best_F = -1, None
    evaluated = 0
    required = cfg.max_iterations
    while evaluated < min(required, cfg.max_iterations):
        batch = min(HYPOTHESIS_BATCH, cfg.max_iterations - evaluated)
        samples = [rng.choice(count, SAMPLE_SIZE, replace=False) for _ in range(batch)]
        for inliers, F in mapper(score, samples):
            if F is not None and inliers > best_inliers:
                best_inliers, best_F = inliers, F
        evaluated += batch
        required = _required_iterations(max(best_inliers, 0), count, cfg.confidence)
    log.debug("RANSAC evaluated %d hypotheses, best has %d inliers", evaluated, best_inliers)
    if best_F is None:
        return TwoViewGeometry(None, count, 0, False)

    mask = symmetric_epipolar_distances(best_F, pts1, pts2) <= cfg.inlier_threshold
    F = best_F
    try:
        refit = eight_point(pts1[mask], pts2[mask])
        refit_mask = symmetric_epipolar_distances(refit, pts1, pts2) <= cfg.inlier_threshold
        if np.count_nonzero(refit_mask) >= np.count_nonzero(mask):
            F, mask = refit, refit_mask
    except DegenerateGeometry:
        log.debug("Refit on %d inliers is degenerate, keeping hypothesis", mask.sum())
    inliers = int(np.count_nonzero(mask))
    return TwoViewGeometry(F, count, inliers, gate(count, inliers), inliers=mask)


class EpipolarBand(object):
    """Candidate filter keeping train points within ``band`` pixels of the
    query's epipolar line. Queries whose line is degenerate keep all their
    candidates."""

    def __init__(self, F, query_points, train_points, band):
        self.lines = epipolar_lines(F, query_points)
        self.norms = np.hypot(self.lines[:, 0], self.lines[:, 1])
        self.train = np.asarray(train_points, dtype=np.float64).reshape(-1, 2)
        self.band = band
        self.fallbacks = 0

    def __call__(self, row, candidates):
        norm = self.norms[row]
        if not norm > 0:
            self.fallbacks += 1
            return candidates
        a, b, c = self.lines[row]
        pts = self.train[candidates]
        dist = np.abs(a * pts[:, 0] + b * pts[:, 1] + c) / norm
        return candidates[dist <= self.band]


def guided_match_pair(fsI, fsJ, codesI, codesJ, F, cfg, band=DEFAULT_BAND, index=None):
    """Cascade matching with each candidate set cut to the epipolar band
    between remapping and ranking. Without ``F`` this is plain matching."""
    candidate_filter = None
    if F is not None:
        candidate_filter = EpipolarBand(F, fsI.positions, fsJ.positions, band)
    matches = match_pair(
        fsI, fsJ, codesI, codesJ, cfg, index=index,
        candidate_filter=candidate_filter,
    )
    if candidate_filter is not None and candidate_filter.fallbacks:
        log.debug("%d queries of %s had degenerate epipolar lines",
                  candidate_filter.fallbacks, fsI.image_id)
    return matches


class StageConfig(object):
    """Two-stage settings: the top-scale ``fraction`` used for seeds, the
    RANSAC settings, the band width ``d`` and an optional forced accept."""

    def __init__(self, fraction=DEFAULT_FRACTION, ransac=None, band=DEFAULT_BAND,
                 force_accept=False):
        if not 0 < fraction <= 1:
            raise ValueError("fraction must be in (0, 1]: %r" % fraction)
        if not band >= 0:
            raise ValueError("band must be >= 0: %r" % band)
        self.fraction = float(fraction)
        self.ransac = ransac or RansacConfig()
        self.band = float(band)
        self.force_accept = force_accept


def seed_geometry(fsI, fsJ, codesI, codesJ, cfg, stage_cfg, executor=None):
    """Stage one: match the top-scale subsets and estimate geometry from
    the resulting seeds."""
    rowsI = top_scale_rows(fsI, stage_cfg.fraction)
    rowsJ = top_scale_rows(fsJ, stage_cfg.fraction)
    subI, subJ = fsI.take(rowsI), fsJ.take(rowsJ)
    seeds = match_pair(subI, subJ, codesI.take(rowsI), codesJ.take(rowsJ), cfg)
    pts1 = subI.positions[[m.query_index for m in seeds]].reshape(-1, 2)
    pts2 = subJ.positions[[m.train_index for m in seeds]].reshape(-1, 2)
    return ransac_fundamental(pts1, pts2, stage_cfg.ransac, executor=executor)


def two_stage_match(fsI, fsJ, family, cfg, stage_cfg, codesI=None, codesJ=None):
    """Seed stage, gate, then guided matching of the full feature sets.
    Rejected pairs return their geometry and no matches."""
    if codesI is None:
        codesI = compute_codes(family, fsI)
    if codesJ is None:
        codesJ = compute_codes(family, fsJ)
    geometry = seed_geometry(fsI, fsJ, codesI, codesJ, cfg, stage_cfg)
    if not (geometry.accepted or stage_cfg.force_accept):
        log.info("Pair %s/%s skipped: %r", fsI.image_id, fsJ.image_id, geometry)
        return geometry, []
    matches = guided_match_pair(fsI, fsJ, codesI, codesJ, geometry.F, cfg, stage_cfg.band)
    return geometry, matches


def homography_accuracy(matches, fsI, fsJ, H, epsilon=6.0):
    """Share of matches whose query maps through ``H`` to within
    ``epsilon`` pixels of its train point."""
    if not matches:
        return 1.0
    src = _homogeneous(fsI.positions[[m.query_index for m in matches]])
    dst = fsJ.positions[[m.train_index for m in matches]]
    mapped = src @ np.asarray(H, dtype=np.float64).T
    mapped = mapped[:, :2] / mapped[:, 2:3]
    err = np.hypot(*(mapped - dst).T)
    return float(np.count_nonzero(err < epsilon)) / len(matches)
