"""Dataset-level runs: hashing, exhaustive and guided matching, the
brute-force oracle and the benchmarks. Every run walks a scheduler plan
through a :py:class:`Coordinator` and persists results through a
:py:class:`MatchSink`."""
import os
import time
import logging
import threading
from collections import Counter

import numpy as np

from cashash.feature_io import load_features
from cashash.hashing import TREE_ROUNDS, reduce_sum, set_centering
from cashash.hashing import compute_codes, save_codes, load_codes, cache_is_valid
from cashash.cascade_matcher import build_bucket_index, match_pair
from cashash.cascade_matcher import brute_force_match, kdtree_match, compare_matches
from cashash.geometry import seed_geometry, guided_match_pair, pair_seed
from cashash.scheduler import Coordinator, partition, plan_hashing
from cashash.scheduler import plan_exhaustive, plan_guided
from cashash.sink import MatchSink
from cashash.util import CashashException, CodeCacheError, ManifestError
from cashash.util import StageTimes, stage_timer, digest64

log = logging.getLogger(__name__)

CODE_DIR = "codes"
ORACLE_DIR = "oracle"
BENCH_REDUCE_POINTS = 10000
PAIR_ERRORS = (CashashException, OSError, ValueError)


class DeviceBlock(object):
    """Device form of a block: feature sets, code sets and bucket indexes
    of its usable images."""

    def __init__(self, entries):
        self.features = {}
        self.codes = {}
        self.indexes = {}
        for index, (fs, codes) in entries.items():
            if fs is None or codes is None:
                continue
            self.features[index] = fs
            self.codes[index] = codes
            self.indexes[index] = build_bucket_index(codes, len(fs))

    def __contains__(self, index):
        return index in self.features

    @property
    def nbytes(self):
        return sum(fs.nbytes for fs in self.features.values()) + sum(
            c.nbytes for c in self.codes.values()
        )


class RunSummary(object):
    """Pair counts and throughput of one run."""

    def __init__(self, mode, images, planned):
        self.mode = mode
        self.images = images
        self.planned = planned
        self.processed = 0
        self.skipped = 0
        self.failed = 0
        self.matches = 0
        self.seconds = 0.0
        self.stages = []

    @property
    def pairs_per_second(self):
        return self.processed / self.seconds if self.seconds > 0 else 0.0

    def rows(self):
        return [
            ("mode", self.mode),
            ("images", self.images),
            ("planned pairs", self.planned),
            ("%s matching" % self.mode, "%d pairs" % self.processed),
            ("skipped pairs", self.skipped),
            ("failed", self.failed),
            ("matches", self.matches),
            ("seconds", "%.3f" % self.seconds),
            ("pairs/s", "%.2f" % self.pairs_per_second),
        ] + [("stage %s" % name, "%.3fs" % secs) for name, secs in self.stages]

    def format(self):
        rows = self.rows()
        width = max(len(key) for key, _ in rows)
        return "\n".join("%s  %s" % (key.ljust(width), value) for key, value in rows)

    def csv(self):
        return "\n".join("%s,%s" % (key, value) for key, value in self.rows())


class Pipeline(object):
    def __init__(self, manifest, config, catalog=None):
        if not len(manifest):
            raise ManifestError("empty manifest")
        self.manifest = manifest
        self.config = config
        self.catalog = catalog
        self.times = StageTimes()
        self.family = None
        self.failed_images = {}
        self.points = {}
        self.lock = threading.Lock()
        self.code_dir = os.path.join(config.output, CODE_DIR)
        self._partition = None

    @property
    def partition(self):
        if self._partition is None:
            sizes = [os.path.getsize(p) for _, p in self.manifest if os.path.exists(p)]
            per_image = float(np.mean(sizes)) if sizes else 1.0
            block_images, blocks_per_group = self.config.block_sizes(per_image)
            self._partition = partition(self.manifest, block_images, blocks_per_group)
            log.info("Partitioned %r", self._partition)
        return self._partition

    def code_path(self, index):
        return os.path.join(self.code_dir, "%s.chcc" % self.manifest.image_id(index))

    def _image_failed(self, index, error):
        with self.lock:
            if index in self.failed_images:
                return
            self.failed_images[index] = error
        log.warning("Image %s unusable: %s", self.manifest.image_id(index), error)

    def _read_features(self, index):
        if index in self.failed_images:
            return None
        try:
            fs = load_features(self.manifest.path(index), self.manifest.image_id(index))
            fs.validate()
        except PAIR_ERRORS as exc:
            self._image_failed(index, exc)
            return None
        with self.lock:
            self.points[index] = len(fs)
        return fs

    def center(self):
        """Center the run's hash family on the dataset mean descriptor."""

        def descriptors():
            for index in range(len(self.manifest)):
                fs = self._read_features(index)
                if fs is not None:
                    yield fs.descriptors

        with stage_timer("centering", self.times):
            self.family = set_centering(self.config.hash_family(), descriptors())
        return self.family

    def _hash_image(self, index, fs):
        if fs is None:
            return "failed"
        path = self.code_path(index)
        if self.config.reuse_codes and cache_is_valid(path, self.family, len(fs)):
            log.info("Codes of %s cached", fs.image_id)
            return "cached"
        try:
            save_codes(compute_codes(self.family, fs), path)
        except PAIR_ERRORS as exc:
            self._image_failed(index, exc)
            return "failed"
        return "computed"

    def hash(self):
        """Write a code cache per image under ``codes/``; returns counts of
        computed, cached and failed images."""
        if self.family is None:
            self.center()
        os.makedirs(self.code_dir, exist_ok=True)
        counts = Counter()

        def load_group(images):
            return {index: self._read_features(index) for index in images}

        def load_block(images, group):
            return {index: group[index] for index in images}

        def work(task, blocks):
            for index, fs in sorted(blocks[task.block_pair[0]].items()):
                status = self._hash_image(index, fs)
                with self.lock:
                    counts[status] += 1

        plan = plan_hashing(self.partition)
        coordinator = Coordinator(plan, load_group, load_block, self.config.workers)
        with stage_timer("hash", self.times):
            coordinator.run(work)
        log.info("Codes: %d computed, %d cached, %d failed",
                 counts["computed"], counts["cached"], counts["failed"])
        return counts

    def _load_group(self, images):
        group = {}
        for index in images:
            fs = self._read_features(index)
            codes = None
            if fs is not None:
                try:
                    codes = load_codes(self.code_path(index))
                    if codes.params != self.family.params or len(codes) != len(fs):
                        raise CodeCacheError("Stale code cache for %s" % fs.image_id)
                except PAIR_ERRORS as exc:
                    self._image_failed(index, exc)
                    fs, codes = None, None
            group[index] = (fs, codes)
        return group

    def _load_block(self, images, group):
        return DeviceBlock({index: group[index] for index in images})

    def _run_pairs(self, plan, sink, summary, run_pair):
        """Run ``run_pair(a, b, blockA, blockB)`` over every pair of the
        plan; failures are recorded and the run continues."""
        part = plan.partition

        def work(task, blocks):
            for a, b in task.image_pairs:
                image_ids = (self.manifest.image_id(a), self.manifest.image_id(b))
                block_a = blocks[part.block_of(a)]
                block_b = blocks[part.block_of(b)]
                if a not in block_a or b not in block_b:
                    sink.record_failure((a, b), image_ids, "image unavailable")
                    with self.lock:
                        summary.failed += 1
                    continue
                try:
                    outcome = run_pair(a, b, block_a, block_b)
                except PAIR_ERRORS as exc:
                    sink.record_failure((a, b), image_ids, exc)
                    with self.lock:
                        summary.failed += 1
                    continue
                with self.lock:
                    if outcome is None:
                        summary.skipped += 1
                    else:
                        summary.processed += 1
                        summary.matches += outcome

        coordinator = Coordinator(plan, self._load_group, self._load_block,
                                  self.config.workers)
        coordinator.run(work)

    def _submit(self, sink, a, b, matches, seconds):
        sink.submit((a, b), (self.manifest.image_id(a), self.manifest.image_id(b)),
                    matches, seconds)
        return len(matches)

    def _open_sink(self, mode, match_dir="matches"):
        return MatchSink(self.config.output, catalog=self.catalog, mode=mode,
                         match_dir=match_dir)

    def _finish(self, sink, summary, started):
        summary.failed += sink.close()
        summary.seconds = time.perf_counter() - started
        summary.stages = self.times.items()
        if self.catalog is not None:
            self.catalog.record_images(self.manifest, self.points, self.failed_images)
        log.info("%s matching: %d pairs, %d skipped, %d failed",
                 summary.mode, summary.processed, summary.skipped, summary.failed)
        return summary

    def match(self, guided=False):
        """Exhaustive matching over all pairs, or the two-stage guided run:
        seeds and geometry for every pair, then guided matching of the pairs
        that pass the gate."""
        self.hash()
        part = self.partition
        cfg = self.config.match_config()
        exhaustive = plan_exhaustive(part)
        mode = "guided" if guided else "exhaustive"
        summary = RunSummary(mode, len(self.manifest), len(exhaustive.image_pairs))
        started = time.perf_counter()
        sink = self._open_sink(mode)

        if not guided:
            def run_match(a, b, block_a, block_b):
                start = time.perf_counter()
                matches = match_pair(block_a.features[a], block_b.features[b],
                                     block_a.codes[a], block_b.codes[b], cfg,
                                     index=block_b.indexes[b])
                return self._submit(sink, a, b, matches, time.perf_counter() - start)

            with stage_timer("exhaustive match", self.times):
                self._run_pairs(exhaustive, sink, summary, run_match)
            return self._finish(sink, summary, started)

        geometries = {}
        seeds = RunSummary("seed", len(self.manifest), summary.planned)

        def run_seed(a, b, block_a, block_b):
            stage_cfg = self.config.stage_config(seed=pair_seed(self.config.seed, a, b))
            geometry = seed_geometry(block_a.features[a], block_b.features[b],
                                     block_a.codes[a], block_b.codes[b], cfg, stage_cfg)
            image_ids = (self.manifest.image_id(a), self.manifest.image_id(b))
            sink.record_geometry((a, b), image_ids, geometry)
            with self.lock:
                geometries[(a, b)] = geometry
            if not geometry.accepted:
                sink.record_skipped((a, b), image_ids)
                return None
            return 0

        with stage_timer("seed", self.times):
            self._run_pairs(exhaustive, sink, seeds, run_seed)
        accepted = sorted(p for p, g in geometries.items() if g.accepted)
        summary.skipped = seeds.skipped
        summary.failed = seeds.failed
        log.info("%d of %d pairs pass the geometry gate", len(accepted), summary.planned)

        band = self.config.band

        def run_guided(a, b, block_a, block_b):
            start = time.perf_counter()
            matches = guided_match_pair(block_a.features[a], block_b.features[b],
                                        block_a.codes[a], block_b.codes[b],
                                        geometries[(a, b)].F, cfg, band,
                                        index=block_b.indexes[b])
            return self._submit(sink, a, b, matches, time.perf_counter() - start)

        with stage_timer("guided match", self.times):
            self._run_pairs(plan_guided(part, accepted), sink, summary, run_guided)
        return self._finish(sink, summary, started)

    def oracle(self):
        """Brute-force matches for every pair under ``oracle/`` and the
        recall of cascade matching against them."""
        self.hash()
        cfg = self.config.match_config()
        plan = plan_exhaustive(self.partition)
        summary = RunSummary("oracle", len(self.manifest), len(plan.image_pairs))
        started = time.perf_counter()
        sink = self._open_sink("oracle", match_dir=ORACLE_DIR)

        def run_oracle(a, b, block_a, block_b):
            fsI, fsJ = block_a.features[a], block_b.features[b]
            start = time.perf_counter()
            reference = brute_force_match(fsI, fsJ, cfg.ratio)
            seconds = time.perf_counter() - start
            found = match_pair(fsI, fsJ, block_a.codes[a], block_b.codes[b], cfg,
                               index=block_b.indexes[b])
            common, _, _ = compare_matches(found, reference)
            sink.record_recall((a, b), (fsI.image_id, fsJ.image_id),
                               len(reference), len(found), common)
            return self._submit(sink, a, b, reference, seconds)

        with stage_timer("oracle", self.times):
            self._run_pairs(plan, sink, summary, run_oracle)
        return self._finish(sink, summary, started)

    def bench_match(self):
        """Pairs per second of the cascade, brute force and kd-tree matchers
        over all pairs, with recall against brute force."""
        self.hash()
        cfg = self.config.match_config()
        features, codes = {}, {}
        for index in range(len(self.manifest)):
            fs, code = self._load_group([index])[index]
            if fs is not None:
                features[index], codes[index] = fs, code
        pairs = [p for p in plan_exhaustive(self.partition).image_pairs
                 if p[0] in features and p[1] in features]
        methods = [
            ("cascade", lambda a, b: match_pair(features[a], features[b],
                                                codes[a], codes[b], cfg)),
            ("brute-force", lambda a, b: brute_force_match(features[a], features[b], cfg.ratio)),
            ("kd-tree", lambda a, b: kdtree_match(features[a], features[b], cfg.ratio)),
        ]
        results, rows = {}, []
        for name, method in methods:
            start = time.perf_counter()
            results[name] = {p: method(*p) for p in pairs}
            seconds = time.perf_counter() - start
            rows.append([name, len(pairs), seconds,
                         len(pairs) / seconds if seconds > 0 else 0.0])
        for row in rows:
            common = total = 0
            for p in pairs:
                c, _, _ = compare_matches(results[row[0]][p], results["brute-force"][p])
                common += c
                total += len(results["brute-force"][p])
            row.append(common / total if total else 1.0)
        return [tuple(row) for row in rows]


def bench_reduce(config, points=BENCH_REDUCE_POINTS):
    """Time the dot-product reduction at every switch point over one
    integer-valued workload. Returns ``(switch_rounds, ns_per_op,
    checksum)`` rows; every row must carry the same checksum."""
    rng = np.random.Generator(np.random.PCG64(config.seed))
    a = rng.integers(-255, 256, size=(points, 128)).astype(np.float64)
    b = rng.integers(0, 256, size=(points, 128)).astype(np.float64)
    rows = []
    for rounds in range(TREE_ROUNDS + 1):
        start = time.perf_counter()
        values = reduce_sum(a * b, rounds)
        elapsed = time.perf_counter() - start
        rows.append((rounds, elapsed * 1e9 / points, "%016x" % digest64(values.tobytes())))
    if len(set(row[2] for row in rows)) != 1:
        raise CashashException("Reduction results differ between switch points")
    return rows
