import os
import queue
import logging
import threading

from cashash.feature_io import save_matches
from cashash.util import format_distance

log = logging.getLogger(__name__)

MATCH_DIR = "matches"
GEOMETRY_REPORT = "geometry.txt"
RECALL_REPORT = "recall.txt"


class InvalidCallback(ValueError):
    pass


class ChunkedRecorder(object):
    """Batch up catalog rows
    with ChunkedRecorder(catalog, "pairs") as recorder:
        recorder.record(row)

    Rows are inserted in groups of `chunksize`. An optional callback is
    called with the queue just before it is inserted.
    """

    def __init__(self, catalog, table, chunksize=500, callback=None):
        self.queue = []
        self.catalog = catalog
        self.table = table
        self.chunksize = chunksize
        if callback and not callable(callback):
            raise InvalidCallback
        self.callback = callback

    def record(self, item):
        self.queue.append(item)
        if len(self.queue) >= self.chunksize:
            self.flush()

    def flush(self):
        if self.queue:
            if self.callback is not None:
                self.callback(self.queue)
            if self.catalog is not None:
                self.catalog.insert_many(self.table, list(self.queue))
        self.queue.clear()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.flush()


def match_file_name(pair):
    return "%05d_%05d.txt" % tuple(pair)


def _geometry_line(image_ids, geometry):
    values = ["nan"] * 9
    if geometry.F is not None:
        values = [repr(float(v)) for v in geometry.F.ravel()]
    return "%s %s %d %d %d %s" % (
        image_ids[0], image_ids[1], int(geometry.accepted),
        geometry.seed_match_count, geometry.inlier_count, " ".join(values),
    )


class MatchSink(object):
    """Receives finished pair results from compute lanes and persists them
    on a writer thread: one match file per pair under ``matches/``, plus
    geometry and recall reports written sorted on :py:meth:`close`."""

    def __init__(self, output, catalog=None, mode="exhaustive", match_dir=MATCH_DIR):
        self.output = str(output)
        self.match_dir = os.path.join(self.output, match_dir)
        os.makedirs(self.match_dir, exist_ok=True)
        self.mode = mode
        self.catalog = catalog
        self.geometry = {}
        self.recall = {}
        self.written = []
        self.failed = []
        self.errors = []
        self.pairs = ChunkedRecorder(catalog, "pairs")
        self.geometry_rows = ChunkedRecorder(catalog, "geometry")
        self.recall_rows = ChunkedRecorder(catalog, "recall")
        self.queue = queue.Queue()
        self.lock = threading.Lock()
        self.thread = threading.Thread(target=self._writer, name="match-sink", daemon=True)
        self.thread.start()

    def _writer(self):
        while True:
            item = self.queue.get()
            if item is None:
                break
            pair, image_ids, matches, seconds = item
            try:
                path = os.path.join(self.match_dir, match_file_name(pair))
                save_matches(image_ids, matches, path)
                with self.lock:
                    self.written.append(pair)
                    self.pairs.record({
                        "mode": self.mode, "i": pair[0], "j": pair[1],
                        "image_i": image_ids[0], "image_j": image_ids[1],
                        "matches": len(matches), "status": "ok", "error": None,
                        "seconds": seconds,
                    })
            except (OSError, ValueError) as exc:
                self.record_failure(pair, image_ids, exc)
                with self.lock:
                    self.errors.append((pair, exc))

    def submit(self, pair, image_ids, matches, seconds=None):
        if pair is None:
            raise ValueError("Matches for %r need a pair of image indices" % (image_ids,))
        self.queue.put((tuple(pair), tuple(image_ids), list(matches), seconds))

    def record_geometry(self, pair, image_ids, geometry):
        with self.lock:
            self.geometry[tuple(pair)] = (tuple(image_ids), geometry)
        row = {"i": pair[0], "j": pair[1], "accepted": geometry.accepted,
               "seed_matches": geometry.seed_match_count,
               "inliers": geometry.inlier_count}
        values = [None] * 9 if geometry.F is None else [float(v) for v in geometry.F.ravel()]
        row.update(zip(("f%d%d" % (r, c) for r in range(3) for c in range(3)), values))
        with self.lock:
            self.geometry_rows.record(row)

    def record_skipped(self, pair, image_ids):
        with self.lock:
            self.pairs.record({
                "mode": self.mode, "i": pair[0], "j": pair[1],
                "image_i": image_ids[0], "image_j": image_ids[1],
                "matches": 0, "status": "skipped", "error": None, "seconds": None,
            })

    def record_recall(self, pair, image_ids, oracle, cascade, common):
        with self.lock:
            self.recall[tuple(pair)] = (tuple(image_ids), oracle, cascade, common)
            self.recall_rows.record({"i": pair[0], "j": pair[1], "oracle": oracle,
                                     "found": cascade, "common": common})

    def record_failure(self, pair, image_ids, error):
        log.warning("Pair %s/%s failed: %s", image_ids[0], image_ids[1], error)
        with self.lock:
            self.failed.append(tuple(pair))
            self.pairs.record({
                "mode": self.mode, "i": pair[0], "j": pair[1],
                "image_i": image_ids[0], "image_j": image_ids[1],
                "matches": None, "status": "failed", "error": str(error),
                "seconds": None,
            })

    def _write_reports(self):
        if self.geometry:
            with open(os.path.join(self.output, GEOMETRY_REPORT), "w", encoding="utf-8") as fh:
                for pair in sorted(self.geometry):
                    image_ids, geometry = self.geometry[pair]
                    fh.write(_geometry_line(image_ids, geometry) + "\n")
        if self.recall:
            totals = [0, 0, 0]
            with open(os.path.join(self.output, RECALL_REPORT), "w", encoding="utf-8") as fh:
                fh.write("# I J oracle cascade common recall precision\n")
                for pair in sorted(self.recall):
                    image_ids, oracle, cascade, common = self.recall[pair]
                    totals = [totals[0] + oracle, totals[1] + cascade, totals[2] + common]
                    fh.write("%s %s %d %d %d %s %s\n" % (
                        image_ids[0], image_ids[1], oracle, cascade, common,
                        format_distance(_ratio(common, oracle)),
                        format_distance(_ratio(common, cascade))))
                oracle, cascade, common = totals
                fh.write("# total %d %d %d %s %s\n" % (
                    oracle, cascade, common,
                    format_distance(_ratio(common, oracle)),
                    format_distance(_ratio(common, cascade))))

    def close(self):
        """Drain the queue, write the reports and flush catalog rows.
        Returns the number of pairs whose output could not be written."""
        self.queue.put(None)
        self.thread.join()
        self._write_reports()
        for recorder in (self.pairs, self.geometry_rows, self.recall_rows):
            recorder.flush()
        return len(self.errors)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()


def _ratio(part, whole):
    return part / whole if whole else 1.0
