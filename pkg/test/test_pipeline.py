import io
import os
import shutil
import tempfile
import unittest
from contextlib import redirect_stdout

from cashash.catalog import Catalog
from cashash.cli import main
from cashash.config import RunConfig
from cashash.feature_io import load_manifest, load_matches, save_manifest
from cashash.pipeline import Pipeline, bench_reduce
from cashash.types import DatasetManifest
from cashash.util import ManifestError

from .sample_data import scene_dataset

SCENE_PAIRS = 15


def listing(directory):
    return sorted(os.listdir(directory)) if os.path.isdir(directory) else []


def contents(directory):
    out = {}
    for name in listing(directory):
        with open(os.path.join(directory, name), "rb") as fh:
            out[name] = fh.read()
    return out


class PipelineTestCase(unittest.TestCase):
    def setUp(self):
        self.dir = tempfile.mkdtemp()
        self.manifest_path = scene_dataset(self.dir)
        self.manifest = load_manifest(self.manifest_path)

    def tearDown(self):
        shutil.rmtree(self.dir)

    def config(self, name="out", **kwargs):
        kwargs.setdefault("block_images", 2)
        kwargs.setdefault("blocks_per_group", 2)
        return RunConfig(output=os.path.join(self.dir, name), seed=3, **kwargs)

    def test_empty_manifest(self):
        with self.assertRaises(ManifestError):
            Pipeline(DatasetManifest(), self.config())

    def test_hash_reuses_caches(self):
        config = self.config()
        counts = Pipeline(self.manifest, config).hash()
        assert counts["computed"] == 6, counts
        assert len(listing(os.path.join(config.output, "codes"))) == 6
        counts = Pipeline(self.manifest, config).hash()
        assert counts["cached"] == 6, counts
        config.update({"reuse_codes": "false"})
        counts = Pipeline(self.manifest, config).hash()
        assert counts["computed"] == 6, counts

    def test_exhaustive_match(self):
        config = self.config()
        with Catalog("sqlite://") as catalog:
            summary = Pipeline(self.manifest, config, catalog).match()
            assert catalog.pair_counts("exhaustive") == {"ok": SCENE_PAIRS}
        assert summary.planned == SCENE_PAIRS
        assert summary.processed == SCENE_PAIRS, summary.format()
        assert summary.failed == 0
        names = listing(os.path.join(config.output, "matches"))
        assert len(names) == SCENE_PAIRS, names
        assert names[0] == "00000_00001.txt"
        (image_i, image_j), matches = load_matches(
            os.path.join(config.output, "matches", "00000_00001.txt"))
        assert (image_i, image_j) == ("view00", "view01")
        assert summary.matches >= len(matches) > 0
        assert "exhaustive matching" in summary.format()

    def worker_outputs(self, guided):
        directory = os.path.join(self.dir, "twenty")
        os.makedirs(directory)
        manifest = load_manifest(scene_dataset(directory, images=20))
        outputs = []
        for workers in (1, 2, 4, 8):
            config = self.config("out%d" % workers, workers=workers)
            Pipeline(manifest, config).match(guided=guided)
            files = contents(os.path.join(config.output, "matches"))
            if guided:
                with open(os.path.join(config.output, "geometry.txt"), "rb") as fh:
                    files["geometry.txt"] = fh.read()
            outputs.append(files)
        return outputs

    def test_output_independent_of_workers(self):
        outputs = self.worker_outputs(guided=False)
        assert len(outputs[0]) == 190, len(outputs[0])
        for workers, output in zip((2, 4, 8), outputs[1:]):
            assert output == outputs[0], workers

    def test_guided_output_independent_of_workers(self):
        outputs = self.worker_outputs(guided=True)
        assert "geometry.txt" in outputs[0]
        assert len(outputs[0]["geometry.txt"].splitlines()) == 190
        for workers, output in zip((2, 4, 8), outputs[1:]):
            assert output == outputs[0], workers

    def test_guided_match(self):
        config = self.config()
        with Catalog("sqlite://") as catalog:
            summary = Pipeline(self.manifest, config, catalog).match(guided=True)
            accepted = catalog.accepted_pairs()
        with open(os.path.join(config.output, "geometry.txt")) as fh:
            lines = fh.read().splitlines()
        assert len(lines) == SCENE_PAIRS, lines
        flagged = [line.split()[:2] for line in lines if line.split()[2] == "1"]
        assert len(flagged) == len(accepted)
        names = listing(os.path.join(config.output, "matches"))
        assert names == ["%05d_%05d.txt" % pair for pair in accepted], names
        assert summary.processed == len(accepted)
        assert summary.skipped == SCENE_PAIRS - len(accepted)

    def test_oracle(self):
        config = self.config()
        with Catalog("sqlite://") as catalog:
            summary = Pipeline(self.manifest, config, catalog).oracle()
            totals = catalog.recall_totals()
        assert summary.processed == SCENE_PAIRS
        assert len(listing(os.path.join(config.output, "oracle"))) == SCENE_PAIRS
        with open(os.path.join(config.output, "recall.txt")) as fh:
            lines = fh.read().splitlines()
        assert len(lines) == SCENE_PAIRS + 2, lines
        assert lines[-1].split()[2:5] == [str(totals["oracle"]), str(totals["found"]),
                                          str(totals["common"])], lines[-1]
        assert totals["common"] <= totals["found"]

    def test_missing_image(self):
        manifest = load_manifest(self.manifest_path)
        manifest.add("ghost", os.path.join(self.dir, "ghost.chft"))
        config = self.config()
        with Catalog("sqlite://") as catalog:
            pipeline = Pipeline(manifest, config, catalog)
            summary = pipeline.match()
            assert catalog.pair_counts("exhaustive") == {"ok": SCENE_PAIRS, "failed": 6}
            failures = catalog.failures()
        assert list(pipeline.failed_images) == [6]
        assert summary.failed == 6
        assert summary.processed == SCENE_PAIRS
        assert failures[0]["image_id"] == "ghost", failures[0]

    def test_bench_match(self):
        rows = Pipeline(self.manifest, self.config()).bench_match()
        assert [row[0] for row in rows] == ["cascade", "brute-force", "kd-tree"]
        assert all(row[1] == SCENE_PAIRS for row in rows)
        assert rows[1][4] == 1.0
        assert rows[2][4] == 1.0

    def test_bench_reduce(self):
        rows = bench_reduce(RunConfig(), points=64)
        assert [row[0] for row in rows] == list(range(8))
        assert len(set(row[2] for row in rows)) == 1


class CommandLineTestCase(unittest.TestCase):
    def setUp(self):
        self.dir = tempfile.mkdtemp()
        self.manifest_path = scene_dataset(self.dir)
        self.output = os.path.join(self.dir, "out")

    def tearDown(self):
        shutil.rmtree(self.dir)

    def run_main(self, *argv):
        out = io.StringIO()
        with redirect_stdout(out):
            code = main(list(argv))
        return code, out.getvalue().splitlines()

    def test_match(self):
        url = "sqlite:///%s" % os.path.join(self.dir, "catalog.db")
        code, lines = self.run_main("match", self.manifest_path, "--output", self.output,
                                    "--catalog", url, "--block-images", "2")
        assert code == 0, lines
        with Catalog(url) as catalog:
            assert catalog.pair_counts("exhaustive") == {"ok": SCENE_PAIRS}
        assert len(listing(os.path.join(self.output, "matches"))) == SCENE_PAIRS

    def test_hash_and_oracle(self):
        args = ["--output", self.output, "--catalog", "sqlite://", "--csv"]
        code, lines = self.run_main("hash", self.manifest_path, *args)
        assert code == 0
        assert lines == ["status,images", "computed,6", "cached,0", "failed,0"], lines
        code, lines = self.run_main("hash", self.manifest_path, *args)
        assert lines[1:3] == ["computed,0", "cached,6"], lines
        code, lines = self.run_main("oracle", self.manifest_path, *args)
        assert code == 0, lines
        assert "oracle matching,%d pairs" % SCENE_PAIRS in lines, lines
        assert os.path.exists(os.path.join(self.output, "recall.txt"))

    def test_empty_manifest(self):
        path = os.path.join(self.dir, "empty.tsv")
        save_manifest(DatasetManifest(), path)
        code, _ = self.run_main("match", path, "--output", self.output, "--catalog", "sqlite://")
        assert code == 1

    def test_bad_config(self):
        code, _ = self.run_main("plan", self.manifest_path, "--workers", "0")
        assert code == 1

    def test_plan(self):
        code, lines = self.run_main("plan", self.manifest_path, "--block-images", "2",
                                    "--blocks-per-group", "1", "--simulate")
        assert code == 0
        assert len(lines) == 7, lines
        assert lines[0].startswith("0\tgroups 0,0\tblocks 0,0"), lines[0]
        assert lines[-1] == "# peak memory 3 device 3 stalls 0", lines[-1]

    def test_bench_reduce(self):
        code, lines = self.run_main("bench-reduce", "--points", "32", "--csv")
        assert code == 0
        assert lines[0] == "N_r,ns/op,checksum", lines[0]
        assert len(lines) == 9, lines

    def test_convert_keys(self):
        desc = " ".join(str(v) for v in range(128))
        keys = os.path.join(self.dir, "photo.key")
        with open(keys, "w") as fh:
            fh.write("1 128\n12 34 2.5 0.1\n%s\n" % desc)
        manifest_out = os.path.join(self.dir, "converted.tsv")
        code, _ = self.run_main("convert-keys", keys, "--output", self.output,
                                "--manifest-out", manifest_out)
        assert code == 0
        manifest = load_manifest(manifest_out)
        assert manifest.image_ids == ["photo"], manifest
        assert os.path.exists(manifest.path(0))
        code, _ = self.run_main("convert-keys", os.path.join(self.dir, "none.key"),
                                "--output", self.output)
        assert code == 1


if __name__ == "__main__":
    unittest.main()
