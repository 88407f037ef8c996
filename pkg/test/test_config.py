import os
import shutil
import argparse
import tempfile
import unittest

from cashash.config import RunConfig, CATALOG_ENV, MB
from cashash.util import ConfigError, HashParameterError


class RunConfigTestCase(unittest.TestCase):
    def setUp(self):
        self.dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.dir)

    def write(self, text):
        path = os.path.join(self.dir, "run.conf")
        with open(path, "w") as fh:
            fh.write(text)
        return path

    def test_defaults(self):
        config = RunConfig()
        assert (config.m, config.n, config.tables) == (8, 128, 6)
        assert config.tau == 40 and config.k == 10
        assert config.ratio == 0.8
        assert config.reuse_codes is True
        cfg = config.match_config()
        assert cfg.tau == 40 and cfg.min_candidates_for_ratio == 2
        assert config.ransac_config(seed=9).seed == 9
        assert config.stage_config().fraction == 0.2

    def test_from_file(self):
        path = self.write("# run\nm = 10\n\ntables=4  # fewer\nreuse-codes = no\nratio = 0.7\n")
        config = RunConfig.from_file(path)
        assert config.m == 10
        assert config.tables == 4
        assert config.reuse_codes is False
        assert config.ratio == 0.7
        family = config.hash_family()
        assert family.short_hyperplanes.shape == (4, 10, 128)

    def test_file_errors(self):
        with self.assertRaises(ConfigError):
            RunConfig.from_file(self.write("m 10\n"))
        with self.assertRaises(ConfigError):
            RunConfig.from_file(self.write("colour = red\n"))
        with self.assertRaises(ConfigError):
            RunConfig.from_file(self.write("m = eight\n"))

    def test_validation(self):
        with self.assertRaises(ConfigError):
            RunConfig(n=32, tau=40)
        with self.assertRaises(ConfigError):
            RunConfig(workers=0)
        with self.assertRaises(ConfigError):
            RunConfig(block_images=0)
        with self.assertRaises(ConfigError):
            RunConfig(memory_budget_mb=0)
        with self.assertRaises(HashParameterError):
            RunConfig(m=0)
        with self.assertRaises(ConfigError):
            RunConfig(ratio=1.5)

    def test_block_sizes(self):
        config = RunConfig(device_budget_mb=3, memory_budget_mb=30)
        assert config.block_sizes(MB / 8) == (8, 10)
        assert RunConfig(block_images=4, blocks_per_group=2).block_sizes(MB) == (4, 2)
        tiny = RunConfig(device_budget_mb=1, memory_budget_mb=1)
        assert tiny.block_sizes(10 * MB) == (1, 1)

    def test_catalog_url(self):
        previous = os.environ.pop(CATALOG_ENV, None)
        try:
            config = RunConfig(output=self.dir)
            expected = "sqlite:///%s" % os.path.join(os.path.abspath(self.dir), "catalog.db")
            assert config.catalog_url() == expected, config.catalog_url()
            os.environ[CATALOG_ENV] = "sqlite://"
            assert config.catalog_url() == "sqlite://"
            config.update({"catalog": "postgresql://localhost/run"})
            assert config.catalog_url() == "postgresql://localhost/run"
        finally:
            os.environ.pop(CATALOG_ENV, None)
            if previous is not None:
                os.environ[CATALOG_ENV] = previous

    def test_arguments(self):
        parser = argparse.ArgumentParser()
        RunConfig.add_arguments(parser)
        args = parser.parse_args(["--block-images", "5", "--reuse-codes", "false",
                                  "--ratio", "0.6"])
        config = RunConfig(m=10).apply_args(args)
        assert config.block_images == 5
        assert config.reuse_codes is False
        assert config.ratio == 0.6
        assert config.m == 10
        assert config.workers == 1

    def test_items(self):
        names = [name for name, _ in RunConfig().items()]
        assert names[:3] == ["m", "n", "tables"], names
        assert "seed=0" in repr(RunConfig())


if __name__ == "__main__":
    unittest.main()
