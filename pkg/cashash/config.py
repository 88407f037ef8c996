import os
import logging
from collections import namedtuple

from banal import as_bool

from cashash.hashing import check_parameters, build_hash_family
from cashash.cascade_matcher import MatchConfig
from cashash.geometry import RansacConfig, StageConfig
from cashash.util import CashashException, ConfigError

log = logging.getLogger(__name__)

CATALOG_ENV = "CASHASH_CATALOG_URL"
CATALOG_FILE = "catalog.db"
MB = 1024 * 1024

Field = namedtuple("Field", ["name", "type", "default", "help"])

FIELDS = [
    Field("m", int, 8, "bits per short code"),
    Field("n", int, 128, "bits of the long code"),
    Field("tables", int, 6, "number of short-code tables (L)"),
    Field("seed", int, 0, "seed of every random stream in a run"),
    Field("k", int, 10, "candidates kept by the Hamming ranking"),
    Field("tau", int, 40, "largest Hamming distance ranked"),
    Field("ratio", float, 0.8, "Lowe ratio on distances"),
    Field("min_candidates", int, 2, "candidates needed for the ratio test"),
    Field("switch_rounds", int, 3, "tree rounds of the reduction kernel (N_r)"),
    Field("fraction", float, 0.2, "top-scale share used for seed matching"),
    Field("ransac_iterations", int, 2048, "RANSAC hypothesis cap"),
    Field("ransac_threshold", float, 2.0, "RANSAC inlier distance in pixels"),
    Field("ransac_confidence", float, 0.999, "RANSAC early-exit confidence"),
    Field("band", float, 4.0, "epipolar band half-width in pixels (d)"),
    Field("block_images", int, None, "images per block (N_p)"),
    Field("blocks_per_group", int, None, "blocks per group (M)"),
    Field("workers", int, 1, "compute lanes"),
    Field("memory_budget_mb", float, 1024.0, "host memory for three groups"),
    Field("device_budget_mb", float, 256.0, "device memory for three blocks"),
    Field("reuse_codes", bool, True, "keep code caches that echo the run parameters"),
    Field("output", str, "cashash-out", "output directory"),
    Field("catalog", str, None, "catalog database URL"),
]
FIELD_MAP = {f.name: f for f in FIELDS}


def _parse(field, value):
    if value is None or not isinstance(value, str):
        return value
    value = value.strip()
    if field.type is bool:
        return as_bool(value)
    try:
        return field.type(value)
    except ValueError:
        raise ConfigError("%s: cannot parse %r as %s" % (field.name, value, field.type.__name__))


class RunConfig(object):
    """Every knob of a run. Values come from defaults, then a config file,
    then command-line flags."""

    def __init__(self, **values):
        for field in FIELDS:
            setattr(self, field.name, field.default)
        self.update(values)

    @classmethod
    def from_file(cls, path):
        """Read a flat ``key = value`` file; ``#`` starts a comment."""
        values = {}
        with open(str(path), "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError("%s:%d: expected key = value" % (path, lineno))
                key, value = line.split("=", 1)
                values[key.strip()] = value.strip()
        return cls(**values)

    def update(self, values):
        for key, value in values.items():
            name = key.replace("-", "_")
            if name not in FIELD_MAP:
                raise ConfigError("Unknown config key: %s" % key)
            setattr(self, name, _parse(FIELD_MAP[name], value))
        self.validate()
        return self

    def validate(self):
        try:
            check_parameters(self.seed, self.m, self.n, self.tables, self.switch_rounds)
            if self.tau > self.n:
                raise ConfigError("tau %d exceeds code length %d" % (self.tau, self.n))
            self.match_config()
            self.stage_config()
        except CashashException:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc))
        for name in ("block_images", "blocks_per_group"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ConfigError("%s must be >= 1: %r" % (name, value))
        if self.workers < 1:
            raise ConfigError("workers must be >= 1: %r" % self.workers)
        if self.memory_budget_mb <= 0 or self.device_budget_mb <= 0:
            raise ConfigError("Memory budgets must be positive")

    def match_config(self):
        return MatchConfig(k=self.k, tau=self.tau, ratio=self.ratio,
                           min_candidates_for_ratio=self.min_candidates,
                           switch_rounds=self.switch_rounds)

    def ransac_config(self, seed=None):
        return RansacConfig(max_iterations=self.ransac_iterations,
                            inlier_threshold=self.ransac_threshold,
                            confidence=self.ransac_confidence,
                            seed=self.seed if seed is None else seed)

    def stage_config(self, seed=None, force_accept=False):
        return StageConfig(fraction=self.fraction, ransac=self.ransac_config(seed),
                           band=self.band, force_accept=force_accept)

    def hash_family(self):
        return build_hash_family(self.seed, m=self.m, n=self.n, tables=self.tables,
                                 switch_rounds=self.switch_rounds)

    def block_sizes(self, per_image_bytes):
        """``(N_p, M)``: configured values, or the largest sizes that fit
        three blocks on the device and three groups in memory."""
        per_image = max(1.0, float(per_image_bytes))
        block_images = self.block_images
        if block_images is None:
            block_images = max(1, int(self.device_budget_mb * MB // per_image) // 3)
        blocks_per_group = self.blocks_per_group
        if blocks_per_group is None:
            group_bytes = block_images * per_image
            blocks_per_group = max(1, int(self.memory_budget_mb * MB // group_bytes) // 3)
        return block_images, blocks_per_group

    def catalog_url(self):
        if self.catalog:
            return self.catalog
        url = os.environ.get(CATALOG_ENV)
        if url:
            return url
        return "sqlite:///%s" % os.path.join(os.path.abspath(self.output), CATALOG_FILE)

    @staticmethod
    def add_arguments(parser):
        """Add one ``--flag`` per field; unset flags leave the value alone."""
        for field in FIELDS:
            kwargs = {"dest": field.name, "default": None, "help": field.help}
            kwargs["type"] = str if field.type is bool else field.type
            parser.add_argument("--" + field.name.replace("_", "-"), **kwargs)

    def apply_args(self, args):
        values = {}
        for field in FIELDS:
            value = getattr(args, field.name, None)
            if value is not None:
                values[field.name] = value
        return self.update(values)

    def items(self):
        return [(field.name, getattr(self, field.name)) for field in FIELDS]

    def __repr__(self):
        return "<RunConfig(%s)>" % ", ".join("%s=%r" % kv for kv in self.items())
