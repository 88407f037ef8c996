import os
from cashash.catalog import Catalog
from cashash.config import RunConfig, CATALOG_ENV
from cashash.types import FeatureSet, MatchRecord, DatasetManifest
from cashash.hashing import HashFamily, build_hash_family, set_centering, compute_codes
from cashash.cascade_matcher import MatchConfig, match_pair, brute_force_match
from cashash.geometry import RansacConfig, StageConfig, two_stage_match
from cashash.pipeline import Pipeline

__all__ = [
    "Catalog",
    "RunConfig",
    "FeatureSet",
    "MatchRecord",
    "DatasetManifest",
    "HashFamily",
    "build_hash_family",
    "set_centering",
    "compute_codes",
    "MatchConfig",
    "match_pair",
    "brute_force_match",
    "RansacConfig",
    "StageConfig",
    "two_stage_match",
    "Pipeline",
    "connect",
]
__version__ = "0.1.0"


def connect(url=None, engine_kwargs=None, sqlite_wal_mode=True):
    """Opens a run catalog.

    *url* can be any valid `SQLAlchemy engine URL`_. If *url* is not defined
    it will try to use *CASHASH_CATALOG_URL* from the environment and fall
    back to an in-memory SQLite database. Returns an instance of
    :py:class:`Catalog <cashash.Catalog>`.::

        catalog = cashash.connect('sqlite:///run/catalog.db')
        catalog.pair_counts('exhaustive')

    .. _SQLAlchemy Engine URL: http://docs.sqlalchemy.org/en/latest/core/engines.html#sqlalchemy.create_engine
    """
    if url is None:
        url = os.environ.get(CATALOG_ENV, "sqlite://")
    return Catalog(url, engine_kwargs=engine_kwargs, sqlite_wal_mode=sqlite_wal_mode)
