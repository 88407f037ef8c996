import logging
import threading
from urllib.parse import urlparse

from banal import ensure_list
from sqlalchemy import create_engine, event, func, select
from sqlalchemy.pool import StaticPool
from sqlalchemy.schema import Column, MetaData, Table
from sqlalchemy.types import Boolean, Float, Integer, Text

from cashash.util import safe_url

log = logging.getLogger(__name__)

F_COLUMNS = ["f%d%d" % (r, c) for r in range(3) for c in range(3)]


def _define_tables(metadata):
    Table(
        "images", metadata,
        Column("id", Integer, primary_key=True, autoincrement=True),
        Column("image_index", Integer, index=True),
        Column("image_id", Text),
        Column("path", Text),
        Column("points", Integer),
        Column("status", Text),
        Column("error", Text),
    )
    Table(
        "pairs", metadata,
        Column("id", Integer, primary_key=True, autoincrement=True),
        Column("mode", Text, index=True),
        Column("i", Integer),
        Column("j", Integer),
        Column("image_i", Text),
        Column("image_j", Text),
        Column("matches", Integer),
        Column("status", Text),
        Column("error", Text),
        Column("seconds", Float),
    )
    Table(
        "geometry", metadata,
        Column("id", Integer, primary_key=True, autoincrement=True),
        Column("i", Integer),
        Column("j", Integer),
        Column("accepted", Boolean),
        Column("seed_matches", Integer),
        Column("inliers", Integer),
        *[Column(name, Float, nullable=True) for name in F_COLUMNS]
    )
    Table(
        "recall", metadata,
        Column("id", Integer, primary_key=True, autoincrement=True),
        Column("i", Integer),
        Column("j", Integer),
        Column("oracle", Integer),
        Column("found", Integer),
        Column("common", Integer),
    )


class Catalog(object):
    """Run catalog: image and pair statuses, geometry and recall rows,
    stored through a SQLAlchemy engine."""

    def __init__(self, url, engine_kwargs=None, sqlite_wal_mode=True):
        """Configure and connect to the catalog database."""
        if engine_kwargs is None:
            engine_kwargs = {}
        parsed_url = urlparse(url)
        self.lock = threading.RLock()
        self.url = url
        is_memory = url.startswith("sqlite") and parsed_url.path in ("", "/", "/:memory:")
        if is_memory and "poolclass" not in engine_kwargs:
            # One shared connection, or each thread sees its own empty database.
            engine_kwargs["poolclass"] = StaticPool
            engine_kwargs.setdefault("connect_args", {"check_same_thread": False})
        self.engine = create_engine(url, **engine_kwargs)
        self.is_sqlite = self.engine.dialect.name == "sqlite"

        if self.is_sqlite and not is_memory and sqlite_wal_mode:

            def _run_on_connect(dbapi_con, con_record):
                dbapi_con.execute("PRAGMA journal_mode=WAL")

            event.listen(self.engine, "connect", _run_on_connect)

        self.metadata = MetaData()
        _define_tables(self.metadata)
        self.metadata.create_all(self.engine)

    def table(self, name):
        return self.metadata.tables[name]

    def insert_many(self, table_name, rows):
        rows = ensure_list(rows)
        if not rows:
            return
        with self.lock:
            with self.engine.begin() as conn:
                conn.execute(self.table(table_name).insert(), rows)

    def query(self, statement):
        """Run a select and return its rows as dicts."""
        with self.lock:
            with self.engine.connect() as conn:
                return [dict(row._mapping) for row in conn.execute(statement)]

    def record_images(self, manifest, points=None, failures=None):
        """One row per manifest entry; ``failures`` maps image index to the
        error that made the image unusable."""
        points = points or {}
        failures = failures or {}
        rows = []
        for num, (image_id, path) in enumerate(manifest):
            error = failures.get(num)
            rows.append({
                "image_index": num, "image_id": image_id, "path": path,
                "points": points.get(num),
                "status": "ok" if error is None else "failed",
                "error": None if error is None else str(error),
            })
        self.insert_many("images", rows)

    def pair_counts(self, mode):
        """Pair rows per status for one run mode."""
        pairs = self.table("pairs")
        stmt = (
            select(pairs.c.status, func.count(pairs.c.id).label("count"))
            .where(pairs.c.mode == mode)
            .group_by(pairs.c.status)
        )
        return {row["status"]: row["count"] for row in self.query(stmt)}

    def failures(self, mode=None):
        pairs = self.table("pairs")
        stmt = select(pairs).where(pairs.c.status == "failed")
        if mode is not None:
            stmt = stmt.where(pairs.c.mode == mode)
        images = self.table("images")
        failed_images = self.query(select(images).where(images.c.status == "failed"))
        return failed_images + self.query(stmt.order_by(pairs.c.i, pairs.c.j))

    def accepted_pairs(self):
        geometry = self.table("geometry")
        stmt = (
            select(geometry.c.i, geometry.c.j)
            .where(geometry.c.accepted.is_(True))
            .order_by(geometry.c.i, geometry.c.j)
        )
        return [(row["i"], row["j"]) for row in self.query(stmt)]

    def geometry(self, i, j):
        """Stored stage-one row for a pair, or None."""
        geometry = self.table("geometry")
        stmt = select(geometry).where(geometry.c.i == i).where(geometry.c.j == j)
        rows = self.query(stmt.order_by(geometry.c.id.desc()))
        return rows[0] if rows else None

    def recall_totals(self):
        recall = self.table("recall")
        stmt = select(
            func.coalesce(func.sum(recall.c.oracle), 0).label("oracle"),
            func.coalesce(func.sum(recall.c.found), 0).label("found"),
            func.coalesce(func.sum(recall.c.common), 0).label("common"),
        )
        return self.query(stmt)[0]

    def close(self):
        """Dispose of the engine. Makes this object unusable."""
        with self.lock:
            if self.engine is not None:
                self.engine.dispose()
            self.engine = None

    def __enter__(self):
        return self

    def __exit__(self, error_type, error_value, traceback):
        self.close()

    def __repr__(self):
        return "<Catalog(%s)>" % safe_url(self.url)
