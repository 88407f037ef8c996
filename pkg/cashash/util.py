import math
import time
import logging
import threading
from hashlib import sha1
from contextlib import contextmanager
from collections import OrderedDict
from urllib.parse import urlparse

log = logging.getLogger(__name__)


class CashashException(Exception):
    pass


class FeatureFileError(CashashException):
    """A feature file could not be read. ``offset`` is the byte position
    at which the problem was detected."""

    def __init__(self, message, path=None, offset=0):
        self.path = path
        self.offset = offset
        super().__init__("%s (%s at byte %d)" % (message, path, offset))


class MissingFeatureFile(FeatureFileError, FileNotFoundError):
    pass


class BadMagic(FeatureFileError):
    pass


class TruncatedFile(FeatureFileError):
    pass


class InvalidFeatures(CashashException, ValueError):
    pass


class ManifestError(CashashException, ValueError):
    pass


class MatchFileError(CashashException, ValueError):
    pass


class HashParameterError(CashashException, ValueError):
    pass


class CodeCacheError(CashashException, ValueError):
    pass


class DegenerateGeometry(CashashException, ValueError):
    pass


class ConfigError(CashashException, ValueError):
    pass


class PlanError(CashashException, ValueError):
    pass


class ResidencyError(CashashException, AssertionError):
    pass


def fraction_count(fraction, total):
    """Number of items kept when keeping ``fraction`` of ``total``, rounded
    up. The product is rounded to 9 places first so that 0.2 * 100 is 20."""
    return int(math.ceil(round(fraction * total, 9)))


def format_distance(value):
    """Shortest decimal that reads back to the same float; integral values
    print without a fraction ("1250", not "1250.0")."""
    value = float(value)
    if value.is_integer() and abs(value) < 2 ** 53:
        return str(int(value))
    return repr(value)


def pair_key(a, b):
    """Unordered image pair with the lower index first."""
    if a == b:
        raise ValueError("An image cannot be paired with itself: %r" % a)
    return (a, b) if a < b else (b, a)


def digest64(data):
    """First eight bytes of a SHA-1, as an unsigned little-endian int."""
    return int.from_bytes(sha1(data).digest()[:8], "little")


def safe_url(url):
    """Remove password from printed catalog URLs."""
    parsed = urlparse(url)
    if parsed.password is not None:
        pwd = ":%s@" % parsed.password
        url = url.replace(pwd, ":*****@")
    return url


class StageTimes(object):
    """Accumulated wall-clock seconds per named pipeline stage."""

    def __init__(self):
        self.lock = threading.Lock()
        self.seconds = OrderedDict()

    def add(self, stage, seconds):
        with self.lock:
            self.seconds[stage] = self.seconds.get(stage, 0.0) + seconds

    def get(self, stage):
        return self.seconds.get(stage, 0.0)

    def items(self):
        with self.lock:
            return list(self.seconds.items())


@contextmanager
def stage_timer(stage, times=None):
    start = time.perf_counter()
    try:
        yield
    finally:
        elapsed = time.perf_counter() - start
        if times is not None:
            times.add(stage, elapsed)
        log.info("stage %s took %.3fs", stage, elapsed)
