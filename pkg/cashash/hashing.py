"""Seeded LSH hash family, short/long code computation and the
switch-point reduction kernel every inner product goes through."""
import struct
import logging
from collections import namedtuple

import numpy as np

from cashash.types import DESCRIPTOR_SIZE
from cashash.util import HashParameterError, CodeCacheError, digest64

log = logging.getLogger(__name__)

DEFAULT_M = 8
DEFAULT_N = 128
DEFAULT_TABLES = 6
DEFAULT_SWITCH_ROUNDS = 3
# log2(128) halving rounds reduce a full descriptor to one value.
TREE_ROUNDS = 7
WORD_BITS = 64
# Points per chunk when forming the (points, hyperplanes, 128) product
# tensor; bounds the temporary to a few tens of megabytes.
CHUNK_POINTS = 128

CACHE_MAGIC = b"CHCC"
CACHE_VERSION = 1
CACHE_HEADER = struct.Struct("<4sIIIIQQI")

_POPCOUNT8 = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)

LongCode = namedtuple("LongCode", ["words", "n"])


def _check_switch_rounds(switch_rounds):
    if not 0 <= switch_rounds <= TREE_ROUNDS:
        raise HashParameterError(
            "switch_rounds must be in 0..%d: %r" % (TREE_ROUNDS, switch_rounds)
        )


def check_parameters(seed, m, n, tables, switch_rounds=DEFAULT_SWITCH_ROUNDS):
    if not 0 <= seed < 2 ** 64:
        raise HashParameterError("seed must be a 64-bit unsigned integer: %r" % seed)
    if not 1 <= m <= 32:
        raise HashParameterError("m must be in 1..32: %r" % m)
    if not m < n <= 128:
        raise HashParameterError("n must satisfy m < n <= 128: m=%r n=%r" % (m, n))
    if tables < 1:
        raise HashParameterError("tables must be >= 1: %r" % tables)
    _check_switch_rounds(switch_rounds)


def reduce_sum(values, switch_rounds=DEFAULT_SWITCH_ROUNDS):
    """Sum the last axis (length 128) of ``values``.

    The first ``7 - switch_rounds`` rounds halve the vector pairwise, as a
    shared-memory tree reduction would; the remaining ``2 ** switch_rounds``
    partial sums are accumulated sequentially, the register tail. The order
    of operations depends only on ``switch_rounds``, so results are
    bit-reproducible for a fixed value.
    """
    _check_switch_rounds(switch_rounds)
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-1] != DESCRIPTOR_SIZE:
        raise HashParameterError(
            "Expected %d components, got %d" % (DESCRIPTOR_SIZE, values.shape[-1])
        )
    width = DESCRIPTOR_SIZE
    for _ in range(TREE_ROUNDS - switch_rounds):
        width //= 2
        values = values[..., :width] + values[..., width : 2 * width]
    total = np.zeros(values.shape[:-1], dtype=np.float64)
    for i in range(width):
        total = total + values[..., i]
    return total


def reduce_dot(a, b, switch_rounds=DEFAULT_SWITCH_ROUNDS):
    """Inner product of two 128-vectors through :py:func:`reduce_sum`."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != (DESCRIPTOR_SIZE,) or b.shape != (DESCRIPTOR_SIZE,):
        raise HashParameterError(
            "reduce_dot needs two %d-vectors, got %r and %r"
            % (DESCRIPTOR_SIZE, a.shape, b.shape)
        )
    return float(reduce_sum(a * b, switch_rounds))


def reduce_dots(points, planes, switch_rounds=DEFAULT_SWITCH_ROUNDS):
    """All inner products between rows of ``points`` (P, 128) and rows of
    ``planes`` (K, 128), returned as a (P, K) array."""
    points = np.asarray(points, dtype=np.float64)
    planes = np.asarray(planes, dtype=np.float64)
    out = np.empty((len(points), len(planes)), dtype=np.float64)
    for start in range(0, len(points), CHUNK_POINTS):
        chunk = points[start : start + CHUNK_POINTS]
        products = chunk[:, None, :] * planes[None, :, :]
        out[start : start + len(chunk)] = reduce_sum(products, switch_rounds)
    return out


def _hyperplane(seed, stream, table, bit):
    seq = np.random.SeedSequence([seed, stream, table, bit])
    return np.random.Generator(np.random.PCG64(seq)).standard_normal(DESCRIPTOR_SIZE)


def _frozen(array):
    array = np.ascontiguousarray(array, dtype=np.float64)
    array.flags.writeable = False
    return array


class HashFamily(object):
    """Random hyperplanes for ``tables`` short-code tables of ``m`` bits
    and one ``n``-bit long code, plus the centering vector subtracted from
    every descriptor before the sign tests.

    Each hyperplane comes from its own PCG64 stream seeded with
    ``(seed, stream, table, bit)``, so the family depends only on its
    parameters. Instances are immutable; :py:func:`set_centering` returns a
    new family.
    """

    def __init__(self, seed, m=DEFAULT_M, n=DEFAULT_N, tables=DEFAULT_TABLES,
                 centering=None, switch_rounds=DEFAULT_SWITCH_ROUNDS):
        check_parameters(seed, m, n, tables, switch_rounds)
        self.seed = int(seed)
        self.m = int(m)
        self.n = int(n)
        self.tables = int(tables)
        self.switch_rounds = int(switch_rounds)
        short = np.empty((self.tables, self.m, DESCRIPTOR_SIZE))
        for t in range(self.tables):
            for j in range(self.m):
                short[t, j] = _hyperplane(self.seed, 0, t, j)
        self.short_hyperplanes = _frozen(short)
        self.long_hyperplanes = _frozen(
            [_hyperplane(self.seed, 1, 0, j) for j in range(self.n)]
        )
        self.centered = centering is not None
        if centering is None:
            centering = np.zeros(DESCRIPTOR_SIZE)
        self.centering = _frozen(centering)

    @property
    def words(self):
        return (self.n + WORD_BITS - 1) // WORD_BITS

    @property
    def digest(self):
        """Fingerprint of the centering vector, echoed in code caches."""
        return digest64(self.centering.tobytes())

    @property
    def params(self):
        return (self.m, self.n, self.tables, self.seed, self.digest)

    def with_centering(self, centering):
        family = object.__new__(HashFamily)
        family.__dict__.update(self.__dict__)
        family.centering = _frozen(centering)
        family.centered = True
        return family

    def __repr__(self):
        return "<HashFamily(m=%d, n=%d, L=%d, seed=%d)>" % (
            self.m, self.n, self.tables, self.seed)


def build_hash_family(seed, m=DEFAULT_M, n=DEFAULT_N, tables=DEFAULT_TABLES,
                      switch_rounds=DEFAULT_SWITCH_ROUNDS):
    return HashFamily(seed, m=m, n=n, tables=tables, switch_rounds=switch_rounds)


def set_centering(family, descriptors):
    """Center ``family`` on the componentwise mean of ``descriptors``, an
    iterable of 128-vectors or of (k, 128) blocks, accumulated exactly in
    64-bit integers."""
    total = np.zeros(DESCRIPTOR_SIZE, dtype=np.int64)
    count = 0
    for block in descriptors:
        block = np.asarray(block).reshape(-1, DESCRIPTOR_SIZE)
        total += block.astype(np.int64).sum(axis=0)
        count += len(block)
    if count == 0:
        raise HashParameterError("Cannot center a hash family on zero descriptors")
    return family.with_centering(total / count)


def hamming_many(query_words, train_words):
    """Hamming distances between one packed code and each row of
    ``train_words`` (C, W)."""
    xor = np.bitwise_xor(np.asarray(train_words, dtype=np.uint64),
                         np.asarray(query_words, dtype=np.uint64))
    xor = np.ascontiguousarray(xor.reshape(-1, xor.shape[-1]))
    return _POPCOUNT8[xor.view(np.uint8)].sum(axis=1, dtype=np.int64)


def hamming(a, b):
    if a.n != b.n:
        raise HashParameterError("Long codes of %d and %d bits" % (a.n, b.n))
    return int(hamming_many(a.words, np.asarray(b.words)[None, :])[0])


def _pack(bits, word_dtype, word_bits):
    count, width = bits.shape
    words = (width + word_bits - 1) // word_bits
    padded = np.zeros((count, words * word_bits), dtype=np.uint8)
    padded[:, :width] = bits
    packed = np.packbits(padded, axis=1, bitorder="little")
    return np.ascontiguousarray(packed).view(word_dtype).reshape(count, words)


def _sign_bits(family, descriptors, planes):
    if not family.centered:
        raise HashParameterError("Hash family has no centering; call set_centering")
    centered = np.asarray(descriptors, dtype=np.float64) - family.centering
    return reduce_dots(centered, planes, family.switch_rounds) > 0


class CodeSet(object):
    """Short and long codes of every point of one feature set, tagged with
    the parameters of the family that produced them."""

    def __init__(self, short, long, m, n, tables, seed, digest):
        self.short = np.asarray(short, dtype=np.uint32).reshape(-1, tables)
        words = (n + WORD_BITS - 1) // WORD_BITS
        self.long = np.asarray(long, dtype=np.uint64).reshape(-1, words)
        self.m = m
        self.n = n
        self.tables = tables
        self.seed = seed
        self.digest = digest

    @property
    def params(self):
        return (self.m, self.n, self.tables, self.seed, self.digest)

    def long_code(self, row):
        return LongCode(self.long[row], self.n)

    def take(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        return CodeSet(self.short[rows], self.long[rows], *self.params)

    @property
    def nbytes(self):
        return self.short.nbytes + self.long.nbytes

    def __len__(self):
        return len(self.short)

    def __eq__(self, other):
        if not isinstance(other, CodeSet):
            return NotImplemented
        return (
            self.params == other.params
            and np.array_equal(self.short, other.short)
            and np.array_equal(self.long, other.long)
        )

    def __repr__(self):
        return "<CodeSet(%d points, m=%d, n=%d)>" % (len(self), self.m, self.n)


def short_codes(family, fs):
    """(P, L) uint32 array; bit j of table t is set iff the centered
    descriptor has a positive inner product with hyperplane (t, j)."""
    planes = family.short_hyperplanes.reshape(-1, DESCRIPTOR_SIZE)
    bits = _sign_bits(family, fs.descriptors, planes)
    bits = bits.reshape(len(fs), family.tables, family.m).reshape(-1, family.m)
    return _pack(bits, "<u4", 32).reshape(len(fs), family.tables)


def long_codes(family, fs):
    """(P, W) uint64 array of n-bit codes packed little-endian; bits past n
    are zero."""
    bits = _sign_bits(family, fs.descriptors, family.long_hyperplanes)
    return _pack(bits.reshape(len(fs), family.n), "<u8", WORD_BITS)


def compute_codes(family, fs):
    return CodeSet(short_codes(family, fs), long_codes(family, fs), *family.params)


def save_codes(codes, path):
    header = CACHE_HEADER.pack(
        CACHE_MAGIC, CACHE_VERSION, codes.m, codes.n, codes.tables,
        codes.seed, codes.digest, len(codes)
    )
    with open(str(path), "wb") as fh:
        fh.write(header)
        fh.write(codes.short.astype("<u4").tobytes())
        fh.write(codes.long.astype("<u8").tobytes())


def read_code_header(path):
    with open(str(path), "rb") as fh:
        data = fh.read(CACHE_HEADER.size)
    if len(data) < CACHE_HEADER.size:
        raise CodeCacheError("Truncated code cache header: %s" % path)
    magic, version, m, n, tables, seed, digest, count = CACHE_HEADER.unpack(data)
    if magic != CACHE_MAGIC or version != CACHE_VERSION:
        raise CodeCacheError("Not a code cache: %s" % path)
    return (m, n, tables, seed, digest), count


def load_codes(path):
    (m, n, tables, seed, digest), count = read_code_header(path)
    words = (n + WORD_BITS - 1) // WORD_BITS
    with open(str(path), "rb") as fh:
        data = fh.read()
    offset = CACHE_HEADER.size
    needed = offset + count * (tables * 4 + words * 8)
    if len(data) < needed:
        raise CodeCacheError("Truncated code cache: %s" % path)
    short = np.frombuffer(data, dtype="<u4", count=count * tables, offset=offset)
    offset += count * tables * 4
    long = np.frombuffer(data, dtype="<u8", count=count * words, offset=offset)
    return CodeSet(short.copy(), long.copy(), m, n, tables, seed, digest)


def cache_is_valid(path, family, count=None):
    """True when the cache at ``path`` echoes the family's parameters (and
    the expected point count, when given)."""
    try:
        params, cached = read_code_header(path)
    except (OSError, CodeCacheError):
        return False
    if params != family.params:
        return False
    return count is None or cached == count
