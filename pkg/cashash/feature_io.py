import os
import struct
import logging

import numpy as np

from cashash.types import DESCRIPTOR_SIZE, FeatureSet, MatchRecord, DatasetManifest
from cashash.util import FeatureFileError, MissingFeatureFile, BadMagic, TruncatedFile
from cashash.util import InvalidFeatures, ManifestError, MatchFileError
from cashash.util import fraction_count, format_distance

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"CHFT"
FEATURE_VERSION = 1
HEADER = struct.Struct("<4sIII")

RECORD_DTYPE = np.dtype(
    [
        ("x", "<f4"),
        ("y", "<f4"),
        ("scale", "<f4"),
        ("orientation", "<f4"),
        ("descriptor", "u1", (DESCRIPTOR_SIZE,)),
    ]
)
RECORD_SIZE = RECORD_DTYPE.itemsize


def load_features(path, image_id=None):
    """Read a CHFT feature file.

    The header is 16 bytes: magic, version, point count and a reserved
    word, all little-endian. Each record is four float32 keypoint fields
    followed by 128 descriptor bytes. A nonzero reserved word or bytes
    past the last record are rejected.
    """
    path = str(path)
    if image_id is None:
        image_id = os.path.splitext(os.path.basename(path))[0]
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError:
        raise MissingFeatureFile("Feature file not found", path=path, offset=0)
    if len(data) < 4 or data[:4] != FEATURE_MAGIC:
        raise BadMagic("Not a feature file", path=path, offset=0)
    if len(data) < HEADER.size:
        raise TruncatedFile("Truncated header", path=path, offset=len(data))
    _, version, count, reserved = HEADER.unpack_from(data, 0)
    if version != FEATURE_VERSION:
        raise BadMagic("Unsupported version %d" % version, path=path, offset=4)
    if reserved != 0:
        raise BadMagic("Reserved header word is %d" % reserved, path=path, offset=12)
    payload = len(data) - HEADER.size
    if payload < count * RECORD_SIZE:
        complete = payload // RECORD_SIZE
        raise TruncatedFile(
            "Truncated after %d of %d records" % (complete, count),
            path=path,
            offset=HEADER.size + complete * RECORD_SIZE,
        )
    if payload > count * RECORD_SIZE:
        raise FeatureFileError(
            "%d bytes after %d records" % (payload - count * RECORD_SIZE, count),
            path=path,
            offset=HEADER.size + count * RECORD_SIZE,
        )
    records = np.frombuffer(data, dtype=RECORD_DTYPE, count=count, offset=HEADER.size)
    keypoints = np.stack(
        [records["x"], records["y"], records["scale"], records["orientation"]], axis=1
    )
    return FeatureSet(image_id, keypoints, records["descriptor"])


def save_features(fs, path):
    fs.validate()
    records = np.zeros(len(fs), dtype=RECORD_DTYPE)
    records["x"] = fs.keypoints[:, 0]
    records["y"] = fs.keypoints[:, 1]
    records["scale"] = fs.keypoints[:, 2]
    records["orientation"] = fs.keypoints[:, 3]
    records["descriptor"] = fs.descriptors
    with open(str(path), "wb") as fh:
        fh.write(HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, len(fs), 0))
        fh.write(records.tobytes())


def top_scale_rows(fs, fraction):
    """Rows of the ``fraction`` largest-scale points, in original order.
    Equal scales are broken by the smaller row."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]: %r" % fraction)
    count = fraction_count(fraction, len(fs))
    rows = np.arange(len(fs), dtype=np.int64)
    order = np.lexsort((rows, -fs.scales.astype(np.float64)))
    return np.sort(order[:count])


def select_top_scale(fs, fraction):
    """Keep the top-scale share of ``fs``. The result's ``index`` maps each
    kept point back to its original index."""
    return fs.take(top_scale_rows(fs, fraction))


def read_text_keys(path, image_id=None):
    """Parse whitespace-separated text keys: a ``count 128`` header, then per
    point ``row col scale orientation`` and 128 integer components."""
    path = str(path)
    if image_id is None:
        image_id = os.path.splitext(os.path.basename(path))[0]
    with open(path, "r", encoding="utf-8") as fh:
        tokens = fh.read().split()
    if len(tokens) < 2:
        raise InvalidFeatures("Missing key header in %s" % path)
    count, length = int(tokens[0]), int(tokens[1])
    if length != DESCRIPTOR_SIZE:
        raise InvalidFeatures("Expected %d-d descriptors in %s" % (DESCRIPTOR_SIZE, path))
    width = 4 + DESCRIPTOR_SIZE
    values = np.array(tokens[2:], dtype=np.float64)
    if len(values) != count * width:
        raise InvalidFeatures(
            "Expected %d values in %s, found %d" % (count * width, path, len(values))
        )
    values = values.reshape(count, width)
    keypoints = np.stack(
        [values[:, 1], values[:, 0], values[:, 2], values[:, 3]], axis=1
    )
    descriptors = values[:, 4:]
    if np.any(descriptors < 0) or np.any(descriptors > 255):
        raise InvalidFeatures("Descriptor component outside 0..255 in %s" % path)
    return FeatureSet(image_id, keypoints, descriptors.astype(np.uint8))


def load_manifest(path):
    """Read ``image_id<TAB>path`` lines. Relative feature paths resolve
    against the manifest's directory."""
    path = str(path)
    base = os.path.dirname(os.path.abspath(path))
    manifest = DatasetManifest()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ManifestError("%s:%d: expected image_id<TAB>path" % (path, lineno))
            image_id, feature_path = parts[0].strip(), parts[1].strip()
            if not os.path.isabs(feature_path):
                feature_path = os.path.join(base, feature_path)
            manifest.add(image_id, feature_path)
    return manifest


def save_manifest(manifest, path):
    with open(str(path), "w", encoding="utf-8") as fh:
        for image_id, feature_path in manifest:
            fh.write("%s\t%s\n" % (image_id, feature_path))


def save_matches(image_pair, matches, path):
    image_i, image_j = image_pair
    lines = ["# %s %s %d" % (image_i, image_j, len(matches))]
    for match in matches:
        if match.distance < 0:
            raise MatchFileError("Negative distance in %r" % (match,))
        lines.append(
            "%d %d %s"
            % (match.query_index, match.train_index, format_distance(match.distance))
        )
    with open(str(path), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))
        fh.write("\n")


def load_matches(path):
    """Inverse of :py:func:`save_matches`: returns ``((I, J), matches)``."""
    path = str(path)
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise MatchFileError("%s: empty match file" % path)
    header = lines[0].split()
    if len(header) != 4 or header[0] != "#":
        raise MatchFileError("%s:1: malformed header" % path)
    try:
        count = int(header[3])
    except ValueError:
        raise MatchFileError("%s:1: malformed count" % path)
    matches = []
    for lineno, line in enumerate(lines[1:], 2):
        parts = line.split()
        if len(parts) != 3:
            raise MatchFileError("%s:%d: malformed line" % (path, lineno))
        try:
            matches.append(MatchRecord(int(parts[0]), int(parts[1]), float(parts[2])))
        except ValueError:
            raise MatchFileError("%s:%d: malformed line" % (path, lineno))
    if len(matches) != count:
        raise MatchFileError("%s: header says %d matches, found %d" % (path, count, len(matches)))
    return (header[1], header[2]), matches
