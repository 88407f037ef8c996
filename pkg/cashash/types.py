from collections import namedtuple

import numpy as np

from cashash.util import InvalidFeatures, ManifestError

DESCRIPTOR_SIZE = 128

Keypoint = namedtuple("Keypoint", ["x", "y", "scale", "orientation"])

MatchRecord = namedtuple("MatchRecord", ["query_index", "train_index", "distance"])


class FeatureSet(object):
    """Keypoints and SIFT descriptors of one image.

    ``keypoints`` is an ``(n, 4)`` float32 array of (x, y, scale,
    orientation) and ``descriptors`` an ``(n, 128)`` uint8 array. ``index``
    maps each row back to the point index in the image's full feature set;
    it is the identity unless the set was produced by a selection.
    """

    def __init__(self, image_id, keypoints=None, descriptors=None, index=None):
        if keypoints is None:
            keypoints = np.zeros((0, 4), dtype=np.float32)
        if descriptors is None:
            descriptors = np.zeros((0, DESCRIPTOR_SIZE), dtype=np.uint8)
        keypoints = np.asarray(keypoints, dtype=np.float32).reshape(-1, 4)
        descriptors = np.asarray(descriptors)
        if descriptors.size == 0:
            descriptors = descriptors.reshape(0, DESCRIPTOR_SIZE)
        if descriptors.ndim != 2 or descriptors.shape[1] != DESCRIPTOR_SIZE:
            raise InvalidFeatures(
                "Descriptors must have %d components, got shape %r"
                % (DESCRIPTOR_SIZE, descriptors.shape)
            )
        if len(keypoints) != len(descriptors):
            raise InvalidFeatures(
                "%d keypoints but %d descriptors" % (len(keypoints), len(descriptors))
            )
        if index is None:
            index = np.arange(len(keypoints), dtype=np.int64)
        self.image_id = image_id
        self.keypoints = np.ascontiguousarray(keypoints)
        self.descriptors = np.ascontiguousarray(descriptors, dtype=np.uint8)
        self.index = np.asarray(index, dtype=np.int64)

    @property
    def positions(self):
        """Keypoint (x, y) as float64, the coordinates geometry works in."""
        return self.keypoints[:, :2].astype(np.float64)

    @property
    def scales(self):
        return self.keypoints[:, 2]

    def keypoint(self, row):
        return Keypoint(*(float(v) for v in self.keypoints[row]))

    def take(self, rows):
        """Subset of this set, keeping the mapping to original indices."""
        rows = np.asarray(rows, dtype=np.int64)
        return FeatureSet(
            self.image_id,
            self.keypoints[rows],
            self.descriptors[rows],
            index=self.index[rows],
        )

    def validate(self):
        if not np.all(np.isfinite(self.keypoints[:, :2])):
            raise InvalidFeatures("Non-finite keypoint position in %s" % self.image_id)
        if not np.all(self.keypoints[:, 2] > 0):
            raise InvalidFeatures("Non-positive keypoint scale in %s" % self.image_id)
        return self

    @property
    def nbytes(self):
        return self.keypoints.nbytes + self.descriptors.nbytes

    def __len__(self):
        return len(self.keypoints)

    def __eq__(self, other):
        if not isinstance(other, FeatureSet):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.keypoints.tobytes() == other.keypoints.tobytes()
            and self.descriptors.tobytes() == other.descriptors.tobytes()
        )

    def __repr__(self):
        return "<FeatureSet(%s, %d points)>" % (self.image_id, len(self))


class DatasetManifest(object):
    """Ordered list of (image_id, feature path). The position of an entry
    is the global image index used by the scheduler and the outputs."""

    def __init__(self, entries=()):
        self.entries = []
        self._index = {}
        for image_id, path in entries:
            self.add(image_id, path)

    def add(self, image_id, path):
        if not isinstance(image_id, str) or not image_id.strip():
            raise ManifestError("Invalid image id: %r" % image_id)
        if any(c.isspace() for c in image_id):
            raise ManifestError("Image id contains whitespace: %r" % image_id)
        if image_id in self._index:
            raise ManifestError("Duplicate image id: %s" % image_id)
        self._index[image_id] = len(self.entries)
        self.entries.append((image_id, str(path)))

    def index_of(self, image_id):
        return self._index[image_id]

    def image_id(self, index):
        return self.entries[index][0]

    def path(self, index):
        return self.entries[index][1]

    @property
    def image_ids(self):
        return [image_id for image_id, _ in self.entries]

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __contains__(self, image_id):
        return image_id in self._index

    def __repr__(self):
        return "<DatasetManifest(%d images)>" % len(self)
