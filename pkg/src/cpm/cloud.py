"""Labeled point clouds, part extraction and fixed-size resampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import PartMissing
from .geometry import Pose, centroid_frame

log = logging.getLogger(__name__)

N_PART_POINTS = 512

VOCABULARIES = {
    "pour": ("rim", "body", "handle"),
    "place": ("tip", "head", "body", "bottom", "opening"),
}


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    part_labels: np.ndarray
    vocabulary: tuple
    category: str

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        labels = np.asarray(self.part_labels, dtype=np.int64).reshape(-1)
        if pts.shape[0] < 1:
            raise ValueError("a point cloud needs at least one point")
        if labels.shape[0] != pts.shape[0]:
            raise ValueError(f"{labels.shape[0]} labels for {pts.shape[0]} points")
        if labels.size and (labels.min() < 0 or labels.max() >= len(self.vocabulary)):
            raise ValueError(f"labels outside vocabulary {self.vocabulary}")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "part_labels", labels)
        object.__setattr__(self, "vocabulary", tuple(self.vocabulary))

    def __len__(self):
        return self.points.shape[0]

    def label_id(self, part: str) -> int:
        try:
            return self.vocabulary.index(part)
        except ValueError:
            raise PartMissing(f"part {part!r} is not in vocabulary {self.vocabulary}") from None

    def has_part(self, part: str) -> bool:
        return part in self.vocabulary and bool(np.any(self.part_labels == self.label_id(part)))

    def part_points(self, part: str) -> np.ndarray:
        pts = self.points[self.part_labels == self.label_id(part)]
        if pts.shape[0] == 0:
            raise PartMissing(f"cloud ({self.category}) has no {part!r} points")
        return pts

    def frame(self) -> Pose:
        """Object frame: centroid, world orientation."""
        return centroid_frame(self.points)

    def transformed(self, pose: Pose) -> "PointCloud":
        return PointCloud(pose.apply(self.points), self.part_labels, self.vocabulary, self.category)

    def to_record(self) -> dict:
        return {
            "category": self.category,
            "vocabulary": list(self.vocabulary),
            "points": [float(x) for x in self.points.ravel()],
            "labels": [int(x) for x in self.part_labels],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "PointCloud":
        return cls(
            np.asarray(rec["points"], dtype=np.float64).reshape(-1, 3),
            np.asarray(rec["labels"], dtype=np.int64),
            tuple(rec["vocabulary"]),
            rec["category"],
        )


@dataclass(frozen=True, eq=False)
class PartCloud:
    """Fixed-size part cloud stored centered on its own centroid frame."""

    points: np.ndarray
    part: str
    frame: Pose

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (pts.shape[0], 3) or pts.shape[0] < 1:
            raise ValueError(f"part points must be (n, 3), got {pts.shape}")
        object.__setattr__(self, "points", pts)

    def world_points(self) -> np.ndarray:
        return self.points + self.frame.translation


def resample(points: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw exactly ``n`` rows: without replacement when possible."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    m = points.shape[0]
    if m < 1:
        raise ValueError("cannot resample an empty cloud")
    idx = rng.choice(m, size=n, replace=m < n)
    return points[idx]


def extract_part(
    cloud: PointCloud, part: str, rng: np.random.Generator, n: int = N_PART_POINTS
) -> PartCloud:
    """Select ``part`` points, resample to ``n`` and center on their centroid."""
    pts = resample(cloud.part_points(part), n, rng)
    frame = centroid_frame(pts)
    return PartCloud(pts - frame.translation, part, frame)


def whole_object(cloud: PointCloud, rng: np.random.Generator, n: int = N_PART_POINTS) -> PartCloud:
    """All labeled points as one 'part' (the monolithic baseline's input)."""
    pts = resample(cloud.points, n, rng)
    frame = centroid_frame(pts)
    return PartCloud(pts - frame.translation, "object", frame)


def try_extract(cloud: PointCloud, part: str, rng: np.random.Generator, n: int = N_PART_POINTS):
    """Composition-time variant: a missing part is logged and skipped."""
    if not cloud.has_part(part):
        log.warning("part %r missing from %s cloud; dropping its constraint", part, cloud.category)
        return None
    return extract_part(cloud, part, rng, n)
