"""Object-track data model, feature files, and a synthetic track generator.

Feature files are line-delimited JSON (UTF-8), one object-frame record per
line::

    {"video_id": str, "object_id": str, "frame_index": int,
     "bbox": [x_min, y_min, x_max, y_max],
     "keypoints": [[x, y], ...], "descriptors": [[f, ...], ...]}

Records must be unique per (video_id, object_id, frame_index). Floats are
written in shortest round-trip decimal form, so saved values preserve full
double precision and save -> load -> save is byte-identical.

Randomness everywhere in this package comes from NumPy's PCG64 generator
(`numpy.random.default_rng`), so identical seeds give bitwise-identical
synthetic data.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

BBOX_SLACK = 1e-6  # keypoints may stick out of the bbox by this much


class FeatureFormatError(ValueError):
    """A feature file violates the record format or its invariants."""


class EmptyFeatureFileError(FeatureFormatError):
    """The feature file contains no records."""


class TooFewFramesError(ValueError):
    """A track is too short for the requested split."""


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Keypoint:
    """One feature point: pixel position plus its descriptor vector."""

    position: np.ndarray  # (2,)
    descriptor: np.ndarray  # (D_p,)

    def __post_init__(self):
        object.__setattr__(self, "position", _readonly(self.position))
        object.__setattr__(self, "descriptor", _readonly(self.descriptor))
        if self.position.shape != (2,):
            raise ValueError(f"keypoint position must be a 2-vector, got {self.position.shape}")
        if self.descriptor.ndim != 1 or self.descriptor.size < 1:
            raise ValueError("keypoint descriptor must be a non-empty vector")
        if not np.all(np.isfinite(self.position)):
            raise ValueError("keypoint position must be finite")
        if not np.all(np.isfinite(self.descriptor)):
            raise ValueError("keypoint descriptor must be finite")


@dataclass(frozen=True, eq=False)
class FrameObservation:
    """All keypoints of one object in one frame, with the object bbox."""

    frame_index: int
    keypoints: list[Keypoint]
    bbox: np.ndarray  # (x_min, y_min, x_max, y_max)

    def __post_init__(self):
        object.__setattr__(self, "bbox", _readonly(self.bbox))
        object.__setattr__(self, "keypoints", list(self.keypoints))
        if self.frame_index < 0:
            raise ValueError("frame_index must be non-negative")
        if len(self.keypoints) < 1:
            raise ValueError("an observation needs at least one keypoint")
        if self.bbox.shape != (4,):
            raise ValueError("bbox must be (x_min, y_min, x_max, y_max)")
        x_min, y_min, x_max, y_max = self.bbox
        if not (x_min < x_max and y_min < y_max):
            raise ValueError(f"degenerate bbox {self.bbox.tolist()}")
        for kp in self.keypoints:
            x, y = kp.position
            if not (
                x_min - BBOX_SLACK <= x <= x_max + BBOX_SLACK
                and y_min - BBOX_SLACK <= y <= y_max + BBOX_SLACK
            ):
                raise ValueError(
                    f"keypoint {kp.position.tolist()} outside bbox {self.bbox.tolist()}"
                )

    def positions(self) -> np.ndarray:
        return np.array([kp.position for kp in self.keypoints])

    def descriptors(self) -> np.ndarray:
        return np.array([kp.descriptor for kp in self.keypoints])


@dataclass(frozen=True, eq=False)
class ObjectTrack:
    """One object's observations across a video, in frame order."""

    video_id: str
    object_id: str
    observations: list[FrameObservation]

    def __post_init__(self):
        object.__setattr__(self, "observations", list(self.observations))
        if not self.observations:
            raise ValueError("a track needs at least one observation")
        indices = [o.frame_index for o in self.observations]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ValueError(f"frame indices must be strictly increasing, got {indices}")

    def __len__(self) -> int:
        return len(self.observations)


@dataclass(frozen=True, eq=False)
class TrackSet:
    """A collection of tracks sharing one descriptor dimensionality."""

    tracks: list[ObjectTrack]
    descriptor_dim: int

    def __post_init__(self):
        object.__setattr__(self, "tracks", list(self.tracks))
        seen: set[tuple[str, str]] = set()
        for track in self.tracks:
            key = (track.video_id, track.object_id)
            if key in seen:
                raise ValueError(f"duplicate track identity {key}")
            seen.add(key)
            for obs in track.observations:
                for kp in obs.keypoints:
                    if kp.descriptor.size != self.descriptor_dim:
                        raise ValueError(
                            f"descriptor dim {kp.descriptor.size} != {self.descriptor_dim} "
                            f"in track {key}"
                        )

    def __len__(self) -> int:
        return len(self.tracks)

    def identities(self) -> list[tuple[str, str]]:
        return [(t.video_id, t.object_id) for t in self.tracks]


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic track generator.

    Each base object gets a latent keypoint cloud with unit-norm latent
    descriptors. Every frame applies a random similarity transform
    (rotation, scale, translation) to the cloud, jitters positions, adds
    descriptor noise (re-normalized), drops keypoints, and appends spurious
    keypoints. Identity ground truth is the base object id.
    """

    num_objects: int = 50
    videos: int = 20
    frames_per_track: int = 8
    keypoints_per_object: tuple[int, int] = (10, 30)
    position_jitter_sigma: float = 2.0
    descriptor_noise_sigma: float = 0.05
    dropout_rate: float = 0.2
    spurious_rate: float = 0.0
    rotation_range: tuple[float, float] = (-0.3, 0.3)  # radians
    scale_range: tuple[float, float] = (0.9, 1.1)
    translation_range: tuple[float, float] = (-10.0, 10.0)  # pixels
    descriptor_dim: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.num_objects < 1 or self.videos < 1 or self.frames_per_track < 1:
            raise ValueError("counts must be positive")
        lo, hi = self.keypoints_per_object
        if not (1 <= lo <= hi):
            raise ValueError(f"bad keypoints_per_object range {self.keypoints_per_object}")
        if self.position_jitter_sigma < 0 or self.descriptor_noise_sigma < 0:
            raise ValueError("sigmas must be non-negative")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.spurious_rate < 0:
            raise ValueError("spurious_rate must be non-negative")
        if self.scale_range[0] <= 0 or self.scale_range[0] > self.scale_range[1]:
            raise ValueError(f"bad scale_range {self.scale_range}")
        if self.rotation_range[0] > self.rotation_range[1]:
            raise ValueError(f"bad rotation_range {self.rotation_range}")
        if self.translation_range[0] > self.translation_range[1]:
            raise ValueError(f"bad translation_range {self.translation_range}")
        if self.descriptor_dim < 1:
            raise ValueError("descriptor_dim must be positive")


# -- file I/O -----------------------------------------------------------------


def _record_from_observation(video_id: str, object_id: str, obs: FrameObservation) -> dict:
    return {
        "video_id": video_id,
        "object_id": object_id,
        "frame_index": int(obs.frame_index),
        "bbox": [float(v) for v in obs.bbox],
        "keypoints": [[float(x), float(y)] for x, y in (kp.position for kp in obs.keypoints)],
        "descriptors": [[float(v) for v in kp.descriptor] for kp in obs.keypoints],
    }


def save_tracks(tracks: TrackSet, path) -> None:
    """Write a TrackSet as a feature file, sorted by (video, object, frame)."""
    records = []
    for track in tracks.tracks:
        for obs in track.observations:
            records.append((track.video_id, track.object_id, obs.frame_index, track, obs))
    records.sort(key=lambda r: (r[0], r[1], r[2]))
    with open(path, "w", encoding="utf-8") as fh:
        for video_id, object_id, _, _, obs in records:
            fh.write(json.dumps(_record_from_observation(video_id, object_id, obs)))
            fh.write("\n")


def load_tracks(path) -> TrackSet:
    """Parse a feature file into a TrackSet; descriptor dim comes from the first record."""
    per_track: dict[tuple[str, str], dict[int, FrameObservation]] = {}
    descriptor_dim: int | None = None

    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FeatureFormatError(f"line {lineno}: invalid JSON ({exc})") from exc
            try:
                video_id = str(rec["video_id"])
                object_id = str(rec["object_id"])
                frame_index = int(rec["frame_index"])
                bbox = np.asarray(rec["bbox"], dtype=np.float64)
                positions = rec["keypoints"]
                descriptors = rec["descriptors"]
            except (KeyError, TypeError, ValueError) as exc:
                raise FeatureFormatError(f"line {lineno}: malformed record ({exc})") from exc
            if len(positions) != len(descriptors):
                raise FeatureFormatError(
                    f"line {lineno}: {len(positions)} keypoints but {len(descriptors)} descriptors"
                )
            keypoints = []
            for pos, desc in zip(positions, descriptors):
                desc = np.asarray(desc, dtype=np.float64)
                if descriptor_dim is None:
                    descriptor_dim = desc.size
                elif desc.size != descriptor_dim:
                    raise FeatureFormatError(
                        f"line {lineno}: descriptor dim {desc.size} != {descriptor_dim}"
                    )
                try:
                    keypoints.append(Keypoint(np.asarray(pos, dtype=np.float64), desc))
                except ValueError as exc:
                    raise FeatureFormatError(f"line {lineno}: {exc}") from exc
            key = (video_id, object_id)
            frames = per_track.setdefault(key, {})
            if frame_index in frames:
                raise FeatureFormatError(
                    f"line {lineno}: duplicate record for "
                    f"(video_id={video_id!r}, object_id={object_id!r}, frame_index={frame_index})"
                )
            try:
                frames[frame_index] = FrameObservation(frame_index, keypoints, bbox)
            except ValueError as exc:
                raise FeatureFormatError(f"line {lineno}: {exc}") from exc

    if not per_track:
        raise EmptyFeatureFileError(f"no records in {path}")

    tracks = [
        ObjectTrack(video_id, object_id, [frames[i] for i in sorted(frames)])
        for (video_id, object_id), frames in sorted(per_track.items())
    ]
    return TrackSet(tracks, descriptor_dim)


# -- synthetic generation -----------------------------------------------------


def _unit_rows(arr: np.ndarray) -> np.ndarray:
    return arr / np.linalg.norm(arr, axis=1, keepdims=True)


def generate_synthetic(config: SynthConfig) -> TrackSet:
    """Deterministically sample a TrackSet from `config` (PCG64, one stream)."""
    rng = np.random.default_rng(config.seed)
    tracks = []
    for obj in range(config.num_objects):
        video_id = f"vid{obj % config.videos:03d}"
        object_id = f"obj{obj:03d}"
        lo, hi = config.keypoints_per_object
        n_latent = int(rng.integers(lo, hi + 1))
        latent_pos = rng.uniform(0.0, 128.0, size=(n_latent, 2))
        latent_desc = _unit_rows(rng.normal(size=(n_latent, config.descriptor_dim)))
        centroid = latent_pos.mean(axis=0)

        observations = []
        for frame in range(config.frames_per_track):
            theta = rng.uniform(*config.rotation_range)
            scale = rng.uniform(*config.scale_range)
            shift = rng.uniform(*config.translation_range, size=2)
            rot = np.array(
                [[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]]
            )
            pos = (latent_pos - centroid) @ (scale * rot).T + centroid + shift
            pos = pos + rng.normal(0.0, config.position_jitter_sigma, size=pos.shape)
            desc = latent_desc + rng.normal(
                0.0, config.descriptor_noise_sigma, size=latent_desc.shape
            )
            desc = _unit_rows(desc)

            keep = rng.random(n_latent) >= config.dropout_rate
            if not keep.any():
                keep[0] = True  # a frame never loses every keypoint
            pos, desc = pos[keep], desc[keep]

            n_spurious = int(rng.poisson(config.spurious_rate * n_latent))
            if n_spurious > 0:
                low = pos.min(axis=0)
                high = np.maximum(pos.max(axis=0), low + 1.0)
                spur_pos = rng.uniform(low, high, size=(n_spurious, 2))
                spur_desc = _unit_rows(rng.normal(size=(n_spurious, config.descriptor_dim)))
                pos = np.vstack([pos, spur_pos])
                desc = np.vstack([desc, spur_desc])

            margin = 1.0
            bbox = np.array(
                [
                    pos[:, 0].min() - margin,
                    pos[:, 1].min() - margin,
                    pos[:, 0].max() + margin,
                    pos[:, 1].max() + margin,
                ]
            )
            keypoints = [Keypoint(p, d) for p, d in zip(pos, desc)]
            observations.append(FrameObservation(frame, keypoints, bbox))
        tracks.append(ObjectTrack(video_id, object_id, observations))
    return TrackSet(tracks, config.descriptor_dim)


def split_track(track: ObjectTrack, fraction: float) -> tuple[ObjectTrack, ObjectTrack]:
    """Split a track into (query, reference) halves; query gets ceil(fraction * T).

    Both halves stay non-empty, so the query size is clamped to T - 1.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    total = len(track.observations)
    if total < 2:
        raise TooFewFramesError(
            f"track ({track.video_id}, {track.object_id}) has {total} frame(s); need >= 2"
        )
    n_query = min(max(math.ceil(fraction * total), 1), total - 1)
    query = ObjectTrack(track.video_id, track.object_id, track.observations[:n_query])
    reference = ObjectTrack(track.video_id, track.object_id, track.observations[n_query:])
    return query, reference


def iter_observations(tracks: TrackSet) -> Iterator[tuple[ObjectTrack, FrameObservation]]:
    for track in tracks.tracks:
        for obs in track.observations:
            yield track, obs
