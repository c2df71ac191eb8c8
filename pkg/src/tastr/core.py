"""Tracklet data model, camera topology and JSON(L) ingestion."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from tastr.errors import DatasetParseError, DimensionError, IntegrityError, TopologyError


@dataclass(frozen=True, eq=False)
class Tracklet:
    """A contiguous within-camera observation of one person.

    ``times`` is a strictly increasing vector of seconds on the shared clock and
    ``features`` holds one raw feature row per frame.
    """

    tracklet_id: int
    camera_id: int
    times: np.ndarray
    features: np.ndarray
    true_identity: int | None = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats.reshape(1, -1)
        if times.ndim != 1 or len(times) == 0:
            raise IntegrityError(f"tracklet {self.tracklet_id}: frames must be nonempty")
        if feats.shape[0] != len(times):
            raise IntegrityError(f"tracklet {self.tracklet_id}: {len(times)} timestamps but {feats.shape[0]} feature rows")
        if len(times) > 1 and not np.all(np.diff(times) > 0):
            raise IntegrityError(f"tracklet {self.tracklet_id}: timestamps must be strictly increasing")
        times.flags.writeable = False
        feats.flags.writeable = False
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "features", feats)

    @property
    def start_time(self) -> float:
        return float(self.times[0])

    @property
    def end_time(self) -> float:
        return float(self.times[-1])

    @property
    def num_frames(self) -> int:
        return len(self.times)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Tracklet):
            return NotImplemented
        return (
            self.tracklet_id == other.tracklet_id
            and self.camera_id == other.camera_id
            and self.true_identity == other.true_identity
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.features, other.features)
        )

    __hash__ = None


@dataclass(frozen=True)
class TrackletDataset:
    tracklets: tuple[Tracklet, ...]
    d_raw: int
    labeled: bool = False
    cameras: frozenset = field(default=None)

    def __post_init__(self):
        tracklets = tuple(self.tracklets)
        object.__setattr__(self, "tracklets", tracklets)
        cams = frozenset(t.camera_id for t in tracklets)
        if self.cameras is None:
            object.__setattr__(self, "cameras", cams)
        elif not cams <= frozenset(self.cameras):
            raise IntegrityError(f"tracklets reference unknown cameras {sorted(cams - set(self.cameras))}")
        else:
            object.__setattr__(self, "cameras", frozenset(self.cameras))
        seen = set()
        for t in tracklets:
            if t.tracklet_id in seen:
                raise IntegrityError(f"duplicate tracklet_id {t.tracklet_id}")
            seen.add(t.tracklet_id)
            if t.dim != self.d_raw:
                raise DimensionError(f"tracklet {t.tracklet_id} has feature dimension {t.dim}, expected {self.d_raw}")

    def __len__(self):
        return len(self.tracklets)

    def __iter__(self) -> Iterator[Tracklet]:
        return iter(self.tracklets)

    def by_id(self) -> dict[int, Tracklet]:
        return {t.tracklet_id: t for t in self.tracklets}

    def by_camera(self) -> dict[int, list[Tracklet]]:
        out = {c: [] for c in sorted(self.cameras)}
        for t in self.tracklets:
            out[t.camera_id].append(t)
        return out

    def identities(self) -> dict[int, int]:
        """tracklet_id -> identity for labeled tracklets. Evaluation-only."""
        return {t.tracklet_id: t.true_identity for t in self.tracklets if t.true_identity is not None}


def strip_labels(dataset: TrackletDataset) -> TrackletDataset:
    """Copy of ``dataset`` with every identity removed and ``labeled`` cleared."""
    tracklets = tuple(
        t if t.true_identity is None else replace(t, true_identity=None) for t in dataset.tracklets
    )
    return TrackletDataset(tracklets, d_raw=dataset.d_raw, labeled=False, cameras=dataset.cameras)


@dataclass(frozen=True)
class CameraTopology:
    """Walking path lengths (meters) between camera pairs and a nominal speed."""

    speed_mps: float
    paths: dict  # (a, b) with a < b -> meters

    def __post_init__(self):
        if not (self.speed_mps > 0 and math.isfinite(self.speed_mps)):
            raise TopologyError(f"speed_mps must be positive, got {self.speed_mps}")
        norm = {}
        for (a, b), meters in dict(self.paths).items():
            if a == b:
                raise TopologyError(f"path from camera {a} to itself")
            key = (min(a, b), max(a, b))
            meters = float(meters)
            if not meters > 0:
                raise TopologyError(f"path {key} must be positive, got {meters}")
            if key in norm and norm[key] != meters:
                raise TopologyError(f"asymmetric path lengths for cameras {key}")
            norm[key] = meters
        object.__setattr__(self, "paths", norm)

    def path(self, a: int, b: int) -> float:
        try:
            return self.paths[(min(a, b), max(a, b))]
        except KeyError:
            raise TopologyError(f"no path between cameras {a} and {b}") from None

    @property
    def cameras(self) -> list[int]:
        return sorted({c for pair in self.paths for c in pair})


@dataclass(frozen=True)
class CameraPairStats:
    """Mean transfer time and its deviation for one camera pair."""

    t_bar: float
    sigma: float

    def __post_init__(self):
        if not (self.t_bar > 0 and math.isfinite(self.t_bar)):
            raise ValueError(f"t_bar must be positive and finite, got {self.t_bar}")
        if not (self.sigma >= 0 and math.isfinite(self.sigma)):
            raise ValueError(f"sigma must be nonnegative and finite, got {self.sigma}")


def _parse_record(rec, lineno):
    try:
        tid = rec["tracklet_id"]
        cam = rec["camera_id"]
        frames = rec["frames"]
    except (KeyError, TypeError) as exc:
        raise DatasetParseError(f"missing field {exc}", lineno) from None
    ident = rec.get("identity")
    if not isinstance(tid, int) or not isinstance(cam, int) or (ident is not None and not isinstance(ident, int)):
        raise DatasetParseError("tracklet_id, camera_id and identity must be integers", lineno)
    if not isinstance(frames, list) or not frames:
        raise DatasetParseError("frames must be a nonempty list", lineno)
    try:
        times = [float(fr["t"]) for fr in frames]
        feats = [fr["f"] for fr in frames]
    except (KeyError, TypeError, ValueError):
        raise DatasetParseError("each frame needs numeric 't' and list 'f'", lineno) from None
    if any(b <= a for a, b in zip(times, times[1:])):
        raise DatasetParseError(f"tracklet {tid}: timestamps not strictly increasing", lineno)
    dims = {len(f) for f in feats}
    if len(dims) != 1:
        raise DimensionError(f"line {lineno}: tracklet {tid} mixes feature dimensions {sorted(dims)}")
    try:
        arr = np.array(feats, dtype=np.float64)
    except (TypeError, ValueError):
        raise DatasetParseError("feature values must be numbers", lineno) from None
    return Tracklet(tid, cam, np.array(times), arr, ident)


def load_dataset(path) -> TrackletDataset:
    tracklets = []
    d_raw = None
    ids = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetParseError(f"invalid JSON ({exc.msg})", lineno) from None
            t = _parse_record(rec, lineno)
            if d_raw is None:
                d_raw = t.dim
            elif t.dim != d_raw:
                raise DimensionError(f"line {lineno}: feature dimension {t.dim} differs from {d_raw}")
            if t.tracklet_id in ids:
                raise IntegrityError(f"line {lineno}: duplicate tracklet_id {t.tracklet_id}")
            ids.add(t.tracklet_id)
            tracklets.append(t)
    if d_raw is None:
        raise IntegrityError(f"{path}: no tracklets, feature dimension unknown")
    labeled = any(t.true_identity is not None for t in tracklets)
    return TrackletDataset(tuple(tracklets), d_raw=d_raw, labeled=labeled)


def _records(dataset: TrackletDataset) -> Iterable[dict]:
    for t in dataset.tracklets:
        yield {
            "tracklet_id": t.tracklet_id,
            "camera_id": t.camera_id,
            "identity": t.true_identity,
            "frames": [{"t": float(ts), "f": row.tolist()} for ts, row in zip(t.times, t.features)],
        }


def save_dataset(dataset: TrackletDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in _records(dataset):
            fh.write(json.dumps(rec, separators=(",", ":")))
            fh.write("\n")


def load_topology(path) -> CameraTopology:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        paths = {(int(p["a"]), int(p["b"])): float(p["meters"]) for p in obj["paths"]}
        speed = float(obj["speed_mps"])
    except (KeyError, TypeError, ValueError) as exc:
        raise TopologyError(f"{path}: malformed topology ({exc})") from None
    return CameraTopology(speed, paths)


def save_topology(topology: CameraTopology, path) -> None:
    obj = {
        "speed_mps": topology.speed_mps,
        "paths": [{"a": a, "b": b, "meters": m} for (a, b), m in sorted(topology.paths.items())],
    }
    Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")
