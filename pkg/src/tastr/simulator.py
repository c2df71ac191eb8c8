"""Synthetic camera-network worlds with ground truth.

Each identity has a latent appearance vector on the unit sphere. A camera
applies its own linear colour response plus a fixed bias to everything it sees,
and every frame adds noise: an isotropic part, and a part confined to a small
shared "nuisance" subspace (pose, lighting) that drifts slowly within a visit.
Identities walk between cameras with transfer gaps drawn from a truncated
normal law centred on path length / walking speed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from tastr.core import CameraPairStats, CameraTopology, Tracklet, TrackletDataset
from tastr.errors import ConfigError
from tastr.seeds import stream


@dataclass
class SimConfig:
    num_identities: int = 200
    num_cameras: int = 6
    topology: CameraTopology | None = None
    d_raw: int = 16
    appearance_noise_std: float = 0.15
    nuisance_gain: float = 3.0
    nuisance_dims: int = 4
    nuisance_corr: float = 0.9
    camera_distortion_std: float = 0.18
    camera_mixing_gain: float = 2.0
    transfer_time_cv: float = 0.05
    fragmentation_prob: float = 0.3
    distractor_fraction: float = 0.2
    frames_per_visit_range: tuple[int, int] = (10, 40)
    cameras_per_identity_range: tuple[int, int] = (2, 4)
    frame_interval_s: float = 1.0
    duration_s: float = 21600.0
    speed_mps: float = 1.25
    layout_radius_m: float = 120.0
    path_tortuosity: float = 1.3
    seed: int = 1

    def validate(self) -> None:
        if self.num_identities < 1:
            raise ConfigError("num_identities", "must be at least 1")
        if self.num_cameras < 2:
            raise ConfigError("num_cameras", "must be at least 2")
        if self.d_raw < 1:
            raise ConfigError("d_raw", "must be at least 1")
        for name in ("fragmentation_prob", "distractor_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(name, f"probability must lie in [0, 1], got {v}")
        for name in ("appearance_noise_std", "camera_distortion_std", "camera_mixing_gain", "transfer_time_cv",
                     "nuisance_gain"):
            v = getattr(self, name)
            if not v >= 0:
                raise ConfigError(name, f"must be nonnegative, got {v}")
        if not 0.0 <= self.nuisance_corr < 1.0:
            raise ConfigError("nuisance_corr", f"must lie in [0, 1), got {self.nuisance_corr}")
        if not 0 <= self.nuisance_dims <= self.d_raw:
            raise ConfigError("nuisance_dims", f"must lie in [0, d_raw], got {self.nuisance_dims}")
        lo, hi = self.frames_per_visit_range
        if not 1 <= lo <= hi:
            raise ConfigError("frames_per_visit_range", f"need 1 <= lo <= hi, got {(lo, hi)}")
        lo, hi = self.cameras_per_identity_range
        # the upper end is capped at num_cameras when drawing
        if not 2 <= lo <= hi or lo > self.num_cameras:
            raise ConfigError("cameras_per_identity_range", f"need 2 <= lo <= hi and lo <= num_cameras, got {(lo, hi)}")
        for name in ("frame_interval_s", "duration_s", "speed_mps", "layout_radius_m", "path_tortuosity"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, "must be positive")
        if self.topology is not None:
            missing = [(a, b) for a in range(self.num_cameras) for b in range(a + 1, self.num_cameras)
                       if (a, b) not in self.topology.paths]
            if missing:
                raise ConfigError("topology", f"missing paths for camera pairs {missing}")

    def resolved_topology(self) -> CameraTopology:
        """The configured topology, or cameras evenly spaced on a circle."""
        if self.topology is not None:
            return self.topology
        n = self.num_cameras
        angles = 2 * np.pi * np.arange(n) / n
        pos = self.layout_radius_m * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        paths = {}
        for a in range(n):
            for b in range(a + 1, n):
                chord = float(np.linalg.norm(pos[a] - pos[b]))
                paths[(a, b)] = round(chord * self.path_tortuosity, 3)
        return CameraTopology(self.speed_mps, paths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("topology")
        d["frames_per_visit_range"] = list(self.frames_per_visit_range)
        d["cameras_per_identity_range"] = list(self.cameras_per_identity_range)
        if self.topology is not None:
            d["topology"] = {
                "speed_mps": self.topology.speed_mps,
                "paths": [{"a": a, "b": b, "meters": m} for (a, b), m in sorted(self.topology.paths.items())],
            }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown simulator key")
        topo = d.pop("topology", None)
        if topo is not None:
            try:
                d["topology"] = CameraTopology(
                    float(topo["speed_mps"]),
                    {(int(p["a"]), int(p["b"])): float(p["meters"]) for p in topo["paths"]},
                )
            except (KeyError, TypeError) as exc:
                raise ConfigError("topology", f"malformed ({exc})") from None
        for key in ("frames_per_visit_range", "cameras_per_identity_range"):
            if key in d:
                d[key] = tuple(int(v) for v in d[key])
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class GroundTruth:
    labels: dict[int, int]
    pairs: dict[tuple[int, int], list[tuple[int, int]]] = field(default_factory=dict)

    @classmethod
    def from_dataset(cls, dataset: TrackletDataset) -> "GroundTruth":
        """Derive every same-identity cross-camera tracklet pair from dataset labels."""
        labels = dataset.identities()
        by_key: dict[tuple[int, int], list[int]] = {}
        for t in dataset.tracklets:
            if t.true_identity is not None:
                by_key.setdefault((t.true_identity, t.camera_id), []).append(t.tracklet_id)
        per_identity: dict[int, dict[int, list[int]]] = {}
        for (ident, cam), tids in by_key.items():
            per_identity.setdefault(ident, {})[cam] = tids
        pairs: dict[tuple[int, int], list[tuple[int, int]]] = {}
        for ident in sorted(per_identity):
            cams = sorted(per_identity[ident])
            for i, a in enumerate(cams):
                for b in cams[i + 1:]:
                    bucket = pairs.setdefault((a, b), [])
                    for ti in per_identity[ident][a]:
                        for tj in per_identity[ident][b]:
                            bucket.append((ti, tj))
        return cls(labels=labels, pairs={k: sorted(v) for k, v in sorted(pairs.items())})

    def true_pair_set(self) -> set[frozenset]:
        return {frozenset(p) for plist in self.pairs.values() for p in plist}

    def to_json(self) -> dict:
        return {
            "labels": {str(k): v for k, v in sorted(self.labels.items())},
            "pairs": [[a, b, ti, tj] for (a, b), plist in sorted(self.pairs.items()) for ti, tj in plist],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GroundTruth":
        labels = {int(k): int(v) for k, v in obj["labels"].items()}
        pairs: dict[tuple[int, int], list[tuple[int, int]]] = {}
        for a, b, ti, tj in obj["pairs"]:
            pairs.setdefault((int(a), int(b)), []).append((int(ti), int(tj)))
        return cls(labels, pairs)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), separators=(",", ":")) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "GroundTruth":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def true_pair_stats(config: SimConfig) -> dict[tuple[int, int], CameraPairStats]:
    """Generative-law transfer-time mean and deviation for every camera pair."""
    topo = config.resolved_topology()
    out = {}
    for (a, b), meters in sorted(topo.paths.items()):
        t_bar = meters / topo.speed_mps
        out[(a, b)] = out[(b, a)] = CameraPairStats(t_bar, config.transfer_time_cv * t_bar)
    return out


def _unit_sphere(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _transfer_gap(rng, mean, std):
    if std == 0:
        return mean
    while True:
        g = rng.normal(mean, std)
        if g > 0:
            return g


def _ar1(rng, n, k, rho):
    """Stationary unit-variance AR(1) sequence of length n in k dimensions."""
    eps = rng.standard_normal((n, k))
    out = np.empty((n, k))
    out[0] = eps[0]
    scale = np.sqrt(1.0 - rho * rho)
    for i in range(1, n):
        out[i] = rho * out[i - 1] + scale * eps[i]
    return out


def _fragment(rng, n, p, lo=0):
    """Split frame range [lo, lo+n) recursively; returns list of (start, stop)."""
    if n >= 2 and p > 0 and rng.random() < p:
        cut = int(rng.integers(1, n))
        return _fragment(rng, cut, p, lo) + _fragment(rng, n - cut, p, lo + cut)
    return [(lo, lo + n)]


def generate(config: SimConfig) -> tuple[TrackletDataset, GroundTruth]:
    config.validate()
    rng = stream(config.seed, "sim")
    topo = config.resolved_topology()
    n_cam, d = config.num_cameras, config.d_raw

    latents = _unit_sphere(rng, config.num_identities, d)
    cam_bias = rng.normal(0.0, config.camera_distortion_std, size=(n_cam, d))
    # per-camera colour response: identity plus a random linear perturbation
    cam_mix = np.eye(d) + (config.camera_distortion_std * config.camera_mixing_gain / np.sqrt(d)) * \
        rng.standard_normal((n_cam, d, d))
    if config.nuisance_dims > 0:
        basis, _ = np.linalg.qr(rng.standard_normal((d, config.nuisance_dims)))
    else:
        basis = np.zeros((d, 0))

    n_distract = int(round(config.distractor_fraction * config.num_identities))
    distractor = np.zeros(config.num_identities, dtype=bool)
    distractor[rng.permutation(config.num_identities)[:n_distract]] = True

    raw = []  # (camera, identity, times, features)
    f_lo, f_hi = config.frames_per_visit_range
    c_lo, c_hi = config.cameras_per_identity_range
    c_hi = min(c_hi, n_cam)
    for ident in range(config.num_identities):
        n_visits = 1 if distractor[ident] else int(rng.integers(c_lo, c_hi + 1))
        route = rng.permutation(n_cam)[:n_visits]
        t = float(rng.uniform(0.0, config.duration_s))
        for v, cam in enumerate(route):
            if v > 0:
                mean = topo.path(int(route[v - 1]), int(cam)) / topo.speed_mps
                t += _transfer_gap(rng, mean, config.transfer_time_cv * mean)
            n_frames = int(rng.integers(f_lo, f_hi + 1))
            times = t + config.frame_interval_s * np.arange(n_frames)
            noise = rng.standard_normal((n_frames, d)) + config.nuisance_gain * (
                _ar1(rng, n_frames, basis.shape[1], config.nuisance_corr) @ basis.T)
            feats = cam_mix[cam] @ latents[ident] + cam_bias[cam] + config.appearance_noise_std * noise
            for s, e in _fragment(rng, n_frames, config.fragmentation_prob):
                raw.append((int(cam), ident, times[s:e], feats[s:e]))
            t = float(times[-1])

    # ids carry no information about identity or time
    ids = rng.permutation(len(raw))
    tracklets = [Tracklet(int(tid), cam, times, feats, ident)
                 for tid, (cam, ident, times, feats) in zip(ids, raw)]
    tracklets.sort(key=lambda tr: (tr.camera_id, tr.start_time, tr.tracklet_id))
    dataset = TrackletDataset(tuple(tracklets), d_raw=d, labeled=True, cameras=frozenset(range(n_cam)))
    return dataset, GroundTruth.from_dataset(dataset)
