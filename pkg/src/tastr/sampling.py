"""Constrained triplet-batch construction.

Single-camera batches (TCSCC) draw P tracklets from one camera, pairwise
separated in time by more than ``time_gap_T`` so that fragments of one person
are never used as each other's negatives. Camera-pair batches (TCCPC) draw P
matched cross-camera pseudo-identities from a single camera pair.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tastr.core import TrackletDataset
from tastr.embedding import TripletBatch
from tastr.errors import ConfigError, SamplingInfeasibleError

GREEDY_RESTARTS = 20


@dataclass
class SamplerConfig:
    P: int = 8
    K: int = 4
    time_gap_T: float | None = 120.0  # None disables the separation constraint
    max_images: int = 60

    def validate(self) -> None:
        if self.P < 2:
            raise ConfigError("sampler.P", f"must be at least 2, got {self.P}")
        if self.K < 2:
            raise ConfigError("sampler.K", f"must be at least 2, got {self.K}")
        if self.time_gap_T is not None and not self.time_gap_T >= 0:
            raise ConfigError("sampler.time_gap_T", f"must be nonnegative, got {self.time_gap_T}")
        if self.max_images < 1:
            raise ConfigError("sampler.max_images", f"must be at least 1, got {self.max_images}")


@dataclass(frozen=True)
class PseudoIdentity:
    id: int
    members: tuple[int, ...]
    cameras: tuple[int, ...]

    def __post_init__(self):
        if len(self.members) == 2 and len(set(self.cameras)) != 2:
            raise ValueError("cross-camera pseudo-identities must span exactly two cameras")


class TrainingView:
    """Per-camera arrays and capped frame pools over a label-free dataset.

    Each tracklet contributes at most ``max_images`` frames to training; the
    subset is drawn once, when the view is built.
    """

    def __init__(self, dataset: TrackletDataset, max_images: int = 60, rng=None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.dataset = dataset
        self.tracklets = dataset.by_id()
        self.pools: dict[int, np.ndarray] = {}
        for t in dataset.tracklets:
            n = t.num_frames
            if n > max_images:
                self.pools[t.tracklet_id] = np.sort(rng.choice(n, size=max_images, replace=False))
            else:
                self.pools[t.tracklet_id] = np.arange(n)
        self.cameras = {}
        for cam, ts in dataset.by_camera().items():
            ts = sorted(ts, key=lambda t: (t.start_time, t.tracklet_id))
            self.cameras[cam] = (
                np.array([t.tracklet_id for t in ts], dtype=np.int64),
                np.array([t.start_time for t in ts]),
                np.array([t.end_time for t in ts]),
            )
        self._capacity: dict = {}

    def frames(self, tracklet_id: int) -> np.ndarray:
        t = self.tracklets[tracklet_id]
        return t.features[self.pools[tracklet_id]]

    def capacity(self, camera: int, gap) -> int:
        """Largest number of pairwise-separated tracklets in ``camera``."""
        key = (camera, gap)
        if key not in self._capacity:
            ids, starts, ends = self.cameras[camera]
            self._capacity[key] = len(ids) if gap is None else len(max_separated_set(starts, ends, gap))
        return self._capacity[key]


def separated(s1, e1, s2, e2, gap) -> bool:
    """Closest-endpoint gap between two intervals exceeds ``gap``."""
    return max(s2 - e1, s1 - e2) > gap


def max_separated_set(starts, ends, gap) -> list[int]:
    """Indices of a maximum pairwise-separated subset (earliest-end greedy, exact)."""
    order = np.lexsort((starts, ends))
    chosen, last_end = [], -np.inf
    for i in order:
        if starts[i] - last_end > gap:
            chosen.append(int(i))
            last_end = ends[i]
    return chosen


def _pick_separated(starts, ends, P, gap, rng):
    n = len(starts)
    if gap is None:
        return list(rng.choice(n, size=P, replace=False))
    for _ in range(GREEDY_RESTARTS):
        sel = []
        for i in rng.permutation(n):
            if not sel:
                sel.append(int(i))
            else:
                s = np.asarray(sel)
                if np.all(np.maximum(starts[s] - ends[i], starts[i] - ends[s]) > gap):
                    sel.append(int(i))
            if len(sel) == P:
                return sel
    best = max_separated_set(starts, ends, gap)
    if len(best) < P:
        return None
    return [best[i] for i in rng.choice(len(best), size=P, replace=False)]


def _draw_frames(pool_size, k, rng):
    return rng.choice(pool_size, size=k, replace=pool_size < k)


def sample_tcscc_batch(view: TrainingView, cfg: SamplerConfig, rng) -> TripletBatch:
    gap = cfg.time_gap_T
    feasible = [c for c in sorted(view.cameras) if view.capacity(c, gap) >= cfg.P]
    if not feasible:
        rule = "" if gap is None else f" pairwise separated by more than {gap} s"
        raise SamplingInfeasibleError(f"no camera has {cfg.P} tracklets{rule}")
    cam = feasible[int(rng.integers(len(feasible)))]
    ids, starts, ends = view.cameras[cam]
    sel = _pick_separated(starts, ends, cfg.P, gap, rng)
    items, labels, members = [], [], []
    for label, i in enumerate(sel):
        tid = int(ids[i])
        frames = view.frames(tid)
        items.append(frames[_draw_frames(len(frames), cfg.K, rng)])
        labels.extend([label] * cfg.K)
        members.append((tid,))
    return TripletBatch(np.concatenate(items), np.array(labels), cfg.P, cfg.K,
                        provenance=f"tcscc:camera={cam}", members=members)


def group_by_camera_pair(identities) -> dict[tuple[int, int], list[PseudoIdentity]]:
    groups: dict[tuple[int, int], list[PseudoIdentity]] = {}
    for pid in identities:
        key = tuple(sorted(pid.cameras))
        groups.setdefault(key, []).append(pid)
    return dict(sorted(groups.items()))


def tccpc_feasible(identities, P: int) -> bool:
    """Some camera pair holds at least P pseudo-identities."""
    return any(len(v) >= P for v in group_by_camera_pair(identities).values())


def sample_tccpc_batch(matches, view: TrainingView, cfg: SamplerConfig, rng) -> TripletBatch:
    """``matches`` is a MatchSet or an iterable of cross-camera PseudoIdentity."""
    identities = matches.pseudo_identities() if hasattr(matches, "pseudo_identities") else list(matches)
    groups = group_by_camera_pair(identities)
    feasible = [k for k, v in groups.items() if len(v) >= cfg.P]
    if not feasible:
        raise SamplingInfeasibleError(f"no camera pair has {cfg.P} matched pseudo-identities")
    pair = feasible[int(rng.integers(len(feasible)))]
    chosen = [groups[pair][i] for i in rng.choice(len(groups[pair]), size=cfg.P, replace=False)]
    items, labels, members = [], [], []
    for label, pid in enumerate(chosen):
        fa, fb = (view.frames(tid) for tid in pid.members)
        if cfg.K >= 2:
            # one frame from each camera, the rest from the union
            head = [fa[rng.integers(len(fa))], fb[rng.integers(len(fb))]]
            union = np.concatenate([fa, fb])
            rest = union[_draw_frames(len(union), cfg.K - 2, rng)] if cfg.K > 2 else union[:0]
            items.append(np.vstack([np.stack(head), rest]))
        else:
            union = np.concatenate([fa, fb])
            items.append(union[_draw_frames(len(union), cfg.K, rng)])
        labels.extend([label] * cfg.K)
        members.append(pid.members)
    return TripletBatch(np.concatenate(items), np.array(labels), cfg.P, cfg.K,
                        provenance=f"tccpc:pair={pair[0]}-{pair[1]}", members=members)
