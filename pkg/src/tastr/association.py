"""Cross-camera tracklet association.

Per camera pair: appearance distances are divided by a Gaussian transfer-time
plausibility weight, mutual top-1 pairs become candidates, and a 1-D k-means
on the candidates' appearance distances keeps the lowest-distance cluster.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from tastr.core import CameraPairStats, CameraTopology, Tracklet, TrackletDataset
from tastr.embedding import tracklet_feature
from tastr.errors import ClusterError, ContractError, TopologyError
from tastr.sampling import PseudoIdentity

KMEANS_MAX_ITERS = 100
_FLOAT_MAX = np.finfo(np.float64).max


@dataclass
class AssociationParams:
    lambda_: float = 0.7
    k: int = 3
    use_str: bool = True
    use_kmeans: bool = True
    squared_sigma: bool = False
    max_images: int = 60


@dataclass
class CandidatePair:
    camera_a: int
    camera_b: int
    tracklet_i: int
    tracklet_j: int
    euclidean_distance: float
    delta_t: float
    joint_distance: float
    accepted: bool = False


def estimate_pair_stats(topology: CameraTopology, lambda_: float, cameras=None) -> dict:
    """Transfer-time mean from path length / speed, deviation = lambda * mean.

    Keys are ordered camera pairs in both directions. ``cameras`` restricts (and
    checks coverage for) the camera set; default is every camera in the topology.
    """
    if not lambda_ > 0:
        raise ContractError(f"lambda must be positive, got {lambda_}")
    cams = sorted(cameras) if cameras is not None else topology.cameras
    out = {}
    for i, a in enumerate(cams):
        for b in cams[i + 1:]:
            t_bar = topology.path(a, b) / topology.speed_mps
            out[(a, b)] = out[(b, a)] = CameraPairStats(t_bar, lambda_ * t_bar)
    return out


def str_penalty(delta_t, stats: CameraPairStats, squared_sigma=False):
    """Negative log of the STR weight: (dt - t_bar)^2 / (2 sigma) or / (2 sigma^2)."""
    if not stats.sigma > 0:
        raise ContractError("STR needs sigma > 0")
    denom = 2.0 * (stats.sigma ** 2 if squared_sigma else stats.sigma)
    return (np.asarray(delta_t, dtype=np.float64) - stats.t_bar) ** 2 / denom


def str_weight(delta_t, stats: CameraPairStats, squared_sigma=False):
    """Gaussian plausibility of a transfer gap, in (0, 1] (may underflow to 0 far out)."""
    w = np.exp(-str_penalty(delta_t, stats, squared_sigma))
    return float(w) if np.ndim(w) == 0 else w


def delta_t(ti: Tracklet, tj: Tracklet) -> float:
    """Start of the later-starting tracklet minus end of the other."""
    if (tj.start_time, tj.tracklet_id) >= (ti.start_time, ti.tracklet_id):
        return tj.start_time - ti.end_time
    return ti.start_time - tj.end_time


def _joint_value(dist, penalty):
    if dist == 0:
        return 0.0
    log_j = math.log(dist) + penalty
    return _FLOAT_MAX if log_j >= math.log(_FLOAT_MAX) else math.exp(log_j)


def joint_distance(ti: Tracklet, tj: Tracklet, xi, xj, stats: CameraPairStats,
                   squared_sigma=False) -> CandidatePair:
    """Appearance distance divided by the STR weight.

    The stored joint distance saturates at the largest float when the weight
    underflows, keeping it finite.
    """
    if ti.camera_id == tj.camera_id:
        raise ContractError("joint distance is defined for tracklets on different cameras")
    d = float(np.linalg.norm(np.asarray(xi) - np.asarray(xj)))
    dt = delta_t(ti, tj)
    pen = float(str_penalty(dt, stats, squared_sigma))
    return CandidatePair(ti.camera_id, tj.camera_id, ti.tracklet_id, tj.tracklet_id, d, dt, _joint_value(d, pen))


def mutual_nearest(key: np.ndarray) -> list[tuple[int, int]]:
    """(row, col) pairs that are each other's argmin; ties go to the lowest index."""
    if key.size == 0:
        return []
    row_best = np.argmin(key, axis=1)
    col_best = np.argmin(key, axis=0)
    return [(r, int(c)) for r, c in enumerate(row_best) if col_best[c] == r]


def reciprocal_nn_candidates(cam_a: list[Tracklet], cam_b: list[Tracklet], features: dict,
                             stats: CameraPairStats | None, squared_sigma=False) -> list[CandidatePair]:
    """Mutual top-1 pairs under the joint distance (plain Euclidean if ``stats`` is None).

    Ranking is done on log(joint distance) = log D + STR penalty, which orders
    pairs identically and cannot overflow.
    """
    if not cam_a or not cam_b:
        return []
    Xa = np.stack([features[t.tracklet_id] for t in cam_a])
    Xb = np.stack([features[t.tracklet_id] for t in cam_b])
    diff = Xa[:, None, :] - Xb[None, :, :]
    D = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    sa = np.array([t.start_time for t in cam_a])
    ea = np.array([t.end_time for t in cam_a])
    sb = np.array([t.start_time for t in cam_b])
    eb = np.array([t.end_time for t in cam_b])
    ida = np.array([t.tracklet_id for t in cam_a])
    idb = np.array([t.tracklet_id for t in cam_b])
    b_later = (sb[None, :] > sa[:, None]) | ((sb[None, :] == sa[:, None]) & (idb[None, :] >= ida[:, None]))
    DT = np.where(b_later, sb[None, :] - ea[:, None], sa[:, None] - eb[None, :])
    if stats is None:
        key = D
        pen = np.zeros_like(D)
    else:
        pen = str_penalty(DT, stats, squared_sigma)
        with np.errstate(divide="ignore"):
            key = np.log(D) + pen
    out = []
    for r, c in mutual_nearest(key):
        d = float(D[r, c])
        joint = d if stats is None else _joint_value(d, float(pen[r, c]))
        out.append(CandidatePair(cam_a[r].camera_id, cam_b[c].camera_id, int(ida[r]), int(idb[c]),
                                 d, float(DT[r, c]), joint))
    return out


def kmeans_cost(values, assignments, centers) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(np.sum((v - np.asarray(centers)[assignments]) ** 2))


def kmeans_1d(values, k, max_iters=KMEANS_MAX_ITERS):
    """Lloyd's algorithm on scalars with centers initialised evenly over [min, max].

    Returns ``(assignments, centers)``. Ties go to the lower-index center; an
    emptied cluster keeps its previous center.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if k < 1:
        raise ClusterError(f"k must be at least 1, got {k}")
    if len(v) < k:
        raise ClusterError(f"need at least k={k} values, got {len(v)}")
    lo, hi = float(v.min()), float(v.max())
    if k == 1:
        centers = np.array([(lo + hi) / 2.0])
    else:
        centers = lo + (hi - lo) * np.arange(k) / (k - 1)
    assign = np.argmin(np.abs(v[:, None] - centers[None, :]), axis=1)
    for _ in range(max_iters):
        for c in range(k):
            members = v[assign == c]
            if len(members):
                centers[c] = members.mean()
        new = np.argmin(np.abs(v[:, None] - centers[None, :]), axis=1)
        if np.array_equal(new, assign):
            break
        assign = new
    return assign, centers


@dataclass
class MatchSet:
    """Candidates per camera pair (a < b); ``accepted`` flags the selected matches."""

    pairs: dict[tuple[int, int], list[CandidatePair]] = field(default_factory=dict)

    def accepted(self, pair=None) -> list[CandidatePair]:
        keys = [pair] if pair is not None else sorted(self.pairs)
        return [c for key in keys for c in self.pairs.get(key, []) if c.accepted]

    def counts(self) -> dict[tuple[int, int], int]:
        return {key: sum(c.accepted for c in cands) for key, cands in sorted(self.pairs.items())}

    def num_accepted(self) -> int:
        return sum(self.counts().values())

    def pseudo_identities(self) -> list[PseudoIdentity]:
        return [PseudoIdentity(i, (c.tracklet_i, c.tracklet_j), (c.camera_a, c.camera_b))
                for i, c in enumerate(self.accepted())]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["pair_a", "pair_b", "tracklet_i", "tracklet_j", "euclid", "delta_t", "joint", "accepted"])
            for (a, b), cands in sorted(self.pairs.items()):
                for c in cands:
                    w.writerow([a, b, c.tracklet_i, c.tracklet_j, repr(c.euclidean_distance),
                                repr(c.delta_t), repr(c.joint_distance), int(c.accepted)])

    @classmethod
    def from_csv(cls, path) -> "MatchSet":
        pairs: dict[tuple[int, int], list[CandidatePair]] = {}
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                a, b = int(row["pair_a"]), int(row["pair_b"])
                pairs.setdefault((a, b), []).append(CandidatePair(
                    a, b, int(row["tracklet_i"]), int(row["tracklet_j"]), float(row["euclid"]),
                    float(row["delta_t"]), float(row["joint"]), row["accepted"] == "1"))
        return cls(pairs)


def select_matches(candidates: dict, k: int) -> MatchSet:
    """Per camera pair keep the k-means cluster of smallest mean appearance distance.

    Pairs with fewer than ``k`` candidates keep all of them.
    """
    if k < 1:
        raise ClusterError(f"k must be at least 1, got {k}")
    out = {}
    for key, cands in sorted(candidates.items()):
        cands = [CandidatePair(**{**c.__dict__, "accepted": False}) for c in cands]
        if len(cands) < k:
            for c in cands:
                c.accepted = True
        elif cands:
            assign, centers = kmeans_1d([c.euclidean_distance for c in cands], k)
            used = sorted(set(assign.tolist()))
            best = min(used, key=lambda i: (centers[i], i))
            for c, a in zip(cands, assign):
                c.accepted = bool(a == best)
        out[key] = cands
    return MatchSet(out)


def extract_features(dataset: TrackletDataset, model, max_images=60, rng=None) -> dict[int, np.ndarray]:
    """Pooled embedding for every tracklet, in dataset order (fixed rng consumption)."""
    if rng is None:
        rng = np.random.default_rng(0)
    return {t.tracklet_id: tracklet_feature(model, t, max_images, rng) for t in dataset.tracklets}


def associate_all(dataset: TrackletDataset, model, topology: CameraTopology | None,
                  params: AssociationParams | None = None, rng=None, threads: int = 1,
                  features: dict | None = None) -> MatchSet:
    """Run association for every unordered camera pair with a frozen model."""
    params = params or AssociationParams()
    if features is None:
        features = extract_features(dataset, model, params.max_images, rng)
    by_cam = dataset.by_camera()
    cams = sorted(by_cam)
    stats = None
    if params.use_str:
        if topology is None:
            raise TopologyError("STR requires a camera topology")
        stats = estimate_pair_stats(topology, params.lambda_, cams)
    keys = [(a, b) for i, a in enumerate(cams) for b in cams[i + 1:]]

    def run(key):
        a, b = key
        return reciprocal_nn_candidates(by_cam[a], by_cam[b], features,
                                        stats[key] if stats else None, params.squared_sigma)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, keys))
    else:
        results = [run(key) for key in keys]
    candidates = dict(zip(keys, results))
    if not params.use_kmeans:
        return select_matches(candidates, 1)
    return select_matches(candidates, params.k)
