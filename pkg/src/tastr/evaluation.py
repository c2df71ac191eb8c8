"""Retrieval metrics (CMC, mAP), association precision/recall, fragment re-matching."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from tastr.core import Tracklet, TrackletDataset
from tastr.embedding import tracklet_feature
from tastr.errors import ProtocolError

CMC_RANKS = (1, 5, 10, 20)


@dataclass
class RetrievalProtocol:
    query_ids: list[int]
    gallery_ids: list[int]
    valid: np.ndarray  # (n_query, n_gallery) bool
    positive: np.ndarray  # (n_query, n_gallery) bool, subset of valid

    def check(self) -> None:
        if self.valid.shape != (len(self.query_ids), len(self.gallery_ids)):
            raise ProtocolError("mask shape does not match query/gallery sizes")
        if np.any(self.positive & ~self.valid):
            raise ProtocolError("positive entries must be valid")
        empty = np.flatnonzero(~self.positive.any(axis=1))
        if len(empty):
            raise ProtocolError(f"query {self.query_ids[empty[0]]} has no valid positive in the gallery")


@dataclass
class MetricsReport:
    cmc: np.ndarray
    map: float
    num_queries: int = 0
    assoc_precision: float | None = None
    assoc_recall: float | None = None
    assoc_degenerate: bool = False
    counts: dict = field(default_factory=dict)

    def rank(self, r: int) -> float:
        """CMC at rank r (1-based); saturates past the gallery size."""
        return float(self.cmc[min(r, len(self.cmc)) - 1])

    def to_dict(self) -> dict:
        d = {f"cmc{r}": self.rank(r) for r in CMC_RANKS}
        d["map"] = float(self.map)
        d["assoc_precision"] = self.assoc_precision
        d["assoc_recall"] = self.assoc_recall
        return d


def build_protocol(dataset: TrackletDataset, rng=None) -> RetrievalProtocol:
    """One query tracklet per identity seen by two or more cameras; everything else is gallery.

    Gallery entries sharing both identity and camera with the query are excluded.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    by_ident: dict[int, list[Tracklet]] = {}
    for t in dataset.tracklets:
        if t.true_identity is not None:
            by_ident.setdefault(t.true_identity, []).append(t)
    queries = []
    for ident in sorted(by_ident):
        ts = by_ident[ident]
        if len({t.camera_id for t in ts}) >= 2:
            queries.append(ts[int(rng.integers(len(ts)))])
    qset = {t.tracklet_id for t in queries}
    gallery = [t for t in dataset.tracklets if t.tracklet_id not in qset]
    q_ident = np.array([t.true_identity for t in queries])
    q_cam = np.array([t.camera_id for t in queries])
    g_ident = np.array([-1 if t.true_identity is None else t.true_identity for t in gallery])
    g_cam = np.array([t.camera_id for t in gallery])
    same_id = q_ident[:, None] == g_ident[None, :]
    same_cam = q_cam[:, None] == g_cam[None, :]
    valid = ~(same_id & same_cam)
    proto = RetrievalProtocol([t.tracklet_id for t in queries], [t.tracklet_id for t in gallery],
                              valid, same_id & valid)
    proto.check()
    return proto


def cmc_map(dist: np.ndarray, protocol: RetrievalProtocol, max_rank: int | None = None) -> MetricsReport:
    """CMC curve and mAP. Valid gallery entries are ranked by distance, ties by gallery index."""
    dist = np.asarray(dist, dtype=np.float64)
    protocol.check()
    if dist.shape != protocol.valid.shape:
        raise ProtocolError(f"distance matrix {dist.shape} does not match protocol {protocol.valid.shape}")
    if not np.all(np.isfinite(dist)):
        raise ProtocolError("distances must be finite")
    n_q, n_g = dist.shape
    max_rank = max_rank or n_g
    hits = np.zeros(max_rank)
    aps = np.empty(n_q)
    for q in range(n_q):
        cols = np.flatnonzero(protocol.valid[q])
        order = cols[np.argsort(dist[q, cols], kind="stable")]
        rel = protocol.positive[q, order]
        first = int(np.argmax(rel))
        if first < max_rank:
            hits[first:] += 1
        ranks = np.flatnonzero(rel) + 1
        aps[q] = np.mean(np.arange(1, len(ranks) + 1) / ranks)
    return MetricsReport(cmc=hits / n_q, map=float(aps.mean()), num_queries=n_q)


def distance_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.sqrt(np.maximum(sq, 0.0))


def evaluate_model(model, dataset: TrackletDataset, protocol: RetrievalProtocol | None = None,
                   max_images=60, rng=None, features=None) -> MetricsReport:
    """Tracklet-level retrieval metrics; no spatio-temporal information is used."""
    if protocol is None:
        protocol = build_protocol(dataset)
    if features is None:
        if rng is None:
            rng = np.random.default_rng(0)
        wanted = set(protocol.query_ids) | set(protocol.gallery_ids)
        features = {t.tracklet_id: tracklet_feature(model, t, max_images, rng)
                    for t in dataset.tracklets if t.tracklet_id in wanted}
    Q = np.stack([features[i] for i in protocol.query_ids])
    G = np.stack([features[i] for i in protocol.gallery_ids])
    return cmc_map(distance_matrix(Q, G), protocol)


def association_pr(matches, truth) -> tuple[float, float, bool]:
    """Precision and recall of accepted pairs against the true cross-camera pairs.

    Returns ``(precision, recall, degenerate)``; with nothing accepted precision
    is reported as 1.0 and ``degenerate`` is True.
    """
    accepted = matches.accepted() if hasattr(matches, "accepted") else list(matches)
    acc = {frozenset((c.tracklet_i, c.tracklet_j)) if hasattr(c, "tracklet_i") else frozenset(c)
           for c in accepted}
    true = truth.true_pair_set()
    hit = len(acc & true)
    recall = hit / len(true) if true else 0.0
    if not acc:
        return 1.0, recall, True
    return hit / len(acc), recall, False


@dataclass
class RematchResult:
    rank1: float
    num_queries: int
    skipped: int


def fragmentation_rematch_eval(dataset: TrackletDataset, model, rng=None, max_images=60) -> RematchResult:
    """Within-camera re-matching of artificially fragmented tracklets.

    A random run of frames inside the middle third of each tracklet is removed;
    the head becomes a query and the tail a gallery entry of the same camera.
    When identities are known, other tracklets of the query's identity are
    left out of its gallery.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    heads, tails, meta = [], [], []
    skipped = 0
    for t in dataset.tracklets:
        n = t.num_frames
        if n < 3:
            skipped += 1
            continue
        lo, hi = n // 3, max(2 * n // 3, n // 3 + 1)
        start = int(rng.integers(lo, hi))
        width = int(rng.integers(1, hi - start + 1))
        stop = min(start + width, n - 1)
        head, tail = t.features[:start], t.features[stop:]
        heads.append(_pool(model, head, max_images, rng))
        tails.append(_pool(model, tail, max_images, rng))
        meta.append((t.camera_id, t.true_identity))
    if not meta:
        return RematchResult(0.0, 0, skipped)
    H, T = np.stack(heads), np.stack(tails)
    cams = np.array([m[0] for m in meta])
    idents = [m[1] for m in meta]
    correct = 0
    for q in range(len(meta)):
        cols = np.flatnonzero(cams == cams[q])
        if idents[q] is not None:
            cols = np.array([c for c in cols if c == q or idents[c] != idents[q]])
        d = np.linalg.norm(T[cols] - H[q], axis=1)
        correct += int(cols[np.argmin(d)] == q)
    return RematchResult(correct / len(meta), len(meta), skipped)


def _pool(model, X, max_images, rng):
    if len(X) > max_images:
        X = X[np.sort(rng.choice(len(X), size=max_images, replace=False))]
    return model(X).mean(axis=0)
