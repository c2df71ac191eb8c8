"""Progressive training loop: within-camera stage, then association / cross-camera rounds."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from tastr.association import AssociationParams, MatchSet, associate_all
from tastr.core import CameraTopology, Tracklet, TrackletDataset, strip_labels
from tastr.embedding import (EmbeddingModel, OptimizerState, adam_step, init_model, loss_gradient,
                             save_checkpoint)
from tastr.errors import ConfigError
from tastr.evaluation import association_pr, build_protocol, evaluate_model, fragmentation_rematch_eval
from tastr.sampling import (SamplerConfig, TrainingView, sample_tccpc_batch, sample_tcscc_batch,
                            tccpc_feasible)
from tastr.seeds import stream
from tastr.simulator import GroundTruth

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    association: AssociationParams = field(default_factory=AssociationParams)
    margin: float = 0.3
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    arch: str = "linear"
    d_emb: int = 32
    hidden: int = 64
    steps_s1: int = 2000
    steps_cross: int = 1000
    n_iterations: int = 5
    progressive: bool = True
    weakly_supervised: bool = False
    seed: int = 0
    threads: int = 1

    def validate(self) -> None:
        self.sampler.validate()
        if self.n_iterations < 0:
            raise ConfigError("pipeline.n_iterations", "must be nonnegative")
        for name in ("steps_s1", "steps_cross"):
            if getattr(self, name) < 0:
                raise ConfigError(f"pipeline.{name}", "must be nonnegative")
        if self.margin < 0:
            raise ConfigError("train.margin", "must be nonnegative")
        if not self.lr > 0:
            raise ConfigError("train.lr", "must be positive")
        if self.arch not in EmbeddingModel.ARCHS:
            raise ConfigError("train.arch", f"must be one of {EmbeddingModel.ARCHS}")
        if self.association.k < 1:
            raise ConfigError("association.k", "must be at least 1")
        if not self.association.lambda_ > 0:
            raise ConfigError("association.lambda", "must be positive")

    def optimizer(self, model) -> OptimizerState:
        return OptimizerState.for_model(model, lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.adam_eps)


@dataclass
class IterationRecord:
    iteration: int
    match_counts: dict = field(default_factory=dict)
    num_matches: int = 0
    assoc_precision: float | None = None
    assoc_recall: float | None = None
    metrics: dict = field(default_factory=dict)
    rematch_rank1: float | None = None
    train_loss: float | None = None
    checkpoint: str | None = None
    warning: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def merge_by_identity(dataset: TrackletDataset) -> TrackletDataset:
    """One tracklet per (camera, identity): perfect within-camera tracking.

    The merged tracklet keeps the smallest member id. Unlabeled tracklets pass through.
    """
    groups: dict[tuple[int, int], list[Tracklet]] = {}
    out = []
    for t in dataset.tracklets:
        if t.true_identity is None:
            out.append(t)
        else:
            groups.setdefault((t.camera_id, t.true_identity), []).append(t)
    for (cam, ident), ts in groups.items():
        times = np.concatenate([t.times for t in ts])
        feats = np.concatenate([t.features for t in ts])
        order = np.argsort(times, kind="stable")
        out.append(Tracklet(min(t.tracklet_id for t in ts), cam, times[order], feats[order], ident))
    out.sort(key=lambda t: (t.camera_id, t.start_time, t.tracklet_id))
    return TrackletDataset(tuple(out), d_raw=dataset.d_raw, labeled=dataset.labeled, cameras=dataset.cameras)


def _train(model, cfg, draw, steps):
    state = cfg.optimizer(model)
    losses = []
    for _ in range(steps):
        batch = draw()
        loss, grads = loss_gradient(model, batch, cfg.margin)
        model, state = adam_step(state, model, grads)
        losses.append(loss)
    return model, losses


def train_within_camera(dataset: TrackletDataset, cfg: PipelineConfig, model=None, view=None):
    """Within-camera stage from a random (or given) initial model. Returns ``(model, losses)``.

    In weakly supervised mode the caller passes a dataset merged per (camera,
    identity) and the time-gap constraint is dropped.
    """
    if model is None:
        model = init_model(dataset.d_raw, cfg.d_emb, cfg.arch, cfg.hidden, rng=stream(cfg.seed, "init"))
    if cfg.steps_s1 == 0:
        return model, []
    sampler = cfg.sampler
    if cfg.weakly_supervised:
        sampler = SamplerConfig(sampler.P, sampler.K, None, sampler.max_images)
    if view is None:
        view = TrainingView(dataset, sampler.max_images, stream(cfg.seed, "view"))
    rng = stream(cfg.seed, "s1")
    return _train(model, cfg, lambda: sample_tcscc_batch(view, sampler, rng), cfg.steps_s1)


def train_cross_camera(model, matches: MatchSet, view: TrainingView, cfg: PipelineConfig, rng=None):
    """Fine-tune on camera-pair batches. Returns ``(model, losses, warning)``."""
    if cfg.steps_cross == 0:
        return model, [], None
    if not matches.accepted():
        return model, [], "empty match set; model left unchanged"
    if rng is None:
        rng = stream(cfg.seed, "cross")
    identities = matches.pseudo_identities()
    if not tccpc_feasible(identities, cfg.sampler.P):
        return model, [], f"no camera pair has {cfg.sampler.P} matched pseudo-identities; model left unchanged"
    model, losses = _train(model, cfg, lambda: sample_tccpc_batch(identities, view, cfg.sampler, rng),
                           cfg.steps_cross)
    return model, losses, None


def _tail_mean(losses, n=50):
    return float(np.mean(losses[-n:])) if losses else None


class _Recorder:
    def __init__(self, out_dir):
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.records: list[IterationRecord] = []
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    def checkpoint(self, model, i):
        name = f"model_iter{i}.ckpt"
        if self.out_dir is not None:
            save_checkpoint(model, self.out_dir / name)
        return name

    def matches(self, matches, i):
        if self.out_dir is not None:
            matches.to_csv(self.out_dir / f"matches_iter{i}.csv")

    def cmc(self, report, i):
        if self.out_dir is None or report is None:
            return
        for name in (f"cmc_iter{i}.csv", "cmc.csv"):
            with open(self.out_dir / name, "w", encoding="utf-8") as fh:
                fh.write("rank,accuracy\n")
                for r, acc in enumerate(report.cmc, start=1):
                    fh.write(f"{r},{float(acc)!r}\n")

    def add(self, record):
        self.records.append(record)
        if self.out_dir is not None:
            write_metrics(self.records, self.out_dir / "metrics.json")


def write_metrics(records, path) -> None:
    Path(path).write_text(json.dumps([r.to_dict() for r in records], indent=2) + "\n", encoding="utf-8")


def evaluate_run_model(model, dataset: TrackletDataset, cfg: PipelineConfig):
    """Seeded retrieval report and fragment re-match rank-1, as recorded by a run.

    Returns ``(report, rematch_rank1)``; both are None on unlabeled data.
    """
    if not dataset.labeled:
        return None, None
    protocol = build_protocol(dataset, stream(cfg.seed, "protocol"))
    report = evaluate_model(model, dataset, protocol, cfg.sampler.max_images, stream(cfg.seed, "eval"))
    rematch = fragmentation_rematch_eval(dataset, model, stream(cfg.seed, "rematch"), cfg.sampler.max_images)
    return report, rematch.rank1


def run_progressive(dataset: TrackletDataset, topology: CameraTopology | None, cfg: PipelineConfig,
                    truth: GroundTruth | None = None, out_dir=None):
    """Within-camera training, then association and cross-camera fine-tuning rounds.

    Returns ``(final_model, records)``; record 0 describes the within-camera model.
    Labels are only read for weak supervision and for evaluation.
    """
    cfg.validate()
    if cfg.weakly_supervised:
        if not dataset.labeled:
            raise ConfigError("pipeline.weakly_supervised", "requires a labeled dataset")
        train_ds = merge_by_identity(dataset)
        assoc_truth = GroundTruth.from_dataset(train_ds)
    else:
        train_ds = strip_labels(dataset)
        assoc_truth = truth if truth is not None else (GroundTruth.from_dataset(dataset) if dataset.labeled else None)
    rec = _Recorder(out_dir)
    view = TrainingView(train_ds, cfg.sampler.max_images, stream(cfg.seed, "view"))
    model, losses = train_within_camera(train_ds, cfg, view=view)
    report, rematch = evaluate_run_model(model, dataset, cfg)
    rec.cmc(report, 0)
    rec.add(IterationRecord(0, metrics=report.to_dict() if report else {}, rematch_rank1=rematch,
                            train_loss=_tail_mean(losses), checkpoint=rec.checkpoint(model, 0)))
    log.info("within-camera stage done: %s", rec.records[-1].metrics)

    n_iter = cfg.n_iterations if cfg.progressive else min(1, cfg.n_iterations)
    for i in range(1, n_iter + 1):
        frozen = model.copy()
        matches = associate_all(train_ds, frozen, topology, cfg.association,
                                rng=stream(cfg.seed, f"assoc{i}"), threads=cfg.threads)
        rec.matches(matches, i)
        precision = recall = None
        if assoc_truth is not None:
            precision, recall, _ = association_pr(matches, assoc_truth)
        model, losses, warning = train_cross_camera(frozen, matches, view, cfg, stream(cfg.seed, f"cross{i}"))
        if warning:
            log.warning("iteration %d: %s", i, warning)
        report, rematch = evaluate_run_model(model, dataset, cfg)
        if report is not None:
            report.assoc_precision, report.assoc_recall = precision, recall
        rec.cmc(report, i)
        rec.add(IterationRecord(
            i,
            match_counts={f"{a}-{b}": n for (a, b), n in matches.counts().items()},
            num_matches=matches.num_accepted(),
            assoc_precision=precision,
            assoc_recall=recall,
            metrics=report.to_dict() if report else {},
            rematch_rank1=rematch,
            train_loss=_tail_mean(losses),
            checkpoint=rec.checkpoint(model, i),
            warning=warning,
        ))
        log.info("iteration %d: %d matches, precision=%s, metrics=%s", i, matches.num_accepted(), precision,
                 rec.records[-1].metrics)
    return model, rec.records
