"""Experiment configuration: TOML in, TOML out, one root seed."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from tastr.association import AssociationParams
from tastr.errors import ConfigError
from tastr.pipeline import PipelineConfig
from tastr.sampling import SamplerConfig
from tastr.seeds import stream_seed
from tastr.simulator import SimConfig

# named RNG streams drawn from the root seed
STREAMS = ("sim", "init", "view", "s1", "protocol", "eval", "rematch", "assoc<N>", "cross<N>")

_TRAIN_KEYS = ("margin", "lr", "beta1", "beta2", "adam_eps", "arch", "d_emb", "hidden")
_PIPE_KEYS = ("steps_s1", "steps_cross", "n_iterations", "progressive", "weakly_supervised", "threads")
_ASSOC_KEYS = {"lambda": "lambda_", "k": "k", "use_str": "use_str", "use_kmeans": "use_kmeans",
               "max_images": "max_images"}


@dataclass
class ExperimentConfig:
    seed: int = 0
    sim: SimConfig = field(default_factory=SimConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    def __post_init__(self):
        self.sync_seed()

    def sync_seed(self) -> None:
        self.sim.seed = self.seed
        self.pipeline.seed = self.seed

    def validate(self) -> None:
        self.sim.validate()
        self.pipeline.validate()

    def to_dict(self) -> dict:
        p = self.pipeline
        sim = self.sim.to_dict()
        sim.pop("seed")
        return {
            "seed": self.seed,
            "sim": sim,
            "sampler": {"P": p.sampler.P, "K": p.sampler.K, "time_gap_T": p.sampler.time_gap_T,
                        "max_images": p.sampler.max_images},
            "train": {k: getattr(p, k) for k in _TRAIN_KEYS},
            "pipeline": {k: getattr(p, k) for k in _PIPE_KEYS},
            "association": {k: getattr(p.association, attr) for k, attr in _ASSOC_KEYS.items()},
            "str": {"squared_sigma": p.association.squared_sigma},
        }

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def seed_registry(self) -> dict:
        return {name: stream_seed(self.seed, name) for name in STREAMS if "<" not in name}


def _take(section: dict, name: str, keys) -> dict:
    unknown = set(section) - set(keys)
    if unknown:
        raise ConfigError(f"{name}.{sorted(unknown)[0]}", "unknown key")
    return section


def _typed(target, key, value, where):
    default = getattr(target, key)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(where, f"expected a boolean, got {value!r}")
    elif isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(where, f"expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(where, f"expected a number, got {value!r}")
        value = float(value)
    setattr(target, key, value)


def from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    known = {"seed", "sim", "sampler", "train", "pipeline", "association", "str"}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown section")
    seed = d.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed", f"expected a nonnegative integer, got {seed!r}")
    sim_d = dict(d.get("sim", {}))
    sim_d.pop("seed", None)
    try:
        sim = SimConfig.from_dict({**SimConfig().to_dict(), **sim_d, "seed": seed})
    except TypeError as exc:
        raise ConfigError("sim", str(exc)) from None

    sampler = SamplerConfig()
    for k, v in _take(d.get("sampler", {}), "sampler", ("P", "K", "time_gap_T", "max_images")).items():
        _typed(sampler, k, v, f"sampler.{k}")
    assoc = AssociationParams()
    for k, v in _take(d.get("association", {}), "association", _ASSOC_KEYS).items():
        _typed(assoc, _ASSOC_KEYS[k], v, f"association.{k}")
    for k, v in _take(d.get("str", {}), "str", ("squared_sigma",)).items():
        _typed(assoc, k, v, f"str.{k}")
    pipe = PipelineConfig(sampler=sampler, association=assoc, seed=seed)
    for k, v in _take(d.get("train", {}), "train", _TRAIN_KEYS).items():
        _typed(pipe, k, v, f"train.{k}")
    for k, v in _take(d.get("pipeline", {}), "pipeline", _PIPE_KEYS).items():
        _typed(pipe, k, v, f"pipeline.{k}")
    cfg = ExperimentConfig(seed=seed, sim=sim, pipeline=pipe)
    cfg.validate()
    return cfg


def load_config(path=None) -> ExperimentConfig:
    """Read a TOML experiment config; missing keys take their defaults."""
    if path is None:
        return ExperimentConfig()
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError("<file>", f"invalid TOML: {exc}") from None
    return from_dict(raw)
