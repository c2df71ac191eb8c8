"""Embedding model, batch-hard triplet loss with hand-derived gradients, and Adam."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tastr.errors import ContractError, DimensionError

# floor under the squared distance when dividing by a distance in the gradient
DIST_EPS = 1e-12


class EmbeddingModel:
    """Linear map or one-hidden-layer tanh perceptron from raw features to embeddings.

    Parameters live in ``params`` (name -> float64 array). Linear: ``W`` of shape
    (d_emb, d_raw). MLP: ``W1`` (hidden, d_raw), ``b1``, ``W2`` (d_emb, hidden), ``b2``.
    """

    ARCHS = ("linear", "mlp")

    def __init__(self, arch: str, params: dict[str, np.ndarray]):
        if arch not in self.ARCHS:
            raise ValueError(f"unknown architecture {arch!r}")
        self.arch = arch
        self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        expected = ("W",) if arch == "linear" else ("W1", "b1", "W2", "b2")
        if tuple(sorted(self.params)) != tuple(sorted(expected)):
            raise ValueError(f"{arch} model needs parameters {expected}, got {tuple(self.params)}")
        for name, arr in self.params.items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"parameter {name} has non-finite entries")

    @property
    def d_raw(self) -> int:
        return self.params["W" if self.arch == "linear" else "W1"].shape[1]

    @property
    def d_emb(self) -> int:
        return self.params["W" if self.arch == "linear" else "W2"].shape[0]

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(self.arch, {k: v.copy() for k, v in self.params.items()})

    def __call__(self, x):
        return embed(self, x)

    def __eq__(self, other):
        if not isinstance(other, EmbeddingModel):
            return NotImplemented
        return self.arch == other.arch and self.params.keys() == other.params.keys() and all(
            np.array_equal(self.params[k], other.params[k]) for k in self.params)

    __hash__ = None

    def __repr__(self):
        return f"EmbeddingModel(arch={self.arch!r}, d_raw={self.d_raw}, d_emb={self.d_emb})"


def init_model(d_raw, d_emb=32, arch="linear", hidden=64, rng=None, init="random"):
    """Build a model. ``init`` is "random" (scaled Gaussian), "identity" or "zeros"."""
    if init == "identity":
        if arch != "linear":
            raise ValueError("identity init is only defined for the linear architecture")
        return EmbeddingModel("linear", {"W": np.eye(d_emb, d_raw)})
    if init == "zeros":
        if arch == "linear":
            return EmbeddingModel("linear", {"W": np.zeros((d_emb, d_raw))})
        return EmbeddingModel("mlp", {"W1": np.zeros((hidden, d_raw)), "b1": np.zeros(hidden),
                                      "W2": np.zeros((d_emb, hidden)), "b2": np.zeros(d_emb)})
    if init != "random":
        raise ValueError(f"unknown init {init!r}")
    if rng is None:
        rng = np.random.default_rng(0)
    if arch == "linear":
        return EmbeddingModel("linear", {"W": rng.standard_normal((d_emb, d_raw)) / np.sqrt(d_raw)})
    return EmbeddingModel("mlp", {
        "W1": rng.standard_normal((hidden, d_raw)) / np.sqrt(d_raw),
        "b1": np.zeros(hidden),
        "W2": rng.standard_normal((d_emb, hidden)) / np.sqrt(hidden),
        "b2": np.zeros(d_emb),
    })


def _forward(model, X):
    p = model.params
    if model.arch == "linear":
        return X @ p["W"].T, None
    H = np.tanh(X @ p["W1"].T + p["b1"])
    return H @ p["W2"].T + p["b2"], H


def embed(model: EmbeddingModel, x) -> np.ndarray:
    """Embed one raw vector (d_raw,) or a stack of them (n, d_raw)."""
    X = np.asarray(x, dtype=np.float64)
    if X.shape[-1] != model.d_raw or X.ndim not in (1, 2):
        raise DimensionError(f"expected input with last dimension {model.d_raw}, got shape {X.shape}")
    single = X.ndim == 1
    E, _ = _forward(model, X.reshape(1, -1) if single else X)
    return E[0] if single else E


def tracklet_feature(model, tracklet, max_images=60, rng=None) -> np.ndarray:
    """Mean embedding over at most ``max_images`` frames sampled without replacement."""
    if max_images < 1:
        raise ContractError("max_images must be at least 1")
    n = tracklet.num_frames
    if n > max_images:
        if rng is None:
            raise ContractError("rng required when the tracklet exceeds max_images")
        idx = np.sort(rng.choice(n, size=max_images, replace=False))
        X = tracklet.features[idx]
    else:
        X = tracklet.features
    return embed(model, X).mean(axis=0)


@dataclass
class TripletBatch:
    """P pseudo-identities times K raw feature rows, labels 0..P-1."""

    items: np.ndarray
    labels: np.ndarray
    P: int
    K: int
    provenance: str = ""
    members: list = field(default_factory=list)

    def __post_init__(self):
        self.items = np.asarray(self.items, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.items.shape[0] != self.P * self.K or len(self.labels) != self.P * self.K:
            raise ContractError(f"batch must hold P*K={self.P * self.K} items, got {self.items.shape[0]}")
        uniq, counts = np.unique(self.labels, return_counts=True)
        if len(uniq) != self.P or not np.all(counts == self.K):
            raise ContractError("batch needs exactly P distinct labels with K items each")


def pairwise_distances(E: np.ndarray) -> np.ndarray:
    diff = E[:, None, :] - E[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def _hardest(E, labels):
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    if np.all(same):
        raise ContractError("batch hard loss needs at least two pseudo-identities (P >= 2)")
    D = pairwise_distances(E)
    # argmax/argmin return the first index on ties: lowest item index wins
    pos = np.argmax(np.where(same, D, -np.inf), axis=1)
    neg = np.argmin(np.where(same, np.inf, D), axis=1)
    rows = np.arange(len(E))
    return D, pos, neg, D[rows, pos], D[rows, neg]


def batch_hard_triplet_loss(embeddings, labels, margin=0.3):
    """Sum over anchors of [margin + hardest positive - hardest negative]_+.

    Returns ``(loss, active)`` where ``active`` flags anchors whose hinge is on.
    A hinge exactly at zero counts as active (subgradient 1).
    """
    if margin < 0:
        raise ContractError("margin must be nonnegative")
    E = np.asarray(embeddings, dtype=np.float64)
    _, _, _, dpos, dneg = _hardest(E, labels)
    z = margin + dpos - dneg
    active = z >= 0
    return float(np.sum(np.where(active, z, 0.0))), active


def embedding_gradient(embeddings, labels, margin=0.3):
    """Loss and its gradient with respect to each embedding row."""
    E = np.asarray(embeddings, dtype=np.float64)
    _, pos, neg, dpos, dneg = _hardest(E, labels)
    z = margin + dpos - dneg
    active = z >= 0
    loss = float(np.sum(np.where(active, z, 0.0)))
    G = np.zeros_like(E)
    a = np.flatnonzero(active)
    if len(a):
        u_pos = (E[a] - E[pos[a]]) / np.sqrt(np.maximum(dpos[a, None] ** 2, DIST_EPS))
        u_neg = (E[a] - E[neg[a]]) / np.sqrt(np.maximum(dneg[a, None] ** 2, DIST_EPS))
        np.add.at(G, a, u_pos - u_neg)
        np.add.at(G, pos[a], -u_pos)
        np.add.at(G, neg[a], u_neg)
    return loss, G


def loss_gradient(model: EmbeddingModel, batch: TripletBatch, margin=0.3):
    """Return ``(loss, grads)`` with ``grads`` keyed like ``model.params``."""
    X = batch.items
    if X.shape[1] != model.d_raw:
        raise DimensionError(f"batch items have dimension {X.shape[1]}, model expects {model.d_raw}")
    E, H = _forward(model, X)
    loss, G = embedding_gradient(E, batch.labels, margin)
    p = model.params
    if model.arch == "linear":
        return loss, {"W": G.T @ X}
    dZ = (G @ p["W2"]) * (1.0 - H ** 2)
    return loss, {"W2": G.T @ H, "b2": G.sum(axis=0), "W1": dZ.T @ X, "b1": dZ.sum(axis=0)}


@dataclass
class OptimizerState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_model(cls, model, **kw) -> "OptimizerState":
        st = cls(**kw)
        st.m = {k: np.zeros_like(a) for k, a in model.params.items()}
        st.v = {k: np.zeros_like(a) for k, a in model.params.items()}
        return st


def adam_step(state: OptimizerState, model: EmbeddingModel, grads: dict):
    """One bias-corrected Adam update. Returns ``(new_model, new_state)``; inputs are not mutated."""
    if grads.keys() != model.params.keys():
        raise DimensionError(f"gradient keys {sorted(grads)} do not match model {sorted(model.params)}")
    t = state.step + 1
    m, v, params = {}, {}, {}
    for k, w in model.params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        m0 = state.m.get(k, np.zeros_like(w))
        v0 = state.v.get(k, np.zeros_like(w))
        if g.shape != w.shape or m0.shape != w.shape or v0.shape != w.shape:
            raise DimensionError(f"shape mismatch for {k}: weight {w.shape}, gradient {g.shape}")
        m[k] = state.beta1 * m0 + (1 - state.beta1) * g
        v[k] = state.beta2 * v0 + (1 - state.beta2) * g * g
        m_hat = m[k] / (1 - state.beta1 ** t)
        v_hat = v[k] / (1 - state.beta2 ** t)
        params[k] = w - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = OptimizerState(state.lr, state.beta1, state.beta2, state.eps, t, m, v)
    return EmbeddingModel(model.arch, params), new_state


def save_checkpoint(model: EmbeddingModel, path) -> None:
    """JSON checkpoint: architecture tag, dimensions, row-major weight arrays."""
    obj = {
        "format": "tastr-ckpt/1",
        "arch": model.arch,
        "d_raw": model.d_raw,
        "d_emb": model.d_emb,
        "params": {k: {"shape": list(v.shape), "data": v.ravel(order="C").tolist()}
                   for k, v in sorted(model.params.items())},
    }
    Path(path).write_text(json.dumps(obj, separators=(",", ":")) + "\n", encoding="utf-8")


def load_checkpoint(path) -> EmbeddingModel:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    params = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in obj["params"].items()}
    return EmbeddingModel(obj["arch"], params)
