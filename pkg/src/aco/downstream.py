"""Checkpoint evaluation: behaviour cloning, linear probing, embedding structure."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import nets
from . import numcore as nc
from .numcore import ParamSet, Tape, Tensor
from .synthworld import Episode

SUCCESS_THRESHOLD = 0.08
BUCKET_EDGES = (0.45, 0.55)


class FeatureStandardizer:
    """Per-feature standardisation with running statistics and a learned affine.

    Training mode normalises with batch statistics and folds them into the
    running mean/variance (momentum 0.9). Evaluation mode uses the frozen
    running statistics.
    """

    def __init__(self, dim: int, momentum: float = 0.9, eps: float = 1e-5):
        self.dim = dim
        self.momentum = momentum
        self.eps = eps
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.params = ParamSet()
        self.params["std.scale"] = nc.constant((dim,), 1.0)
        self.params["std.shift"] = nc.constant((dim,), 0.0)

    def __call__(self, x, training: bool = False, params=None) -> Tensor:
        ps = self.params if params is None else params
        x = nc.as_tensor(x)
        if training and x.shape[0] > 1:
            m = self.momentum
            self.running_mean = m * self.running_mean + (1 - m) * x.data.mean(axis=0)
            self.running_var = m * self.running_var + (1 - m) * x.data.var(axis=0)
            h = nc.batch_standardize(x, self.eps)
        else:
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            h = nc.row_scale(nc.bias_add(x, Tensor(-self.running_mean)), Tensor(inv))
        return nc.bias_add(nc.row_scale(h, ps["std.scale"]), ps["std.shift"])


@dataclass
class Policy:
    """Encoder + optional standardizer + MLP head d_E -> hidden -> 1, squashed to [0, 1]."""

    encoder: ParamSet
    head: ParamSet
    standardizer: FeatureStandardizer | None = None
    history: list[float] = field(default_factory=list)

    def head_forward(self, feats, training: bool = False) -> Tensor:
        h = feats
        if self.standardizer is not None:
            h = self.standardizer(h, training)
        return nets.squash(nets.mlp_forward(self.head, "head", h, 2))

    def features(self, frames: np.ndarray) -> np.ndarray:
        return nets.encode(self.encoder, frames)

    def predict(self, frames: np.ndarray) -> np.ndarray:
        feats = Tensor(self.features(frames))
        return self.head_forward(feats).data.reshape(-1)

    __call__ = predict


def _check_demos(frames, steering) -> tuple[np.ndarray, np.ndarray]:
    frames = np.asarray(frames, dtype=np.float64)
    y = np.asarray(steering, dtype=np.float64).reshape(-1)
    if len(frames) == 0:
        raise ValueError("empty demonstration subset")
    if len(frames) != len(y):
        raise ValueError("frames and steering differ in length")
    return frames, y


def bc_train(encoder: ParamSet, frames, steering, freeze_encoder: bool = True,
             use_standardizer: bool = False, epochs: int = 100, lr: float = 1e-4,
             weight_decay: float = 1e-4, batch_size: int = 128, hidden: int = 64,
             seed: int = 0) -> Policy:
    """Behaviour cloning with an L1 steering objective.

    ``encoder`` is copied, never modified in place. With ``freeze_encoder``
    the features are computed once and no gradient reaches the encoder.
    """
    frames, y = _check_demos(frames, steering)
    rng = np.random.default_rng([seed, 21])
    enc = ParamSet((k, Tensor(v.data.copy(), requires_grad=not freeze_encoder))
                   for k, v in encoder.items() if k.startswith("enc."))
    embed_dim = enc["enc.fc.b"].shape[0]
    head = nets.mlp_init(rng, [embed_dim, hidden, 1], "head")
    std = FeatureStandardizer(embed_dim) if use_standardizer else None
    policy = Policy(enc, head, std)

    trainable = ParamSet(head)
    if std is not None:
        trainable.update(std.params)
    if not freeze_encoder:
        trainable.update(enc)
    opt = nc.Adam(trainable, lr=lr, weight_decay=weight_decay)
    feats = nets.encode(enc, frames) if freeze_encoder else None

    def full_mae() -> float:
        f = feats if feats is not None else nets.encode(enc, frames)
        return float(np.mean(np.abs(policy.head_forward(Tensor(f)).data.reshape(-1) - y)))

    policy.history.append(full_mae())
    for _ in range(epochs):
        perm = rng.permutation(len(y))
        for s in range(0, len(y), batch_size):
            idx = perm[s:s + batch_size]
            with Tape() as tape:
                f = Tensor(feats[idx]) if feats is not None else nets.encoder_forward(enc, frames[idx])
                pred = policy.head_forward(f, training=True)
                loss = nc.mean(nc.abs_(nc.sub(pred, Tensor(y[idx].reshape(-1, 1)))))
            opt.step(tape.gradient(loss, trainable))
        policy.history.append(full_mae())
    return policy


@dataclass
class EvalReport:
    mae: float
    success_rate: float
    episode_mae: list[float]
    threshold: float = SUCCESS_THRESHOLD
    fraction: float | None = None
    seed: int | None = None

    def as_dict(self) -> dict:
        return {"mae": self.mae, "success_rate": self.success_rate,
                "episodes": len(self.episode_mae), "threshold": self.threshold}


def bc_eval(policy: Callable[[np.ndarray], np.ndarray], episodes: list[Episode],
            threshold: float = SUCCESS_THRESHOLD) -> EvalReport:
    """Per-frame steering MAE and the episode-level tracking-budget success rate.

    An episode succeeds when its mean absolute steering error is below
    ``threshold``.
    """
    if not episodes:
        raise ValueError("no test episodes")
    errs, ep_mae = [], []
    for ep in episodes:
        e = np.abs(np.asarray(policy(ep.frames)).reshape(-1) - ep.steering)
        errs.append(e)
        ep_mae.append(float(e.mean()))
    succ = float(np.mean([m < threshold for m in ep_mae]))
    return EvalReport(float(np.concatenate(errs).mean()), succ, ep_mae, threshold)


# --- linear probe ------------------------------------------------------------

@dataclass
class ProbeResult:
    mae: float
    train_mae: float
    weights: np.ndarray
    bias: float


def linear_probe_features(train_x, train_y, test_x, test_y, epochs: int = 200, lr: float = 0.01,
                          seed: int = 0) -> ProbeResult:
    """One linear layer on fixed features, L1-trained from a least-squares start."""
    xtr = np.asarray(train_x, dtype=np.float64)
    ytr = np.asarray(train_y, dtype=np.float64).reshape(-1)
    xte = np.asarray(test_x, dtype=np.float64)
    yte = np.asarray(test_y, dtype=np.float64).reshape(-1)
    if len(np.unique(ytr)) < 2:
        raise ValueError("linear probe needs at least 2 distinct labels")
    mu = xtr.mean(axis=0)
    sd = xtr.std(axis=0) + 1e-8
    ztr, zte = (xtr - mu) / sd, (xte - mu) / sd
    design = np.hstack([ztr, np.ones((len(ztr), 1))])
    sol = np.linalg.lstsq(design, ytr, rcond=None)[0]
    ps = ParamSet()
    ps["probe.w"] = Tensor(sol[:-1].reshape(-1, 1).copy(), requires_grad=True)
    ps["probe.b"] = Tensor(sol[-1:].copy(), requires_grad=True)
    opt = nc.Adam(ps, lr=lr)
    rng = np.random.default_rng([seed, 31])
    batch = 256
    for ep in range(epochs):
        perm = rng.permutation(len(ytr))
        for s in range(0, len(ytr), batch):
            idx = perm[s:s + batch]
            with Tape() as tape:
                pred = nc.bias_add(nc.matmul(Tensor(ztr[idx]), ps["probe.w"]), ps["probe.b"])
                loss = nc.mean(nc.abs_(nc.sub(pred, Tensor(ytr[idx].reshape(-1, 1)))))
            opt.step(tape.gradient(loss, ps), lr=nc.cosine_lr(lr, ep, epochs))
    w, b = ps["probe.w"].data.reshape(-1), float(ps["probe.b"].data[0])
    return ProbeResult(float(np.mean(np.abs(zte @ w + b - yte))),
                       float(np.mean(np.abs(ztr @ w + b - ytr))), w / sd, b - float(mu / sd @ w))


def linear_probe(encoder: ParamSet, train_frames, train_y, test_frames, test_y,
                 epochs: int = 200, lr: float = 0.01, seed: int = 0) -> ProbeResult:
    """Linear probe of steering on frozen encoder features."""
    return linear_probe_features(nets.encode(encoder, np.asarray(train_frames)), train_y,
                                 nets.encode(encoder, np.asarray(test_frames)), test_y,
                                 epochs, lr, seed)


# --- embedding structure -------------------------------------------------------

def action_buckets(actions) -> np.ndarray:
    """0 = left (a < 0.45), 1 = straight, 2 = right (a > 0.55)."""
    a = np.asarray(actions, dtype=np.float64)
    lo, hi = BUCKET_EDGES
    return np.where(a < lo, 0, np.where(a > hi, 2, 1))


def nn_action_agreement(features, actions, k: int = 5) -> float:
    """Mean fraction of each frame's k nearest neighbours (Euclidean, self
    excluded) that share its steering bucket."""
    x = np.asarray(features, dtype=np.float64)
    n = len(x)
    if n < k + 1:
        raise ValueError(f"need at least {k + 1} frames, got {n}")
    b = action_buckets(actions)
    sq = (x * x).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    np.fill_diagonal(d, np.inf)
    nn = np.argsort(d, axis=1, kind="stable")[:, :k]
    return float((b[nn] == b[:, None]).mean())


def encoder_nn_agreement(encoder: ParamSet, frames, actions, k: int = 5) -> float:
    return nn_action_agreement(nets.encode(encoder, np.asarray(frames)), actions, k)


def balanced_eval_set(frames, actions, per_bucket: int, rng: np.random.Generator):
    """Indices of ``per_bucket`` frames from each of the three steering buckets."""
    b = action_buckets(actions)
    picks = []
    for c in range(3):
        pool = np.flatnonzero(b == c)
        if len(pool) < per_bucket:
            raise ValueError(f"bucket {c} has only {len(pool)} frames")
        picks.append(np.sort(rng.choice(pool, per_bucket, replace=False)))
    return np.concatenate(picks)


@dataclass
class PCAResult:
    coords: np.ndarray
    components: np.ndarray  # (dims, D)
    eigenvalues: np.ndarray  # all, descending
    mean: np.ndarray


def pca(embeddings, dims: int = 2) -> PCAResult:
    x = np.asarray(embeddings, dtype=np.float64)
    if len(x) < dims:
        raise ValueError(f"need at least {dims} samples")
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / len(x)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    comps = vecs[:, :dims].T.copy()
    for c in comps:
        if c[np.argmax(np.abs(c))] < 0:
            c *= -1.0
    return PCAResult(xc @ comps.T, comps, np.clip(vals, 0.0, None), mu)


def pca_project(embeddings, dims: int = 2) -> np.ndarray:
    """Coordinates on the top ``dims`` principal components."""
    return pca(embeddings, dims).coords
