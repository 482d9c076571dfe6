"""Block-matching optical flow and the inverse-dynamics steering predictor."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nets
from . import numcore as nc
from .numcore import ParamSet, Tape, Tensor
from .synthworld import PSEUDO, ActionLabel, Episode


def _candidates(radius: int) -> list[tuple[int, int]]:
    cands = [(dx, dy) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    # tie-break order: smallest |dx|+|dy|, then smallest dy, then smallest dx
    cands.sort(key=lambda c: (abs(c[0]) + abs(c[1]), c[1], c[0]))
    return cands


def block_match_flow_batch(frames_t: np.ndarray, frames_t1: np.ndarray, block: int = 4,
                           search_radius: int = 4, chunk: int = 256) -> np.ndarray:
    """Flow for a batch of frame pairs, (N, H, W, C) -> (N, H/b, W/b, 2) as (dx, dy).

    For every block of frame_t the displacement (dx, dy) minimising the sum
    of absolute differences against frame_t1 is reported. Candidate windows
    that leave the frame are discarded.
    """
    a = np.asarray(frames_t, dtype=np.float64)
    b = np.asarray(frames_t1, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        return block_match_flow_batch(a[None], b[None], block, search_radius)[0]
    n, H, W, C = a.shape
    if H % block or W % block:
        raise ValueError(f"frame size {H}x{W} not divisible by block {block}")
    r = search_radius
    cands = _candidates(r)
    out = np.empty((n, H // block, W // block, 2))
    for s in range(0, n, chunk):
        at, bt = a[s:s + chunk], b[s:s + chunk]
        m = len(at)
        bp = np.full((m, H + 2 * r, W + 2 * r, C), np.nan)
        bp[:, r:r + H, r:r + W] = bt
        sad = np.empty((len(cands), m, H // block, W // block))
        for k, (dx, dy) in enumerate(cands):
            shifted = bp[:, r + dy:r + dy + H, r + dx:r + dx + W]
            d = np.abs(at - shifted).reshape(m, H // block, block, W // block, block, C)
            sad[k] = d.sum(axis=(2, 4, 5))
        sad[np.isnan(sad)] = np.inf
        best = np.argmin(sad, axis=0)
        cand_arr = np.asarray(cands, dtype=np.float64)
        out[s:s + m] = cand_arr[best]
    return out


def block_match_flow(frame_t: np.ndarray, frame_t1: np.ndarray, block: int = 4,
                     search_radius: int = 4) -> np.ndarray:
    """Flow field (H/b, W/b, 2) between two (H, W, C) frames."""
    if np.shape(frame_t) != np.shape(frame_t1):
        raise ValueError(f"frame shapes differ: {np.shape(frame_t)} vs {np.shape(frame_t1)}")
    return block_match_flow_batch(np.asarray(frame_t)[None], np.asarray(frame_t1)[None],
                                  block, search_radius)[0]


def episode_pairs(episodes: list[Episode], mode: str, block: int, search_radius: int):
    """Inverse-model inputs and targets from consecutive frame pairs.

    Returns (inputs, targets, owner) where owner[i] = (episode index, t).
    """
    xs, ys, owner = [], [], []
    for ei, ep in enumerate(episodes):
        xs.append(pair_features(ep.frames, mode, block, search_radius))
        ys.append(ep.steering[:-1])
        owner.extend((ei, t) for t in range(len(ep) - 1))
    return np.concatenate(xs), np.concatenate(ys), owner


def pair_features(frames: np.ndarray, mode: str, block: int, search_radius: int) -> np.ndarray:
    if len(frames) < 2:
        raise ValueError("need at least 2 frames")
    if mode == "flow":
        flow = block_match_flow_batch(frames[:-1], frames[1:], block, search_radius)
        return flow.reshape(len(flow), -1) / search_radius
    if mode == "frames":
        pair = np.concatenate([frames[:-1], frames[1:]], axis=-1)
        return pair.reshape(len(pair), -1) - 0.5
    raise ValueError(f"unknown inverse mode {mode!r}")


@dataclass
class InverseModel:
    params: ParamSet
    mode: str
    in_dim: int
    hidden: int = 64
    block: int = 4
    search_radius: int = 4
    history: list[float] = field(default_factory=list)

    def forward(self, x) -> Tensor:
        return nets.squash(nets.mlp_forward(self.params, "inv", x, 3))

    def predict(self, x: np.ndarray) -> np.ndarray:
        frozen = {k: Tensor(v.data) for k, v in self.params.items()}
        out = nets.squash(nets.mlp_forward(frozen, "inv", x, 3))
        return out.data.reshape(-1)


def make_inverse_model(in_dim: int, mode: str, rng, hidden: int = 64, block: int = 4,
                       search_radius: int = 4) -> InverseModel:
    ps = nets.mlp_init(rng, [in_dim, hidden, hidden, 1], "inv")
    return InverseModel(ps, mode, in_dim, hidden, block, search_radius)


def l1_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    return nc.mean(nc.abs_(nc.sub(pred, Tensor(np.asarray(target).reshape(pred.shape)))))


def train_inverse(inputs: np.ndarray, targets: np.ndarray, mode: str = "flow", epochs: int = 50,
                  lr: float = 0.0003, weight_decay: float = 0.0001, batch_size: int = 32,
                  hidden: int = 64, seed: int = 0, block: int = 4, search_radius: int = 4,
                  optimizer: str = "adam") -> InverseModel:
    """Fit the inverse predictor with an L1 objective.

    ``history`` holds the full-dataset training L1 before training and after
    every epoch.
    """
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if len(x) == 0:
        raise ValueError("empty inverse-model dataset")
    if np.any((y < 0) | (y > 1)):
        raise ValueError("actions must lie in [0, 1]")
    rng = np.random.default_rng([seed, 11])
    model = make_inverse_model(x.shape[1], mode, rng, hidden, block, search_radius)
    opt = _optimizer(optimizer, model.params, lr, weight_decay)
    model.history.append(float(np.mean(np.abs(model.predict(x) - y))))
    for _ in range(epochs):
        perm = rng.permutation(len(x))
        for s in range(0, len(x), batch_size):
            idx = perm[s:s + batch_size]
            with Tape() as tape:
                loss = l1_loss(model.forward(x[idx]), y[idx])
            opt.step(tape.gradient(loss, model.params))
        model.history.append(float(np.mean(np.abs(model.predict(x) - y))))
    return model


def _optimizer(kind: str, params, lr: float, wd: float):
    if kind == "adam":
        return nc.Adam(params, lr=lr, weight_decay=wd)
    if kind == "sgd":
        return nc.SGD(params, lr=lr, momentum=0.9, weight_decay=wd)
    raise ValueError(f"unknown optimizer {kind!r}")


def eval_inverse(model: InverseModel, inputs: np.ndarray, targets: np.ndarray) -> float:
    """Mean absolute steering error."""
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if len(y) == 0:
        raise ValueError("empty test set")
    return float(np.mean(np.abs(model.predict(inputs) - y)))


def pseudo_label_array(frames: np.ndarray, model: InverseModel) -> np.ndarray:
    """Per-frame steering estimate; frame t is labelled from (t, t+1) and the
    last frame repeats the penultimate label."""
    if len(frames) < 2:
        raise ValueError("pseudo-labelling needs at least 2 frames")
    feats = pair_features(frames, model.mode, model.block, model.search_radius)
    pred = model.predict(feats)
    return np.append(pred, pred[-1])


def pseudo_label(frames, model: InverseModel) -> list[ActionLabel]:
    arr = frames.frames if isinstance(frames, Episode) else np.asarray(frames)
    return [ActionLabel(float(a), PSEUDO) for a in pseudo_label_array(arr, model)]


def label_episodes(episodes: list[Episode], model: InverseModel) -> list[Episode]:
    """Copies of ``episodes`` whose steering is replaced by frozen pseudo labels."""
    return [Episode(ep.episode_id, ep.frames, pseudo_label_array(ep.frames, model), ep.spec, PSEUDO)
            for ep in episodes]
