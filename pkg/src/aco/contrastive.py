"""Key dictionary and the instance/action contrastive losses.

Both losses take the printed form

    L = -log( sum_{P} exp(q.k / tau) / sum_{N} exp(q.k / tau) )

with positives only in the numerator and negatives only in the denominator
(``loss_form="as_written"``). ``loss_form="infonce"`` puts every key in the
denominator instead.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import Tensor

log = logging.getLogger(__name__)


@dataclass
class KeyBatch:
    z_ins: np.ndarray  # (n, d)
    z_act: np.ndarray  # (n, d)
    actions: np.ndarray  # (n,)
    image_ids: np.ndarray  # (n,)

    def __len__(self) -> int:
        return len(self.actions)

    @classmethod
    def empty(cls, dim: int) -> "KeyBatch":
        return cls(np.zeros((0, dim)), np.zeros((0, dim)), np.zeros(0), np.zeros(0, dtype=np.int64))

    def concat(self, other: "KeyBatch") -> "KeyBatch":
        return KeyBatch(
            np.concatenate([self.z_ins, other.z_ins]),
            np.concatenate([self.z_act, other.z_act]),
            np.concatenate([self.actions, other.actions]),
            np.concatenate([self.image_ids, other.image_ids]),
        )


class KeyDictionary:
    """Bounded FIFO of key records; the oldest entries are evicted first."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self._z_ins = np.zeros((capacity, dim))
        self._z_act = np.zeros((capacity, dim))
        self._act = np.zeros(capacity)
        self._ids = np.zeros(capacity, dtype=np.int64)
        self._start = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def _order(self) -> np.ndarray:
        return (self._start + np.arange(self._size)) % self.capacity

    def push(self, batch: KeyBatch) -> None:
        n = len(batch)
        if n == 0:
            return
        if n > self.capacity:
            batch = KeyBatch(batch.z_ins[-self.capacity:], batch.z_act[-self.capacity:],
                             batch.actions[-self.capacity:], batch.image_ids[-self.capacity:])
            n = self.capacity
        slots = (self._start + self._size + np.arange(n)) % self.capacity
        self._z_ins[slots] = batch.z_ins
        self._z_act[slots] = batch.z_act
        self._act[slots] = batch.actions
        self._ids[slots] = batch.image_ids
        overflow = max(0, self._size + n - self.capacity)
        self._start = (self._start + overflow) % self.capacity
        self._size = min(self.capacity, self._size + n)

    def entries(self) -> KeyBatch:
        """All stored records, oldest first."""
        o = self._order()
        return KeyBatch(self._z_ins[o], self._z_act[o], self._act[o], self._ids[o])

    def sample(self, n: int, rng: np.random.Generator) -> KeyBatch:
        """min(n, size) records drawn uniformly without replacement."""
        if self._size == 0:
            raise ValueError("cannot sample from an empty key dictionary")
        k = min(n, self._size)
        pick = self._order()[rng.choice(self._size, size=k, replace=False)]
        return KeyBatch(self._z_ins[pick], self._z_act[pick], self._act[pick], self._ids[pick])


def dict_push(dictionary: KeyDictionary, entries: KeyBatch) -> None:
    dictionary.push(entries)


def dict_sample(dictionary: KeyDictionary, n: int, rng: np.random.Generator) -> KeyBatch:
    return dictionary.sample(n, rng)


def acp_positive_set(a_q: float, key_actions, eps: float):
    """Boolean masks (positive, negative): keys with |a - a_q| < eps are positive."""
    key_actions = np.asarray(key_actions, dtype=np.float64)
    pos = np.abs(key_actions - a_q) < eps
    return pos, ~pos


def _contrast(zq: Tensor, keys: np.ndarray, pos: np.ndarray, tau: float, loss_form: str):
    """Per-query loss rows for the masked contrastive form, skipping queries
    with no positive or (as written) no negative. Returns (loss, kept)."""
    neg = ~pos
    has_pos = pos.any(axis=1)
    has_neg = neg.any(axis=1) if loss_form == "as_written" else np.ones(len(pos), dtype=bool)
    keep = np.flatnonzero(has_pos & has_neg)
    if len(keep) == 0:
        return None, keep
    logits = nc.scale(nc.matmul(zq, Tensor(keys.T)), 1.0 / tau)
    if len(keep) < len(pos):
        logits = nc.take_rows(logits, keep)
        pos = pos[keep]
        neg = neg[keep]
    num = nc.log_sum_exp(logits, axis=1, mask=pos)
    if loss_form == "as_written":
        den = nc.log_sum_exp(logits, axis=1, mask=neg)
    elif loss_form == "infonce":
        den = nc.log_sum_exp(logits, axis=1)
    else:
        raise ValueError(f"unknown loss_form {loss_form!r}")
    return nc.mean(nc.sub(den, num)), keep


def icp_loss(zq, current_keys: np.ndarray, sampled_keys: np.ndarray | None, tau: float,
             loss_form: str = "as_written") -> Tensor:
    """Instance contrastive loss.

    Row i of ``current_keys`` is the key view of query i's image and is its
    only positive; every other current key and every sampled key is a
    negative, so |P| = 1 and |N| = len(sampled) + B - 1.
    """
    zq = nc.as_tensor(zq)
    B = zq.shape[0]
    cur = np.asarray(current_keys, dtype=np.float64)
    if cur.shape[0] != B:
        raise ValueError(f"icp_loss: {B} queries but {cur.shape[0]} same-image keys")
    samp = np.zeros((0, cur.shape[1])) if sampled_keys is None else np.asarray(sampled_keys, dtype=np.float64)
    keys = np.concatenate([cur, samp])
    pos = np.zeros((B, len(keys)), dtype=bool)
    pos[np.arange(B), np.arange(B)] = True
    loss, _ = _contrast(zq, keys, pos, tau, loss_form)
    if loss is None:
        log.warning("icp_loss: no query has a negative key")
        return Tensor(0.0)
    return loss


def acp_loss(zq, keys: np.ndarray, key_actions, query_actions, eps: float, tau: float,
             loss_form: str = "as_written") -> tuple[Tensor, int]:
    """Action contrastive loss. Returns (loss, skipped) where skipped counts
    queries with an empty positive or negative set; those are left out of the
    mean. With nothing left the loss is 0."""
    zq = nc.as_tensor(zq)
    key_actions = np.asarray(key_actions, dtype=np.float64)
    query_actions = np.asarray(query_actions, dtype=np.float64)
    pos = np.abs(key_actions[None, :] - query_actions[:, None]) < eps
    loss, keep = _contrast(zq, np.asarray(keys, dtype=np.float64), pos, tau, loss_form)
    skipped = len(query_actions) - len(keep)
    if loss is None:
        log.warning("acp_loss: all %d queries degenerate, loss set to 0", skipped)
        return Tensor(0.0), skipped
    return loss, skipped


def total_loss(l_ins, l_act, lambda_ins: float, lambda_act: float) -> Tensor:
    return nc.add(nc.scale(l_ins, lambda_ins), nc.scale(l_act, lambda_act))
