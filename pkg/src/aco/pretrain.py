"""Dual-space momentum contrastive pretraining and its baselines.

Modes:
    aco          instance + action contrast (lambda_ins, lambda_act from config)
    icp_only     instance contrast only (lambda_act = 0)
    acp_only     action contrast only (lambda_ins = 0)
    autoencoder  encoder + mirrored decoder, mean-squared reconstruction
    none         Kaiming-initialised weights, no training
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import nets
from . import numcore as nc
from .augment import augment_batch
from .config import Config, ConfigError
from .contrastive import KeyBatch, KeyDictionary, acp_loss, icp_loss, total_loss
from .numcore import ParamSet, Tape, Tensor

MODES = ("aco", "icp_only", "acp_only", "autoencoder", "none")
CONTRASTIVE_MODES = ("aco", "icp_only", "acp_only")

Emit = Callable[[int, str, float], None]


@dataclass
class DualProjectorNet:
    """Query network (enc, gins, gact) plus its momentum twin under the same names."""

    query: ParamSet
    key: ParamSet

    @classmethod
    def init(cls, rng: np.random.Generator, cfg: Config) -> "DualProjectorNet":
        q = nets.encoder_init(rng, cfg.embed_dim, cfg.height, cfg.width)
        q.update(nets.mlp_init(rng, [cfg.embed_dim, cfg.proj_hidden, cfg.proj_dim], "gins"))
        q.update(nets.mlp_init(rng, [cfg.embed_dim, cfg.proj_hidden, cfg.proj_dim], "gact"))
        return cls(q, q.clone(requires_grad=False))

    def params(self, path: str) -> ParamSet:
        if path == "query":
            return self.query
        if path == "key":
            return self.key
        raise ValueError(f"unknown path {path!r}")


def _heads(ps, h: Tensor, spaces) -> dict[str, Tensor]:
    return {s: nc.l2_normalize(nets.mlp_forward(ps, f"g{s}", h, 2), axis=1) for s in spaces}


def project(net: DualProjectorNet, views, path: str = "query", space: str = "ins") -> Tensor:
    """Unit-norm projection of ``views`` through one path and one space.

    The key path reads the momentum twin and is never recorded on a tape.
    """
    ps = net.params(path)
    if path == "key":
        ps = {k: Tensor(v.data) for k, v in ps.items()}
    h = nets.encoder_forward(ps, views)
    return _heads(ps, h, (space,))[space]


def momentum_update(theta_m, theta, alpha: float) -> None:
    """theta_m <- alpha * theta_m + (1 - alpha) * theta, in place."""
    if list(theta_m.keys()) != list(theta.keys()) or any(
            theta_m[k].shape != theta[k].shape for k in theta_m):
        raise ValueError("momentum_update: parameter sets are not aligned")
    for k, t in theta_m.items():
        t.data = alpha * t.data + (1.0 - alpha) * theta[k].data


@dataclass
class PretrainResult:
    mode: str
    params: ParamSet  # trained query-path (or autoencoder) parameters
    key_params: ParamSet | None
    metrics: list[tuple[int, str, float]] = field(default_factory=list)
    acp_skipped: int = 0
    seconds: float = 0.0

    def encoder(self) -> ParamSet:
        return self.params.subset("enc.")


def _check(cfg: Config, mode: str) -> None:
    if mode not in MODES:
        raise ConfigError("config_invalid", f"mode must be one of {MODES}, got {mode!r}")
    cfg.validate()
    if cfg.sample_size > cfg.dict_capacity:
        raise ConfigError("config_invalid", "sample_size exceeds dict_capacity")


def init_params(cfg: Config, seed: int, mode: str = "aco") -> ParamSet:
    """The weights a run of ``mode`` starts from; also the ``none`` checkpoint."""
    rng = np.random.default_rng([seed, 1])
    if mode == "autoencoder":
        ps = nets.encoder_init(rng, cfg.embed_dim, cfg.height, cfg.width)
        ps.update(nets.decoder_init(rng, cfg.embed_dim, cfg.height, cfg.width))
        return ps
    return DualProjectorNet.init(rng, cfg).query


def pretrain_run(frames: np.ndarray, actions: np.ndarray | None, cfg: Config, mode: str = "aco",
                 seed: int = 0, emit: Emit | None = None, image_ids: np.ndarray | None = None,
                 construct_unused: bool = False) -> PretrainResult:
    """Pretrain an encoder on ``frames`` (N, H, W, 3) with per-frame ``actions``.

    Every metric record is passed to ``emit(step, key, value)`` and kept in
    the result. ``construct_unused`` forces a zero-weighted loss term to be
    built anyway, which must not change the optimisation trace.
    """
    _check(cfg, mode)
    frames = np.asarray(frames, dtype=np.float64)
    n = len(frames)
    if n == 0:
        raise ValueError("empty pretraining set")
    if mode in CONTRASTIVE_MODES:
        if actions is None or len(actions) != n:
            raise ValueError("contrastive pretraining needs one action per frame")
        actions = np.asarray(actions, dtype=np.float64)
    image_ids = np.arange(n) if image_ids is None else np.asarray(image_ids)

    t0 = time.perf_counter()
    metrics: list[tuple[int, str, float]] = []

    def record(step: int, key: str, value: float) -> None:
        metrics.append((step, key, float(value)))
        if emit is not None:
            emit(step, key, float(value))

    if mode == "none":
        ps = init_params(cfg, seed, mode)
        return PretrainResult(mode, ps, None, metrics, 0, time.perf_counter() - t0)
    if mode == "autoencoder":
        return _autoencoder(frames, cfg, seed, record, metrics, t0)

    lam_ins, lam_act = cfg.lambda_ins, cfg.lambda_act
    if mode == "icp_only":
        lam_act = 0.0
    elif mode == "acp_only":
        lam_ins = 0.0
    use_ins = lam_ins != 0.0 or construct_unused
    use_act = lam_act != 0.0 or construct_unused
    spaces = tuple(s for s, on in (("ins", use_ins), ("act", use_act)) if on)

    net = DualProjectorNet.init(np.random.default_rng([seed, 1]), cfg)
    rng = np.random.default_rng([seed, 2])
    opt = nc.SGD(net.query, lr=cfg.lr, momentum=cfg.sgd_momentum, weight_decay=cfg.weight_decay)
    dictionary = KeyDictionary(cfg.dict_capacity, cfg.proj_dim)
    zeros = np.zeros((0, cfg.proj_dim))
    per_epoch = -(-n // cfg.batch_size)
    total = cfg.epochs * per_epoch
    step = 0
    skipped_total = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            xq = augment_batch(frames[idx], rng, cfg)
            xk = augment_batch(frames[idx], rng, cfg)
            sampled = dictionary.sample(cfg.sample_size, rng) if len(dictionary) else None

            frozen = {k: Tensor(v.data) for k, v in net.key.items()}
            zk = _heads(frozen, nets.encoder_forward(frozen, xk), ("ins", "act"))
            lr = nc.cosine_lr(cfg.lr, step, total)
            with Tape() as tape:
                zq = _heads(net.query, nets.encoder_forward(net.query, xq), spaces)
                l_ins = l_act = Tensor(0.0)
                skipped = 0
                if use_ins:
                    l_ins = icp_loss(zq["ins"], zk["ins"].data,
                                     zeros if sampled is None else sampled.z_ins,
                                     cfg.temperature, cfg.loss_form)
                if use_act:
                    keys = zk["act"].data
                    key_act = actions[idx]
                    if sampled is not None:
                        keys = np.concatenate([keys, sampled.z_act])
                        key_act = np.concatenate([key_act, sampled.actions])
                    l_act, skipped = acp_loss(zq["act"], keys, key_act, actions[idx],
                                              cfg.epsilon, cfg.temperature, cfg.loss_form)
                if use_ins and not use_act:
                    loss = nc.scale(l_ins, lam_ins)
                elif use_act and not use_ins:
                    loss = nc.scale(l_act, lam_act)
                else:
                    loss = total_loss(l_ins, l_act, lam_ins, lam_act)
            opt.step(tape.gradient(loss, net.query), lr=lr)
            momentum_update(net.key, net.query, cfg.alpha)
            dictionary.push(KeyBatch(zk["ins"].data, zk["act"].data, actions[idx], image_ids[idx]))
            skipped_total += skipped

            record(step, "loss", loss.item())
            if use_ins:
                record(step, "loss_ins", l_ins.item())
            if use_act:
                record(step, "loss_act", l_act.item())
                record(step, "acp_skipped", skipped)
            record(step, "lr", lr)
            step += 1
    return PretrainResult(mode, net.query, net.key, metrics, skipped_total, time.perf_counter() - t0)


def _autoencoder(frames: np.ndarray, cfg: Config, seed: int, record, metrics, t0: float) -> PretrainResult:
    ps = init_params(cfg, seed, "autoencoder")
    rng = np.random.default_rng([seed, 2])
    opt = nc.Adam(ps, lr=cfg.ae_lr, weight_decay=cfg.weight_decay)
    n = len(frames)
    per_epoch = -(-n // cfg.batch_size)
    total = cfg.epochs * per_epoch
    step = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            x = frames[perm[s:s + cfg.batch_size]]
            lr = nc.cosine_lr(cfg.ae_lr, step, total)
            with Tape() as tape:
                rec = nets.decoder_forward(ps, nets.encoder_forward(ps, x), cfg.height, cfg.width)
                loss = nc.mean(nc.square(nc.sub(rec, Tensor(x))))
            opt.step(tape.gradient(loss, ps), lr=lr)
            record(step, "loss", loss.item())
            record(step, "lr", lr)
            step += 1
    return PretrainResult("autoencoder", ps, None, metrics, 0, time.perf_counter() - t0)
