"""Desk-scale experiment plumbing shared by the CLI and the acceptance suite.

A `World` bundles the three disjoint episode pools every run draws from:
inverse-predictor episodes (ground-truth labels), the pretraining corpus
(pseudo-labelled by the inverse predictor) and behaviour-cloning episodes
(ground truth, split into train/test by episode).
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import downstream as ds
from . import flowlab as fl
from . import synthworld as sw
from .config import Config
from .numcore import ParamSet
from .pretrain import CONTRASTIVE_MODES, pretrain_run

FRACTIONS = (0.1, 0.2, 0.4, 1.0)

# episode-id offsets keep the three pools disjoint
_POOLS = {"inverse": (100, 0), "corpus": (200, 100_000), "bc": (300, 200_000)}


def desk_profile(cfg: Config | None = None) -> Config:
    """Settings used for the ablation-ordering runs at desk scale.

    A shorter pretraining schedule with a faster-moving key encoder, and a
    behaviour-cloning set large enough that the 10% fraction still spans
    dozens of episodes.
    """
    cfg = cfg or Config()
    return cfg.with_(epochs=8, alpha=0.99, bc_episodes=300, bc_lr=0.001)


def pool_seed(pool: str, data_seed: int) -> tuple[int, int]:
    base, first_id = _POOLS[pool]
    return base + 1000 * data_seed, first_id


def generate_pool(pool: str, cfg: Config, data_seed: int = 0) -> list[sw.Episode]:
    n = {"inverse": cfg.inverse_episodes, "corpus": cfg.corpus_episodes,
         "bc": cfg.bc_episodes}[pool]
    seed, first_id = pool_seed(pool, data_seed)
    return sw.generate_episodes(n, seed, cfg, first_id=first_id)


def fit_inverse(episodes: list[sw.Episode], cfg: Config, seed: int = 0,
                mode: str | None = None) -> fl.InverseModel:
    mode = mode or cfg.inverse_mode
    x, y, _ = fl.episode_pairs(episodes, mode, cfg.block, cfg.search_radius)
    return fl.train_inverse(x, y, mode, epochs=cfg.inverse_epochs, lr=cfg.inverse_lr,
                            weight_decay=cfg.inverse_weight_decay, batch_size=cfg.inverse_batch,
                            hidden=cfg.inverse_hidden, seed=seed, block=cfg.block,
                            search_radius=cfg.search_radius)


@dataclass
class World:
    cfg: Config
    corpus: list[sw.Episode]  # ground-truth steering
    corpus_pseudo: np.ndarray  # per-frame pseudo labels, stacked in corpus order
    bc_train: list[sw.Episode]
    bc_test: list[sw.Episode]
    inverse: fl.InverseModel
    bc_pool: list[sw.Episode]

    def resplit(self, split_seed: int) -> "World":
        train, test = sw.dataset_split(self.bc_pool, self.cfg.train_fraction, split_seed)
        return replace(self, bc_train=train, bc_test=test)

    def corpus_frames(self) -> np.ndarray:
        return sw.stack(self.corpus)[0]

    def corpus_truth(self) -> np.ndarray:
        return sw.stack(self.corpus)[1]

    def pretrain_actions(self) -> np.ndarray:
        return self.corpus_truth() if self.cfg.use_ground_truth_actions else self.corpus_pseudo


def build_world(cfg: Config, data_seed: int = 0, split_seed: int = 0) -> World:
    inv_eps = generate_pool("inverse", cfg, data_seed)
    inverse = fit_inverse(inv_eps, cfg, seed=data_seed)
    corpus = generate_pool("corpus", cfg, data_seed)
    pseudo = np.concatenate([fl.pseudo_label_array(ep.frames, inverse) for ep in corpus])
    pool = generate_pool("bc", cfg, data_seed)
    train, test = sw.dataset_split(pool, cfg.train_fraction, split_seed)
    return World(cfg, corpus, pseudo, train, test, inverse, pool)


def standardizer_on(setting: str, mode: str) -> bool:
    """Resolve the ``bc_standardizer`` setting: ``auto`` enables it for
    contrastively pretrained encoders only."""
    if setting == "auto":
        return mode in CONTRASTIVE_MODES
    return setting == "on"


def pretrain_encoder(world: World, mode: str, seed: int, emit=None) -> ParamSet:
    res = pretrain_run(world.corpus_frames(), world.pretrain_actions(), world.cfg, mode,
                       seed=seed, emit=emit)
    return res.params


def bc_report(encoder: ParamSet, mode: str, world: World, fraction: float,
              seed: int) -> ds.EvalReport:
    cfg = world.cfg
    demo = sw.demo_subset(world.bc_train, fraction, seed)
    frames, steering, _, _ = sw.stack(demo)
    policy = ds.bc_train(encoder, frames, steering, freeze_encoder=cfg.bc_freeze_encoder,
                         use_standardizer=standardizer_on(cfg.bc_standardizer, mode),
                         epochs=cfg.bc_epochs, lr=cfg.bc_lr, weight_decay=cfg.bc_weight_decay,
                         batch_size=cfg.bc_batch, hidden=cfg.bc_hidden, seed=seed)
    rep = ds.bc_eval(policy, world.bc_test, cfg.success_threshold)
    rep.fraction, rep.seed = fraction, seed
    return rep


def eval_set(world: World, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Balanced left/straight/right frames from the behaviour-cloning test episodes."""
    frames, steering, _, _ = sw.stack(world.bc_test)
    per = world.cfg.eval_frames // 3
    idx = ds.balanced_eval_set(frames, steering, per, np.random.default_rng([seed, 41]))
    return frames[idx], steering[idx]


def probe_report(encoder: ParamSet, world: World, seed: int = 0) -> ds.ProbeResult:
    """Linear probe of ground-truth steering: corpus frames for fitting,
    behaviour-cloning test frames for scoring."""
    test_frames, test_y, _, _ = sw.stack(world.bc_test)
    return ds.linear_probe(encoder, world.corpus_frames(), world.corpus_truth(), test_frames,
                           test_y, epochs=world.cfg.probe_epochs, lr=world.cfg.probe_lr, seed=seed)
