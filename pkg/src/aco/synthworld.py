"""Procedural first-person driving episodes.

A camera drives along a road whose curvature is piecewise constant. Each
frame shows a two-edge road under perspective (its bend follows the
current curvature), a world-fixed textured ground plane and a far skyline.
Yaw between frames shifts the skyline and ground horizontally, which is the
motion cue the block matcher picks up.

Per-episode nuisances (tint, brightness, textures, sky colour, lateral lane
offset) never touch the steering labels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .config import Config

GROUND_TRUTH = "ground_truth"
PSEUDO = "pseudo"
LANE_OFFSET_MAX = 0.35


@dataclass(frozen=True)
class NuisanceParams:
    tint: tuple[float, float, float] = (0.0, 0.0, 0.0)
    brightness: float = 1.0
    texture_seed: int = 0
    sky_gradient: float = 0.5
    lane_offset: float = 0.0

    @classmethod
    def random(cls, rng: np.random.Generator) -> "NuisanceParams":
        return cls(
            tint=tuple(float(v) for v in rng.uniform(-0.2, 0.2, size=3)),
            brightness=float(rng.uniform(0.6, 1.4)),
            texture_seed=int(rng.integers(0, 2**31 - 1)),
            sky_gradient=float(rng.uniform(0.0, 1.0)),
            lane_offset=float(rng.uniform(-LANE_OFFSET_MAX, LANE_OFFSET_MAX)),
        )


@dataclass(frozen=True)
class EpisodeSpec:
    seed: int
    length: int
    curvature_profile: tuple[float, ...]
    nuisance: NuisanceParams = field(default_factory=NuisanceParams)


@dataclass
class Frame:
    pixels: np.ndarray  # (H, W, 3) in [0, 1]
    episode_id: int
    time_index: int

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class ActionLabel:
    steering: float
    source: str = GROUND_TRUTH


@dataclass
class Episode:
    """Frames stored as one array; iterating yields (Frame, ActionLabel)."""

    episode_id: int
    frames: np.ndarray  # (T, H, W, 3)
    steering: np.ndarray  # (T,)
    spec: EpisodeSpec | None = None
    source: str = GROUND_TRUTH

    def __len__(self) -> int:
        return len(self.steering)

    def __iter__(self) -> Iterator[tuple[Frame, ActionLabel]]:
        for t in range(len(self)):
            yield (Frame(self.frames[t], self.episode_id, t),
                   ActionLabel(float(self.steering[t]), self.source))

    @property
    def time_index(self) -> np.ndarray:
        return np.arange(len(self), dtype=np.int64)

    def head(self, n: int) -> "Episode":
        return Episode(self.episode_id, self.frames[:n], self.steering[:n], self.spec, self.source)


def steering_from_curvature(curvature, kappa_max: float):
    """Affine map 0.5 + 0.5 * curvature / kappa_max, clamped to [0, 1]."""
    s = 0.5 + 0.5 * np.asarray(curvature, dtype=np.float64) / kappa_max
    s = np.clip(s, 0.0, 1.0)
    return float(s) if s.ndim == 0 else s


def random_curvature_profile(length: int, rng: np.random.Generator, cfg: Config) -> tuple[float, ...]:
    out: list[float] = []
    while len(out) < length:
        seg = int(rng.integers(cfg.min_segment, cfg.max_segment + 1))
        if rng.random() < cfg.straight_prob:
            k = 0.0
        else:
            k = float(rng.uniform(-cfg.kappa_max, cfg.kappa_max))
        out.extend([k] * seg)
    return tuple(out[:length])


def random_episode_spec(seed: int, cfg: Config, length: int | None = None) -> EpisodeSpec:
    rng = np.random.default_rng([seed, 1])
    n = cfg.episode_length if length is None else length
    profile = random_curvature_profile(n, rng, cfg)
    return EpisodeSpec(seed=seed, length=n, curvature_profile=profile,
                       nuisance=NuisanceParams.random(rng))


class _Textures:
    """Sinusoid sums seeded by texture_seed: ground, road surface, skyline."""

    def __init__(self, seed: int):
        rng = np.random.default_rng([seed, 7])
        n = 6
        ang = rng.uniform(0, math.pi, n)
        wl = rng.uniform(0.35, 1.2, n)
        self.ground_k = np.stack([np.cos(ang), np.sin(ang)], 1) * (2 * math.pi / wl)[:, None]
        self.ground_phase = rng.uniform(0, 2 * math.pi, n)
        ang = rng.uniform(0, math.pi, 3)
        wl = rng.uniform(0.5, 1.5, 3)
        self.road_k = np.stack([np.cos(ang), np.sin(ang)], 1) * (2 * math.pi / wl)[:, None]
        self.road_phase = rng.uniform(0, 2 * math.pi, 3)
        # integer azimuth frequencies keep the skyline periodic in heading
        self.sky_freq = rng.integers(6, 40, size=5).astype(np.float64)
        self.sky_amp = rng.uniform(0.5, 1.5, size=5)
        self.sky_phase = rng.uniform(0, 2 * math.pi, 5)
        self.band_freq = float(rng.integers(20, 60))
        self.band_phase = float(rng.uniform(0, 2 * math.pi))
        self.skyline_base = float(rng.uniform(3.0, 5.0))
        self.grass = np.array([0.25, 0.5, 0.2]) + rng.uniform(-0.08, 0.08, 3)
        self.building = np.array([0.45, 0.4, 0.45]) + rng.uniform(-0.15, 0.15, 3)
        self.asphalt = np.array([0.33, 0.33, 0.35]) + rng.uniform(-0.04, 0.04, 3)

    @staticmethod
    def _wave(k, phase, x, z):
        acc = np.zeros_like(x)
        for (kx, kz), p in zip(k, phase):
            acc += np.sin(kx * x + kz * z + p)
        return acc / len(phase) * 2.0

    def ground(self, x, z):
        return self._wave(self.ground_k, self.ground_phase, x, z)

    def road(self, x, z):
        return self._wave(self.road_k, self.road_phase, x, z)

    def skyline(self, az):
        h = np.full_like(az, self.skyline_base)
        for f, a, p in zip(self.sky_freq, self.sky_amp, self.sky_phase):
            h += a * np.sin(f * az + p)
        return h

    def bands(self, az):
        return 0.5 + 0.5 * np.sin(self.band_freq * az + self.band_phase)


def render_frame(cfg: Config, tex: _Textures, nuisance: NuisanceParams, heading: float,
                 pos: tuple[float, float], curvature: float) -> np.ndarray:
    ss = cfg.supersample
    H, W = cfg.height, cfg.width
    rows = (np.arange(H * ss) + 0.5) / ss - cfg.horizon
    cols = (np.arange(W * ss) + 0.5) / ss - W / 2
    v, u = np.meshgrid(rows, cols, indexing="ij")
    img = np.zeros(v.shape + (3,))

    # sky and skyline
    sky = v <= 0
    az = heading + np.arctan(u[sky] / cfg.focal)
    height_above = -v[sky]
    top = np.array([0.35, 0.55, 0.9]) * (1 - nuisance.sky_gradient) + \
        np.array([0.95, 0.6, 0.35]) * nuisance.sky_gradient
    low = np.array([0.8, 0.85, 0.9])
    t = np.clip(height_above / cfg.horizon, 0.0, 1.0)[:, None]
    sky_col = (1 - t) * low + t * top
    bld = height_above < tex.skyline(az)
    bcol = tex.building * (0.55 + 0.45 * tex.bands(az))[:, None]
    sky_col = np.where(bld[:, None], bcol, sky_col)
    img[sky] = sky_col

    # ground plane
    gnd = ~sky
    vg, ug = v[gnd], u[gnd]
    z = cfg.focal * cfg.cam_height / vg
    x = ug * z / cfg.focal
    c, s = math.cos(heading), math.sin(heading)
    wx = pos[0] + x * c + z * s
    wz = pos[1] - x * s + z * c
    fade = np.exp(-z / 6.0)[:, None]
    grass = tex.grass * (1.0 + 0.45 * tex.ground(wx, wz)[:, None] * fade)
    road = tex.asphalt * (1.0 + 0.25 * tex.road(wx, wz)[:, None] * fade)
    offset = x + nuisance.lane_offset - 0.5 * cfg.road_bend * curvature * z * z
    d = np.abs(offset)
    hw = cfg.road_half_width
    line = np.abs(d - hw) < 0.09
    col = np.where((d < hw)[:, None], road, grass)
    col = np.where(line[:, None], np.array([0.92, 0.92, 0.85]), col)
    img[gnd] = col

    img = img.reshape(H, ss, W, ss, 3).mean(axis=(1, 3))
    img = nuisance.brightness * img + np.asarray(nuisance.tint)
    return np.clip(img, 0.0, 1.0)


def generate_episode(spec: EpisodeSpec, cfg: Config | None = None, episode_id: int | None = None) -> Episode:
    cfg = cfg or Config()
    if spec.length < 2:
        raise ValueError(f"episode length must be >= 2, got {spec.length}")
    if len(spec.curvature_profile) != spec.length:
        raise ValueError("curvature_profile length must equal episode length")
    kappa = np.asarray(spec.curvature_profile, dtype=np.float64)
    if np.any(np.abs(kappa) > cfg.kappa_max + 1e-12):
        raise ValueError("curvature outside [-kappa_max, kappa_max]")
    rng = np.random.default_rng([spec.seed, 2])
    heading = float(rng.uniform(-math.pi, math.pi))
    px, pz = (float(v) for v in rng.uniform(-50.0, 50.0, size=2))
    tex = _Textures(spec.nuisance.texture_seed)
    frames = np.empty((spec.length, cfg.height, cfg.width, 3))
    for t in range(spec.length):
        frames[t] = render_frame(cfg, tex, spec.nuisance, heading, (px, pz), kappa[t])
        px += cfg.speed * math.sin(heading)
        pz += cfg.speed * math.cos(heading)
        heading += kappa[t] * cfg.speed
    steering = steering_from_curvature(kappa, cfg.kappa_max)
    eid = spec.seed if episode_id is None else episode_id
    return Episode(int(eid), frames, np.asarray(steering, dtype=np.float64), spec)


def generate_episodes(n: int, seed: int, cfg: Config, first_id: int = 0,
                      length: int | None = None) -> list[Episode]:
    out = []
    for i in range(n):
        spec = random_episode_spec(int(np.random.default_rng([seed, i]).integers(2**62)), cfg, length)
        out.append(generate_episode(spec, cfg, episode_id=first_id + i))
    return out


def dataset_split(episodes: Sequence[Episode], train_fraction: float = 0.7, seed: int = 0):
    """Episode-level split; both sides non-empty. Original order is kept."""
    n = len(episodes)
    if n == 0:
        raise ValueError("cannot split an empty episode list")
    if n < 2:
        raise ValueError("need at least 2 episodes to split")
    n_train = min(max(int(math.floor(train_fraction * n)), 1), n - 1)
    perm = np.random.default_rng([seed, 3]).permutation(n)
    train_idx = set(perm[:n_train].tolist())
    train = [e for i, e in enumerate(episodes) if i in train_idx]
    test = [e for i, e in enumerate(episodes) if i not in train_idx]
    return train, test


def demo_subset(train: Sequence[Episode], fraction: float, seed: int = 0) -> list[Episode]:
    """Whole episodes in a fixed random order until ceil(fraction * frames) is
    reached; the last episode is truncated. Smaller fractions are prefixes of
    larger ones under the same seed."""
    if not fraction > 0:
        raise ValueError(f"fraction must be > 0, got {fraction}")
    if fraction > 1:
        raise ValueError(f"fraction must be <= 1, got {fraction}")
    total = sum(len(e) for e in train)
    quota = int(math.ceil(fraction * total - 1e-9))
    order = np.random.default_rng([seed, 4]).permutation(len(train))
    out: list[Episode] = []
    got = 0
    for i in order:
        if got >= quota:
            break
        ep = train[i]
        take = min(len(ep), quota - got)
        out.append(ep if take == len(ep) else ep.head(take))
        got += take
    return out


def stack(episodes: Sequence[Episode]):
    """Concatenate episodes into (frames, steering, episode_ids, time_index)."""
    frames = np.concatenate([e.frames for e in episodes])
    steering = np.concatenate([e.steering for e in episodes])
    ids = np.concatenate([np.full(len(e), e.episode_id, dtype=np.int64) for e in episodes])
    times = np.concatenate([e.time_index for e in episodes])
    return frames, steering, ids, times
