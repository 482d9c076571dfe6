"""Flat run configuration with a `key = value` text format.

Every stage of the pipeline reads the same Config; keys shared between
stages (world geometry, flow window, action threshold) feed the coupled
digest that later stages compare against stored provenance.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, fields, replace


class ConfigError(ValueError):
    """Invalid or unparseable configuration. ``code`` is the CLI error code."""

    def __init__(self, code: str, detail: str):
        super().__init__(detail)
        self.code = code
        self.detail = detail


@dataclass(frozen=True)
class Config:
    # synthetic world
    height: int = 32
    width: int = 32
    focal: float = 28.0
    cam_height: float = 1.0
    horizon: int = 12
    speed: float = 0.08
    kappa_max: float = 1.3
    road_bend: float = 0.15
    road_half_width: float = 0.6
    episode_length: int = 50
    min_segment: int = 5
    max_segment: int = 15
    straight_prob: float = 0.34
    supersample: int = 2
    # dataset sizes (episodes)
    inverse_episodes: int = 40
    corpus_episodes: int = 100
    bc_episodes: int = 60
    eval_frames: int = 300
    train_fraction: float = 0.7
    # flow and inverse predictor
    block: int = 4
    search_radius: int = 4
    inverse_mode: str = "flow"
    inverse_hidden: int = 64
    inverse_lr: float = 0.0003
    inverse_weight_decay: float = 0.0001
    inverse_epochs: int = 50
    inverse_batch: int = 32
    # ACO pretraining
    temperature: float = 0.2
    epsilon: float = 0.05
    alpha: float = 0.999
    lambda_ins: float = 1.0
    lambda_act: float = 1.0
    embed_dim: int = 64
    proj_dim: int = 32
    proj_hidden: int = 128
    dict_capacity: int = 4096
    sample_size: int = 1024
    batch_size: int = 64
    lr: float = 0.03
    weight_decay: float = 0.0001
    sgd_momentum: float = 0.9
    epochs: int = 30
    loss_form: str = "as_written"
    use_ground_truth_actions: bool = False
    enable_crop_flip: bool = False
    ae_lr: float = 0.001
    # augmentation
    gray_prob: float = 0.2
    jitter_scale_min: float = 0.6
    jitter_scale_max: float = 1.4
    jitter_shift: float = 0.1
    blur_prob: float = 0.5
    blur_sigma_min: float = 0.1
    blur_sigma_max: float = 1.0
    # downstream
    bc_lr: float = 0.0001
    bc_weight_decay: float = 0.0001
    bc_epochs: int = 100
    bc_batch: int = 128
    bc_hidden: int = 64
    bc_freeze_encoder: bool = True
    bc_standardizer: str = "auto"
    success_threshold: float = 0.08
    probe_lr: float = 0.01
    probe_epochs: int = 200
    nn_k: int = 5

    def validate(self) -> "Config":
        def need(cond: bool, what: str):
            if not cond:
                raise ConfigError("config_invalid", what)

        need(self.temperature > 0, "temperature must be > 0")
        need(self.epsilon > 0, "epsilon must be > 0")
        need(0.0 <= self.alpha < 1.0, "alpha must be in [0, 1)")
        need(self.lambda_ins >= 0 and self.lambda_act >= 0, "loss weights must be >= 0")
        need(self.sample_size >= 1, "sample_size must be >= 1")
        need(self.dict_capacity >= self.sample_size, "dict_capacity must be >= sample_size")
        need(self.batch_size >= 1, "batch_size must be >= 1")
        need(self.loss_form in ("as_written", "infonce"), "loss_form must be as_written or infonce")
        need(self.inverse_mode in ("flow", "frames"), "inverse_mode must be flow or frames")
        need(self.bc_standardizer in ("auto", "on", "off"), "bc_standardizer must be auto, on or off")
        need(self.height % self.block == 0 and self.width % self.block == 0,
             "frame size must be divisible by block")
        need(self.height % 4 == 0 and self.width % 4 == 0, "frame size must be divisible by 4")
        need(0 < self.horizon < self.height, "horizon must lie inside the frame")
        need(self.episode_length >= 2, "episode_length must be >= 2")
        need(1 <= self.min_segment <= self.max_segment, "segment lengths out of order")
        need(self.kappa_max > 0, "kappa_max must be > 0")
        need(0 < self.train_fraction < 1, "train_fraction must be in (0, 1)")
        need(self.jitter_scale_min <= self.jitter_scale_max, "jitter scale range reversed")
        need(self.blur_sigma_min <= self.blur_sigma_max, "blur sigma range reversed")
        shift = max_lateral_shift_px(self)
        need(shift <= self.search_radius,
             f"kappa_max gives {shift:.3f}px lateral shift > search_radius {self.search_radius}")
        return self

    def render(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_fmt(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.render().encode()).hexdigest()[:16]

    def coupled_digest(self) -> str:
        """Digest over the keys that must agree between pipeline stages."""
        text = "\n".join(f"{k} = {_fmt(getattr(self, k))}" for k in COUPLED_KEYS)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def with_(self, **kw) -> "Config":
        return replace(self, **kw)


COUPLED_KEYS = (
    "height", "width", "focal", "cam_height", "horizon", "speed", "kappa_max",
    "road_bend", "block", "search_radius", "epsilon", "embed_dim",
)


def max_lateral_shift_px(cfg: Config) -> float:
    """Largest per-frame horizontal displacement at the bottom image row:
    yaw-induced shift plus forward-motion expansion at the frame corner."""
    yaw = cfg.focal * cfg.kappa_max * cfg.speed
    z_bottom = cfg.focal * cfg.cam_height / (cfg.height - cfg.horizon - 0.5)
    return yaw + (cfg.width / 2) * cfg.speed / z_bottom


def paper_scale(cfg: Config | None = None) -> Config:
    """Appendix hyper-parameters (ACO, inverse predictor, imitation learning)."""
    cfg = cfg or Config()
    return replace(
        cfg,
        batch_size=256, dict_capacity=40960, sample_size=4096, epochs=100,
        lr=0.03, weight_decay=0.0001, alpha=0.999, proj_hidden=128, epsilon=0.05,
        lambda_ins=1.0, lambda_act=1.0,
        inverse_lr=0.0003, inverse_weight_decay=0.0001, inverse_epochs=50, inverse_batch=256,
        bc_lr=0.0001, bc_weight_decay=0.0001, bc_epochs=100, bc_batch=128,
    )


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(name: str, typ, raw: str):
    try:
        if typ is bool:
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError(raw)
            return low == "true"
        if typ is int:
            return int(raw)
        if typ is float:
            v = float(raw)
            if not math.isfinite(v):
                raise ValueError(raw)
            return v
        return raw
    except ValueError:
        raise ConfigError("config_invalid", f"bad value for {name}: {raw!r}") from None


_TYPES = {"int": int, "float": float, "str": str, "bool": bool}


def parse(text: str, base: Config | None = None) -> Config:
    """Parse `key = value` lines onto ``base`` (defaults if None)."""
    types = {f.name: _TYPES[f.type] if isinstance(f.type, str) else f.type for f in fields(Config)}
    values = asdict(base or Config())
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("config_invalid", f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError("unknown_key", f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError("config_invalid", f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        values[key] = _coerce(key, types[key], raw)
    return Config(**values)


def load(path, base: Config | None = None) -> Config:
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read(), base)
