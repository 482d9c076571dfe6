"""Small functional networks over numcore ParamSets.

Each network is a pair of (init -> ParamSet, forward(params, x) -> Tensor) so
momentum twins can reuse the forward pass with different parameters.
"""
from __future__ import annotations

import numpy as np

from . import numcore as nc
from .numcore import ParamSet, Tensor


def _linear_init(ps: ParamSet, prefix: str, d_in: int, d_out: int, rng) -> None:
    ps[f"{prefix}.w"] = nc.kaiming_normal((d_in, d_out), d_in, rng)
    ps[f"{prefix}.b"] = nc.constant((d_out,), 0.0)


def linear(ps, prefix: str, x: Tensor) -> Tensor:
    return nc.bias_add(nc.matmul(x, ps[f"{prefix}.w"]), ps[f"{prefix}.b"])


def squash(x: Tensor) -> Tensor:
    """Map the real line onto (0, 1) via 0.5 * (1 + tanh)."""
    return nc.scale(nc.add(nc.tanh(x), 1.0), 0.5)


# --- encoder ---------------------------------------------------------------

def encoder_init(rng: np.random.Generator, embed_dim: int = 64, height: int = 32,
                 width: int = 32, prefix: str = "enc") -> ParamSet:
    ps = ParamSet()
    ps[f"{prefix}.conv1.w"] = nc.kaiming_normal((3, 3, 3, 16), 27, rng)
    ps[f"{prefix}.conv1.b"] = nc.constant((16,), 0.0)
    ps[f"{prefix}.conv2.w"] = nc.kaiming_normal((3, 3, 16, 32), 144, rng)
    ps[f"{prefix}.conv2.b"] = nc.constant((32,), 0.0)
    flat = (height // 4) * (width // 4) * 32
    _linear_init(ps, f"{prefix}.fc", flat, embed_dim, rng)
    return ps


def encoder_forward(ps, x, prefix: str = "enc") -> Tensor:
    """x: (B, H, W, 3) frames in [0, 1] -> (B, embed_dim)."""
    x = nc.as_tensor(x)
    h = nc.relu(nc.conv2d(x, ps[f"{prefix}.conv1.w"], ps[f"{prefix}.conv1.b"], stride=2))
    h = nc.relu(nc.conv2d(h, ps[f"{prefix}.conv2.w"], ps[f"{prefix}.conv2.b"], stride=2))
    h = nc.reshape(h, (h.shape[0], -1))
    return linear(ps, f"{prefix}.fc", h)


def encode(ps, frames: np.ndarray, batch: int = 256, prefix: str = "enc") -> np.ndarray:
    """Features of many frames without recording on any tape."""
    frozen = {k: Tensor(v.data) for k, v in ps.items() if k.startswith(prefix + ".")}
    out = [encoder_forward(frozen, frames[i:i + batch], prefix).data
           for i in range(0, len(frames), batch)]
    return np.concatenate(out) if out else np.zeros((0, ps[f"{prefix}.fc.b"].shape[0]))


# --- MLPs ------------------------------------------------------------------

def mlp_init(rng, sizes, prefix: str) -> ParamSet:
    ps = ParamSet()
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        _linear_init(ps, f"{prefix}.l{i}", a, b, rng)
    return ps


def mlp_forward(ps, prefix: str, x, n_layers: int) -> Tensor:
    h = nc.as_tensor(x)
    for i in range(n_layers):
        h = linear(ps, f"{prefix}.l{i}", h)
        if i < n_layers - 1:
            h = nc.relu(h)
    return h


# --- decoder (autoencoder baseline) -------------------------------------------

def decoder_init(rng, embed_dim: int = 64, height: int = 32, width: int = 32) -> ParamSet:
    ps = ParamSet()
    _linear_init(ps, "dec.fc", embed_dim, (height // 4) * (width // 4) * 32, rng)
    ps["dec.conv1.w"] = nc.kaiming_normal((3, 3, 32, 16), 288, rng)
    ps["dec.conv1.b"] = nc.constant((16,), 0.0)
    ps["dec.conv2.w"] = nc.kaiming_normal((3, 3, 16, 3), 144, rng)
    ps["dec.conv2.b"] = nc.constant((3,), 0.0)
    return ps


def decoder_forward(ps, v: Tensor, height: int = 32, width: int = 32) -> Tensor:
    h = nc.relu(linear(ps, "dec.fc", v))
    h = nc.reshape(h, (h.shape[0], height // 4, width // 4, 32))
    h = nc.relu(nc.conv2d(nc.upsample2x(h), ps["dec.conv1.w"], ps["dec.conv1.b"]))
    h = nc.conv2d(nc.upsample2x(h), ps["dec.conv2.w"], ps["dec.conv2.b"])
    return nc.sigmoid(h)
