"""Finite-difference sweep over every numcore op.

Each case maps a random point to a scalar by contracting the op output with
a fixed random tensor, so all output coordinates carry gradient.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numcore as nc
from .numcore import Tensor


@dataclass
class GradCase:
    name: str
    shape: tuple[int, ...]
    make: Callable[[np.random.Generator], Callable[[Tensor], Tensor]]
    # minimum |x| so that relu/abs stay away from their kinks
    kink_margin: float = 0.0


def _proj(out: Tensor, r: np.ndarray) -> Tensor:
    return nc.dot(out, Tensor(r))


def _unary(op, shape):
    def make(rng):
        out_shape = op(Tensor(np.ones(shape))).shape
        r = rng.normal(size=out_shape)
        return lambda x: _proj(op(x), r)
    return make


def _binary(op, shape_a, shape_b, wrt: int):
    def make(rng):
        other = Tensor(rng.normal(size=shape_b if wrt == 0 else shape_a))
        if wrt == 0:
            out_shape = op(Tensor(np.ones(shape_a)), other).shape
        else:
            out_shape = op(other, Tensor(np.ones(shape_b))).shape
        r = rng.normal(size=out_shape)
        if wrt == 0:
            return lambda x: _proj(op(x, other), r)
        return lambda x: _proj(op(other, x), r)
    return make


def _masked_lse(shape):
    def make(rng):
        mask = rng.random(shape) < 0.6
        mask[:, 0] = True
        r = rng.normal(size=shape[0])
        return lambda x: _proj(nc.log_sum_exp(x, axis=1, mask=mask), r)
    return make


def _concat(wrt: int):
    def make(rng):
        others = [Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(2, 2)))]
        r = rng.normal(size=(2, 7))

        def f(x):
            parts = list(others)
            parts.insert(wrt, x)
            return _proj(nc.concat(parts, axis=1), r)
        return f
    return make


def _take_rows(rng):
    idx = np.array([2, 0, 2, 1])
    r = rng.normal(size=(4, 3))
    return lambda x: _proj(nc.take_rows(x, idx), r)


def _conv(stride: int, wrt: str):
    xs, ws, bs = (2, 5, 6, 2), (3, 3, 2, 3), (3,)

    def make(rng):
        x0 = Tensor(rng.normal(size=xs))
        w0 = Tensor(rng.normal(size=ws))
        b0 = Tensor(rng.normal(size=bs))
        out_shape = nc.conv2d(x0, w0, b0, stride=stride).shape
        r = rng.normal(size=out_shape)
        if wrt == "x":
            return lambda t: _proj(nc.conv2d(t, w0, b0, stride=stride), r)
        if wrt == "w":
            return lambda t: _proj(nc.conv2d(x0, t, b0, stride=stride), r)
        return lambda t: _proj(nc.conv2d(x0, w0, t, stride=stride), r)
    return make, {"x": xs, "w": ws, "b": bs}[wrt]


def all_cases() -> list[GradCase]:
    cases = [
        GradCase("matmul[a]", (3, 4), _binary(nc.matmul, (3, 4), (4, 2), 0)),
        GradCase("matmul[b]", (4, 2), _binary(nc.matmul, (3, 4), (4, 2), 1)),
        GradCase("add", (3, 4), _binary(nc.add, (3, 4), (3, 4), 0)),
        GradCase("add[scalar]", (), _binary(nc.add, (3, 4), (), 1)),
        GradCase("sub[a]", (3, 4), _binary(nc.sub, (3, 4), (3, 4), 0)),
        GradCase("sub[b]", (3, 4), _binary(nc.sub, (3, 4), (3, 4), 1)),
        GradCase("scale", (3, 4), _unary(lambda x: nc.scale(x, -2.5), (3, 4))),
        GradCase("mul", (3, 4), _binary(nc.mul, (3, 4), (3, 4), 0)),
        GradCase("mul[scalar]", (), _binary(nc.mul, (3, 4), (), 1)),
        GradCase("bias_add[x]", (3, 4), _binary(nc.bias_add, (3, 4), (4,), 0)),
        GradCase("bias_add[b]", (4,), _binary(nc.bias_add, (3, 4), (4,), 1)),
        GradCase("row_scale[x]", (3, 4), _binary(nc.row_scale, (3, 4), (4,), 0)),
        GradCase("row_scale[s]", (4,), _binary(nc.row_scale, (3, 4), (4,), 1)),
        GradCase("relu", (3, 4), _unary(nc.relu, (3, 4)), kink_margin=1e-3),
        GradCase("tanh", (3, 4), _unary(nc.tanh, (3, 4))),
        GradCase("sigmoid", (3, 4), _unary(nc.sigmoid, (3, 4))),
        GradCase("abs", (3, 4), _unary(nc.abs_, (3, 4)), kink_margin=1e-3),
        GradCase("square", (3, 4), _unary(nc.square, (3, 4))),
        GradCase("sum", (3, 4), _unary(nc.sum_, (3, 4))),
        GradCase("sum[axis]", (3, 4), _unary(lambda x: nc.sum_(x, axis=0), (3, 4))),
        GradCase("mean", (3, 4), _unary(nc.mean, (3, 4))),
        GradCase("mean[axis]", (3, 4), _unary(lambda x: nc.mean(x, axis=1), (3, 4))),
        GradCase("dot", (5,), _binary(nc.dot, (5,), (5,), 0)),
        GradCase("l2_normalize", (3, 4), _unary(lambda x: nc.l2_normalize(x, axis=1), (3, 4))),
        GradCase("log_sum_exp", (3, 5), _unary(lambda x: nc.log_sum_exp(x, axis=1), (3, 5))),
        GradCase("log_sum_exp[mask]", (3, 5), _masked_lse((3, 5))),
        GradCase("concat[0]", (2, 2), _concat(0)),
        GradCase("concat[1]", (2, 2), _concat(1)),
        GradCase("reshape", (3, 4), _unary(lambda x: nc.reshape(x, (2, 6)), (3, 4))),
        GradCase("transpose", (3, 4), _unary(nc.transpose, (3, 4))),
        GradCase("take_rows", (3, 3), _take_rows),
        GradCase("batch_standardize", (6, 3), _unary(nc.batch_standardize, (6, 3))),
        GradCase("upsample2x", (1, 2, 3, 2), _unary(nc.upsample2x, (1, 2, 3, 2))),
    ]
    for stride in (1, 2):
        for wrt in ("x", "w", "b"):
            make, shape = _conv(stride, wrt)
            cases.append(GradCase(f"conv2d[s{stride},{wrt}]", shape, make))
    return cases


def _point(case: GradCase, rng: np.random.Generator) -> np.ndarray:
    x = rng.normal(size=case.shape)
    if case.kink_margin:
        # push coordinates out of [-margin, margin] keeping their sign
        small = np.abs(x) < case.kink_margin
        x = np.where(small, np.where(x >= 0, 1.0, -1.0) * (case.kink_margin + np.abs(x)), x)
    return x


def run_case(case: GradCase, points: int = 100, seed: int = 0, step: float = 1e-6) -> float:
    worst = 0.0
    for k in range(points):
        rng = np.random.default_rng([seed, k])
        fn = case.make(rng)
        worst = max(worst, nc.finite_diff_check(fn, _point(case, rng), step=step))
    return worst


def run_suite(points: int = 100, seed: int = 0, step: float = 1e-6):
    """Returns a list of (case name, max relative error, seconds)."""
    results = []
    for case in all_cases():
        t0 = time.perf_counter()
        err = run_case(case, points=points, seed=seed, step=step)
        results.append((case.name, err, time.perf_counter() - t0))
    return results
