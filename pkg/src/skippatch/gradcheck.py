"""Finite-difference checks of every differentiable op and every network block.

Each case draws random shapes and values from its seed, reduces the op output
to a scalar with a fixed random weighting, and compares tape gradients with
central differences.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .architectures import (build_mask_generator, build_patch_discriminator, build_skip_patch_discriminator,
                            build_unet_generator, forward, init_params)
from .autodiff import Tape, Tensor, grad_check
from .rng import SeededRng

TOLERANCE = 1e-5
STEP = 1e-6
BLOCK_COORDS = 16
SIGNIFICANT = 1e-3


def _weighted(out_shape, rng: SeededRng, fn):
    weights = Tensor(rng.normal(out_shape))
    return lambda t: ad.sum_all(ad.mul(fn(t), weights))


def _away_from_zero(rng: SeededRng, shape, margin=0.05):
    x = rng.normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _conv_case(rng: SeededRng, wrt: str) -> float:
    ci, co = 1 + rng.integers(3), 1 + rng.integers(3)
    k, s = 1 + rng.integers(4), 1 + rng.integers(2)
    pad = tuple(rng.integers(3) for _ in range(4))
    h, w = k + 1 + rng.integers(5), k + 1 + rng.integers(5)
    x = rng.normal((ci, h, w))
    kern, bias = rng.normal((co, ci, k, k)), rng.normal((co,))
    out_shape = (co, (h + pad[2] + pad[3] - k) // s + 1, (w + pad[0] + pad[1] - k) // s + 1)
    if wrt == "input":
        f = _weighted(out_shape, rng, lambda t: ad.conv2d(t, Tensor(kern), Tensor(bias), s, pad))
        return grad_check(f, x, STEP)
    if wrt == "kernel":
        f = _weighted(out_shape, rng, lambda t: ad.conv2d(Tensor(x), t, Tensor(bias), s, pad))
        return grad_check(f, kern, STEP)
    f = _weighted(out_shape, rng, lambda t: ad.conv2d(Tensor(x), Tensor(kern), t, s, pad))
    return grad_check(f, bias, STEP)


def _convt_case(rng: SeededRng, wrt: str) -> float:
    ci, co = 1 + rng.integers(3), 1 + rng.integers(3)
    k, s = 1 + rng.integers(4), 1 + rng.integers(2)
    pad = rng.integers(k // 2 + 1)
    h, w = 2 + rng.integers(4), 2 + rng.integers(4)
    x = rng.normal((ci, h, w))
    kern, bias = rng.normal((ci, co, k, k)), rng.normal((co,))
    out_shape = (co, (h - 1) * s - 2 * pad + k, (w - 1) * s - 2 * pad + k)
    if wrt == "input":
        f = _weighted(out_shape, rng, lambda t: ad.conv_transpose2d(t, Tensor(kern), Tensor(bias), s, pad))
        return grad_check(f, x, STEP)
    if wrt == "kernel":
        f = _weighted(out_shape, rng, lambda t: ad.conv_transpose2d(Tensor(x), t, Tensor(bias), s, pad))
        return grad_check(f, kern, STEP)
    f = _weighted(out_shape, rng, lambda t: ad.conv_transpose2d(Tensor(x), Tensor(kern), t, s, pad))
    return grad_check(f, bias, STEP)


def _random_chw(rng: SeededRng, min_c=1):
    return (min_c + rng.integers(3), 2 + rng.integers(4), 2 + rng.integers(4))


def _unary_case(op: Callable[[Tensor], Tensor], smooth: bool):
    def case(rng: SeededRng) -> float:
        shape = _random_chw(rng, min_c=2)
        x = rng.normal(shape) if smooth else _away_from_zero(rng, shape)
        return grad_check(_weighted(op(Tensor(x)).shape, rng, op), x, STEP)
    return case


def _bce_case(rng: SeededRng) -> float:
    shape = _random_chw(rng)
    p = 0.05 + 0.9 * rng.uniform(shape)
    t = (rng.uniform(shape) < 0.5).astype(float)
    return grad_check(lambda q: ad.bce_loss(q, t), p, STEP)


def _l1_case(rng: SeededRng) -> float:
    shape = _random_chw(rng)
    b = rng.normal(shape)
    a = b + _away_from_zero(rng, shape, margin=0.05)
    return max(grad_check(lambda q: ad.l1_loss(q, Tensor(b)), a, STEP),
               grad_check(lambda q: ad.l1_loss(Tensor(a), q), b, STEP))


def _significant_coords(f, x: np.ndarray, rng: SeededRng, count: int) -> list[int]:
    """Random coordinates whose analytic gradient is at least 1e-3 of the largest.

    Below that, central differences at h = 1e-6 are roundoff-dominated
    (absolute error near 1e-10 for outputs of order one).
    """
    t = Tensor(x.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(t)
    tape.backward(y)
    g = np.abs(t.grad.reshape(-1))
    pool = np.flatnonzero(g >= SIGNIFICANT * g.max())
    return [int(pool[rng.integers(pool.size)]) for _ in range(count)]


def _block_case(builder, in_shape):
    def case(rng: SeededRng) -> float:
        graph = builder()
        params = init_params(graph, rng.spawn(0), std=0.3)
        x = rng.normal(in_shape)
        weights = Tensor(rng.normal(forward(graph, params, Tensor(x)).shape))

        def f_x(t):
            return ad.sum_all(ad.mul(forward(graph, params, t), weights))

        err_in = grad_check(f_x, x, STEP, _significant_coords(f_x, x, rng, BLOCK_COORDS))
        # gradient with respect to the first layer's kernel
        name = f"{graph.conv_layers()[0].id}.weight"
        w0 = params[name].data.copy()

        def f_w(t):
            return ad.sum_all(ad.mul(forward(graph, {**params, name: t}, Tensor(x)), weights))

        return max(err_in, grad_check(f_w, w0, STEP, _significant_coords(f_w, w0, rng, BLOCK_COORDS)))
    return case


CASES: dict[str, Callable[[SeededRng], float]] = {
    "conv2d/input": lambda r: _conv_case(r, "input"),
    "conv2d/kernel": lambda r: _conv_case(r, "kernel"),
    "conv2d/bias": lambda r: _conv_case(r, "bias"),
    "conv_transpose2d/input": lambda r: _convt_case(r, "input"),
    "conv_transpose2d/kernel": lambda r: _convt_case(r, "kernel"),
    "conv_transpose2d/bias": lambda r: _convt_case(r, "bias"),
    "instance_norm": _unary_case(ad.instance_norm, smooth=True),
    "relu": _unary_case(ad.relu, smooth=False),
    "leaky_relu": _unary_case(ad.leaky_relu, smooth=False),
    "sigmoid": _unary_case(ad.sigmoid, smooth=True),
    "channel_softmax": _unary_case(ad.channel_softmax, smooth=True),
    "concat_channels": _unary_case(lambda t: ad.concat_channels([t, ad.sigmoid(t), t]), smooth=True),
    "bce_loss": _bce_case,
    "l1_loss": _l1_case,
    "block/mask_generator": _block_case(lambda: build_mask_generator(16, noise_side=2), (1, 8, 2, 2)),
    "block/unet_generator": _block_case(lambda: build_unet_generator(8, base_channels=2), (1, 3, 8, 8)),
    "block/p16_discriminator": _block_case(lambda: build_patch_discriminator("p16", 3, 16), (1, 3, 16, 16)),
    "block/p70_discriminator": _block_case(lambda: build_patch_discriminator("p70", 4, 16), (1, 4, 16, 16)),
    "block/skip_discriminator": _block_case(lambda: build_skip_patch_discriminator(4, 16), (1, 4, 16, 16)),
}


@dataclass
class CaseResult:
    name: str
    max_error: float
    seeds: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def run_case(name: str, seeds: int = 20) -> CaseResult:
    t0 = time.perf_counter()
    worst = max(CASES[name](SeededRng([0x6AD, i])) for i in range(seeds))
    return CaseResult(name, worst, seeds, time.perf_counter() - t0)


def run_all(seeds: int = 20, report: Callable[[str], None] | None = None) -> list[CaseResult]:
    results = []
    for name in CASES:
        res = run_case(name, seeds)
        results.append(res)
        if report is not None:
            status = "PASS" if res.passed else "FAIL"
            report(f"{status} {name:28s} max_rel_err={res.max_error:.3e} seeds={seeds} ({res.seconds:.1f}s)")
    return results
