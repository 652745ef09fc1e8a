"""Finite-difference checks of every substrate op and of small full networks."""

from __future__ import annotations

import numpy as np

from . import nn
from .nn import GradReport, ParamStore, gradcheck, leaf
from .unet import BlockSpec, UNet, UNetConfig, denoiser_forward, init_res_block, res_block


def _rand(rng, *shape):
    return rng.standard_normal(shape)


def check_conv(rng, k=3, stride=1, shape=(2, 5, 5, 3), cout=4, tol=1e-4) -> GradReport:
    x = leaf(_rand(rng, *shape))
    w = leaf(_rand(rng, k, k, shape[-1], cout))
    b = leaf(_rand(rng, cout))
    return gradcheck(lambda: nn.conv2d(x, w, b, stride), {"x": x, "w": w, "b": b}, tol)


def check_unary(op, rng, shape=(2, 4, 6, 3), tol=1e-4) -> GradReport:
    x = leaf(_rand(rng, *shape))
    return gradcheck(lambda: op(x), {"x": x}, tol)


def check_concat(rng, tol=1e-4) -> GradReport:
    a, b = leaf(_rand(rng, 1, 3, 3, 2)), leaf(_rand(rng, 1, 3, 3, 5))
    return gradcheck(lambda: nn.concat([a, b]), {"a": a, "b": b}, tol)


def check_res_block(rng, resample="none", cin=3, cout=5, shape=(2, 5, 7), tol=1e-4) -> GradReport:
    store = ParamStore()
    spec = BlockSpec("blk", cin, cout, resample)
    init_res_block(store, rng, spec, np.float64)
    for p in store:
        # the zero-initialized conv would hide the main path from the check
        p.value = rng.standard_normal(p.value.shape) * 0.5
    x = leaf(_rand(rng, shape[0], shape[1], shape[2], cin))
    wrt = {"x": x, **{p.name: p for p in store}}
    return gradcheck(lambda: res_block(x, store, spec), wrt, tol)


def randomized_unet(cfg: UNetConfig, rng) -> UNet:
    net = UNet.build(cfg, seed=int(rng.integers(1 << 31)), dtype=np.float64)
    for p in net.store:
        fan_in = int(np.prod(p.value.shape[:-1])) if p.value.ndim > 1 else 10
        p.value = rng.standard_normal(p.value.shape) / np.sqrt(fan_in)
    return net


def check_unet(rng, denoiser: bool = False, size=(6, 10), tol=1e-4, max_entries=6) -> GradReport:
    """Full tiny U-Net at a non-multiple-of-8 size, every parameter tensor sampled."""
    c = 1
    if denoiser:
        cfg = UNetConfig(2, 2 * c + 1, c)
    else:
        cfg = UNetConfig(2, c, c)
    net = randomized_unet(cfg, rng)
    x = leaf(_rand(rng, 2, c, *size))
    if denoiser:
        y = _rand(rng, 2, c, *size)
        levels = np.array([0.3, 0.8])
        fn = lambda: denoiser_forward(net, x, levels, y)  # noqa: E731
    else:
        fn = lambda: net(x)  # noqa: E731
    wrt = {"input": x, **{p.name: p for p in net.store}}
    return gradcheck(fn, wrt, tol, max_entries=max_entries)


def run_suite(seed: int = 0, tolerance: float = 1e-4) -> dict[str, GradReport]:
    rng = np.random.default_rng(seed)
    return {
        "conv2d_3x3_s1": check_conv(rng, tol=tolerance),
        "conv2d_3x3_s2_odd": check_conv(rng, stride=2, shape=(2, 7, 5, 3), tol=tolerance),
        "conv2d_5x5_s2_even": check_conv(rng, k=5, stride=2, shape=(1, 6, 8, 2), tol=tolerance),
        "conv2d_1x1_s2": check_conv(rng, k=1, stride=2, shape=(2, 5, 6, 3), tol=tolerance),
        "upsample_nearest": check_unary(nn.upsample_nearest, rng, tol=tolerance),
        "avg_pool2": check_unary(nn.avg_pool2, rng, tol=tolerance),
        "silu": check_unary(nn.silu, rng, tol=tolerance),
        "leaky_relu": check_unary(lambda x: nn.leaky_relu(x, 0.2), rng, tol=tolerance),
        "concat": check_concat(rng, tol=tolerance),
        "reflect_pad": check_unary(lambda x: nn.reflect_pad(x, 3, 2), rng, tol=tolerance),
        "crop": check_unary(lambda x: nn.crop(x, 3, 4), rng, tol=tolerance),
        "res_block": check_res_block(rng, tol=tolerance),
        "res_block_down": check_res_block(rng, "down", tol=tolerance),
        "res_block_up": check_res_block(rng, "up", cin=4, cout=4, tol=tolerance),
        "unet_predictor": check_unet(rng, tol=tolerance),
        "unet_denoiser": check_unet(rng, denoiser=True, tol=tolerance),
    }
