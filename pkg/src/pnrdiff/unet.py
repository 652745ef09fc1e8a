"""Fully-convolutional U-Nets for the initial predictor and the denoiser.

Both networks share one architecture: four resolution depths with channel
multipliers (1, 2, 3, 4), residual blocks without normalization, and skip
connections between matching resolutions.  No parameter depends on the
input size; inputs are reflect-padded to a multiple of 8 and the output is
cropped back.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .nn import ParamStore, Var

CHANNEL_MULTIPLIERS = (1, 2, 3, 4)
SIZE_MULTIPLE = 2 ** (len(CHANNEL_MULTIPLIERS) - 1)


@dataclass(frozen=True)
class UNetConfig:
    base_channels: int
    in_channels: int
    out_channels: int
    blocks_per_depth: int = 1
    channel_multipliers: tuple[int, ...] = CHANNEL_MULTIPLIERS

    def __post_init__(self):
        if tuple(self.channel_multipliers) != CHANNEL_MULTIPLIERS:
            raise ValueError(f"channel multipliers are fixed at {CHANNEL_MULTIPLIERS}")
        for name in ("base_channels", "in_channels", "out_channels", "blocks_per_depth"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return {
            "base_channels": self.base_channels,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "blocks_per_depth": self.blocks_per_depth,
        }


@dataclass(frozen=True)
class BlockSpec:
    name: str
    cin: int
    cout: int
    resample: str = "none"  # none | down | up

    @property
    def needs_skip_conv(self) -> bool:
        return self.cin != self.cout or self.resample != "none"


# ---------------------------------------------------------------------------
# residual block


def init_res_block(store: ParamStore, rng: np.random.Generator, spec: BlockSpec, dtype=np.float32) -> None:
    p = spec.name
    store.add(f"{p}.conv1.w", nn.conv_init(rng, 3, spec.cin, spec.cout, dtype))
    store.add(f"{p}.conv1.b", np.zeros(spec.cout, dtype))
    # zero second conv: the block starts as its skip path
    store.add(f"{p}.conv2.w", np.zeros((3, 3, spec.cout, spec.cout), dtype))
    store.add(f"{p}.conv2.b", np.zeros(spec.cout, dtype))
    if spec.needs_skip_conv:
        store.add(f"{p}.skip.w", nn.conv_init(rng, 1, spec.cin, spec.cout, dtype))
        store.add(f"{p}.skip.b", np.zeros(spec.cout, dtype))


def res_block(x: Var, store: ParamStore, spec: BlockSpec) -> Var:
    """act -> [up] -> conv3x3 (stride 2 when down) -> act -> conv3x3, plus skip.

    The skip path sees the same resampling (nearest upsample or stride-2
    subsampling) and a 1x1 projection whenever shape changes.
    """
    p = spec.name
    if x.value.shape[-1] != spec.cin:
        raise ValueError(f"{p}: expected {spec.cin} channels, got {x.value.shape[-1]}")
    stride = 2 if spec.resample == "down" else 1
    h = nn.silu(x)
    if spec.resample == "up":
        h = nn.upsample_nearest(h)
        x = nn.upsample_nearest(x)
    h = nn.conv2d(h, store[f"{p}.conv1.w"], store[f"{p}.conv1.b"], stride=stride)
    h = nn.silu(h)
    h = nn.conv2d(h, store[f"{p}.conv2.w"], store[f"{p}.conv2.b"])
    if spec.needs_skip_conv:
        x = nn.conv2d(x, store[f"{p}.skip.w"], store[f"{p}.skip.b"], stride=stride)
    return nn.add(h, x)


def conv_flops(k: int, cin: int, cout: int, h: int, w: int) -> int:
    return 2 * k * k * cin * cout * h * w


def res_block_flops(spec: BlockSpec, h: int, w: int) -> int:
    if spec.resample == "down":
        ho, wo = -(-h // 2), -(-w // 2)
    elif spec.resample == "up":
        ho, wo = 2 * h, 2 * w
    else:
        ho, wo = h, w
    total = conv_flops(3, spec.cin, spec.cout, ho, wo) + conv_flops(3, spec.cout, spec.cout, ho, wo)
    if spec.needs_skip_conv:
        total += conv_flops(1, spec.cin, spec.cout, ho, wo)
    return total


# ---------------------------------------------------------------------------
# network


@dataclass
class UNet:
    config: UNetConfig
    store: ParamStore
    down: list[BlockSpec] = field(default_factory=list)
    mid: list[BlockSpec] = field(default_factory=list)
    up: list[BlockSpec] = field(default_factory=list)
    calls: int = 0

    @classmethod
    def build(cls, config: UNetConfig, seed: int = 0, dtype=np.float32) -> "UNet":
        rng = np.random.default_rng(seed)
        c0 = config.base_channels
        chans = [c0 * m for m in config.channel_multipliers]
        nb = config.blocks_per_depth
        down, mid, up = [], [], []
        skip_ch = []
        ch = c0
        for level, c in enumerate(chans):
            for i in range(nb):
                down.append(BlockSpec(f"down{level}.{i}", ch, c))
                ch = c
            skip_ch.append(ch)
            if level < len(chans) - 1:
                down.append(BlockSpec(f"down{level}.resample", ch, chans[level + 1], "down"))
                ch = chans[level + 1]
        mid.append(BlockSpec("mid", ch, ch))
        for level in reversed(range(len(chans))):
            c = chans[level]
            up.append(BlockSpec(f"up{level}.0", ch + skip_ch.pop(), c))
            ch = c
            for i in range(1, nb):
                up.append(BlockSpec(f"up{level}.{i}", ch, c))
            if level > 0:
                up.append(BlockSpec(f"up{level}.resample", ch, chans[level - 1], "up"))
                ch = chans[level - 1]

        store = ParamStore()
        store.add("conv_in.w", nn.conv_init(rng, 3, config.in_channels, c0, dtype))
        store.add("conv_in.b", np.zeros(c0, dtype))
        for spec in down + mid + up:
            init_res_block(store, rng, spec, dtype)
        # zero output layer: the network starts by predicting 0
        store.add("conv_out.w", np.zeros((3, 3, ch, config.out_channels), dtype))
        store.add("conv_out.b", np.zeros(config.out_channels, dtype))
        return cls(config, store, down, mid, up)

    def forward_nhwc(self, x: Var, skip_mask: set[int] | None = None) -> Var:
        """Run on a channels-last input whose spatial dims are multiples of 8.

        One skip per resolution depth (index 0 = full resolution) feeds the
        first decoder block at that depth. ``skip_mask`` zeroes the listed
        skips, for connectivity probes.
        """
        s = self.store
        h = nn.conv2d(x, s["conv_in.w"], s["conv_in.b"])
        skips = []
        for spec in self.down:
            if spec.resample == "down":
                skips.append(h)
            h = res_block(h, s, spec)
        skips.append(h)
        for spec in self.mid:
            h = res_block(h, s, spec)
        for spec in self.up:
            if spec.name.endswith(".0"):
                skip_index = len(skips) - 1
                skip = skips.pop()
                if skip_mask and skip_index in skip_mask:
                    skip = nn.const(np.zeros_like(skip.value))
                h = nn.concat([h, skip])
            h = res_block(h, s, spec)
        h = nn.silu(h)
        return nn.conv2d(h, s["conv_out.w"], s["conv_out.b"])

    def __call__(self, x_nchw, skip_mask: set[int] | None = None) -> Var:
        """NCHW in, NCHW out; pads to a multiple of 8 and crops back."""
        self.calls += 1
        x = to_nhwc(x_nchw)
        _, h, w, _ = x.value.shape
        ph, pw = (-h) % SIZE_MULTIPLE, (-w) % SIZE_MULTIPLE
        x = nn.reflect_pad(x, ph, pw)
        out = self.forward_nhwc(x, skip_mask)
        return to_nchw(nn.crop(out, h, w))

    @property
    def n_skips(self) -> int:
        return len(self.config.channel_multipliers)

    def count_params(self) -> int:
        return self.store.count()

    def count_flops(self, H: int, W: int) -> int:
        """Multiply-add FLOPs (2 per MAC) of every convolution for one H x W image."""
        h = H + (-H) % SIZE_MULTIPLE
        w = W + (-W) % SIZE_MULTIPLE
        c0 = self.config.base_channels
        total = conv_flops(3, self.config.in_channels, c0, h, w)
        for spec in self.down + self.mid + self.up:
            total += res_block_flops(spec, h, w)
            if spec.resample == "down":
                h, w = -(-h // 2), -(-w // 2)
            elif spec.resample == "up":
                h, w = 2 * h, 2 * w
        total += conv_flops(3, self.store["conv_out.w"].value.shape[2], self.config.out_channels, h, w)
        return total


def to_nhwc(x) -> Var:
    x = nn.const(x)
    return nn.Var(np.ascontiguousarray(x.value.transpose(0, 2, 3, 1)), (x,),
                  lambda g: (g.transpose(0, 3, 1, 2),))


def to_nchw(x: Var) -> Var:
    return nn.Var(np.ascontiguousarray(x.value.transpose(0, 3, 1, 2)), (x,),
                  lambda g: (g.transpose(0, 2, 3, 1),))


# ---------------------------------------------------------------------------
# the two networks

DEFAULT_PRED_CHANNELS = 32
DEFAULT_DEN_CHANNELS = 16


def make_predictor(image_channels: int = 1, base_channels: int = DEFAULT_PRED_CHANNELS,
                   blocks_per_depth: int = 1, seed: int = 0) -> UNet:
    cfg = UNetConfig(base_channels, image_channels, image_channels, blocks_per_depth)
    return UNet.build(cfg, seed=seed)


def make_denoiser(image_channels: int = 1, base_channels: int = DEFAULT_DEN_CHANNELS,
                  blocks_per_depth: int = 1, seed: int = 1) -> UNet:
    # input: noisy residual, conditioning image, constant noise-level channel
    cfg = UNetConfig(base_channels, 2 * image_channels + 1, image_channels, blocks_per_depth)
    return UNet.build(cfg, seed=seed)


def predictor_forward(net: UNet, y) -> Var:
    return net(y)


def level_channel(sqrt_alphabar, like: np.ndarray) -> np.ndarray:
    n, _, h, w = like.shape
    lv = np.broadcast_to(np.asarray(sqrt_alphabar, dtype=like.dtype).reshape(-1), (n,))
    return np.broadcast_to(lv[:, None, None, None], (n, 1, h, w)).astype(like.dtype)


def denoiser_forward(net: UNet, zt, sqrt_alphabar, y) -> Var:
    """Predict eps from (z_t, sqrt(alphabar), y).

    ``sqrt_alphabar`` is a scalar or one value per batch element; it enters
    the network as a constant input channel.
    """
    zt = nn.const(zt)
    y = nn.const(y)
    if zt.value.shape[0] != y.value.shape[0] or zt.value.shape[2:] != y.value.shape[2:]:
        raise ValueError(f"z_t {zt.value.shape} and y {y.value.shape} are not aligned")
    level = nn.const(level_channel(sqrt_alphabar, zt.value))
    return net(nn.concat([zt, y, level], axis=1))


@dataclass
class Nets:
    """The predictor/denoiser pair. A ``None`` predictor stands for x_init = 0."""

    predictor: UNet | None
    denoiser: UNet

    def predict(self, y: np.ndarray) -> np.ndarray:
        if self.predictor is None:
            return np.zeros_like(y)
        return predictor_forward(self.predictor, y).value

    def denoise(self, zt: np.ndarray, sqrt_alphabar, y: np.ndarray) -> np.ndarray:
        return denoiser_forward(self.denoiser, zt.astype(y.dtype, copy=False), sqrt_alphabar, y).value

    def stores(self) -> list[ParamStore]:
        nets = [self.predictor, self.denoiser] if self.predictor is not None else [self.denoiser]
        return [n.store for n in nets]

    @contextmanager
    def ema_weights(self):
        """Temporarily evaluate with the EMA shadow weights of both networks."""
        stores = [s for s in self.stores() if s.ema is not None]
        for s in stores:
            s.swap_ema()
        try:
            yield self
        finally:
            for s in stores:
                s.swap_ema()
