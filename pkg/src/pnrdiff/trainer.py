"""Joint training of the initial predictor and the residual denoiser.

The predictor g maps the blurry y to x_init; the denoiser f learns the
residual x0 - x_init under the eps-parameterized L1 objective.  Both networks
receive gradients from the single loss: g through the noisy residual that is
fed to f.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import nn
from .data import PairSet, atomic_write_bytes, derive_rng
from .nn import ParamStore
from .schedule import build_linear_schedule, sample_continuous_level
from .unet import Nets, UNet, UNetConfig, denoiser_forward, make_denoiser, make_predictor, predictor_forward


@dataclass
class TrainerConfig:
    steps: int = 20000
    batch: int = 16
    crop: int = 32
    lr: float = 1e-4
    weight_decay: float = 1e-4
    ema_decay: float = 0.9999
    seed: int = 0
    schedule: tuple[int, float, float] = (2000, 1e-6, 0.01)
    pred_channels: int = 32
    den_channels: int = 16
    blocks_per_depth: int = 1

    def __post_init__(self):
        self.schedule = tuple(self.schedule)
        if self.steps < 0 or self.batch < 1 or self.crop < 1:
            raise ValueError("steps must be >= 0, batch and crop positive")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = list(self.schedule)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentDraw:
    top: int
    left: int
    flip_h: bool
    flip_v: bool
    rot90: int


def draw_augment(rng: np.random.Generator, h: int, w: int, crop: int) -> AugmentDraw:
    if h < crop or w < crop:
        raise ValueError(f"image {h}x{w} smaller than crop {crop}")
    return AugmentDraw(
        top=int(rng.integers(0, h - crop + 1)),
        left=int(rng.integers(0, w - crop + 1)),
        flip_h=bool(rng.integers(2)),
        flip_v=bool(rng.integers(2)),
        rot90=int(rng.integers(4)),
    )


def apply_augment(img: np.ndarray, d: AugmentDraw, crop: int) -> np.ndarray:
    """Crop, flip and rotate a (C, H, W) image."""
    out = img[:, d.top:d.top + crop, d.left:d.left + crop]
    if d.flip_h:
        out = out[:, :, ::-1]
    if d.flip_v:
        out = out[:, ::-1, :]
    if d.rot90:
        out = np.rot90(out, d.rot90, axes=(1, 2))
    return np.ascontiguousarray(out)


def augment(sharp: np.ndarray, blurry: np.ndarray, rng: np.random.Generator, crop: int):
    """Apply one random crop/flip/rotation to both images of a pair."""
    if sharp.shape != blurry.shape:
        raise ValueError("pair images differ in shape")
    d = draw_augment(rng, sharp.shape[-2], sharp.shape[-1], crop)
    return apply_augment(sharp, d, crop), apply_augment(blurry, d, crop)


# ---------------------------------------------------------------------------
# optimizer and EMA


class AdamW:
    """Adam with decoupled weight decay: p <- p * (1 - lr*wd) - lr * m_hat / (sqrt(v_hat) + eps)."""

    def __init__(self, stores: list[ParamStore], lr: float = 1e-4, weight_decay: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.stores = stores
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [{n: np.zeros_like(p.value) for n, p in s.params.items()} for s in stores]
        self.v = [{n: np.zeros_like(p.value) for n, p in s.params.items()} for s in stores]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for store, ms, vs in zip(self.stores, self.m, self.v):
            for name, p in store.params.items():
                if p.grad is None:
                    continue
                g = p.grad
                m, v = ms[name], vs[name]
                m *= self.b1
                m += (1.0 - self.b1) * g
                v *= self.b2
                v += (1.0 - self.b2) * g * g
                update = (m / c1) / (np.sqrt(v / c2) + self.eps)
                p.value *= 1.0 - self.lr * self.weight_decay
                p.value -= (self.lr * update).astype(p.value.dtype)


def ema_update(store: ParamStore, decay: float) -> None:
    """shadow <- decay * shadow + (1 - decay) * raw, for every tensor."""
    if store.ema is None:
        store.init_ema()
        return
    for name, p in store.params.items():
        sh = store.ema[name]
        sh *= decay
        sh += (1.0 - decay) * p.value


# ---------------------------------------------------------------------------
# one step


class NonFiniteLoss(FloatingPointError):
    pass


def joint_loss(nets: Nets, x0: np.ndarray, y: np.ndarray, sqrt_ab: np.ndarray, eps: np.ndarray):
    """Build the graph of the residual objective; returns (loss Var, x_init Var or None)."""
    n = len(x0)
    lv = np.asarray(sqrt_ab, dtype=np.float64).reshape(n, 1, 1, 1)
    if nets.predictor is not None:
        x_init = predictor_forward(nets.predictor, y)
        residual = nn.sub(nn.const(x0), x_init)
    else:
        x_init = None
        residual = nn.const(x0)
    noisy = nn.add(nn.scale(residual, lv), nn.const((np.sqrt(1.0 - lv ** 2) * eps).astype(x0.dtype)))
    eps_hat = denoiser_forward(nets.denoiser, noisy, lv.reshape(-1).astype(x0.dtype), y)
    return nn.l1_mean(eps_hat, eps), x_init


def train_step(nets: Nets, x0: np.ndarray, y: np.ndarray, intervals: np.ndarray, opt: AdamW,
               rng: np.random.Generator | None = None, ema_decay: float | None = None,
               levels: np.ndarray | None = None, eps: np.ndarray | None = None,
               freeze_predictor: bool = False) -> float:
    """One optimizer update of both networks on a batch; returns the loss.

    Noise levels (one sqrt(alphabar) per example) and eps are drawn from
    ``rng`` unless given explicitly.
    """
    if len(x0) == 0:
        raise ValueError("empty batch")
    if levels is None:
        levels = sample_continuous_level(intervals, rng, size=len(x0))
    if eps is None:
        eps = rng.standard_normal(x0.shape).astype(x0.dtype)
    for s in nets.stores():
        s.zero_grad()
    loss, _ = joint_loss(nets, x0, y, levels, eps)
    value = float(loss.value)
    if not np.isfinite(value):
        raise NonFiniteLoss(f"non-finite loss {value}")
    nn.backward(loss)
    if freeze_predictor and nets.predictor is not None:
        nets.predictor.store.zero_grad()
    opt.step()
    if ema_decay is not None:
        for s in nets.stores():
            ema_update(s, ema_decay)
    return value


# ---------------------------------------------------------------------------
# training loop


def build_nets(cfg: TrainerConfig, channels: int = 1) -> Nets:
    pred = make_predictor(channels, cfg.pred_channels, cfg.blocks_per_depth, seed=cfg.seed * 2 + 0)
    den = make_denoiser(channels, cfg.den_channels, cfg.blocks_per_depth, seed=cfg.seed * 2 + 1)
    return Nets(pred, den)


def sample_batch(pairs: PairSet, cfg: TrainerConfig, step: int):
    """Deterministic batch for ``step``: indices and per-example augmentation streams."""
    idx = derive_rng(cfg.seed, step).integers(0, len(pairs), size=cfg.batch)
    xs, ys, rngs = [], [], []
    for i, j in enumerate(idx):
        r = derive_rng(cfg.seed, step, i)
        x, y = augment(pairs.sharp[j], pairs.blurry[j], r, cfg.crop)
        xs.append(x)
        ys.append(y)
        rngs.append(r)
    return np.stack(xs), np.stack(ys), rngs


@dataclass
class TrainResult:
    nets: Nets
    losses: list[float] = field(default_factory=list)
    step: int = 0


def train(cfg: TrainerConfig, pairs: PairSet, log_path=None, record_time: bool = True,
          progress: Callable[[int, float], None] | None = None, nets: Nets | None = None) -> TrainResult:
    """Run ``cfg.steps`` joint updates; optionally write a (step, loss, wall_ms) CSV log.

    With ``record_time=False`` the wall_ms column is written as 0 so that the
    log is a pure function of the config.
    """
    if len(pairs) == 0:
        raise ValueError("empty training set")
    h, w = pairs.sharp.shape[-2:]
    if cfg.crop > min(h, w):
        raise ValueError(f"crop {cfg.crop} exceeds image size {h}x{w}")
    if nets is None:
        nets = build_nets(cfg, pairs.sharp.shape[1])
    for s in nets.stores():
        s.init_ema()
    intervals = build_linear_schedule(*cfg.schedule).level_intervals()
    opt = AdamW(nets.stores(), cfg.lr, cfg.weight_decay)
    result = TrainResult(nets)
    rows = []
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        x0, y, rngs = sample_batch(pairs, cfg, step)
        noise_rng = derive_rng(cfg.seed, step, 1 << 32)
        loss = train_step(nets, x0, y, intervals, opt, noise_rng, cfg.ema_decay)
        result.losses.append(loss)
        wall_ms = int(round((time.perf_counter() - t0) * 1000)) if record_time else 0
        rows.append((step, loss, wall_ms))
        if progress is not None:
            progress(step, loss)
    result.step = cfg.steps
    if log_path is not None:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["step", "loss", "wall_ms"])
        for step, loss, wall_ms in rows:
            wr.writerow([step, repr(loss), wall_ms])
        atomic_write_bytes(log_path, buf.getvalue().encode())
    return result


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"PNRDIFF1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    predictor_config: UNetConfig
    denoiser_config: UNetConfig
    predictor: dict[str, np.ndarray]
    predictor_ema: dict[str, np.ndarray]
    denoiser: dict[str, np.ndarray]
    denoiser_ema: dict[str, np.ndarray]
    trainer_config: TrainerConfig
    step: int
    rng_digest: str
    version: int = FORMAT_VERSION

    @property
    def schedule(self) -> tuple[int, float, float]:
        return tuple(self.trainer_config.schedule)

    @classmethod
    def from_training(cls, nets: Nets, cfg: TrainerConfig, step: int) -> "Checkpoint":
        def values(store: ParamStore, ema: bool):
            src = store.ema if (ema and store.ema is not None) else store.state()
            return {n: np.array(v, dtype=np.float32) for n, v in src.items()}

        return cls(
            predictor_config=nets.predictor.config,
            denoiser_config=nets.denoiser.config,
            predictor=values(nets.predictor.store, False),
            predictor_ema=values(nets.predictor.store, True),
            denoiser=values(nets.denoiser.store, False),
            denoiser_ema=values(nets.denoiser.store, True),
            trainer_config=cfg,
            step=step,
            rng_digest=hashlib.sha256(f"{cfg.seed}:{step}".encode()).hexdigest()[:16],
        )

    def nets(self, use_ema: bool = True) -> Nets:
        pred = UNet.build(self.predictor_config)
        den = UNet.build(self.denoiser_config)
        pred.store.load_state(self.predictor_ema if use_ema else self.predictor)
        den.store.load_state(self.denoiser_ema if use_ema else self.denoiser)
        return Nets(pred, den)


_GROUPS = ("predictor", "predictor_ema", "denoiser", "denoiser_ema")


def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    tensors = []
    blobs = []
    for group in _GROUPS:
        for name, arr in getattr(ckpt, group).items():
            arr = np.asarray(arr, dtype="<f4")
            tensors.append({"group": group, "name": name, "shape": list(arr.shape)})
            blobs.append(np.ascontiguousarray(arr).tobytes())
    meta = {
        "version": ckpt.version,
        "predictor_config": ckpt.predictor_config.to_dict(),
        "denoiser_config": ckpt.denoiser_config.to_dict(),
        "trainer_config": ckpt.trainer_config.to_dict(),
        "schedule": list(ckpt.schedule),
        "step": ckpt.step,
        "rng_digest": ckpt.rng_digest,
        "tensors": tensors,
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<Q", len(meta_bytes)) + meta_bytes + b"".join(blobs)
    return body + _checksum(body)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    atomic_write_bytes(path, checkpoint_bytes(ckpt))


def parse_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 16:
        raise CheckpointError("truncated checkpoint")
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"bad magic {data[:len(MAGIC)]!r}")
    body, digest = data[:-8], data[-8:]
    (meta_len,) = struct.unpack("<Q", data[8:16])
    if 16 + meta_len > len(body):
        raise CheckpointError("truncated checkpoint")
    try:
        meta = json.loads(data[16:16 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt metadata: {e}") from None
    if meta.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('version')!r}")
    expected = 16 + meta_len + 4 * sum(int(np.prod(t["shape"])) for t in meta["tensors"])
    if len(body) != expected:
        raise CheckpointError(f"truncated checkpoint: {len(body)} bytes, expected {expected}")
    if _checksum(body) != digest:
        raise CheckpointError("checksum mismatch")
    groups: dict[str, dict[str, np.ndarray]] = {g: {} for g in _GROUPS}
    pos = 16 + meta_len
    for t in meta["tensors"]:
        count = int(np.prod(t["shape"]))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(t["shape"])
        groups[t["group"]][t["name"]] = arr.astype(np.float32)
        pos += 4 * count
    return Checkpoint(
        predictor_config=UNetConfig(**meta["predictor_config"]),
        denoiser_config=UNetConfig(**meta["denoiser_config"]),
        trainer_config=TrainerConfig.from_dict(meta["trainer_config"]),
        step=meta["step"],
        rng_digest=meta["rng_digest"],
        version=meta["version"],
        **groups,
    )


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
