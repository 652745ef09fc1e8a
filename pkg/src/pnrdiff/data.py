"""Synthetic deblurring pairs: blur kernels, degradation, image IO, manifests.

Images live in [-1, 1] and are stored on disk as 8-bit binary PGM (gray) or
PPM (color).  A dataset directory holds ``sharp/``, ``blurry/`` and
``kernels/`` subdirectories plus ``manifest.json``.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

MANIFEST_VERSION = 1
MAX_KERNEL = 31
# Gaussian-kernel option: sigma ~ U(lo, hi) * max_kernel
GAUSSIAN_SIGMA_FRACTION = (1.0 / 24.0, 1.0 / 6.0)


class ImageFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# PPM / PGM


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round((np.asarray(img, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(u8: np.ndarray) -> np.ndarray:
    return u8.astype(np.float32) / np.float32(127.5) - np.float32(1.0)


def encode_pnm(u8: np.ndarray) -> bytes:
    """(C, H, W) uint8 with C in {1, 3} -> P5/P6 bytes."""
    if u8.ndim != 3 or u8.shape[0] not in (1, 3):
        raise ImageFormatError(f"expected (1|3, H, W) array, got {u8.shape}")
    c, h, w = u8.shape
    magic = b"P5" if c == 1 else b"P6"
    header = magic + f"\n{w} {h}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(u8.transpose(1, 2, 0)).tobytes()


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ImageFormatError("truncated header")
    return buf[start:pos], pos


def decode_pnm(buf: bytes) -> np.ndarray:
    """P5/P6 bytes -> (C, H, W) uint8."""
    if buf[:2] not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {buf[:2]!r}")
    c = 1 if buf[:2] == b"P5" else 3
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise ImageFormatError(f"bad header field {tok!r}") from None
    w, h, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace after maxval
    data = buf[pos:pos + w * h * c]
    if len(data) != w * h * c:
        raise ImageFormatError("truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, c).transpose(2, 0, 1).copy()


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_ppm(path, img: np.ndarray) -> None:
    """Write a [-1, 1] image of shape (C, H, W) or (1, C, H, W)."""
    img = np.asarray(img)
    if img.ndim == 4:
        if img.shape[0] != 1:
            raise ImageFormatError("write_ppm takes a single image")
        img = img[0]
    if img.ndim == 2:
        img = img[None]
    atomic_write_bytes(path, encode_pnm(to_uint8(img)))


def read_ppm(path) -> np.ndarray:
    """Read a P5/P6 file as a (1, C, H, W) float32 array in [-1, 1]."""
    with open(path, "rb") as f:
        buf = f.read()
    return from_uint8(decode_pnm(buf))[None]


# ---------------------------------------------------------------------------
# kernels


def delta_kernel() -> np.ndarray:
    return np.ones((1, 1), dtype=np.float64)


def _gaussian_smooth(k: np.ndarray, sigma: float) -> np.ndarray:
    return ndimage.gaussian_filter(k, sigma, mode="constant", truncate=3.0)


def _trim_odd_square(k: np.ndarray) -> np.ndarray:
    """Crop to the smallest centered odd square holding all weight above 1e-12 of the peak."""
    size = k.shape[0]
    c = size // 2
    mask = k > k.max() * 1e-12
    ys, xs = np.nonzero(mask)
    r = int(max(np.abs(ys - c).max(), np.abs(xs - c).max()))
    return k[c - r:c + r + 1, c - r:c + r + 1]


def camera_shake_trajectory(length: float, rng: np.random.Generator, n_points: int = 200,
                            momentum: float = 0.9, jitter: float = 0.2) -> np.ndarray:
    """A correlated random walk of total arc length ``length`` (pixels), centered at 0."""
    if length <= 0:
        return np.zeros((1, 2))
    angle = rng.uniform(0, 2 * np.pi)
    v = np.array([np.cos(angle), np.sin(angle)])
    step = length / (n_points - 1)
    pts = np.zeros((n_points, 2))
    for i in range(1, n_points):
        v = momentum * v + jitter * rng.standard_normal(2)
        nv = np.linalg.norm(v)
        if nv == 0:
            nv = 1.0
        v = v / nv
        pts[i] = pts[i - 1] + step * v
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    return pts - (lo + hi) / 2


def rasterize_trajectory(pts: np.ndarray, size: int) -> np.ndarray:
    """Bilinear splatting of equally weighted points onto a size x size grid centered at 0."""
    k = np.zeros((size, size))
    c = size // 2
    x = np.clip(pts[:, 0] + c, 0, size - 1)
    y = np.clip(pts[:, 1] + c, 0, size - 1)
    x0 = np.minimum(np.floor(x).astype(int), size - 2) if size > 1 else np.zeros(len(x), int)
    y0 = np.minimum(np.floor(y).astype(int), size - 2) if size > 1 else np.zeros(len(y), int)
    fx, fy = x - x0, y - y0
    if size == 1:
        k[0, 0] = len(pts)
        return k
    np.add.at(k, (y0, x0), (1 - fx) * (1 - fy))
    np.add.at(k, (y0, x0 + 1), fx * (1 - fy))
    np.add.at(k, (y0 + 1, x0), (1 - fx) * fy)
    np.add.at(k, (y0 + 1, x0 + 1), fx * fy)
    return k


def gen_kernel(rng: np.random.Generator, max_support: int = MAX_KERNEL, length: float | None = None,
               p_delta: float = 0.05, smooth_sigma: float = 0.5, jitter: float = 0.2) -> np.ndarray:
    """Random camera-shake kernel: odd square support <= ``max_support``, unit sum.

    ``length`` is the trajectory arc length in pixels; when omitted it is drawn
    uniformly up to ``max_support - 1``. A zero-length trajectory (or the
    ``p_delta`` branch) gives an exact delta.
    """
    if max_support < 1 or max_support % 2 == 0:
        raise ValueError("max_support must be a positive odd integer")
    if length is None:
        if rng.random() < p_delta:
            return delta_kernel()
        length = rng.uniform(0, max_support - 1)
    if length <= 0:
        return delta_kernel()
    pts = camera_shake_trajectory(length, rng, jitter=jitter)
    k = rasterize_trajectory(pts, max_support)
    k = _gaussian_smooth(k, smooth_sigma)
    k = np.maximum(k, 0)
    k = _trim_odd_square(k)
    return k / k.sum()


def gaussian_kernel(sigma: float, max_support: int = MAX_KERNEL, sigma_y: float | None = None,
                    theta: float = 0.0) -> np.ndarray:
    """Normalized (optionally anisotropic, rotated) Gaussian kernel on an odd grid."""
    if sigma <= 0:
        return delta_kernel()
    sy = sigma if sigma_y is None else sigma_y
    r = int(min(np.ceil(3 * max(sigma, sy)), max_support // 2))
    if r == 0:
        return delta_kernel()
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    ct, st = np.cos(theta), np.sin(theta)
    u = ct * xx + st * yy
    v = -st * xx + ct * yy
    k = np.exp(-0.5 * ((u / sigma) ** 2 + (v / sy) ** 2))
    return k / k.sum()


def kernel_spread(k: np.ndarray) -> float:
    """Root-mean-square radius of the kernel mass about its centroid."""
    k = np.asarray(k, dtype=np.float64)
    k = k / k.sum()
    yy, xx = np.mgrid[0:k.shape[0], 0:k.shape[1]]
    cy, cx = (k * yy).sum(), (k * xx).sum()
    return float(np.sqrt((k * ((yy - cy) ** 2 + (xx - cx) ** 2)).sum()))


# ---------------------------------------------------------------------------
# degradation


def apply_blur(sharp: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Convolve every channel of (..., H, W) with ``k`` using reflect boundaries."""
    sharp = np.asarray(sharp)
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
        raise ValueError(f"kernel must be an odd square, got {k.shape}")
    flat = sharp.reshape(-1, *sharp.shape[-2:]).astype(np.float64)
    if k.shape[0] > min(flat.shape[-2:]):
        raise ValueError(f"kernel {k.shape} larger than image {flat.shape[-2:]}")
    out = np.stack([ndimage.convolve(ch, k, mode="reflect") for ch in flat])
    return out.reshape(sharp.shape).astype(sharp.dtype, copy=False)


def add_noise(img: np.ndarray, sigma_8bit: float, rng: np.random.Generator) -> np.ndarray:
    """Add white Gaussian noise with std ``sigma_8bit`` in 8-bit units (rescaled to [-1, 1])."""
    if not 0 <= sigma_8bit <= 255:
        raise ValueError(f"sigma must be non-negative 8-bit units, got {sigma_8bit}")
    if sigma_8bit == 0:
        return np.array(img, copy=True)
    noise = rng.standard_normal(np.shape(img)) * (sigma_8bit * 2.0 / 255.0)
    return (img + noise).astype(np.asarray(img).dtype, copy=False)


# ---------------------------------------------------------------------------
# procedural sharp images


def _supersampled_grid(h: int, w: int, ss: int):
    ys = (np.arange(h * ss) + 0.5) / ss
    xs = (np.arange(w * ss) + 0.5) / ss
    return np.meshgrid(ys, xs, indexing="ij")


def procedural_image(h: int, w: int, rng: np.random.Generator, n_shapes: int | None = None,
                     supersample: int = 4) -> np.ndarray:
    """Anti-aliased gray image of gradients, polygons, ellipses and strokes, values in [-1, 1]."""
    ss = supersample
    yy, xx = _supersampled_grid(h, w, ss)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(angle) * xx / w + np.sin(angle) * yy / h)
    img = rng.uniform(-0.6, 0.6) + rng.uniform(-0.4, 0.4) * ramp
    if n_shapes is None:
        n_shapes = int(rng.integers(3, 8))
    scale = min(h, w)
    for _ in range(n_shapes):
        kind = rng.integers(0, 3)
        value = rng.uniform(-1, 1)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        if kind == 0:
            # convex polygon from sorted random angles
            n = int(rng.integers(3, 7))
            ang = np.sort(rng.uniform(0, 2 * np.pi, n))
            rad = rng.uniform(0.1, 0.35) * scale
            px, py = cx + rad * np.cos(ang), cy + rad * np.sin(ang)
            inside = np.ones_like(xx, dtype=bool)
            for i in range(n):
                x0, y0, x1, y1 = px[i], py[i], px[(i + 1) % n], py[(i + 1) % n]
                inside &= (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0) >= 0
            mask = inside
        elif kind == 1:
            a, b = rng.uniform(0.05, 0.3, 2) * scale
            t = rng.uniform(0, np.pi)
            u = (xx - cx) * np.cos(t) + (yy - cy) * np.sin(t)
            v = -(xx - cx) * np.sin(t) + (yy - cy) * np.cos(t)
            mask = (u / a) ** 2 + (v / b) ** 2 <= 1
        else:
            # text-like stroke: thick line segment
            t = rng.uniform(0, np.pi)
            half = rng.uniform(0.15, 0.45) * scale
            width = rng.uniform(0.6, 2.0)
            x0, y0 = cx - half * np.cos(t), cy - half * np.sin(t)
            x1, y1 = cx + half * np.cos(t), cy + half * np.sin(t)
            dx, dy = x1 - x0, y1 - y0
            s = np.clip(((xx - x0) * dx + (yy - y0) * dy) / (dx * dx + dy * dy), 0, 1)
            dist = np.hypot(xx - (x0 + s * dx), yy - (y0 + s * dy))
            mask = dist <= width / 2
        img = np.where(mask, value, img)
    img = img.reshape(h, ss, w, ss).mean(axis=(1, 3))
    return np.clip(img, -1, 1).astype(np.float32)


# ---------------------------------------------------------------------------
# dataset


@dataclass
class BlurPairRecord:
    sharp_path: str
    blurry_path: str
    kernel: np.ndarray
    sigma: float
    seed: int
    kernel_path: str = ""


def derive_rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]))


def _kernel_to_u8(k: np.ndarray) -> np.ndarray:
    return np.round(k / k.max() * 255).astype(np.uint8)[None]


def load_source_images(source_dir) -> list[np.ndarray]:
    paths = sorted(p for p in Path(source_dir).iterdir() if p.suffix.lower() in (".ppm", ".pgm", ".pnm"))
    if not paths:
        raise FileNotFoundError(f"no .ppm/.pgm images in {source_dir}")
    return [read_ppm(p)[0] for p in paths]


def make_pair(index: int, seed: int, size: tuple[int, int], max_kernel: int, noise_max: float,
              gaussian_fraction: float = 0.0, sources: list[np.ndarray] | None = None):
    """Generate (sharp_u8, blurry_u8, kernel, sigma) for one dataset index."""
    rng = derive_rng(seed, index)
    h, w = size
    if sources:
        src = sources[int(rng.integers(len(sources)))]
        if src.shape[1] < h or src.shape[2] < w:
            raise ValueError(f"source image {src.shape[1:]} smaller than {size}")
        top = int(rng.integers(0, src.shape[1] - h + 1))
        left = int(rng.integers(0, src.shape[2] - w + 1))
        sharp = src[:, top:top + h, left:left + w]
    else:
        sharp = procedural_image(h, w, rng)[None]
    sharp_u8 = to_uint8(sharp)
    sharp_q = from_uint8(sharp_u8).astype(np.float64)
    if rng.random() < gaussian_fraction:
        # lower bound keeps every Gaussian pair visibly blurred
        sig = rng.uniform(max_kernel * GAUSSIAN_SIGMA_FRACTION[0], max_kernel * GAUSSIAN_SIGMA_FRACTION[1])
        k = gaussian_kernel(sig, max_kernel)
    else:
        k = gen_kernel(rng, max_kernel)
    sigma = float(rng.uniform(0.0, noise_max))
    blurry = add_noise(apply_blur(sharp_q, k), sigma, rng)
    return sharp_u8, to_uint8(blurry), k, sigma


def make_dataset(out_dir, n: int, size: tuple[int, int], seed: int, max_kernel: int = MAX_KERNEL,
                 noise_max: float = 15.0, gaussian_fraction: float = 0.0, source_dir=None) -> dict:
    """Write ``n`` sharp/blurry pairs plus ``manifest.json``; returns the manifest dict."""
    h, w = size
    if max_kernel > min(h, w):
        raise ValueError(f"max kernel {max_kernel} exceeds image size {h}x{w}")
    out = Path(out_dir)
    sources = load_source_images(source_dir) if source_dir else None
    pairs = []
    for i in range(n):
        sharp_u8, blurry_u8, k, sigma = make_pair(i, seed, size, max_kernel, noise_max,
                                                  gaussian_fraction, sources)
        rec = {
            "sharp": f"sharp/{i:06d}{'.pgm' if sharp_u8.shape[0] == 1 else '.ppm'}",
            "blurry": f"blurry/{i:06d}{'.pgm' if blurry_u8.shape[0] == 1 else '.ppm'}",
            "sigma": sigma,
            "kernel_path": f"kernels/{i:06d}.pgm",
            "seed": int(seed),
        }
        atomic_write_bytes(out / rec["sharp"], encode_pnm(sharp_u8))
        atomic_write_bytes(out / rec["blurry"], encode_pnm(blurry_u8))
        atomic_write_bytes(out / rec["kernel_path"], encode_pnm(_kernel_to_u8(k)))
        pairs.append(rec)
    manifest = {"version": MANIFEST_VERSION, "seed": int(seed), "size": [h, w], "pairs": pairs}
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(out / "manifest.json", (json.dumps(manifest, indent=1) + "\n").encode())
    return manifest


def read_manifest(data_dir) -> dict:
    with open(Path(data_dir) / "manifest.json") as f:
        manifest = json.load(f)
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {manifest.get('version')!r}")
    return manifest


def read_kernel(path) -> np.ndarray:
    with open(path, "rb") as f:
        k = decode_pnm(f.read())[0].astype(np.float64)
    return k / k.sum()


@dataclass
class PairSet:
    """In-memory view of a dataset: stacked (N, C, H, W) arrays."""

    sharp: np.ndarray
    blurry: np.ndarray
    sigmas: np.ndarray
    spreads: np.ndarray
    names: list[str]

    def __len__(self):
        return len(self.sharp)

    def subset(self, idx) -> "PairSet":
        idx = np.asarray(idx, dtype=np.intp)
        return PairSet(self.sharp[idx], self.blurry[idx], self.sigmas[idx], self.spreads[idx],
                       [self.names[i] for i in idx])


def load_pairs(data_dir) -> PairSet:
    data_dir = Path(data_dir)
    manifest = read_manifest(data_dir)
    sharp, blurry, sigmas, spreads, names = [], [], [], [], []
    for rec in manifest["pairs"]:
        s = read_ppm(data_dir / rec["sharp"])[0]
        b = read_ppm(data_dir / rec["blurry"])[0]
        if s.shape != b.shape:
            raise ValueError(f"pair {rec['sharp']} / {rec['blurry']} dimension mismatch")
        sharp.append(s)
        blurry.append(b)
        sigmas.append(rec["sigma"])
        spreads.append(kernel_spread(read_kernel(data_dir / rec["kernel_path"])))
        names.append(Path(rec["sharp"]).stem)
    if not sharp:
        h, w = manifest["size"]
        empty = np.zeros((0, 1, h, w), np.float32)
        return PairSet(empty, empty.copy(), np.zeros(0), np.zeros(0), [])
    return PairSet(np.stack(sharp), np.stack(blurry), np.array(sigmas), np.array(spreads), names)
