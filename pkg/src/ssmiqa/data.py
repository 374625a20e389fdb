"""Dataset plumbing: manifests, patch cropping, and a synthetic IQA generator.

The generator produces procedural base images (smooth gradients, shapes,
filtered texture) and degrades each with one of five parametric distortions
at levels 1..5. Scores decrease strictly with level; distortion strengths are
calibrated so PSNR against the pristine base ranks consistently with the
scores across kinds.
"""

from __future__ import annotations

import csv
import hashlib
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

DISTORTION_KINDS = ("gaussian-blur", "white-noise", "block-artifact", "color-shift", "contrast-crush")
LEVELS = (1, 2, 3, 4, 5)


class DataError(ValueError):
    """Manifest or image content is invalid."""


@dataclass
class IqaSample:
    """One (image, score) pair; image is (H, W, 3) float64 in [0, 1]."""

    image: np.ndarray
    mos: float
    domain: str = "synthetic"
    sample_id: str = ""


@dataclass(frozen=True)
class DistortionSpec:
    kind: str
    level: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DISTORTION_KINDS:
            raise DataError(f"unknown distortion kind {self.kind!r}")
        if not 0 <= self.level <= 5:
            raise DataError(f"distortion level must be in 0..5, got {self.level}")


# -- distortions ----------------------------------------------------------------

# per-level strengths, calibrated so PSNR bands line up across kinds
_BLUR_SIGMA = {1: 1.5, 2: 2.9, 3: 5.0, 4: 8.5, 5: 14.0}
_NOISE_STD = {1: 0.018, 2: 0.033, 3: 0.06, 4: 0.095, 5: 0.15}
_BLOCK_MIX = {1: (0.3, 8), 2: (0.55, 8), 3: (0.95, 8), 4: (1.0, 12), 5: (1.0, 18)}
_SHIFT_AMT = {1: 0.018, 2: 0.033, 3: 0.06, 4: 0.1, 5: 0.16}
_CRUSH_AMT = {1: 0.09, 2: 0.17, 3: 0.31, 4: 0.5, 5: 0.72}


def apply_distortion(img: np.ndarray, spec: DistortionSpec) -> np.ndarray:
    """Degrade an image per spec; level 0 is the identity."""
    if spec.level == 0:
        return img.copy()
    out = img.astype(np.float64, copy=True)
    if spec.kind == "gaussian-blur":
        sigma = _BLUR_SIGMA[spec.level]
        out = ndimage.gaussian_filter(out, sigma=(sigma, sigma, 0.0), mode="reflect")
    elif spec.kind == "white-noise":
        rng = np.random.default_rng(spec.seed)
        out = out + rng.normal(0.0, _NOISE_STD[spec.level], size=out.shape)
    elif spec.kind == "block-artifact":
        mix, block = _BLOCK_MIX[spec.level]
        out = (1.0 - mix) * out + mix * _blockify(out, block)
    elif spec.kind == "color-shift":
        d = _SHIFT_AMT[spec.level]
        out = out + np.array([d, -0.6 * d, 0.3 * d])
    elif spec.kind == "contrast-crush":
        out = 0.5 + (out - 0.5) * (1.0 - _CRUSH_AMT[spec.level])
    return np.clip(out, 0.0, 1.0)


def _blockify(img: np.ndarray, block: int) -> np.ndarray:
    h, w, c = img.shape
    hb, wb = -(-h // block), -(-w // block)
    padded = np.pad(img, ((0, hb * block - h), (0, wb * block - w), (0, 0)), mode="edge")
    means = padded.reshape(hb, block, wb, block, c).mean(axis=(1, 3))
    return np.repeat(np.repeat(means, block, axis=0), block, axis=1)[:h, :w]


# -- base image synthesis ---------------------------------------------------------

def synth_base_image(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """Smooth gradients + shapes + texture, statistically homogenized.

    Content (phases, geometry) is random but every clean image is normalized
    to the same per-channel mean/std and carries a fixed-amplitude fine
    texture, so distortions move the statistics against a stable baseline.
    """
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.empty((size, size, 3))
    for c in range(3):
        gx, gy = rng.uniform(-1, 1, size=2)
        fx, fy = rng.uniform(0.5, 2.5, size=2)
        ph = rng.uniform(0, 2 * np.pi, size=2)
        img[..., c] = (0.5 * (gx * xx + gy * yy)
                       + 0.4 * np.sin(2 * np.pi * fx * xx + ph[0])
                       + 0.4 * np.sin(2 * np.pi * fy * yy + ph[1]))

    for _ in range(3):
        color = rng.uniform(-1.0, 1.0, size=3)
        cx, cy = rng.uniform(0.1, 0.9, size=2) * size
        if rng.random() < 0.5:
            r = rng.uniform(0.1, 0.25) * size
            mask = (yy * size - cy) ** 2 + (xx * size - cx) ** 2 <= r * r
        else:
            hw, hh = rng.uniform(0.08, 0.22, size=2) * size
            mask = (np.abs(yy * size - cy) <= hh) & (np.abs(xx * size - cx) <= hw)
        img[mask] = 0.6 * img[mask] + 0.4 * color

    # pin the per-channel statistics of every clean image
    mu = img.mean(axis=(0, 1))
    sd = img.std(axis=(0, 1)) + 1e-9
    img = 0.5 + 0.14 * (img - mu) / sd

    texture = rng.normal(0.0, 1.0, size=(size, size, 3))
    texture = texture - ndimage.gaussian_filter(texture, sigma=(1.5, 1.5, 0.0), mode="wrap")
    texture /= texture.std() + 1e-9
    img += 0.04 * texture
    return np.clip(img, 0.0, 1.0)


def _mos_for(level: int, jitter_source: int) -> float:
    """5-point-style raw score 5 - level with +-0.2 deterministic jitter, rescaled to [0, 1]."""
    jitter = np.random.default_rng(jitter_source).uniform(-0.2, 0.2)
    raw = (5.0 - level) + jitter
    return float((raw + 0.2) / 4.4)


def synth_dataset(count: int, base_seed: int, kinds: tuple[str, ...] | None = None,
                  size: int = 64) -> list[IqaSample]:
    """Deterministic synthetic IQA set; a pure function of its arguments."""
    if count < 1:
        raise DataError(f"count must be positive, got {count}")
    kinds = tuple(kinds) if kinds else DISTORTION_KINDS
    for k in kinds:
        if k not in DISTORTION_KINDS:
            raise DataError(f"unknown distortion kind {k!r}")
    samples = []
    for i in range(count):
        rng = np.random.default_rng((base_seed, i))
        base = synth_base_image(rng, size=size)
        kind = kinds[int(rng.integers(len(kinds)))]
        level = int(rng.integers(1, 6))
        spec = DistortionSpec(kind, level, seed=int(rng.integers(2**31)))
        image = apply_distortion(base, spec)
        mos = _mos_for(level, jitter_source=int(rng.integers(2**31)))
        samples.append(IqaSample(image=image, mos=mos, domain="synthetic",
                                 sample_id=f"synth_{base_seed}_{i:05d}"))
    return samples


# -- patch protocol ----------------------------------------------------------------

def crop_patches(img: np.ndarray, n: int, size: int, seed: int) -> list[np.ndarray]:
    """n random size x size crops, deterministic per seed; small images are edge-padded."""
    if n < 1 or size < 1:
        raise DataError(f"need positive patch count/size, got n={n} size={size}")
    h, w = img.shape[:2]
    if h < size or w < size:
        img = np.pad(img, ((0, max(0, size - h)), (0, max(0, size - w)), (0, 0)), mode="edge")
        h, w = img.shape[:2]
    rng = np.random.default_rng(seed)
    patches = []
    for _ in range(n):
        top = int(rng.integers(0, h - size + 1))
        left = int(rng.integers(0, w - size + 1))
        patches.append(img[top:top + size, left:left + size].copy())
    return patches


# -- image and manifest I/O -----------------------------------------------------------

def save_image(img: np.ndarray, path: str):
    arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_image(path: str) -> np.ndarray:
    ext = os.path.splitext(path)[1].lower()
    if ext not in (".png", ".ppm"):
        raise DataError(f"unsupported image format {ext!r} (PNG and PPM only): {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_dataset(samples: list[IqaSample], out_dir: str) -> str:
    """Write images + manifest.csv; returns the manifest path."""
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    manifest = os.path.join(out_dir, "manifest.csv")
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        for s in samples:
            name = f"{s.sample_id}.png"
            save_image(s.image, os.path.join(img_dir, name))
            writer.writerow([os.path.join("images", name), f"{s.mos:.6f}", s.domain])
    return manifest


def load_dataset(manifest_path: str) -> list[IqaSample]:
    """Read a `path,score[,domain]` manifest; rows resolve relative to it."""
    if not os.path.exists(manifest_path):
        raise DataError(f"manifest not found: {manifest_path}")
    root = os.path.dirname(os.path.abspath(manifest_path))
    samples = []
    with open(manifest_path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) < 2:
                raise DataError(f"manifest row {lineno}: expected `path,score[,domain]`, got {row!r}")
            rel, score = row[0].strip(), row[1].strip()
            try:
                mos = float(score)
            except ValueError:
                raise DataError(f"manifest row {lineno}: score {score!r} is not numeric") from None
            if not np.isfinite(mos):
                raise DataError(f"manifest row {lineno}: score must be finite")
            path = rel if os.path.isabs(rel) else os.path.join(root, rel)
            if not os.path.exists(path):
                raise DataError(f"manifest row {lineno}: missing image file {path}")
            domain = row[2].strip() if len(row) > 2 and row[2].strip() else "synthetic"
            samples.append(IqaSample(image=load_image(path), mos=mos, domain=domain,
                                     sample_id=os.path.splitext(os.path.basename(rel))[0]))
    return samples


def normalize_scores(samples: list[IqaSample]) -> np.ndarray:
    """Min-max normalize the set's scores to [0, 1] (constant sets map to 0.5)."""
    mos = np.array([s.mos for s in samples], dtype=np.float64)
    lo, hi = mos.min(), mos.max()
    if hi - lo < 1e-12:
        return np.full_like(mos, 0.5)
    return (mos - lo) / (hi - lo)


def split_samples(samples: list[IqaSample]) -> dict[str, list[IqaSample]]:
    """70/10/20 train/val/test by a stable hash of each sample id."""
    out = {"train": [], "val": [], "test": []}
    for s in samples:
        h = int.from_bytes(hashlib.sha1(s.sample_id.encode()).digest()[:4], "big") % 100
        key = "train" if h < 70 else ("val" if h < 80 else "test")
        out[key].append(s)
    return out
