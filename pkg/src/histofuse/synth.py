"""Synthetic 8-class texture corpus used by the acceptance suite.

Each image is an anisotropically filtered Gaussian noise field plus a
class-specific density of dark disc "nuclei", colorized with a two-tone
H&E-like palette and per-image stain jitter. Pseudo-magnifications render
a field of view of 896/448/224/112 base pixels for 40/100/200/400x
(nucleus density scaled by area, filter scale fixed in base pixels) and
rescale it to a fixed 224x224 output, so structures appear larger as
magnification grows.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import SUBCLASSES, binary_class
from .errors import ConfigError

BASE_SIZE = 896
OUT_SIZE = 224
_CROP = {40: 896, 100: 448, 200: 224, 400: 112}

# Per class: (sigma_y, sigma_x) of the stochastic spectral filter, nucleus
# count per base-field area, nucleus radius, and a coherent spectral line
# (cycles_y, cycles_x per 224 base px). Malignant classes share a high
# nucleus density (binary cue); subclasses differ in filter scale and
# orientation, nucleus radius, and the coherent component.
CLASS_PARAMS: dict[str, tuple[float, float, int, float, float, float]] = {
    "DC": (5.0, 5.0, 480, 7.0, 5.0, 0.0),
    "LC": (4.0, 16.0, 480, 7.0, 0.0, 5.0),
    "MC": (16.0, 4.0, 480, 7.0, 4.0, 4.0),
    "PC": (11.0, 11.0, 480, 13.0, 7.0, 2.0),
    "A": (7.0, 7.0, 70, 9.0, 2.0, 7.0),
    "F": (5.0, 22.0, 70, 9.0, 2.0, 0.0),
    "TA": (22.0, 5.0, 70, 9.0, 0.0, 2.0),
    "PT": (30.0, 30.0, 70, 16.0, 2.0, 2.0),
}

_PATTERN_AMP = 1.0
_PATTERN_PERIOD = 224.0  # base px per cycle unit

_LIGHT = np.array([0.93, 0.62, 0.78])  # eosin-ish background
_DARK = np.array([0.38, 0.22, 0.55])  # hematoxylin-ish nuclei/texture


def _filtered_noise(rng: np.random.Generator, size: int, sigma_y: float,
                    sigma_x: float) -> np.ndarray:
    noise = rng.standard_normal((size, size))
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    transfer = np.exp(-2.0 * np.pi ** 2 * ((sigma_y * fy) ** 2 + (sigma_x * fx) ** 2))
    field = np.fft.ifft2(np.fft.fft2(noise) * transfer).real
    std = field.std()
    if std > 0:
        field = (field - field.mean()) / std
    return field


def _add_nuclei(field: np.ndarray, rng: np.random.Generator, count: int,
                radius: float) -> np.ndarray:
    out = field.copy()
    size = field.shape[0]
    jitter = max(1, count // 8)
    n = max(1, count + int(rng.integers(-jitter, jitter + 1)))
    for _ in range(n):
        cy = rng.uniform(0, size)
        cx = rng.uniform(0, size)
        r = radius * rng.uniform(0.8, 1.2)
        ext = int(np.ceil(3.0 * r))
        y0, y1 = max(0, int(cy) - ext), min(size, int(cy) + ext + 1)
        x0, x1 = max(0, int(cx) - ext), min(size, int(cx) + ext + 1)
        yy = np.arange(y0, y1, dtype=np.float64)[:, None]
        xx = np.arange(x0, x1, dtype=np.float64)[None, :]
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        out[y0:y1, x0:x1] -= 3.0 * np.exp(-d2 / (2.0 * (r / 1.5) ** 2))
    return out


def _block_mean(img: np.ndarray, factor: int) -> np.ndarray:
    h, w = img.shape[0] // factor, img.shape[1] // factor
    return img[:h * factor, :w * factor].reshape(h, factor, w, factor, -1).mean(
        axis=(1, 3))


def _rescale_to_output(img: np.ndarray, crop: int) -> np.ndarray:
    if crop == OUT_SIZE:
        return img
    if crop > OUT_SIZE:
        return _block_mean(img, crop // OUT_SIZE)
    rep = OUT_SIZE // crop
    return np.repeat(np.repeat(img, rep, axis=0), rep, axis=1)


def make_image(subclass: str, magnification: int, index: int,
               seed: int) -> np.ndarray:
    """Deterministic synthetic image, uint8 H x W x 3."""
    if subclass not in CLASS_PARAMS:
        raise ConfigError(f"unknown subclass {subclass!r}")
    if magnification not in _CROP:
        raise ConfigError(f"unsupported magnification {magnification}")
    ci = SUBCLASSES.index(subclass)
    rng = np.random.default_rng(
        np.random.SeedSequence([seed, ci, magnification, index]))
    sy, sx, count, radius, cyc_y, cyc_x = CLASS_PARAMS[subclass]
    crop = _CROP[magnification]
    # Nucleus density is per base-field area; the filter scale stays in
    # base pixels, so higher magnification shows fewer, larger structures.
    scaled_count = max(1, round(count * (crop / BASE_SIZE) ** 2))
    field = _filtered_noise(rng, crop, sy, sx)
    field = _add_nuclei(field, rng, scaled_count, radius)
    coords = np.arange(crop, dtype=np.float64)
    phase = 2.0 * np.pi * (cyc_y * coords[:, None]
                           + cyc_x * coords[None, :]) / _PATTERN_PERIOD
    field = field + _PATTERN_AMP * np.cos(phase)
    v = 0.5 + 0.35 * np.tanh(field)

    light = np.clip(_LIGHT + rng.uniform(-0.04, 0.04, size=3), 0.0, 1.0)
    dark = np.clip(_DARK + rng.uniform(-0.04, 0.04, size=3), 0.0, 1.0)
    rgb = v[..., None] * light[None, None, :] + (1.0 - v)[..., None] * dark[None, None, :]

    rgb = _rescale_to_output(rgb, crop)
    return np.rint(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


def generate_dataset(root: str | Path, seed: int, images_per_class: int,
                     magnifications: tuple[int, ...] = (40, 100, 200, 400),
                     ) -> int:
    """Write the corpus tree under root; returns the image count.

    Refuses a non-empty root so a stale corpus is never silently mixed in.
    """
    root = Path(root)
    if root.exists() and any(root.iterdir()):
        raise ConfigError(f"synth target {root} exists and is not empty")
    root.mkdir(parents=True, exist_ok=True)
    count = 0
    for subclass in SUBCLASSES:
        cls = binary_class(subclass)
        for mag in magnifications:
            out_dir = root / cls / subclass / str(mag)
            out_dir.mkdir(parents=True, exist_ok=True)
            for i in range(images_per_class):
                pixels = make_image(subclass, mag, i, seed)
                name = f"{subclass}_{mag}_{i:03d}.png"
                Image.fromarray(pixels).save(out_dir / name)
                count += 1
    return count
