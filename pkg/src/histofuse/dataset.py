"""Corpus ingestion, stain normalization, patch extraction and splits.

Directory layout: <root>/<benign|malignant>/<subclass>/<magnification>/<file>,
or a manifest.csv at root with header path,subclass,magnification,patient_id.
Images are PNG or 8-bit BMP.
"""

from __future__ import annotations

import csv
import re
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError

SUBCLASSES = ("DC", "LC", "MC", "PC", "A", "F", "TA", "PT")
MALIGNANT_SUBCLASSES = frozenset({"DC", "LC", "MC", "PC"})
MAGNIFICATIONS = (40, 100, 200, 400)
BINARY_CLASSES = ("benign", "malignant")

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])

_IMAGE_EXTS = {".png", ".bmp"}

# Ruderman lalphabeta opponent stage: RGB -> LMS -> log10 -> decorrelated axes.
_RGB2LMS = np.array([
    [0.3811, 0.5783, 0.0402],
    [0.1967, 0.7244, 0.0782],
    [0.0241, 0.1288, 0.8444],
])
_LOG2OPP = np.diag([1 / np.sqrt(3), 1 / np.sqrt(6), 1 / np.sqrt(2)]) @ np.array([
    [1.0, 1.0, 1.0],
    [1.0, 1.0, -2.0],
    [1.0, -1.0, 0.0],
])
_OPP2LOG = np.linalg.inv(_LOG2OPP)
_LMS2RGB = np.linalg.inv(_RGB2LMS)
_LMS_FLOOR = 1e-6

# BreakHis-style filename, e.g. SOB_B_A-14-22549AB-40-001.png
_PATIENT_RE = re.compile(r"^SOB_[BM]_[A-Za-z]+-(\d+-[0-9A-Za-z]+)-\d+-\d+")


def binary_class(subclass: str) -> str:
    if subclass not in SUBCLASSES:
        raise ConfigError(f"unknown subclass {subclass!r}")
    return "malignant" if subclass in MALIGNANT_SUBCLASSES else "benign"


@dataclass(frozen=True)
class ManifestEntry:
    source_id: str
    subclass: str
    magnification: int
    patient_id: str | None = None


@dataclass(frozen=True)
class Manifest:
    entries: tuple[ManifestEntry, ...]
    root: Path
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.entries)

    def by_source_id(self) -> dict[str, ManifestEntry]:
        return {e.source_id: e for e in self.entries}


@dataclass
class LabeledImage:
    pixels: np.ndarray  # H x W x 3 uint8
    subclass: str
    magnification: int
    source_id: str
    patient_id: str | None = None

    @property
    def binary_class(self) -> str:
        return binary_class(self.subclass)


@dataclass(frozen=True)
class Patch:
    pixels: np.ndarray  # P x P float64 in [0, 1]
    parent: str
    offset: tuple[int, int]


@dataclass(frozen=True)
class SplitAssignment:
    train: frozenset[str]
    val: frozenset[str]
    test: frozenset[str]
    seed: int
    ratios: tuple[float, float, float]

    def split_of(self, source_id: str) -> str:
        if source_id in self.train:
            return "train"
        if source_id in self.val:
            return "val"
        if source_id in self.test:
            return "test"
        raise KeyError(source_id)


@dataclass(frozen=True)
class StainStats:
    mean: np.ndarray  # 3-vector, opponent space
    std: np.ndarray  # 3-vector, opponent space


def _patient_from_name(filename: str) -> str | None:
    m = _PATIENT_RE.match(Path(filename).name)
    return m.group(1) if m else None


def _manifest_from_csv(root: Path, csv_path: Path) -> tuple[list[ManifestEntry], int]:
    entries: list[ManifestEntry] = []
    skipped = 0
    with open(csv_path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["path", "subclass", "magnification", "patient_id"]:
            raise ConfigError(
                f"{csv_path}: expected header path,subclass,magnification,patient_id"
            )
        for row in reader:
            if not row or not any(cell.strip() for cell in row):
                continue
            if len(row) != 4:
                skipped += 1
                warnings.warn(f"{csv_path}: malformed row {row!r}, skipped")
                continue
            path, subclass, mag_s, patient = (c.strip() for c in row)
            if subclass not in SUBCLASSES:
                skipped += 1
                warnings.warn(f"{csv_path}: unknown subclass {subclass!r}, skipped")
                continue
            try:
                mag = int(mag_s)
            except ValueError:
                mag = -1
            if mag not in MAGNIFICATIONS:
                skipped += 1
                warnings.warn(f"{csv_path}: bad magnification {mag_s!r}, skipped")
                continue
            entries.append(ManifestEntry(path, subclass, mag, patient or None))
    return entries, skipped


def _manifest_from_tree(root: Path) -> tuple[list[ManifestEntry], int]:
    entries: list[ManifestEntry] = []
    skipped = 0
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for sub_dir in sorted(p for p in class_dir.iterdir() if p.is_dir()):
            subclass = sub_dir.name
            for mag_dir in sorted(p for p in sub_dir.iterdir() if p.is_dir()):
                files = sorted(
                    p for p in mag_dir.iterdir()
                    if p.is_file() and p.suffix.lower() in _IMAGE_EXTS
                )
                try:
                    mag = int(mag_dir.name)
                except ValueError:
                    mag = -1
                ok = subclass in SUBCLASSES and mag in MAGNIFICATIONS
                if not ok and files:
                    skipped += len(files)
                    warnings.warn(
                        f"unknown subclass or magnification under {mag_dir}, "
                        f"skipped {len(files)} file(s)"
                    )
                    continue
                for p in files:
                    rel = p.relative_to(root).as_posix()
                    entries.append(
                        ManifestEntry(rel, subclass, mag, _patient_from_name(p.name))
                    )
    return entries, skipped


def load_manifest(root: str | Path) -> Manifest:
    """Enumerate the corpus under root (CSV manifest wins over tree walk).

    Entries are sorted by source_id for determinism; unknown subclass or
    magnification tokens are skipped with a warning and counted in
    Manifest.skipped. An empty result is fatal.
    """
    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"dataset root {root} is not a readable directory")
    csv_path = root / "manifest.csv"
    if csv_path.is_file():
        entries, skipped = _manifest_from_csv(root, csv_path)
    else:
        entries, skipped = _manifest_from_tree(root)
    entries.sort(key=lambda e: e.source_id)
    ids = [e.source_id for e in entries]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate source_ids in manifest")
    if not entries:
        raise ConfigError(
            f"no usable images under {root} ({skipped} entr(y/ies) skipped)"
        )
    return Manifest(tuple(entries), root, skipped)


def load_image(manifest: Manifest, entry: ManifestEntry) -> LabeledImage:
    path = Path(entry.source_id)
    if not path.is_absolute():
        path = manifest.root / path
    with Image.open(path) as im:
        pixels = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return LabeledImage(
        pixels=pixels,
        subclass=entry.subclass,
        magnification=entry.magnification,
        source_id=entry.source_id,
        patient_id=entry.patient_id,
    )


def rgb_to_opponent(rgb01: np.ndarray) -> np.ndarray:
    """Map H x W x 3 RGB in [0, 1] to the log-opponent stage used for stain stats."""
    lms = rgb01 @ _RGB2LMS.T
    return np.log10(np.maximum(lms, _LMS_FLOOR)) @ _LOG2OPP.T


def opponent_to_rgb(opp: np.ndarray) -> np.ndarray:
    """Inverse of rgb_to_opponent; output is unclamped (may leave [0, 1])."""
    lms = np.power(10.0, opp @ _OPP2LOG.T)
    return lms @ _LMS2RGB.T


def compute_stain_stats(image: LabeledImage | np.ndarray) -> StainStats:
    pixels = image.pixels if isinstance(image, LabeledImage) else image
    opp = rgb_to_opponent(pixels.astype(np.float64) / 255.0)
    flat = opp.reshape(-1, 3)
    return StainStats(mean=flat.mean(axis=0), std=flat.std(axis=0))


def match_stain_stats(rgb01: np.ndarray, reference: StainStats,
                      ) -> tuple[np.ndarray, bool]:
    """Match per-channel opponent mean/std to the reference.

    Returns the unclamped RGB float image and a flag set when any channel
    had zero variance (mean shift only on that channel).
    """
    opp = rgb_to_opponent(rgb01)
    flat = opp.reshape(-1, 3)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    degenerate = False
    out = np.empty_like(opp)
    for c in range(3):
        if std[c] < 1e-12:
            degenerate = True
            out[..., c] = opp[..., c] - mean[c] + reference.mean[c]
        else:
            out[..., c] = (opp[..., c] - mean[c]) / std[c] * reference.std[c] \
                + reference.mean[c]
    return opponent_to_rgb(out), degenerate


def stain_normalize(image: LabeledImage, reference: StainStats) -> LabeledImage:
    """Stain-normalize against reference stats; clamps back to uint8 RGB."""
    rgb01 = image.pixels.astype(np.float64) / 255.0
    matched, degenerate = match_stain_stats(rgb01, reference)
    if degenerate:
        warnings.warn(
            f"zero-variance stain channel in {image.source_id}; mean shift only"
        )
    out = np.rint(np.clip(matched, 0.0, 1.0) * 255.0).astype(np.uint8)
    return LabeledImage(
        pixels=out,
        subclass=image.subclass,
        magnification=image.magnification,
        source_id=image.source_id,
        patient_id=image.patient_id,
    )


def grayscale(pixels: np.ndarray) -> np.ndarray:
    """Luminance grayscale scaled to [0, 1]."""
    return (pixels.astype(np.float64) @ GRAY_WEIGHTS) / 255.0


def patch_anchors(dim: int, patch_size: int, stride: int) -> list[int]:
    """Top-left anchors at multiples of stride plus a deduplicated edge anchor."""
    anchors = list(range(0, dim - patch_size + 1, stride))
    last = dim - patch_size
    if anchors[-1] != last:
        anchors.append(last)
    return anchors


def extract_patches(image: LabeledImage, patch_size: int,
                    stride: int) -> list[Patch]:
    """Tile the luminance image into overlapping patch_size squares."""
    h, w = image.pixels.shape[:2]
    if patch_size > min(h, w):
        raise ConfigError(
            f"patch size {patch_size} exceeds image {image.source_id} ({h}x{w})"
        )
    if not 0 < stride <= patch_size:
        raise ConfigError(f"stride must be in (0, patch_size], got {stride}")
    gray = grayscale(image.pixels)
    patches = []
    for r in patch_anchors(h, patch_size, stride):
        for c in patch_anchors(w, patch_size, stride):
            patches.append(Patch(
                pixels=gray[r:r + patch_size, c:c + patch_size],
                parent=image.source_id,
                offset=(r, c),
            ))
    return patches


def downsample_mean(img: np.ndarray, out_size: int) -> np.ndarray:
    """Block-mean downsample of a 2-D array to out_size x out_size."""
    h, w = img.shape
    if h < out_size or w < out_size:
        raise ConfigError(f"cannot downsample {h}x{w} to {out_size}x{out_size}")
    redges = np.floor(np.linspace(0, h, out_size + 1)).astype(np.int64)
    cedges = np.floor(np.linspace(0, w, out_size + 1)).astype(np.int64)
    tmp = np.add.reduceat(img, redges[:-1], axis=0) / np.diff(redges)[:, None]
    return np.add.reduceat(tmp, cedges[:-1], axis=1) / np.diff(cedges)[None, :]


def _largest_remainder_counts(n: int, ratios: tuple[float, ...]) -> list[int]:
    ideals = [n * r for r in ratios]
    base = [int(np.floor(x)) for x in ideals]
    rem = n - sum(base)
    order = sorted(range(len(ratios)), key=lambda i: (-(ideals[i] - base[i]), i))
    for i in order[:rem]:
        base[i] += 1
    return base


def split_dataset(manifest: Manifest, ratios: tuple[float, float, float],
                  seed: int, *, split_by: str = "image",
                  min_stratum: int = 5) -> SplitAssignment:
    """Deterministic stratified train/val/test assignment.

    Strata are (subclass, magnification) cells for image-wise splitting;
    patient-wise splitting strata are subclasses and whole patients move
    together. Cells smaller than min_stratum go entirely to train.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {ratios}")
    if not manifest.entries:
        raise ConfigError("cannot split an empty manifest")
    if split_by not in ("image", "patient"):
        raise ConfigError(f"split_by must be image or patient, got {split_by!r}")

    cells: dict[tuple, dict[str, list[str]]] = {}
    for e in manifest.entries:
        if split_by == "image":
            key = (e.subclass, e.magnification)
            unit = e.source_id
        else:
            key = (e.subclass,)
            unit = e.patient_id or e.source_id
        cells.setdefault(key, {}).setdefault(unit, []).append(e.source_id)

    rng = np.random.Generator(np.random.PCG64(seed))
    buckets: dict[str, set[str]] = {"train": set(), "val": set(), "test": set()}
    for key in sorted(cells):
        units = sorted(cells[key])
        perm = rng.permutation(len(units))
        shuffled = [units[i] for i in perm]
        if len(units) < min_stratum:
            warnings.warn(
                f"stratum {key} has {len(units)} unit(s) (<{min_stratum}); "
                "all assigned to train"
            )
            counts = [len(units), 0, 0]
        else:
            counts = _largest_remainder_counts(len(units), ratios)
        cursor = 0
        for name, cnt in zip(("train", "val", "test"), counts):
            for unit in shuffled[cursor:cursor + cnt]:
                buckets[name].update(cells[key][unit])
            cursor += cnt

    return SplitAssignment(
        train=frozenset(buckets["train"]),
        val=frozenset(buckets["val"]),
        test=frozenset(buckets["test"]),
        seed=seed,
        ratios=tuple(ratios),
    )


def write_splits_csv(assignment: SplitAssignment, path: str | Path) -> None:
    rows = [(sid, "train") for sid in assignment.train]
    rows += [(sid, "val") for sid in assignment.val]
    rows += [(sid, "test") for sid in assignment.test]
    rows.sort()
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["path", "split"])
        writer.writerows(rows)


def read_splits_csv(path: str | Path) -> dict[str, str]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["path", "split"]:
            raise ConfigError(f"{path}: expected header path,split")
        out = {}
        for row in reader:
            if not row:
                continue
            sid, split = row
            if split not in ("train", "val", "test"):
                raise ConfigError(f"{path}: bad split tag {split!r}")
            out[sid] = split
    return out
