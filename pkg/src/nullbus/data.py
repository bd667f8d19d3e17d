"""Dataset pool: manifests, preprocessing, stratified folds and synthetic BUS-like data."""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.ndimage import gaussian_filter

from .prompts import PromptPair, normalize_prompt

logger = logging.getLogger(__name__)

CLASS_LABELS = ("benign", "malignant")
MANIFEST_COLUMNS = ("id", "image_path", "mask_path", "class_label", "global_prompt", "local_prompt", "source")
REQUIRED_COLUMNS = ("id", "image_path", "mask_path", "class_label")


class ManifestError(ValueError):
    pass


class FoldError(ValueError):
    pass


@dataclass(frozen=True)
class SampleRecord:
    id: str
    image_path: Path
    mask_path: Path
    class_label: str
    global_prompt: str | None = None
    local_prompt: str | None = None
    source: str = ""

    @property
    def prompts(self) -> PromptPair:
        return PromptPair(self.global_prompt, self.local_prompt)


@dataclass
class DatasetPool:
    records: list[SampleRecord]
    class_counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        seen: set[str] = set()
        for rec in self.records:
            if rec.id in seen:
                raise ManifestError(f"duplicate id {rec.id!r}")
            seen.add(rec.id)
        tally = Counter(rec.class_label for rec in self.records)
        self.class_counts = {label: tally.get(label, 0) for label in CLASS_LABELS}

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def by_id(self) -> dict[str, SampleRecord]:
        return {rec.id: rec for rec in self.records}

    @classmethod
    def merge(cls, pools: Iterable["DatasetPool"]) -> "DatasetPool":
        records: list[SampleRecord] = []
        for pool in pools:
            records.extend(pool.records)
        return cls(records)


@dataclass
class FoldAssignment:
    k: int
    seed: int
    assignment: dict[str, int]

    def split(self, fold_index: int) -> tuple[list[str], list[str]]:
        """Return (train ids, validation ids) for one held-out fold."""
        if not 0 <= fold_index < self.k:
            raise FoldError(f"fold_index {fold_index} outside [0, {self.k})")
        train = [i for i, f in self.assignment.items() if f != fold_index]
        val = [i for i, f in self.assignment.items() if f == fold_index]
        return train, val

    def save(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "fold"])
            for sample_id, fold in self.assignment.items():
                writer.writerow([sample_id, fold])

    @classmethod
    def load(cls, path: str | Path, seed: int = -1) -> "FoldAssignment":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"fold map not found: {path}")
        assignment: dict[str, int] = {}
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                assignment[row["id"]] = int(row["fold"])
        k = max(assignment.values()) + 1 if assignment else 0
        return cls(k=k, seed=seed, assignment=assignment)


@dataclass
class PreprocessedSample:
    image: torch.Tensor  # (H, W) float in [0, 1]
    mask: torch.Tensor  # (H, W) float in {0, 1}
    prompts: PromptPair = field(default_factory=PromptPair)
    class_label: str | None = None
    id: str = ""


# ---------------------------------------------------------------------------
# manifests


def _resolve(base: Path, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


def load_manifest(path: str | Path) -> DatasetPool:
    """Read a delimited manifest into a pool.

    Relative image/mask paths are resolved against the manifest's directory.
    Empty or whitespace-only prompt cells become absent prompts.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    base = path.parent
    records: list[SampleRecord] = []
    seen: dict[str, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise ManifestError(f"{path}: header missing columns {missing}")
        # row 1 is the header
        for rowno, row in enumerate(reader, start=2):
            if None in row or any(row.get(c) is None for c in REQUIRED_COLUMNS):
                raise ManifestError(f"{path}: row {rowno}: unreadable row (wrong number of cells)")
            sample_id = row["id"].strip()
            if not sample_id:
                raise ManifestError(f"{path}: row {rowno}: empty id")
            if sample_id in seen:
                raise ManifestError(
                    f"{path}: row {rowno}: duplicate id {sample_id!r} (first seen on row {seen[sample_id]})"
                )
            seen[sample_id] = rowno
            label = row["class_label"].strip().lower()
            if label not in CLASS_LABELS:
                raise ManifestError(f"{path}: row {rowno}: unknown class label {row['class_label']!r}")
            records.append(
                SampleRecord(
                    id=sample_id,
                    image_path=_resolve(base, row["image_path"].strip()),
                    mask_path=_resolve(base, row["mask_path"].strip()),
                    class_label=label,
                    global_prompt=normalize_prompt(row.get("global_prompt")),
                    local_prompt=normalize_prompt(row.get("local_prompt")),
                    source=(row.get("source") or "").strip(),
                )
            )
    return DatasetPool(records)


def load_manifests(paths: Sequence[str | Path]) -> DatasetPool:
    return DatasetPool.merge(load_manifest(p) for p in paths)


def write_manifest(pool: DatasetPool, path: str | Path) -> Path:
    """Write ``pool`` as a manifest; paths are stored relative to the manifest when possible."""
    path = Path(path)
    base = path.parent.resolve()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for rec in pool.records:
            row = [rec.id]
            for p in (rec.image_path, rec.mask_path):
                try:
                    row.append(Path(p).resolve().relative_to(base).as_posix())
                except ValueError:
                    row.append(str(p))
            row += [rec.class_label, rec.global_prompt or "", rec.local_prompt or "", rec.source]
            writer.writerow(row)
    return path


# ---------------------------------------------------------------------------
# preprocessing


def _to_gray(array: np.ndarray) -> np.ndarray:
    array = np.asarray(array)
    if array.ndim == 3:
        if array.shape[2] == 1:
            return array[..., 0]
        # ITU-R 601 luma, alpha ignored
        rgb = array[..., :3].astype(np.float64)
        return rgb @ np.array([0.299, 0.587, 0.114])
    if array.ndim != 2:
        raise ValueError(f"expected a 2-D raster, got shape {array.shape}")
    return array


def normalize_image(image: np.ndarray) -> np.ndarray:
    """Per-image min-max scaling to [0, 1]; a constant image maps to zeros."""
    image = _to_gray(image).astype(np.float64)
    lo, hi = float(image.min()), float(image.max())
    if hi - lo <= 0:
        return np.zeros_like(image)
    return (image - lo) / (hi - lo)


def preprocess(image: np.ndarray, mask: np.ndarray, size: int = 352) -> PreprocessedSample:
    """Normalize a grayscale image, binarize its mask, and resize both to ``size``x``size``.

    Images are resized bilinearly, masks with nearest-neighbour so they stay binary.
    """
    if size <= 0:
        raise ValueError(f"size must be positive, got {size}")
    gray = _to_gray(image)
    mask = _to_gray(mask)
    if gray.shape != mask.shape:
        raise ValueError(f"image {gray.shape} and mask {mask.shape} dimensions differ")

    img = torch.from_numpy(normalize_image(gray)).float()[None, None]
    msk = torch.from_numpy((np.asarray(mask) != 0).astype(np.float32))[None, None]
    if img.shape[-2:] != (size, size):
        img = F.interpolate(img, size=(size, size), mode="bilinear", align_corners=False)
        msk = F.interpolate(msk, size=(size, size), mode="nearest-exact")
    return PreprocessedSample(image=img[0, 0].clamp_(0.0, 1.0), mask=msk[0, 0])


def read_raster(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "I", "I;16", "F"):
            im = im.convert("L")
        return np.asarray(im)


def load_sample(record: SampleRecord, size: int) -> PreprocessedSample:
    sample = preprocess(read_raster(record.image_path), read_raster(record.mask_path), size)
    sample.prompts = record.prompts
    sample.class_label = record.class_label
    sample.id = record.id
    return sample


# ---------------------------------------------------------------------------
# folds


def stratified_folds(pool: DatasetPool, k: int = 5, seed: int = 0) -> FoldAssignment:
    """Image-level, class-stratified k-fold assignment.

    Within each class, ids are sorted, shuffled by ``seed`` and dealt round-robin,
    so per-fold class counts differ by at most one. Each class starts dealing
    where the previous class stopped, which also keeps total fold sizes balanced.
    """
    if k < 2:
        raise FoldError(f"k must be >= 2, got {k}")
    rng = np.random.default_rng(seed)
    assignment: dict[str, int] = {}
    offset = 0
    for label in CLASS_LABELS:
        ids = sorted(rec.id for rec in pool.records if rec.class_label == label)
        if not ids:
            continue
        if len(ids) < k:
            raise FoldError(f"class {label!r} has {len(ids)} samples, fewer than k={k}")
        order = rng.permutation(len(ids))
        for pos, idx in enumerate(order):
            assignment[ids[idx]] = (offset + pos) % k
        offset = (offset + len(ids)) % k
    # keep the pool's record order for export
    ordered = {rec.id: assignment[rec.id] for rec in pool.records}
    return FoldAssignment(k=k, seed=seed, assignment=ordered)


# ---------------------------------------------------------------------------
# synthetic desk-scale data

SIZE_BUCKETS = ((0.03, "small"), (0.09, "medium"), (math.inf, "large"))


def classify_shape(axis_ratio: float, margin: str) -> str:
    """Class rule for generated lesions: elongated or ill-defined margins are malignant."""
    eccentricity = math.sqrt(max(0.0, 1.0 - axis_ratio**2))
    if eccentricity > 0.8 or margin != "circumscribed":
        return "malignant"
    return "benign"


def _size_bucket(area_fraction: float) -> str:
    for limit, name in SIZE_BUCKETS:
        if area_fraction < limit:
            return name
    return SIZE_BUCKETS[-1][1]


def _location_words(cy: float, cx: float, size: int) -> tuple[str, str]:
    return ("upper" if cy < size / 2 else "lower", "left" if cx < size / 2 else "right")


def _speckle(rng: np.random.Generator, shape: tuple[int, int], sigma: float = 0.8) -> np.ndarray:
    # fully developed speckle: magnitude of a low-passed circular complex Gaussian field
    re = gaussian_filter(rng.standard_normal(shape), sigma)
    im = gaussian_filter(rng.standard_normal(shape), sigma)
    amp = np.hypot(re, im)
    return amp / amp.mean()


def _ellipse_field(size: int, cy: float, cx: float, ry: float, rx: float, theta: float) -> np.ndarray:
    """Normalized radial coordinate: < 1 inside the ellipse."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return np.sqrt((u / rx) ** 2 + (v / ry) ** 2)


@dataclass
class SynthLesion:
    image: np.ndarray  # uint8
    mask: np.ndarray  # uint8, 0/255
    class_label: str
    global_prompt: str
    local_prompt: str


def render_lesion(rng: np.random.Generator, size: int, label: str, distractor: bool = False) -> SynthLesion:
    """Draw one phantom: a hypoechoic ellipse in layered speckled tissue.

    The mask is the exact ellipse. With ``distractor`` a second, unlabeled dark
    ellipse is placed in the opposite quadrant.
    """
    if label == "benign":
        axis_ratio = rng.uniform(0.7, 1.0)
        margin = "circumscribed"
    else:
        axis_ratio = rng.uniform(0.35, 0.6)
        margin = str(rng.choice(["indistinct", "angular"]))

    major = rng.uniform(0.12, 0.24) * size
    rx, ry = major, major * axis_ratio
    theta = rng.uniform(-0.35, 0.35)
    # lesion centre lies in one quadrant, kept inside the frame
    qy, qx = int(rng.integers(2)), int(rng.integers(2))
    lo, hi = major + 2, size / 2
    cy = rng.uniform(lo, hi) if qy == 0 else rng.uniform(size / 2, size - lo)
    cx = rng.uniform(lo, hi) if qx == 0 else rng.uniform(size / 2, size - lo)
    if lo >= hi:
        cy = cx = size / 2

    yy = (np.arange(size, dtype=np.float64) + 0.5)[:, None] / size
    tissue = 0.55 + 0.2 * np.sin(2 * math.pi * (yy * rng.uniform(1.5, 3.0) + rng.uniform()))
    tissue = np.broadcast_to(tissue, (size, size)).copy()
    tissue *= np.exp(-0.6 * yy)  # depth attenuation

    r = _ellipse_field(size, cy, cx, ry, rx, theta)
    mask = r < 1.0
    width = 0.04 if margin == "circumscribed" else 0.15
    inside = 1.0 / (1.0 + np.exp((r - 1.0) / width))
    echo = tissue * (1.0 - 0.8 * inside)

    if distractor:
        dcy, dcx = size - cy, size - cx
        dr = _ellipse_field(size, dcy, dcx, ry * rng.uniform(0.8, 1.2), rx * rng.uniform(0.8, 1.2), -theta)
        dark = 1.0 / (1.0 + np.exp((dr - 1.0) / width))
        dark[mask] = 0.0
        echo *= 1.0 - 0.8 * dark

    image = echo * _speckle(rng, (size, size))
    image = np.clip(image / np.quantile(image, 0.995), 0.0, 1.0)
    image_u8 = np.round(image * 255).astype(np.uint8)

    assert classify_shape(axis_ratio, margin) == label
    size_word = _size_bucket(mask.mean())
    vert, horiz = _location_words(cy, cx, size)
    global_prompt = f"{label} {size_word} breast lesion with {margin} margin in the {vert} {horiz} region"
    local_prompt = f"{size_word} hypoechoic mass located {vert} {horiz}"
    return SynthLesion(
        image=image_u8,
        mask=mask.astype(np.uint8) * 255,
        class_label=label,
        global_prompt=global_prompt,
        local_prompt=local_prompt,
    )


def synth_pool(
    n: int,
    seed: int,
    prompt_fraction: float,
    out_dir: str | Path,
    size: int = 96,
    malignant_fraction: float = 1 / 3,
    distractor_fraction: float = 0.0,
    source: str = "synthetic",
) -> DatasetPool:
    """Generate ``n`` phantoms as PNGs under ``out_dir`` and return their pool.

    Exactly ``round(prompt_fraction * n)`` records (half-up) carry both prompts.
    Output is a pure function of the arguments.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not 0.0 <= prompt_fraction <= 1.0:
        raise ValueError(f"prompt_fraction must lie in [0, 1], got {prompt_fraction}")
    if not 0.0 <= distractor_fraction <= 1.0:
        raise ValueError(f"distractor_fraction must lie in [0, 1], got {distractor_fraction}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    n_prompted = int(math.floor(prompt_fraction * n + 0.5))
    prompted = set(rng.permutation(n)[:n_prompted].tolist())
    n_malignant = int(math.floor(malignant_fraction * n + 0.5))
    malignant = set(rng.permutation(n)[:n_malignant].tolist())
    n_distract = int(math.floor(distractor_fraction * n + 0.5))
    distract = set(rng.permutation(n)[:n_distract].tolist())

    records = []
    for i in range(n):
        label = "malignant" if i in malignant else "benign"
        lesion = render_lesion(rng, size, label, distractor=i in distract)
        sample_id = f"{source}_{i:05d}"
        image_path = out_dir / "images" / f"{sample_id}.png"
        mask_path = out_dir / "masks" / f"{sample_id}.png"
        Image.fromarray(lesion.image).save(image_path)
        Image.fromarray(lesion.mask).save(mask_path)
        has_text = i in prompted
        records.append(
            SampleRecord(
                id=sample_id,
                image_path=image_path,
                mask_path=mask_path,
                class_label=label,
                global_prompt=lesion.global_prompt if has_text else None,
                local_prompt=lesion.local_prompt if has_text else None,
                source=source,
            )
        )
    logger.info("generated %d phantoms (%d prompted) in %s", n, n_prompted, out_dir)
    return DatasetPool(records)
