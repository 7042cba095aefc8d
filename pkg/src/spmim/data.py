"""Image I/O, augmentation, quality control and dataset splitting.

Images are carried as float64 (3, H, W) arrays in [0, 1]. PNG and PPM are
the supported on-disk formats (8-bit, decoded via Pillow); grayscale files
are replicated to three channels. Quality scores are computed on the
luminance channel (0.299 R + 0.587 G + 0.114 B).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ArgumentError, DataError, StratificationError

_SUPPORTED_FORMATS = {"PNG", "PPM"}


@dataclass
class ImageRecord:
    id: str
    pixels: np.ndarray          # (3, H, W) float64 in [0, 1]
    label: int | None = None
    path: str | None = None


@dataclass(frozen=True)
class QualityThresholds:
    blur_min: float = 1e-4
    contrast_min: float = 0.05
    illumination_lo: float = 0.1
    illumination_hi: float = 0.9
    artifact_max: float = 0.05


@dataclass(frozen=True)
class QualityReport:
    blur_score: float
    contrast_score: float
    illumination_score: float
    artifact_score: float
    passed: bool
    failed_checks: tuple[str, ...]


@dataclass(frozen=True)
class AugmentPolicy:
    crop_scale_min: float = 0.8
    crop_scale_max: float = 1.0
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    contrast_range: tuple[float, float] = (0.8, 1.25)
    brightness_range: tuple[float, float] = (0.8, 1.25)
    sharpen_max: float = 0.5
    out_size: tuple[int, int] | None = None   # default: keep input size

    def __post_init__(self):
        if not 0 < self.crop_scale_min <= self.crop_scale_max <= 1.0:
            raise ArgumentError("crop scales must satisfy 0 < min <= max <= 1")
        if self.contrast_range[0] <= 0 or self.brightness_range[0] <= 0:
            raise ArgumentError("adjustment factors must be positive")
        if self.sharpen_max < 0:
            raise ArgumentError("sharpen_max must be non-negative")


IDENTITY_POLICY = AugmentPolicy(
    crop_scale_min=1.0, crop_scale_max=1.0, hflip_p=0.0, vflip_p=0.0,
    contrast_range=(1.0, 1.0), brightness_range=(1.0, 1.0), sharpen_max=0.0,
)


# ---------------------------------------------------------------------------
# image files


def _pil_to_pixels(img: Image.Image) -> np.ndarray:
    if img.mode == "L":
        plane = np.asarray(img, dtype=np.float64) / 255.0
        return np.stack([plane, plane, plane])
    if img.mode in ("RGB", "RGBA"):
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
        return arr.transpose(2, 0, 1)
    raise DataError(f"unsupported pixel mode {img.mode!r} (8-bit only)")


def load_image(path: str | Path) -> ImageRecord:
    """Decode an 8-bit PNG or PPM file into an RGB [0, 1] record."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such image file: {path}")
    try:
        with Image.open(path) as img:
            if img.format not in _SUPPORTED_FORMATS:
                raise DataError(
                    f"unsupported format {img.format!r} for {path.name} "
                    f"(PNG and PPM only)"
                )
            pixels = _pil_to_pixels(img)
    except UnidentifiedImageError as exc:
        raise DataError(f"cannot decode {path.name}: {exc}") from exc
    except (OSError, SyntaxError) as exc:
        raise DataError(f"truncated or corrupt image {path.name}: {exc}") from exc
    return ImageRecord(id=path.stem, pixels=pixels, path=str(path))


def save_image_png(path: str | Path, pixels: np.ndarray) -> None:
    """Write a (3, H, W) or (H, W) [0, 1] array as an 8-bit PNG."""
    arr = np.clip(np.asarray(pixels), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    if data.ndim == 3:
        Image.fromarray(data.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")
    elif data.ndim == 2:
        Image.fromarray(data, mode="L").save(path, format="PNG")
    else:
        raise ArgumentError("expected (3, H, W) or (H, W) pixel array")


# ---------------------------------------------------------------------------
# geometry helpers


def bilinear_resize(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of a (C, H, W) array; identity when sizes match."""
    c, h, w = pixels.shape
    if (h, w) == (out_h, out_w):
        return pixels.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    top = pixels[:, y0][:, :, x0] * (1 - wx) + pixels[:, y0][:, :, x1] * wx
    bottom = pixels[:, y1][:, :, x0] * (1 - wx) + pixels[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bottom * wy


def _box_blur3(plane: np.ndarray) -> np.ndarray:
    padded = np.pad(plane, 1, mode="edge")
    out = np.zeros_like(plane)
    for dy in range(3):
        for dx in range(3):
            out += padded[dy : dy + plane.shape[0], dx : dx + plane.shape[1]]
    return out / 9.0


# ---------------------------------------------------------------------------
# augmentation


def augment(record: ImageRecord, policy: AugmentPolicy, seed: int) -> ImageRecord:
    """Apply crop, flips, contrast, brightness and sharpening in that order.

    The crop is rescaled back to the configured output resolution (the
    input resolution unless the policy overrides it) and the result is
    clamped to [0, 1].
    """
    rng = np.random.default_rng(seed)
    pixels = record.pixels
    _, h, w = pixels.shape
    out_h, out_w = policy.out_size if policy.out_size else (h, w)

    scale = rng.uniform(policy.crop_scale_min, policy.crop_scale_max)
    ch = max(1, int(round(h * scale)))
    cw = max(1, int(round(w * scale)))
    if ch > h or cw > w:
        raise ArgumentError("crop larger than image")
    oy = int(rng.integers(0, h - ch + 1))
    ox = int(rng.integers(0, w - cw + 1))
    pixels = pixels[:, oy : oy + ch, ox : ox + cw]
    pixels = bilinear_resize(pixels, out_h, out_w)

    if rng.random() < policy.hflip_p:
        pixels = pixels[:, :, ::-1]
    if rng.random() < policy.vflip_p:
        pixels = pixels[:, ::-1, :]

    contrast = rng.uniform(*policy.contrast_range)
    if contrast != 1.0:
        mean = pixels.mean()
        pixels = mean + (pixels - mean) * contrast

    brightness = rng.uniform(*policy.brightness_range)
    if brightness != 1.0:
        pixels = pixels * brightness

    amount = rng.uniform(0.0, policy.sharpen_max)
    blurred = np.stack([_box_blur3(pixels[c]) for c in range(3)])
    pixels = pixels + amount * (pixels - blurred)

    pixels = np.clip(pixels, 0.0, 1.0)
    return ImageRecord(id=record.id, pixels=np.ascontiguousarray(pixels),
                       label=record.label, path=record.path)


# ---------------------------------------------------------------------------
# quality control


def luminance(pixels: np.ndarray) -> np.ndarray:
    return 0.299 * pixels[0] + 0.587 * pixels[1] + 0.114 * pixels[2]


def quality_check(record: ImageRecord,
                  thresholds: QualityThresholds = QualityThresholds()) -> QualityReport:
    """Score blur, contrast, illumination and saturation artifacts.

    Blur is the variance of the 3x3 Laplacian response; contrast the
    luminance standard deviation; illumination the mean luminance (two
    sided bounds); the artifact score is the fraction of pixels with any
    channel fully saturated. Reports, never raises, on any valid image.
    """
    lum = luminance(record.pixels)
    h, w = lum.shape
    if h >= 3 and w >= 3:
        lap = (
            lum[:-2, 1:-1] + lum[2:, 1:-1] + lum[1:-1, :-2] + lum[1:-1, 2:]
            - 4.0 * lum[1:-1, 1:-1]
        )
        blur = float(lap.var())
    else:
        blur = 0.0
    contrast = float(lum.std())
    illum = float(lum.mean())
    saturated = (record.pixels >= 1.0 - 1e-12).any(axis=0)
    artifact = float(saturated.mean())

    failed = []
    if blur < thresholds.blur_min:
        failed.append("blur")
    if contrast < thresholds.contrast_min:
        failed.append("contrast")
    if not thresholds.illumination_lo <= illum <= thresholds.illumination_hi:
        failed.append("illumination")
    if artifact > thresholds.artifact_max:
        failed.append("artifacts")
    return QualityReport(
        blur_score=blur, contrast_score=contrast, illumination_score=illum,
        artifact_score=artifact, passed=not failed, failed_checks=tuple(failed),
    )


# ---------------------------------------------------------------------------
# splits


def _round_half_up(value: float) -> int:
    return int(np.floor(value + 0.5))


def holdout_split(count: int, ratio: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Shuffled train/validation index split with round(ratio * n) training."""
    if count < 1:
        raise ArgumentError("cannot split an empty dataset")
    if not 0.0 < ratio < 1.0:
        raise ArgumentError(f"holdout ratio must be in (0, 1), got {ratio}")
    order = np.random.default_rng(seed).permutation(count)
    n_train = _round_half_up(ratio * count)
    return order[:n_train], order[n_train:]


def stratified_kfold(labels, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Disjoint covering folds with per-class counts differing by at most 1.

    Returns k (train_indices, test_indices) pairs.
    """
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size == 0:
        raise ArgumentError("labels must be a non-empty vector")
    if k < 2:
        raise ArgumentError("stratified folds require k >= 2")
    rng = np.random.default_rng(seed)
    order = rng.permutation(labels.size)
    fold_of = np.empty(labels.size, dtype=int)
    for cls in np.unique(labels):
        members = order[labels[order] == cls]
        if members.size < k:
            raise StratificationError(
                f"class {cls} has {members.size} members, fewer than k={k}"
            )
        for pos, idx in enumerate(members):
            fold_of[idx] = pos % k
    folds = []
    everything = np.arange(labels.size)
    for f in range(k):
        test = everything[fold_of == f]
        train = everything[fold_of != f]
        folds.append((train, test))
    return folds


# ---------------------------------------------------------------------------
# manifests and dataset assembly


def read_manifest(path: str | Path) -> list[tuple[str, int | None]]:
    """Parse a line-delimited manifest: ``path<TAB>label`` (label optional)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such manifest: {path}")
    entries: list[tuple[str, int | None]] = []
    base = path.parent
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) > 2:
            raise DataError(f"{path.name}:{lineno}: expected 'path[\\tlabel]'")
        rel = parts[0].strip()
        label: int | None = None
        if len(parts) == 2 and parts[1].strip():
            try:
                label = int(parts[1])
            except ValueError as exc:
                raise DataError(
                    f"{path.name}:{lineno}: label {parts[1]!r} is not an integer"
                ) from exc
        img_path = Path(rel)
        if not img_path.is_absolute():
            img_path = base / img_path
        entries.append((str(img_path), label))
    if not entries:
        raise DataError(f"manifest {path.name} is empty")
    return entries


def write_manifest(path: str | Path, entries: list[tuple[str, int | None]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for img_path, label in entries:
            if label is None:
                fh.write(f"{img_path}\n")
            else:
                fh.write(f"{img_path}\t{label}\n")


def load_dataset(manifest_path: str | Path,
                 image_size: int | None = None) -> tuple[np.ndarray, np.ndarray | None, list[str]]:
    """Load every manifest image, optionally resized to a square size.

    Returns (images (M, 3, S, S), labels or None, ids). Labels are
    returned only if every entry carries one.
    """
    entries = read_manifest(manifest_path)
    images, labels, ids = [], [], []
    for img_path, label in entries:
        record = load_image(img_path)
        pixels = record.pixels
        if image_size is not None:
            pixels = bilinear_resize(pixels, image_size, image_size)
        images.append(pixels)
        labels.append(label)
        ids.append(record.id)
    shapes = {img.shape for img in images}
    if len(shapes) > 1:
        raise DataError(
            f"images have mixed shapes {sorted(shapes)}; set an image size"
        )
    stacked = np.stack(images)
    if any(lbl is None for lbl in labels):
        return stacked, None, ids
    return stacked, np.asarray(labels, dtype=int), ids
