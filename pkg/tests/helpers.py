"""Synthetic datasets and config scaffolding shared across test modules."""

from pathlib import Path

import numpy as np

from spmim.data import save_image_png, write_manifest


def texture_image(rng, cls: int, size: int = 64,
                  amp_range=(0.25, 0.4), noise: float = 0.01) -> np.ndarray:
    """One (3, size, size) image of a directional texture class in [0, 1].

    Classes: 0 horizontal stripes, 1 vertical stripes, 2 checker product,
    3 diagonal stripes. Frequency, phase, amplitude and a smooth offset
    are randomized per image; amp_range and noise tune the difficulty.
    """
    freq = rng.uniform(2.0, 4.0) * 2 * np.pi / size
    phase = rng.uniform(0, 2 * np.pi)
    amp = rng.uniform(*amp_range)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    if cls == 0:
        pattern = np.sin(freq * ys + phase)
    elif cls == 1:
        pattern = np.sin(freq * xs + phase)
    elif cls == 2:
        pattern = np.sin(freq * ys + phase) * np.sin(freq * xs + phase)
    elif cls == 3:
        pattern = np.sin(freq * (xs + ys) / np.sqrt(2.0) + phase)
    else:
        raise ValueError(f"no texture class {cls}")
    offset = rng.uniform(0.45, 0.55)
    channel_gain = rng.uniform(0.8, 1.0, size=3)
    jitter = rng.normal(0.0, noise, size=(3, size, size))
    image = offset + amp * channel_gain[:, None, None] * pattern + jitter
    return np.clip(image, 0.02, 0.98)


def texture_dataset(per_class: int, size: int = 64, seed: int = 0,
                    classes: int = 4, amp_range=(0.25, 0.4),
                    noise: float = 0.01):
    """Balanced texture dataset: (images (N,3,S,S), labels (N,))."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for cls in range(classes):
        for _ in range(per_class):
            images.append(texture_image(rng, cls, size, amp_range, noise))
            labels.append(cls)
    order = rng.permutation(len(images))
    return np.stack(images)[order], np.asarray(labels)[order]


def write_image_dataset(directory: Path, images: np.ndarray,
                        labels=None) -> Path:
    """Write images as PNGs plus a manifest; returns the manifest path."""
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, img in enumerate(images):
        path = directory / f"img{i:04d}.png"
        save_image_png(path, img)
        entries.append((str(path), None if labels is None else int(labels[i])))
    manifest = directory / "manifest.tsv"
    write_manifest(manifest, entries)
    return manifest


TOY_CONFIG = """
[encoder]
stem_channels = 6
stages = 8:2:2:1:0.0, 10:2:2:1:0.0, 12:2:2:1:0.0, 16:2:2:1:0.0

[decoder]
channels = 8, 8, 8, 8, 8

[training]
pretrain_epochs = {epochs}
finetune_epochs = {epochs}
batch_size = 4
image_size = 64
num_classes = {num_classes}
head_dropout = 0.0

[data]
manifest = {manifest}
augment = {augment}

[output]
dir = {out}
"""


def write_toy_config(path: Path, manifest: Path, out: Path, epochs: int = 2,
                     num_classes: int = 2, augment: bool = False,
                     extra: str = "") -> Path:
    text = TOY_CONFIG.format(
        epochs=epochs, num_classes=num_classes, manifest=manifest, out=out,
        augment="true" if augment else "false",
    )
    path.write_text(text + extra, encoding="utf-8")
    return path
