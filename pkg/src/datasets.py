"""Synthetic image classification data: one Gaussian blob lattice per class."""

from __future__ import annotations

from typing import Iterator, Tuple

import numpy as np

from .models import SyntheticDataset, Tensor4
from .rng import RngStream

BLOB_WIDTH = 0.8


def _lattice_spacing(k: int) -> int:
    return 3 + k // 2


def _blob_templates(classes: int, h: int, w: int, channels: int, gen: np.random.Generator) -> np.ndarray:
    # class k tiles the map with blobs of sign (-1)**k on a square lattice of
    # spacing 3 + k // 2; the texture is roughly stationary, so any patch of a
    # few lattice cells carries the class signal
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    templates = np.zeros((classes, h, w, channels))
    for k in range(classes):
        spacing = _lattice_spacing(k)
        oy, ox = gen.uniform(0.0, spacing, size=2)
        texture = np.zeros((h, w))
        for cy in np.arange(oy - spacing, h + spacing, spacing):
            for cx in np.arange(ox - spacing, w + spacing, spacing):
                texture += np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2.0 * BLOB_WIDTH**2))
        sign = 1.0 if k % 2 == 0 else -1.0
        scales = 1.0 + 0.25 * gen.standard_normal(channels)
        templates[k] = sign * texture[:, :, None] * scales[None, None, :]
    return templates


def make_blob_dataset(
    classes: int,
    per_class: int,
    h: int,
    w: int,
    noise: float,
    seed: int,
    channels: int = 1,
    val_fraction: float = 0.25,
) -> SyntheticDataset:
    """Class-conditional blob-lattice images plus i.i.d. Gaussian pixel noise.

    Classes differ in lattice spacing and sign, so both mean intensity and
    texture separate them. Each class contributes the same number of samples
    to each split.
    """
    if classes < 2:
        raise ValueError("classes must be >= 2")
    if per_class < 2 or h < 3 or w < 3 or channels < 1:
        raise ValueError(
            f"degenerate dataset dims: per_class={per_class}, h={h}, w={w}, channels={channels}"
        )
    if noise < 0:
        raise ValueError("noise must be non-negative")
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must be in (0, 1)")

    rng = RngStream(seed).derive("blobs")
    templates = _blob_templates(classes, h, w, channels, rng.derive("templates").generator())
    n_val = min(per_class - 1, max(1, round(per_class * val_fraction)))
    n_train = per_class - n_val

    noise_gen = rng.derive("noise").generator()
    images = templates[:, None] + noise * noise_gen.standard_normal(
        (classes, per_class, h, w, channels)
    )
    labels = np.repeat(np.arange(classes), per_class).reshape(classes, per_class)

    return SyntheticDataset(
        train_images=Tensor4(images[:, :n_train].reshape(-1, h, w, channels)),
        train_labels=labels[:, :n_train].reshape(-1).copy(),
        val_images=Tensor4(images[:, n_train:].reshape(-1, h, w, channels)),
        val_labels=labels[:, n_train:].reshape(-1).copy(),
        classes=classes,
        params={
            "classes": classes,
            "per_class": per_class,
            "height": h,
            "width": w,
            "channels": channels,
            "noise": noise,
            "seed": seed,
            "val_fraction": val_fraction,
        },
    )


def iterate_batches(
    images: Tensor4, labels: np.ndarray, batch_size: int, order: np.ndarray | None = None,
    drop_last: bool = True,
) -> Iterator[Tuple[Tensor4, np.ndarray]]:
    order = np.arange(images.n) if order is None else order
    stop = len(order) - len(order) % batch_size if drop_last else len(order)
    for start in range(0, stop, batch_size):
        picked = order[start : start + batch_size]
        yield Tensor4(images.data[picked]), labels[picked]


__all__ = ["make_blob_dataset", "iterate_batches"]
