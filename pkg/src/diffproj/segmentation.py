"""Toy weakly-labelled segmentation task on small pixel grids.

Each image is a background grid with one or two rectangular objects. A pixel
classifier (small MLP, softmax output) is trained on noisy per-pixel
features; its per-pixel scores are then projected onto the image-level label
constraints of :func:`diffproj.constraints.build_segmentation_constraints`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .constraints import SEGMENTATION_FAMILIES, build_segmentation_constraints, residuals
from .neural import LossSpec, MlpModel, RmsPropState, forward, train
from .projection import project

__all__ = [
    "ToyImage",
    "make_toy_images",
    "pixel_features",
    "train_pixel_classifier",
    "family_violations",
    "score_field",
]


@dataclass(frozen=True)
class ToyImage:
    labels: np.ndarray  # (n_pixels,) ints, 0 = background
    present: tuple
    features: np.ndarray  # (n_pixels, n_features)

    @property
    def n_pixels(self):
        return self.labels.shape[0]


def _label_map(rng, grid, n_classes):
    """Rejection-sample a label map that satisfies its own image-level constraints."""
    n_pixels = grid * grid
    while True:
        img = np.zeros((grid, grid), dtype=np.int64)
        n_obj = int(rng.integers(1, 3))
        classes = rng.choice(np.arange(1, n_classes), size=n_obj, replace=False)
        for c in classes:
            h, w = rng.integers(2, grid // 2 + 2, size=2)
            r, q = rng.integers(0, grid - h + 1), rng.integers(0, grid - w + 1)
            img[r : r + h, q : q + w] = c
        flat = img.ravel()
        counts = np.bincount(flat, minlength=n_classes)
        present = tuple(int(c) for c in np.flatnonzero(counts[1:]) + 1)
        if not present:
            continue
        if not 0.3 * n_pixels <= counts[0] <= 0.7 * n_pixels:
            continue
        if any(counts[c] < 0.05 * n_pixels for c in present):
            continue
        return flat, present


def pixel_features(labels, n_classes, noise, rng):
    onehot = np.eye(n_classes)[labels]
    return onehot + noise * rng.standard_normal(onehot.shape)


def make_toy_images(n_images, grid=8, n_classes=4, noise=0.9, seed=0):
    rng = np.random.default_rng(seed)
    images = []
    for _ in range(n_images):
        labels, present = _label_map(rng, grid, n_classes)
        images.append(ToyImage(labels, present, pixel_features(labels, n_classes, noise, rng)))
    return images


def train_pixel_classifier(images, n_classes, hidden=16, epochs=5, seed=0):
    X = np.concatenate([im.features for im in images])
    Y = np.eye(n_classes)[np.concatenate([im.labels for im in images])]
    model = MlpModel.init(
        [X.shape[1], hidden, n_classes], "tanh", output_activation="softmax", seed=[seed, 0]
    )
    model, _ = train(
        model,
        (X, Y),
        None,
        None,
        LossSpec(),
        epochs,
        seed=[seed, 1],
        optimizer=RmsPropState([], alpha=1e-2, beta=0.1, delta=0.0),
    )
    return model


def score_field(model, image):
    """Flattened pixel-major score field ``p[i * n_classes + l]``."""
    return forward(model, image.features)[0].ravel()


def family_violations(cs, p):
    """Sum of positive residuals per constraint family (suppression, ...)."""
    pos = np.maximum(residuals(cs, p), 0.0)
    out = {}
    for family in SEGMENTATION_FAMILIES:
        rows = [j for j, label in enumerate(cs.labels) if label.split(":")[0] == family]
        out[family] = float(pos[rows].sum()) if rows else 0.0
    return out


def project_image(model, image, n_classes, cfg):
    cs = build_segmentation_constraints(image.n_pixels, n_classes, image.present)
    p = score_field(model, image)
    q = project(cs, p, cfg).iterates[-1]
    return cs, p, q
