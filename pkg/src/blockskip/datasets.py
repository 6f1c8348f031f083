"""Desk-scale training data: 2-d point clouds and tiny 8x8 images."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


class DatasetError(ValueError):
    pass


def two_moons(n: int, noise: float, rng: np.random.Generator) -> np.ndarray:
    """Two interleaving half circles, centered near the origin."""
    n_upper = n // 2
    n_lower = n - n_upper
    a = rng.uniform(0.0, np.pi, n_upper)
    b = rng.uniform(0.0, np.pi, n_lower)
    upper = np.stack([np.cos(a), np.sin(a)], axis=1)
    lower = np.stack([1.0 - np.cos(b), 0.5 - np.sin(b)], axis=1)
    pts = np.concatenate([upper, lower], axis=0)
    pts += noise * rng.standard_normal(pts.shape)
    pts -= np.array([0.5, 0.25])
    order = rng.permutation(n)
    return pts[order].astype(np.float32)


def gaussian_mixture(n: int, rng: np.random.Generator, components: int = 8,
                     radius: float = 1.5, scale: float = 0.12) -> np.ndarray:
    """Equal-weight Gaussians spaced around a circle."""
    angles = 2.0 * np.pi * np.arange(components) / components
    centers = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    which = rng.integers(0, components, n)
    pts = centers[which] + scale * rng.standard_normal((n, 2))
    return pts.astype(np.float32)


def blob_images(n: int, rng: np.random.Generator, side: int = 8) -> np.ndarray:
    """Random soft two-bump images, flattened, roughly in [-1, 1]."""
    ys, xs = np.mgrid[0:side, 0:side].astype(np.float64)
    images = np.empty((n, side * side), dtype=np.float32)
    for i in range(n):
        img = -np.ones((side, side))
        for _ in range(2):
            cx, cy = rng.uniform(1.0, side - 2.0, 2)
            sigma = rng.uniform(0.8, 1.6)
            img += 2.0 * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma**2))
        images[i] = np.clip(img, -1.0, 1.0).ravel()
    return images


def save_image_dir(path, images: np.ndarray, side: int = 8) -> Path:
    """Write a tiny-image dataset: raw little-endian float32 plus a sidecar."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(images, dtype="<f4")
    (out / "images.f32").write_bytes(arr.tobytes())
    meta = {"count": int(arr.shape[0]), "height": side, "width": side}
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return out


def load_image_dir(path) -> np.ndarray:
    root = Path(path)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise DatasetError(f"tiny-image directory {root} has no meta.json")
    meta = json.loads(meta_path.read_text())
    pixels = meta["height"] * meta["width"]
    raw = (root / "images.f32").read_bytes()
    arr = np.frombuffer(raw, dtype="<f4")
    if arr.size != meta["count"] * pixels:
        raise DatasetError(f"images.f32 holds {arr.size} floats, expected {meta['count'] * pixels}")
    return arr.reshape(meta["count"], pixels).astype(np.float32)


def make_dataset(spec: dict, rng: np.random.Generator) -> np.ndarray:
    """Materialize the dataset described by a config block."""
    kind = spec.get("kind")
    size = int(spec.get("size", 4096))
    if kind == "two-moons":
        return two_moons(size, float(spec.get("noise", 0.06)), rng)
    if kind == "gaussian-mixture":
        return gaussian_mixture(size, rng, components=int(spec.get("components", 8)),
                                radius=float(spec.get("radius", 1.5)),
                                scale=float(spec.get("scale", 0.12)))
    if kind == "tiny-image":
        path = spec.get("path")
        if not path:
            raise DatasetError("tiny-image dataset needs a 'path'")
        return load_image_dir(path)
    raise DatasetError(f"unknown dataset kind {kind!r}")
