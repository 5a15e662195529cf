"""Figure-style image triplets (reconstruction, Sobel edges, 10x difference) and CSV tables."""
import csv
from pathlib import Path
from typing import List, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

DIFF_GAIN = 10.0


def sobel_magnitude(img: np.ndarray) -> np.ndarray:
    """Gradient magnitude from the 3x3 Sobel pair; borders replicate edge pixels."""
    img = np.asarray(img, dtype=np.float64)
    gx = ndimage.sobel(img, axis=1, mode="nearest")
    gy = ndimage.sobel(img, axis=0, mode="nearest")
    return np.hypot(gx, gy)


def abs_difference(ref: np.ndarray, test: np.ndarray, gain: float = DIFF_GAIN) -> np.ndarray:
    return gain * np.abs(np.asarray(ref, dtype=np.float64) - np.asarray(test, dtype=np.float64))


def to_uint8(img: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if hi <= lo:
        return np.zeros(np.shape(img), dtype=np.uint8)
    return np.round(np.clip((img - lo) / (hi - lo), 0, 1) * 255).astype(np.uint8)


def heat_rgb(values: np.ndarray) -> np.ndarray:
    """Black-red-yellow-white ramp for values in [0, 1]."""
    v = np.clip(values, 0, 1)[..., None]
    rgb = np.concatenate([np.clip(3 * v, 0, 1), np.clip(3 * v - 1, 0, 1), np.clip(3 * v - 2, 0, 1)], axis=-1)
    return np.round(rgb * 255).astype(np.uint8)


def render_gray(img: np.ndarray, path, lo=None, hi=None) -> Path:
    img = np.asarray(img, dtype=np.float64)
    lo = float(img.min()) if lo is None else lo
    hi = float(img.max()) if hi is None else hi
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img, lo, hi)).save(path)
    return path


def render_triplet(gt: np.ndarray, recon: np.ndarray, path) -> Path:
    """Save [reconstruction | Sobel edges | 10x |recon - gt|] side by side as one RGB PNG.

    Display range is shared between ground truth and reconstruction.
    """
    lo = float(min(gt.min(), recon.min()))
    hi = float(max(gt.max(), recon.max()))
    span = hi - lo if hi > lo else 1.0
    panel = to_uint8(recon, lo, hi)
    edges = sobel_magnitude(recon)
    edge_panel = to_uint8(edges, 0.0, float(edges.max()) if edges.max() > 0 else 1.0)
    diff = abs_difference(gt, recon) / span
    rgb = np.concatenate([
        np.repeat(panel[..., None], 3, axis=-1),
        np.repeat(edge_panel[..., None], 3, axis=-1),
        heat_rgb(diff),
    ], axis=1)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb).save(path)
    return path


def write_csv(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys: List[str] = []
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        for r in rows:
            writer.writerow(r)
    return path
