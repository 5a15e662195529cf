"""Multi-channel training objective: pixel and frequency Charbonnier terms plus a perceptual term."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .kspace import MultiCoilStack, check_maps_normalized
from .tensor import ShapeError, Tensor


@dataclass
class LossWeights:
    alpha: float = 15.0
    beta: float = 0.1
    gamma: float = 0.0025
    eps: float = 1e-9

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    def to_dict(self):
        return asdict(self)


def _as_real(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    x = np.asarray(x)
    if np.iscomplexobj(x):
        x = np.stack([x.real, x.imag], axis=-1)
    return Tensor(x.astype(dtype))


def charbonnier(a, b, eps: float = 1e-9, batch_axes: int = 0) -> Tensor:
    """sqrt(||a - b||_2^2 + eps^2).

    Complex arrays are compared on stacked (re, im) channels, which makes the
    norm the complex 2-norm. With ``batch_axes = k`` the norm is taken per
    index of the first k axes and the results are averaged.
    """
    dtype = a.dtype if isinstance(a, Tensor) else (b.dtype if isinstance(b, Tensor) else np.float64)
    a, b = _as_real(a, dtype), _as_real(b, dtype)
    if a.shape != b.shape:
        raise ShapeError(f"charbonnier operands differ in shape: {a.shape} vs {b.shape}")
    d = a - b
    axes = tuple(range(batch_axes, d.ndim))
    sq = T.tsum(d * d, axis=axes) if axes else d * d
    per = T.sqrt(T.add(sq, eps * eps))
    return T.mean(per) if batch_axes else per


def _unwrap(stack, role):
    if isinstance(stack, MultiCoilStack):
        if stack.role != role:
            raise TypeError(f"expected a {role} stack, got {stack.role}")
        return stack.data
    return np.asarray(stack)


def _coil_prediction(x_hat: Tensor, targets: np.ndarray, maps: np.ndarray):
    """Broadcast the single-channel prediction through the coil maps, on (re, im) channels."""
    H, W = x_hat.shape[-2:]
    if targets.ndim == 3:
        targets = targets[None]
    if maps.ndim == 3:
        maps = maps[None]
    if maps.shape[-2:] != (H, W) or targets.shape[-2:] != (H, W):
        raise ShapeError(f"spatial shapes differ: prediction {(H, W)}, targets {targets.shape}, maps {maps.shape}")
    if targets.shape[-3] != maps.shape[-3]:
        raise ValueError(f"coil count mismatch: {targets.shape[-3]} targets vs {maps.shape[-3]} maps")
    check_maps_normalized(maps, coil_axis=-3)
    B = int(np.prod(x_hat.shape[:-2])) if x_hat.ndim > 2 else 1
    if targets.shape[0] not in (1, B) or maps.shape[0] not in (1, B):
        raise ShapeError(f"batch mismatch: prediction batch {B}, targets {targets.shape}, maps {maps.shape}")
    dt = x_hat.dtype
    m = np.stack([maps.real, maps.imag], axis=-1).astype(dt)
    pred = T.reshape(x_hat, (B, 1, H, W, 1)) * m
    tgt = np.stack([targets.real, targets.imag], axis=-1).astype(dt)
    if tgt.shape[0] != B:
        tgt = np.broadcast_to(tgt, (B,) + tgt.shape[1:])
    return pred, Tensor(np.ascontiguousarray(tgt))


def pixel_loss(x_hat: Tensor, coil_gt, maps, eps: float = 1e-9) -> Tensor:
    """(1/S) sum_q charbonnier(x_q, S_q * x_hat), averaged over the batch.

    ``x_hat`` is real, shaped [H, W] or [B, 1, H, W]; ``coil_gt`` and ``maps``
    are complex [S, H, W] or [B, S, H, W] (or :class:`MultiCoilStack`).
    """
    x_hat = T.as_tensor(x_hat)
    pred, tgt = _coil_prediction(x_hat, _unwrap(coil_gt, "coil_images"), _unwrap(maps, "sensitivity_maps"))
    return charbonnier(tgt, pred, eps, batch_axes=2)


def freq_loss(x_hat: Tensor, coil_kspace_gt, maps, eps: float = 1e-9) -> Tensor:
    """(1/S) sum_q charbonnier(y_q, fft2c(S_q * x_hat)), averaged over the batch."""
    x_hat = T.as_tensor(x_hat)
    pred, tgt = _coil_prediction(x_hat, _unwrap(coil_kspace_gt, "coil_kspace"), _unwrap(maps, "sensitivity_maps"))
    return charbonnier(tgt, T.fft2c_ri(pred), eps, batch_axes=2)


# ---------------------------------------------------------------------------
# perceptual features
# ---------------------------------------------------------------------------


class FeatureExtractor:
    """Deterministic map from a batch of real images [B, 1, H, W] to features [B, F]."""

    name = "base"

    def __call__(self, images: Tensor) -> Tensor:
        raise NotImplementedError

    def features(self, images) -> np.ndarray:
        """Plain NumPy features for a stack of [H, W] images or a [B, 1, H, W] batch."""
        arr = np.asarray(images, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None, None]
        elif arr.ndim == 3:
            arr = arr[:, None]
        with T.no_grad():
            return self(Tensor(arr)).data.astype(np.float64)


class FlattenExtractor(FeatureExtractor):
    """Identity features: the flattened pixels."""

    name = "flatten"

    def __call__(self, images: Tensor) -> Tensor:
        images = T.as_tensor(images)
        return T.reshape(images, (images.shape[0], -1))


class ConvFeatureExtractor(FeatureExtractor):
    """Frozen, randomly initialised 3-layer conv stack used as a perceptual surrogate.

    Each stage is conv3x3 -> GELU -> stride-2 subsampling. The feature vector
    concatenates the spatial mean of every stage, so its length
    (``sum(channels)``) does not depend on the image size.
    """

    name = "conv-surrogate"

    def __init__(self, seed: int = 1234, channels: Sequence[int] = (8, 16, 32)):
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.channels = tuple(channels)
        self.kernels = []
        self.biases = []
        c_in = 1
        for c in self.channels:
            std = np.sqrt(2.0 / (9 * c_in))
            self.kernels.append(rng.normal(0.0, std, (c, c_in, 3, 3)))
            self.biases.append(rng.normal(0.0, 0.1, (c,)))
            c_in = c

    @property
    def dim(self) -> int:
        return int(sum(self.channels))

    def __call__(self, images: Tensor) -> Tensor:
        h = T.as_tensor(images)
        dt = h.dtype
        pooled = []
        for k, b in zip(self.kernels, self.biases):
            h = T.gelu(T.conv2d(h, Tensor(k.astype(dt)), Tensor(b.astype(dt))))
            h = h[:, :, ::2, ::2]
            pooled.append(T.mean(h, axis=(2, 3)))
        return T.concat(pooled, axis=1)


def perceptual_loss(x, x_hat: Tensor, extractor: FeatureExtractor) -> Tensor:
    """||f(x) - f(x_hat)||_1, averaged over the batch. ``x`` is the RSS ground truth."""
    x_hat = T.as_tensor(x_hat)
    dt = x_hat.dtype

    def batch(t):
        t = T.as_tensor(t, dtype=dt)
        if t.ndim == 2:
            return T.reshape(t, (1, 1) + t.shape)
        return t

    with T.no_grad():
        fx = extractor(batch(Tensor(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=dt))))
    fxh = extractor(batch(x_hat))
    if fx.shape != fxh.shape:
        raise ShapeError(f"feature length mismatch: {fx.shape} vs {fxh.shape}")
    return T.mean(T.tsum(T.tabs(fxh - fx.data), axis=1))


# ---------------------------------------------------------------------------
# total
# ---------------------------------------------------------------------------

Part = Union[Tensor, float]


def total_loss(parts: Union[Mapping[str, Part], Sequence[Part]], w: Optional[LossWeights] = None) -> Part:
    """alpha * pixel + beta * freq + gamma * perceptual.

    ``parts`` is either a mapping with keys ``pixel``, ``freq``, ``perceptual``
    (missing terms count as zero) or a (pixel, freq, perceptual) sequence.
    """
    w = w or LossWeights()
    if isinstance(parts, Mapping):
        terms = [parts.get("pixel"), parts.get("freq"), parts.get("perceptual")]
    else:
        terms = list(parts)
    out = None
    for weight, term in zip((w.alpha, w.beta, w.gamma), terms):
        if term is None or weight == 0:
            continue
        piece = T.scale(term, weight) if isinstance(term, Tensor) else weight * float(term)
        out = piece if out is None else out + piece
    return 0.0 if out is None else out
