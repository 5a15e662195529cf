"""Simulated multi-coil acquisition: masks, noise, coil maps and phantoms.

Complex images are plain complex NumPy arrays shaped [H, W]. Real-valued
images (RSS combinations, zero-filled magnitudes, phantoms) are float arrays.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from . import smrt
from .fourier import fft2c, ifft2c

__all__ = [
    "MultiCoilStack",
    "ParameterError",
    "UndersamplingMask",
    "apply_sensitivities",
    "degrade",
    "fft2c",
    "ifft2c",
    "import_volume",
    "make_mask",
    "measured_noise_level",
    "rss_combine",
    "synth_phantom",
    "synth_sensitivity_maps",
    "zero_filled",
]

TRAJECTORIES = ("gaussian1d", "radial", "spiral")
ROLES = ("coil_images", "coil_kspace", "sensitivity_maps")
GOLDEN_ANGLE = np.pi * 2.0 / (1.0 + np.sqrt(5.0))  # 111.25 deg, for diameters (mod pi)
MAP_TOLERANCE = 1e-4


class ParameterError(ValueError):
    """Infeasible or out-of-range generation parameters."""


def _round_half_up(v: float) -> int:
    return int(np.floor(v + 0.5))


# ---------------------------------------------------------------------------
# coil stacks
# ---------------------------------------------------------------------------


@dataclass
class MultiCoilStack:
    """S complex slices of identical shape, tagged with what they represent."""

    data: np.ndarray
    role: str

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}; expected one of {ROLES}")
        if self.data.ndim != 3:
            raise ValueError(f"coil stack must be shaped [S, H, W], got {self.data.shape}")
        if self.role == "sensitivity_maps":
            check_maps_normalized(self.data, coil_axis=0)

    @property
    def coils(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape[1:]


def check_maps_normalized(maps: np.ndarray, coil_axis: int = 0, tol: float = MAP_TOLERANCE):
    """Raise ``ValueError`` unless sum_q |S_q|^2 == 1 (within ``tol``) at every pixel."""
    power = np.sum(np.abs(maps) ** 2, axis=coil_axis)
    worst = float(np.max(np.abs(power - 1.0))) if power.size else 0.0
    if not worst <= tol:
        raise ValueError(f"sensitivity maps are not normalized: max |sum|S|^2 - 1| = {worst:.3g}")


def _unwrap(stack, role: str) -> np.ndarray:
    if isinstance(stack, MultiCoilStack):
        if stack.role != role:
            raise TypeError(f"expected a {role} stack, got {stack.role}")
        return stack.data
    return np.asarray(stack)


def rss_combine(coils: MultiCoilStack) -> np.ndarray:
    """Root-sum-of-squares coil combination; returns a real [H, W] image."""
    if not isinstance(coils, MultiCoilStack) or coils.role != "coil_images":
        role = getattr(coils, "role", type(coils).__name__)
        raise TypeError(f"rss_combine needs a coil_images stack, got {role}")
    return np.sqrt(np.sum(np.abs(coils.data) ** 2, axis=0))


def apply_sensitivities(x: np.ndarray, maps: MultiCoilStack) -> MultiCoilStack:
    """Per-coil images S_q * x (pixelwise)."""
    m = _unwrap(maps, "sensitivity_maps")
    x = np.asarray(x)
    if x.shape != m.shape[1:]:
        raise ValueError(f"image shape {x.shape} does not match maps {m.shape[1:]}")
    return MultiCoilStack(m * x[None], "coil_images")


def synth_sensitivity_maps(S: int, H: int, W: int, seed: int = 0, lobe_width: float = 0.8,
                           max_cycles: float = 0.5, radius: float = 0.7) -> MultiCoilStack:
    """Smooth synthetic coil sensitivities, normalized so sum_q |S_q|^2 = 1.

    Each coil is a 2D Gaussian magnitude lobe (``lobe_width`` in units of the
    half field of view) centred on a ring of relative ``radius``, times a linear
    phase ramp of at most ``max_cycles`` cycles across the field of view.
    """
    if S < 1:
        raise ParameterError("need at least one coil")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(-1, 1, H), np.linspace(-1, 1, W), indexing="ij")
    offset = rng.uniform(0, 2 * np.pi / S)
    maps = np.empty((S, H, W), dtype=np.complex128)
    for q in range(S):
        ang = offset + 2 * np.pi * q / S
        cy, cx = radius * np.sin(ang), radius * np.cos(ang)
        mag = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * lobe_width ** 2))
        ky, kx = rng.uniform(-max_cycles, max_cycles, size=2)
        phase = np.pi * (kx * xx + ky * yy) + rng.uniform(0, 2 * np.pi)
        maps[q] = mag * np.exp(1j * phase)
    maps /= np.sqrt(np.sum(np.abs(maps) ** 2, axis=0, keepdims=True))
    return MultiCoilStack(maps, "sensitivity_maps")


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------


@dataclass
class UndersamplingMask:
    """Binary k-space sampling pattern plus the parameters that generated it."""

    mask: np.ndarray
    trajectory: str
    target_ratio: float
    center_fraction: float
    seed: int
    extra: dict = field(default_factory=dict)

    @property
    def achieved_ratio(self) -> float:
        return float(self.mask.mean())

    @property
    def shape(self):
        return self.mask.shape

    def metadata(self) -> dict:
        meta = {
            "trajectory": self.trajectory,
            "target_ratio": self.target_ratio,
            "achieved_ratio": self.achieved_ratio,
            "center_fraction": self.center_fraction,
            "seed": self.seed,
        }
        meta.update(self.extra)
        return meta

    def save(self, path) -> Path:
        return smrt.save_with_sidecar(path, self.mask.astype(np.float32), self.metadata())

    @classmethod
    def load(cls, path) -> "UndersamplingMask":
        arr = smrt.load(path)
        meta = smrt.load_sidecar(path)
        extra = {k: v for k, v in meta.items()
                 if k not in ("trajectory", "target_ratio", "achieved_ratio", "center_fraction", "seed")}
        return cls(arr > 0.5, meta["trajectory"], meta["target_ratio"], meta["center_fraction"],
                   meta["seed"], extra)


def make_mask(trajectory: str, H: int, W: int, target_ratio: float,
              center_fraction: Optional[float] = None, seed: int = 0) -> UndersamplingMask:
    """Generate an undersampling mask.

    Parameters
    ----------
    trajectory : {"gaussian1d", "radial", "spiral"}
    H, W : int
        k-space size.
    target_ratio : float
        Fraction of k-space samples to keep, in (0, 1].
    center_fraction : float, optional
        gaussian1d: fraction of fully sampled central columns (default
        ``min(0.08, target_ratio / 2)``). radial/spiral: diameter of a fully
        sampled central disk relative to ``min(H, W)`` (default 0).
    seed : int
        Seeds column draws (gaussian1d) or the initial rotation (radial/spiral).
    """
    if trajectory not in TRAJECTORIES:
        raise ParameterError(f"unknown trajectory {trajectory!r}; expected one of {TRAJECTORIES}")
    if not 0.0 < target_ratio <= 1.0:
        raise ParameterError(f"target_ratio must lie in (0, 1], got {target_ratio}")
    if H < 1 or W < 1:
        raise ParameterError("mask dimensions must be positive")
    if center_fraction is None:
        center_fraction = min(0.08, target_ratio / 2) if trajectory == "gaussian1d" else 0.0
    if not 0.0 <= center_fraction < 1.0:
        raise ParameterError(f"center_fraction must lie in [0, 1), got {center_fraction}")
    if target_ratio < 1.0 and center_fraction >= target_ratio:
        raise ParameterError(f"center_fraction {center_fraction} must be below target_ratio {target_ratio}")

    extra = {}
    if target_ratio == 1.0:
        mask = np.ones((H, W), dtype=bool)
    elif trajectory == "gaussian1d":
        mask = _gaussian1d(H, W, target_ratio, center_fraction, seed)
    elif trajectory == "radial":
        mask, n_rays = _radial(H, W, target_ratio, center_fraction, seed)
        extra["rays"] = n_rays
    else:
        mask, turns = _spiral(H, W, target_ratio, center_fraction, seed)
        extra["turns"] = turns
    mask[H // 2, W // 2] = True
    return UndersamplingMask(mask, trajectory, float(target_ratio), float(center_fraction), int(seed), extra)


def _gaussian1d(H, W, ratio, center_fraction, seed):
    n_total = _round_half_up(ratio * W)
    n_center = max(1, _round_half_up(center_fraction * W))
    if n_total < n_center:
        raise ParameterError(f"ratio {ratio} keeps {n_total} columns but the center band needs {n_center}")
    c = W // 2
    cols = np.zeros(W, dtype=bool)
    start = c - n_center // 2
    cols[start:start + n_center] = True
    k = np.arange(W)
    sigma = W / 6.0
    p = np.exp(-((k - c) ** 2) / (2 * sigma ** 2))
    p[cols] = 0.0
    n_rest = n_total - n_center
    if n_rest:
        if np.count_nonzero(p) < n_rest:
            raise ParameterError("not enough columns with nonzero selection probability")
        rng = np.random.default_rng(seed)
        picked = rng.choice(W, size=n_rest, replace=False, p=p / p.sum())
        cols[picked] = True
    return np.repeat(cols[None, :], H, axis=0)


def _center_disk(H, W, center_fraction):
    if center_fraction <= 0:
        return np.zeros((H, W), dtype=bool)
    r = center_fraction * min(H, W) / 2.0
    yy, xx = np.mgrid[:H, :W]
    return (yy - H // 2) ** 2 + (xx - W // 2) ** 2 <= r * r


def _rasterize(mask, ys, xs):
    yi = np.rint(ys).astype(np.int64)
    xi = np.rint(xs).astype(np.int64)
    ok = (yi >= 0) & (yi < mask.shape[0]) & (xi >= 0) & (xi < mask.shape[1])
    mask[yi[ok], xi[ok]] = True


def _radial(H, W, ratio, center_fraction, seed):
    cy, cx = H // 2, W // 2
    R = np.hypot(H, W) / 2 + 1
    t = np.arange(-R, R + 0.25, 0.5)
    theta0 = np.random.default_rng(seed).uniform(0, np.pi)
    target = ratio * H * W
    mask = _center_disk(H, W, center_fraction)
    history = [mask.copy()]
    counts = [int(mask.sum())]
    n = 0
    # rays only ever add pixels, so coverage is monotone in the ray count
    while counts[-1] < target:
        th = theta0 + n * GOLDEN_ANGLE
        _rasterize(mask, cy + t * np.sin(th), cx + t * np.cos(th))
        n += 1
        history.append(mask.copy())
        counts.append(int(mask.sum()))
        if n > 100 * max(H, W):
            raise ParameterError("radial ray search did not converge")
    best = int(np.searchsorted(counts, target))
    if best > 0 and abs(counts[best - 1] - target) <= abs(counts[best] - target):
        best -= 1
    return history[best], best


def _spiral_mask(H, W, turns, arms, theta0, center_fraction):
    cy, cx = H // 2, W // 2
    R = np.hypot(H, W) / 2 + 1
    n = int(np.ceil(2 * R * np.sqrt(1 + (2 * np.pi * turns) ** 2))) + 2
    s = np.linspace(0.0, 1.0, n)
    mask = _center_disk(H, W, center_fraction)
    for a in range(arms):
        phi = 2 * np.pi * turns * s + theta0 + 2 * np.pi * a / arms
        r = R * s
        _rasterize(mask, cy + r * np.sin(phi), cx + r * np.cos(phi))
    return mask


def _spiral(H, W, ratio, center_fraction, seed, arms=4, tol=0.002):
    theta0 = np.random.default_rng(seed).uniform(0, 2 * np.pi)
    lo, hi = 0.0, 1.0
    while _spiral_mask(H, W, hi, arms, theta0, center_fraction).mean() < ratio:
        hi *= 2
        if hi > 1e4:
            raise ParameterError("spiral pitch search did not converge")
    best, best_err = None, np.inf
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        m = _spiral_mask(H, W, mid, arms, theta0, center_fraction)
        err = m.mean() - ratio
        if abs(err) < best_err:
            best, best_err, best_turns = m, abs(err), mid
        if abs(err) <= tol:
            break
        if err < 0:
            lo = mid
        else:
            hi = mid
    return best, float(best_turns)


# ---------------------------------------------------------------------------
# degradation
# ---------------------------------------------------------------------------


def _mask_array(mask) -> np.ndarray:
    return mask.mask if isinstance(mask, UndersamplingMask) else np.asarray(mask, dtype=bool)


def degrade(x: np.ndarray, mask, noise_level: float = 0.0, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Undersample (and optionally corrupt) the k-space of ``x``.

    Noise is complex white Gaussian on the sampled entries, rescaled so that
    noise power / (signal power + noise power) over those entries equals
    ``noise_level`` exactly.

    Returns
    -------
    x_u : ndarray
        Zero-filled magnitude image |ifft2c(y_u)|, real [H, W].
    y_u : ndarray
        Undersampled k-space, complex [H, W].
    """
    if not 0.0 <= noise_level < 1.0:
        raise ParameterError(f"noise level must lie in [0, 1), got {noise_level}")
    m = _mask_array(mask)
    x = np.asarray(x)
    if m.shape != x.shape:
        raise ParameterError(f"mask shape {m.shape} does not match image {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ParameterError("image contains non-finite values")
    y = fft2c(x.astype(np.complex128))
    if noise_level > 0:
        rng = np.random.default_rng(seed)
        count = int(m.sum())
        signal_power = np.mean(np.abs(y[m]) ** 2)
        noise_power = noise_level / (1.0 - noise_level) * signal_power
        n = rng.standard_normal(count) + 1j * rng.standard_normal(count)
        n *= np.sqrt(noise_power / np.mean(np.abs(n) ** 2))
        y = y.copy()
        y[m] += n
    y_u = y * m
    return np.abs(ifft2c(y_u)), y_u


def zero_filled(y_u: np.ndarray) -> np.ndarray:
    """Complex zero-filled image (before taking the magnitude)."""
    return ifft2c(y_u)


def measured_noise_level(x: np.ndarray, y_u: np.ndarray, mask) -> float:
    """Empirical N'/(S'+N') of ``y_u`` against the clean k-space of ``x`` on sampled entries."""
    m = _mask_array(mask)
    clean = fft2c(np.asarray(x, dtype=np.complex128))[m]
    noise = y_u[m] - clean
    s = np.mean(np.abs(clean) ** 2)
    n = np.mean(np.abs(noise) ** 2)
    return float(n / (s + n))


# ---------------------------------------------------------------------------
# phantoms
# ---------------------------------------------------------------------------

# (intensity, semi-axis a, semi-axis b, x0, y0, rotation in degrees)
_SHEPP_LOGAN = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
    (-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0),
    (-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0),
    (0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0),
    (0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0),
    (0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0),
    (0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0),
)


def _paint(img, xx, yy, ellipses):
    for A, a, b, x0, y0, deg in ellipses:
        th = np.deg2rad(deg)
        c, s = np.cos(th), np.sin(th)
        u = (xx - x0) * c + (yy - y0) * s
        v = -(xx - x0) * s + (yy - y0) * c
        img[(u / a) ** 2 + (v / b) ** 2 <= 1.0] += A
    return img


def synth_phantom(H: int, W: int, kind: str = "shepp_logan", seed: int = 0) -> np.ndarray:
    """Real-valued phantom with values in [0, 1].

    ``shepp_logan`` is the modified (Toft) Shepp-Logan head and ignores
    ``seed``. ``random_ellipses`` draws a head outline and 6-12 interior
    ellipses from ``seed``.
    """
    if H < 32 or W < 32:
        raise ParameterError("phantoms need H, W >= 32")
    # y points up, as in the usual phantom tables
    yy, xx = np.meshgrid(1 - (2 * np.arange(H) + 1) / H, (2 * np.arange(W) + 1) / W - 1, indexing="ij")
    img = np.zeros((H, W))
    if kind == "shepp_logan":
        _paint(img, xx, yy, _SHEPP_LOGAN)
    elif kind == "random_ellipses":
        rng = np.random.default_rng(seed)
        a, b = rng.uniform(0.6, 0.75), rng.uniform(0.75, 0.92)
        skull = rng.uniform(0.8, 1.0)
        brain = rng.uniform(0.15, 0.35)
        shapes = [(skull, a, b, 0.0, 0.0, 0.0), (brain - skull, a - 0.06, b - 0.06, 0.0, 0.0, 0.0)]
        for _ in range(rng.integers(6, 13)):
            ea, eb = rng.uniform(0.04, 0.3, size=2)
            r = rng.uniform(0, 0.55)
            ang = rng.uniform(0, 2 * np.pi)
            x0, y0 = r * np.cos(ang) * (a - 0.1), r * np.sin(ang) * (b - 0.1)
            shapes.append((rng.uniform(-0.15, 0.45), ea, eb, x0, y0, rng.uniform(-90, 90)))
        _paint(img, xx, yy, shapes)
    else:
        raise ParameterError(f"unknown phantom kind {kind!r}")
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# volume import
# ---------------------------------------------------------------------------


def import_volume(header_path) -> np.ndarray:
    """Read multi-coil slices from a raw float32 file described by a JSON header.

    The header carries ``{"S", "H", "W", "layout": "SHW", "complex": bool}`` and
    optionally ``"data"`` (path of the raw file, relative to the header). The
    raw file holds N consecutive [S, H, W] slices, each entry a float32 or an
    interleaved (re, im) float32 pair.

    Returns
    -------
    ndarray
        complex64 [N, S, H, W]
    """
    header_path = Path(header_path)
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise smrt.FormatError(f"header {header_path} is not valid JSON (offset {exc.pos})") from exc
    for key in ("S", "H", "W", "layout", "complex"):
        if key not in header:
            raise smrt.FormatError(f"header {header_path} lacks field {key!r}")
    if header["layout"] != "SHW":
        raise smrt.FormatError(f"unsupported layout {header['layout']!r}")
    S, H, W = int(header["S"]), int(header["H"]), int(header["W"])
    is_complex = bool(header["complex"])
    data_path = header_path.parent / header.get("data", header_path.stem + ".raw")
    raw = data_path.read_bytes()
    per = S * H * W * (2 if is_complex else 1) * 4
    if len(raw) == 0 or len(raw) % per:
        complete = len(raw) // per
        raise smrt.FormatError(
            f"{data_path}: truncated slice at byte offset {complete * per} "
            f"(file is {len(raw)} bytes, slices are {per} bytes)")
    arr = np.frombuffer(raw, dtype="<f4")
    if is_complex:
        arr = arr.reshape(-1, S, H, W, 2)
        out = arr[..., 0] + 1j * arr[..., 1]
    else:
        out = arr.reshape(-1, S, H, W).astype(np.complex64)
    return out.astype(np.complex64)
