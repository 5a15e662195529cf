"""SwinMR: conv input module, cascade of residual Swin transformer blocks, conv output module.

Tensors inside the transformer layers are token-major ([B, H*W, C]); the
convolutional parts work on [B, C, H, W].
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

MASK_VALUE = -1e9


@dataclass
class SwinMRConfig:
    """Architecture hyperparameters.

    ``rstb`` (P) residual Swin transformer blocks, each holding ``stl`` (Q)
    Swin transformer layers of width ``channels`` (C) with ``heads`` (h)
    attention heads over ``window`` x ``window`` (M) windows. ``patch_number``
    is the side length of square training crops.
    """

    rstb: int = 6
    stl: int = 6
    channels: int = 180
    window: int = 8
    heads: int = 6
    patch_number: int = 96
    mlp_ratio: float = 2.0
    ln_eps: float = 1e-5
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("rstb", "stl", "channels", "window", "heads", "patch_number"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.channels % self.heads:
            raise ValueError(f"channels ({self.channels}) must be divisible by heads ({self.heads})")
        if self.patch_number % self.window:
            raise ValueError(f"patch_number ({self.patch_number}) must be divisible by window ({self.window})")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    @property
    def shift(self) -> int:
        return self.window // 2

    def shift_for(self, layer_index: int) -> int:
        """Shift of the ``layer_index``-th STL inside a block: 0, M//2, 0, M//2, ..."""
        return 0 if layer_index % 2 == 0 else self.shift

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


class Module:
    """Tiny parameter container: attributes that are Tensors or Modules form the tree."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data) for n, p in self.named_parameters())

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError(f"{name}: expected {p.shape}, got {value.shape}")
            p.data = value.astype(p.dtype).copy()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


def _trunc_normal(rng, shape, std=0.02, dtype=np.float32):
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return Tensor((x * std).astype(dtype), requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Conv2d(Module):
    def __init__(self, c_in, c_out, rng, dtype, zero=False):
        if zero:
            self.weight = _zeros((c_out, c_in, 3, 3), dtype)
        else:
            bound = 1.0 / np.sqrt(c_in * 9)
            self.weight = Tensor(rng.uniform(-bound, bound, (c_out, c_in, 3, 3)).astype(dtype), requires_grad=True)
        self.bias = _zeros((c_out,), dtype)

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias)


class Linear(Module):
    def __init__(self, c_in, c_out, rng, dtype, bias=True):
        self.weight = _trunc_normal(rng, (c_in, c_out), dtype=dtype)
        self.bias = _zeros((c_out,), dtype) if bias else None

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, c, dtype, eps=1e-5):
        self.weight = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
        self.bias = _zeros((c,), dtype)
        self._eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.weight, self.bias, self._eps)


def relative_position_index(M: int) -> np.ndarray:
    """[M*M, M*M] indices into a (2M-1)^2 relative-offset table."""
    coords = np.stack(np.meshgrid(np.arange(M), np.arange(M), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (M - 1)
    return rel[0] * (2 * M - 1) + rel[1]


class WindowAttention(Module):
    """Multi-head self-attention inside one window with a learned relative position bias.

    Query/key/value projections carry no bias; the output projection does.
    """

    def __init__(self, channels, window, heads, rng, dtype):
        self.q = Linear(channels, channels, rng, dtype, bias=False)
        self.k = Linear(channels, channels, rng, dtype, bias=False)
        self.v = Linear(channels, channels, rng, dtype, bias=False)
        self.proj = Linear(channels, channels, rng, dtype)
        self.bias_table = _zeros(((2 * window - 1) ** 2, heads), dtype)
        self._window = window
        self._heads = heads
        self._index = relative_position_index(window).reshape(-1)

    def position_bias(self) -> Tensor:
        """Materialised bias B, [h, M*M, M*M]."""
        N = self._window ** 2
        b = T.getitem(self.bias_table, self._index)
        return T.transpose(T.reshape(b, (N, N, self._heads)), (2, 0, 1))


def _attend(x: Tensor, attn: WindowAttention, heads: int, bias: Optional[Tensor],
            mask: Optional[np.ndarray]) -> Tensor:
    Bw, N, C = x.shape
    if C % heads:
        raise ShapeError(f"channels {C} not divisible by heads {heads}")
    d = C // heads

    def split(t):
        return T.transpose(T.reshape(t, (Bw, N, heads, d)), (0, 2, 1, 3))

    q, k, v = split(attn.q(x)), split(attn.k(x)), split(attn.v(x))
    logits = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / np.sqrt(d))
    if bias is not None:
        logits = logits + bias
    if mask is not None:
        nW = mask.shape[0]
        if Bw % nW:
            raise ShapeError(f"{Bw} windows cannot be grouped by a mask over {nW} windows")
        logits = T.reshape(logits, (Bw // nW, nW, heads, N, N))
        logits = logits + mask[None, :, None].astype(x.dtype)
        logits = T.reshape(logits, (Bw, heads, N, N))
    weights = T.softmax_lastdim(logits)
    out = T.matmul(weights, v)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (Bw, N, C))
    return attn.proj(out)


def window_attention(x: Tensor, attn: WindowAttention, attn_mask: Optional[np.ndarray] = None) -> Tensor:
    """softmax(Q K^T / sqrt(d) + B + mask) V per head, heads concatenated and projected.

    Parameters
    ----------
    x : Tensor
        [num_windows * B, M*M, C]
    attn_mask : ndarray, optional
        [num_windows, M*M, M*M] with entries 0 or a large negative value.
    """
    if x.shape[1] != attn._window ** 2:
        raise ShapeError(f"expected {attn._window ** 2} tokens per window, got {x.shape[1]}")
    return _attend(x, attn, attn._heads, attn.position_bias(), attn_mask)


def full_attention(x: Tensor, attn: WindowAttention) -> Tensor:
    """Global multi-head self-attention over all H*W tokens (no position bias); [B, HW, C]."""
    return _attend(x, attn, attn._heads, None, None)


# ---------------------------------------------------------------------------
# window bookkeeping
# ---------------------------------------------------------------------------


def window_partition(x: Tensor, M: int) -> Tensor:
    """[B, H, W, C] -> [B * H*W/M^2, M*M, C], windows in row-major order."""
    B, H, W, C = x.shape
    if H % M or W % M:
        raise ShapeError(f"feature map {H}x{W} is not divisible by window size {M}")
    x = T.reshape(x, (B, H // M, M, W // M, M, C))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (-1, M * M, C))


def window_reverse(windows: Tensor, M: int, H: int, W: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    C = windows.shape[-1]
    x = T.reshape(windows, (-1, H // M, W // M, M, M, C))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (-1, H, W, C))


def cyclic_shift(x: Tensor, s: int) -> Tensor:
    """Roll a [B, H, W, C] map by (-s, -s) on the spatial axes."""
    return x if s == 0 else T.roll(x, (-s, -s), (1, 2))


def reverse_shift(x: Tensor, s: int) -> Tensor:
    return x if s == 0 else T.roll(x, (s, s), (1, 2))


def build_shift_attention_mask(H: int, W: int, M: int, s: int) -> Optional[np.ndarray]:
    """Additive mask keeping shifted windows from mixing pixels that were not neighbours.

    Returns None for ``s == 0``, else [H*W/M^2, M*M, M*M] with 0 inside a
    region and ``MASK_VALUE`` across regions.
    """
    if s == 0:
        return None
    regions = np.zeros((H, W))
    label = 0
    spans = (slice(0, -M), slice(-M, -s), slice(-s, None))
    for hs in spans:
        for ws in spans:
            regions[hs, ws] = label
            label += 1
    win = regions.reshape(H // M, M, W // M, M).transpose(0, 2, 1, 3).reshape(-1, M * M)
    diff = win[:, None, :] - win[:, :, None]
    return np.where(diff != 0, MASK_VALUE, 0.0)


# ---------------------------------------------------------------------------
# layers and blocks
# ---------------------------------------------------------------------------


class SwinTransformerLayer(Module):
    def __init__(self, cfg: SwinMRConfig, shift: int, rng):
        dt = np.dtype(cfg.dtype)
        C = cfg.channels
        hidden = int(round(C * cfg.mlp_ratio))
        self.norm1 = LayerNorm(C, dt, cfg.ln_eps)
        self.attn = WindowAttention(C, cfg.window, cfg.heads, rng, dt)
        self.norm2 = LayerNorm(C, dt, cfg.ln_eps)
        self.fc1 = Linear(C, hidden, rng, dt)
        self.fc2 = Linear(hidden, C, rng, dt)
        self._shift = shift
        self._window = cfg.window
        self._masks: Dict[Tuple[int, int], Optional[np.ndarray]] = {}

    def attention_mask(self, H, W):
        key = (H, W)
        if key not in self._masks:
            self._masks[key] = build_shift_attention_mask(H, W, self._window, self._shift)
        return self._masks[key]

    def __call__(self, x: Tensor, H: int, W: int) -> Tensor:
        return stl_forward(x, self, H, W)


def stl_forward(x: Tensor, layer: SwinTransformerLayer, H: int, W: int) -> Tensor:
    """X' = (S)W-MSA(LN(X)) + X;  X'' = MLP(LN(X')) + X'.  ``x`` is [B, H*W, C]."""
    B, L, C = x.shape
    if L != H * W:
        raise ShapeError(f"token count {L} does not match {H}x{W}")
    M, s = layer._window, layer._shift
    h = T.reshape(layer.norm1(x), (B, H, W, C))
    h = cyclic_shift(h, s)
    h = window_attention(window_partition(h, M), layer.attn, layer.attention_mask(H, W))
    h = reverse_shift(window_reverse(h, M, H, W), s)
    x = x + T.reshape(h, (B, L, C))
    h = layer.fc2(T.gelu(layer.fc1(layer.norm2(x))))
    return x + h


def patch_embed(x: Tensor) -> Tensor:
    """[B, C, H, W] -> [B, H*W, C] (one token per pixel)."""
    B, C, H, W = x.shape
    return T.transpose(T.reshape(x, (B, C, H * W)), (0, 2, 1))


def patch_unembed(x: Tensor, H: int, W: int) -> Tensor:
    """[B, H*W, C] -> [B, C, H, W]."""
    B, L, C = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1)), (B, C, H, W))


class RSTB(Module):
    """Residual Swin transformer block: Q layers with alternating shifts, a conv, and a skip."""

    def __init__(self, cfg: SwinMRConfig, rng):
        self.layers = [SwinTransformerLayer(cfg, cfg.shift_for(j), rng) for j in range(cfg.stl)]
        self.conv = Conv2d(cfg.channels, cfg.channels, rng, np.dtype(cfg.dtype))

    def __call__(self, f: Tensor) -> Tensor:
        return rstb_forward(f, self)


def rstb_forward(f: Tensor, block: RSTB) -> Tensor:
    _, _, H, W = f.shape
    t = patch_embed(f)
    for layer in block.layers:
        t = layer(t, H, W)
    return block.conv(patch_unembed(t, H, W)) + f


class SwinMR(Module):
    """x_hat = OM(FEM(IM(x_u)) + IM(x_u)) + x_u.

    The output conv starts at zero, so a freshly initialised model is the
    identity on its input.
    """

    def __init__(self, cfg: SwinMRConfig, seed: int = 0):
        cfg.validate()
        self.config = cfg
        rng = np.random.default_rng(seed)
        dt = np.dtype(cfg.dtype)
        C = cfg.channels
        self.im = Conv2d(1, C, rng, dt)
        self.blocks = [RSTB(cfg, rng) for _ in range(cfg.rstb)]
        self.fem_conv = Conv2d(C, C, rng, dt)
        self.om = Conv2d(C, 1, rng, dt, zero=True)

    def __call__(self, x_u: Tensor) -> Tensor:
        return swinmr_forward(x_u, self)


def swinmr_forward(x_u, model: SwinMR) -> Tensor:
    """Reconstruct from a zero-filled magnitude batch [B, 1, H, W]; H, W must be multiples of M."""
    x_u = T.as_tensor(x_u, dtype=np.dtype(model.config.dtype))
    if x_u.ndim != 4 or x_u.shape[1] != 1:
        raise ShapeError(f"expected input [B, 1, H, W], got {x_u.shape}")
    M = model.config.window
    if x_u.shape[2] % M or x_u.shape[3] % M:
        raise ShapeError(f"input {x_u.shape[2]}x{x_u.shape[3]} not divisible by window {M}")
    f_im = model.im(x_u)
    f = f_im
    for block in model.blocks:
        f = block(f)
    f_fem = model.fem_conv(f)
    return model.om(f_fem + f_im) + x_u


# ---------------------------------------------------------------------------
# complexity model
# ---------------------------------------------------------------------------


def flops_msa(H: int, W: int, C: int) -> int:
    """4HWC^2 + 2(HW)^2 C multiply-accumulates for global self-attention."""
    H, W, C = int(H), int(W), int(C)
    if min(H, W, C) < 1:
        raise ValueError("arguments must be positive")
    return 4 * H * W * C * C + 2 * (H * W) ** 2 * C


def flops_wmsa(H: int, W: int, C: int, M: int) -> int:
    """4HWC^2 + 2 M^2 HWC multiply-accumulates for (shifted) window attention."""
    H, W, C, M = int(H), int(W), int(C), int(M)
    if min(H, W, C, M) < 1:
        raise ValueError("arguments must be positive")
    return 4 * H * W * C * C + 2 * M * M * H * W * C
