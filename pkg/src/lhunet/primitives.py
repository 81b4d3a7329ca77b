"""Tensor primitives every block is built from.

All functions take and return rank-5 tensors ``(B, C, D, H, W)`` unless noted.
They are thin, differentiable wrappers over torch plus two kernels written
here: :func:`trilinear_sample` and :func:`deformable_dwconv3d`.

Every primitive reports its cost to any active :class:`FlopCounter`
(FLOPs = 2 x MACs for products; 1 FLOP per element for norms, activations
and element-wise arithmetic).
"""

from __future__ import annotations

import contextlib
import math
from collections import defaultdict
from typing import Iterator, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

NORM_EPS = 1e-5
LEAKY_SLOPE = 0.01
PRELU_INIT = 0.25

# per-output-element FLOPs for the element-wise families
ELEMWISE_FLOPS = 1
TRILINEAR_FLOPS = 16  # 8 corner MACs

CHECK_FINITE = True


class NonFiniteError(FloatingPointError):
    def __init__(self, where: str):
        self.where = where
        super().__init__(f"non-finite values produced by {where}")


class ShapeError(ValueError):
    pass


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(a) for a in v)
    assert len(t) == 3
    return t  # type: ignore[return-value]


def _nvox(shape: Sequence[int]) -> int:
    return math.prod(shape)


# ---------------------------------------------------------------- counting

class FlopCounter:
    """Accumulates FLOPs reported by primitives while active.

    >>> with FlopCounter() as fc:
    ...     y = conv3d(x, w)
    >>> fc.total
    """

    def __init__(self):
        self.by_kind: dict[str, int] = defaultdict(int)

    @property
    def total(self) -> int:
        return sum(self.by_kind.values())

    def add(self, kind: str, flops: int) -> None:
        self.by_kind[kind] += int(flops)

    def __enter__(self) -> "FlopCounter":
        _COUNTERS.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _COUNTERS.remove(self)


_COUNTERS: list[FlopCounter] = []


def _count(kind: str, flops: int) -> None:
    for c in _COUNTERS:
        c.add(kind, flops)


def _checked(t: torch.Tensor, where: str) -> torch.Tensor:
    if CHECK_FINITE and not torch.isfinite(t).all():
        raise NonFiniteError(where)
    return t


@contextlib.contextmanager
def finite_checks(enabled: bool) -> Iterator[None]:
    global CHECK_FINITE
    prev, CHECK_FINITE = CHECK_FINITE, enabled
    try:
        yield
    finally:
        CHECK_FINITE = prev


# ---------------------------------------------------------------- convolutions

def same_padding(kernel, dilation=1) -> tuple[int, int, int]:
    k, d = _triple(kernel), _triple(dilation)
    return tuple(di * (ki - 1) // 2 for ki, di in zip(k, d))  # type: ignore[return-value]


def conv3d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
           stride=1, dilation=1, groups: int = 1) -> torch.Tensor:
    """Cross-correlation with "same" padding (odd kernels, stride 1).

    With ``stride == kernel`` (patch-merging downsampling) no padding is used.
    """
    if x.dim() != 5:
        raise ShapeError(f"expected a rank-5 tensor, got shape {tuple(x.shape)}")
    c_in = x.shape[1]
    if weight.shape[1] * groups != c_in or weight.shape[0] % groups:
        raise ShapeError(
            f"conv weight {tuple(weight.shape)} with groups={groups} incompatible with {c_in} input channels"
        )
    kernel = tuple(weight.shape[2:])
    stride, dilation = _triple(stride), _triple(dilation)
    if stride == (1, 1, 1):
        if any(k % 2 == 0 for k in kernel):
            raise ShapeError("same padding requires odd kernels")
        padding = same_padding(kernel, dilation)
    else:
        if kernel != stride:
            raise ShapeError("strided convs must have kernel == stride")
        if any(s % k for s, k in zip(x.shape[2:], stride)):
            raise ShapeError(f"spatial shape {tuple(x.shape[2:])} not divisible by stride {stride}")
        padding = (0, 0, 0)
    y = F.conv3d(x, weight, bias, stride, padding, dilation, groups)
    macs = weight.shape[0] * weight.shape[1] * _nvox(kernel) * _nvox(y.shape[2:]) * y.shape[0]
    _count("conv", 2 * macs)
    return _checked(y, "conv3d")


def conv_transpose3d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None,
                     stride) -> torch.Tensor:
    """Transposed conv with kernel == stride (non-overlapping upsampling)."""
    stride = _triple(stride)
    if tuple(weight.shape[2:]) != stride:
        raise ShapeError("transposed conv kernel must equal stride")
    if weight.shape[0] != x.shape[1]:
        raise ShapeError("transposed conv input channel mismatch")
    y = F.conv_transpose3d(x, weight, bias, stride)
    macs = weight.shape[0] * weight.shape[1] * _nvox(y.shape[2:]) * y.shape[0]
    _count("conv", 2 * macs)
    return _checked(y, "conv_transpose3d")


def trilinear_sample(x: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Sample ``x`` at continuous voxel coordinates.

    ``coords`` has shape ``(B, *out, 3)`` holding ``(z, y, x)`` in voxel index
    units. Corners outside the volume contribute zero. Returns
    ``(B, C, *out)``.
    """
    B, C = x.shape[:2]
    dims = x.shape[2:]
    out_shape = coords.shape[1:-1]
    pts = coords.reshape(B, -1, 3)
    M = pts.shape[1]
    base = torch.floor(pts)
    frac = pts - base
    base = base.long()
    flat = x.reshape(B, C, -1).transpose(1, 2)  # (B, N, C)
    bidx = torch.arange(B, device=x.device).unsqueeze(1)
    out = x.new_zeros(B, M, C)
    strides = (dims[1] * dims[2], dims[2], 1)
    for corner in range(8):
        offs = ((corner >> 2) & 1, (corner >> 1) & 1, corner & 1)
        idx = torch.zeros(B, M, dtype=torch.long, device=x.device)
        w = torch.ones(B, M, dtype=x.dtype, device=x.device)
        valid = torch.ones(B, M, dtype=torch.bool, device=x.device)
        for a in range(3):
            ia = base[..., a] + offs[a]
            valid &= (ia >= 0) & (ia < dims[a])
            idx = idx + ia.clamp(0, dims[a] - 1) * strides[a]
            fa = frac[..., a]
            w = w * (fa if offs[a] else 1 - fa)
        w = w * valid.to(x.dtype)
        out = out + flat[bidx, idx] * w.unsqueeze(-1)
    _count("sample", TRILINEAR_FLOPS * B * M * C)
    return out.transpose(1, 2).reshape(B, C, *out_shape)


def _tap_offsets(kernel: int, device, dtype) -> torch.Tensor:
    r = torch.arange(kernel, device=device, dtype=dtype) - (kernel - 1) / 2
    gz, gy, gx = torch.meshgrid(r, r, r, indexing="ij")
    return torch.stack([gz, gy, gx], dim=-1).reshape(-1, 3)  # (K, 3), tap-major z,y,x


def deformable_dwconv3d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None,
                        offsets: torch.Tensor) -> torch.Tensor:
    """Depth-wise deformable convolution, stride 1, "same" output shape.

    ``weight`` is ``(C, 1, k, k, k)``. ``offsets`` is ``(B, 3*k**3, D, H, W)``
    with channel ``3*t + a`` holding the displacement of tap ``t`` (z-major
    order) along axis ``a`` (z, y, x), in voxels, shared across channels.
    """
    B, C = x.shape[:2]
    dims = tuple(x.shape[2:])
    k = weight.shape[-1]
    K = k ** 3
    if weight.shape != (C, 1, k, k, k):
        raise ShapeError(f"deformable depth-wise weight must be {(C, 1, k, k, k)}, got {tuple(weight.shape)}")
    if offsets.shape[1] != 3 * K:
        raise ShapeError(f"offset field needs {3 * K} channels, got {offsets.shape[1]}")
    if tuple(offsets.shape[2:]) != dims or offsets.shape[0] != B:
        raise ShapeError("offset field spatial shape does not match input")
    grid = torch.stack(torch.meshgrid(*[torch.arange(n, device=x.device, dtype=x.dtype) for n in dims],
                                      indexing="ij"), dim=-1)  # (D, H, W, 3)
    taps = _tap_offsets(k, x.device, x.dtype)
    off = offsets.reshape(B, K, 3, *dims).permute(0, 1, 3, 4, 5, 2)  # (B, K, D, H, W, 3)
    coords = grid + taps.view(K, 1, 1, 1, 3) + off
    samples = trilinear_sample(x, coords)  # (B, C, K, D, H, W)
    y = torch.einsum("bckdhw,ck->bcdhw", samples, weight.reshape(C, K))
    if bias is not None:
        y = y + bias.view(1, C, 1, 1, 1)
    _count("conv", 2 * B * C * K * _nvox(dims))
    return _checked(y, "deformable_dwconv3d")


# ---------------------------------------------------------------- resampling

def maxpool3d(x: torch.Tensor, factors) -> torch.Tensor:
    f = _triple(factors)
    if any(s % a for s, a in zip(x.shape[2:], f)):
        raise ShapeError(f"spatial shape {tuple(x.shape[2:])} not divisible by pooling factors {f}")
    if f == (1, 1, 1):
        return x
    _count("elementwise", ELEMWISE_FLOPS * x.numel())
    return F.max_pool3d(x, kernel_size=f, stride=f)


def upsample3d(x: torch.Tensor, factors, weight: torch.Tensor | None = None,
               bias: torch.Tensor | None = None) -> torch.Tensor:
    """Learnable transposed-conv upsampling, or trilinear when ``weight`` is None."""
    f = _triple(factors)
    if weight is not None:
        return conv_transpose3d(x, weight, bias, f)
    if f == (1, 1, 1):
        return x
    size = tuple(s * a for s, a in zip(x.shape[2:], f))
    y = F.interpolate(x, size=size, mode="trilinear", align_corners=False)
    _count("sample", TRILINEAR_FLOPS * y.numel())
    return y


# ---------------------------------------------------------------- pointwise

def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ weight.T + bias`` over the last axis."""
    y = F.linear(x, weight, bias)
    _count("linear", 2 * weight.shape[0] * weight.shape[1] * (x.numel() // x.shape[-1]))
    return _checked(y, "linear")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    y = a @ b
    _count("matmul", 2 * (y.numel() * a.shape[-1]))
    return y


def batchnorm(x: torch.Tensor, running_mean: torch.Tensor | None, running_var: torch.Tensor | None,
              weight: torch.Tensor | None, bias: torch.Tensor | None, training: bool,
              momentum: float = 0.1, eps: float = NORM_EPS) -> torch.Tensor:
    y = F.batch_norm(x, running_mean, running_var, weight, bias, training, momentum, eps)
    _count("elementwise", ELEMWISE_FLOPS * x.numel())
    return _checked(y, "batchnorm")


def layernorm_tokens(x: torch.Tensor, weight: torch.Tensor | None, bias: torch.Tensor | None,
                     eps: float = NORM_EPS) -> torch.Tensor:
    """Layer normalization over the last (channel) axis of a token tensor."""
    y = F.layer_norm(x, (x.shape[-1],), weight, bias, eps)
    _count("elementwise", ELEMWISE_FLOPS * x.numel())
    return _checked(y, "layernorm_tokens")


def gelu(x: torch.Tensor) -> torch.Tensor:
    _count("elementwise", ELEMWISE_FLOPS * x.numel())
    return F.gelu(x)


def prelu(x: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    _count("elementwise", ELEMWISE_FLOPS * x.numel())
    return F.prelu(x, a)


def leakyrelu(x: torch.Tensor, slope: float = LEAKY_SLOPE) -> torch.Tensor:
    _count("elementwise", ELEMWISE_FLOPS * x.numel())
    return F.leaky_relu(x, slope)


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    _count("elementwise", ELEMWISE_FLOPS * x.numel())
    return torch.softmax(x, dim=axis)


def add(*xs: torch.Tensor) -> torch.Tensor:
    y = xs[0]
    for t in xs[1:]:
        y = y + t
    _count("elementwise", ELEMWISE_FLOPS * y.numel() * (len(xs) - 1))
    return y


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    y = a * b
    _count("elementwise", ELEMWISE_FLOPS * y.numel())
    return y


# ---------------------------------------------------------------- modules

class Conv3d(nn.Module):
    """Point-wise, depth-wise, dilated or strided 3-D convolution."""

    def __init__(self, c_in: int, c_out: int, kernel=1, stride=1, dilation=1, groups: int = 1,
                 bias: bool = True, zero_init: bool = False):
        super().__init__()
        self.kernel = _triple(kernel)
        self.stride = _triple(stride)
        self.dilation = _triple(dilation)
        self.groups = groups
        self.weight = nn.Parameter(torch.empty(c_out, c_in // groups, *self.kernel))
        self.bias = nn.Parameter(torch.empty(c_out)) if bias else None
        if zero_init:
            nn.init.zeros_(self.weight)
            if self.bias is not None:
                nn.init.zeros_(self.bias)
        else:
            nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
            if self.bias is not None:
                bound = 1 / math.sqrt(self.weight[0].numel())
                nn.init.uniform_(self.bias, -bound, bound)

    def forward(self, x):
        return conv3d(x, self.weight, self.bias, self.stride, self.dilation, self.groups)


def pw_conv(c_in: int, c_out: int, bias: bool = True) -> Conv3d:
    return Conv3d(c_in, c_out, 1, bias=bias)


def dw_conv(c: int, kernel: int, dilation: int = 1, bias: bool = True) -> Conv3d:
    return Conv3d(c, c, kernel, dilation=dilation, groups=c, bias=bias)


class DeformDWConv3d(nn.Module):
    """Depth-wise deformable conv whose offsets come from a zero-initialised
    dense conv branch, so it starts out identical to a plain depth-wise conv."""

    def __init__(self, c: int, kernel: int = 3):
        super().__init__()
        self.kernel = kernel
        self.weight = nn.Parameter(torch.empty(c, 1, kernel, kernel, kernel))
        self.bias = nn.Parameter(torch.empty(c))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        bound = 1 / math.sqrt(kernel ** 3)
        nn.init.uniform_(self.bias, -bound, bound)
        self.offset = Conv3d(c, 3 * kernel ** 3, kernel, zero_init=True)

    def forward(self, x, offsets: torch.Tensor | None = None):
        if offsets is None:
            offsets = self.offset(x)
        return deformable_dwconv3d(x, self.weight, self.bias, offsets)


class ConvTranspose3d(nn.Module):
    def __init__(self, c_in: int, c_out: int, factors):
        super().__init__()
        self.factors = _triple(factors)
        self.weight = nn.Parameter(torch.empty(c_in, c_out, *self.factors))
        self.bias = nn.Parameter(torch.empty(c_out))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        bound = 1 / math.sqrt(c_out * _nvox(self.factors))
        nn.init.uniform_(self.bias, -bound, bound)

    def forward(self, x):
        return upsample3d(x, self.factors, self.weight, self.bias)


class Upsample(nn.Module):
    """Parameter-free trilinear upsampling followed by a point-wise channel map."""

    def __init__(self, c_in: int, c_out: int, factors):
        super().__init__()
        self.factors = _triple(factors)
        self.proj = pw_conv(c_in, c_out)

    def forward(self, x):
        return self.proj(upsample3d(x, self.factors))


class BatchNorm3d(nn.Module):
    def __init__(self, c: int, momentum: float = 0.1):
        super().__init__()
        self.momentum = momentum
        self.weight = nn.Parameter(torch.ones(c))
        self.bias = nn.Parameter(torch.zeros(c))
        self.register_buffer("running_mean", torch.zeros(c))
        self.register_buffer("running_var", torch.ones(c))

    def forward(self, x):
        return batchnorm(x, self.running_mean, self.running_var, self.weight, self.bias,
                         self.training, self.momentum)


class LayerNorm(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(c))
        self.bias = nn.Parameter(torch.zeros(c))

    def forward(self, x):
        return layernorm_tokens(x, self.weight, self.bias)


class Linear(nn.Module):
    def __init__(self, c_in: int, c_out: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(c_out, c_in))
        self.bias = nn.Parameter(torch.empty(c_out)) if bias else None
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        if self.bias is not None:
            bound = 1 / math.sqrt(c_in)
            nn.init.uniform_(self.bias, -bound, bound)

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class PReLU(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.weight = nn.Parameter(torch.full((c,), PRELU_INIT))

    def forward(self, x):
        return prelu(x, self.weight)
