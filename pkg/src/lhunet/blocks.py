"""Composite blocks: stem, ResBlock, Comb, the hybrid fusion block and the
OmniFocus bottleneck block."""

from __future__ import annotations

import torch
import torch.nn as nn

from . import primitives as P
from .attention import make_cnn_attention, make_vit_attention

RES_KERNEL = 3


class Stem(nn.Module):
    """Point-wise conv -> PReLU -> batchnorm at full resolution."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.c_in = c_in
        self.pw = P.pw_conv(c_in, c_out)
        self.act = P.PReLU(c_out)
        self.bn = P.BatchNorm3d(c_out)

    def forward(self, x):
        if x.shape[1] != self.c_in:
            raise P.ShapeError(f"stem expects {self.c_in} channels, got {x.shape[1]}")
        return self.bn(self.act(self.pw(x)))


class ResBlock(nn.Module):
    """``lrelu(bn2(dw2(lrelu(bn1(dw1(x))))) + bn_res(pw_res(x)))``.

    ``dw1`` is depth-wise with a channel multiplier when ``c_out > c_in``.
    """

    def __init__(self, c_in: int, c_out: int | None = None):
        super().__init__()
        c_out = c_out or c_in
        if c_out % c_in:
            raise ValueError(f"ResBlock can only expand channels by an integer factor ({c_in} -> {c_out})")
        self.dw1 = P.Conv3d(c_in, c_out, RES_KERNEL, groups=c_in)
        self.bn1 = P.BatchNorm3d(c_out)
        self.dw2 = P.dw_conv(c_out, RES_KERNEL)
        self.bn2 = P.BatchNorm3d(c_out)
        self.pw_res = P.pw_conv(c_in, c_out)
        self.bn_res = P.BatchNorm3d(c_out)

    def forward(self, x):
        h = P.leakyrelu(self.bn1(self.dw1(x)))
        h = self.bn2(self.dw2(h))
        return P.leakyrelu(P.add(h, self.bn_res(self.pw_res(x))))


class Comb(nn.Module):
    """Fusion head: ``bn_out(pw(resblock(f)) + f)``."""

    def __init__(self, c: int):
        super().__init__()
        self.resblock = ResBlock(c)
        self.pw = P.pw_conv(c, c)
        self.bn_out = P.BatchNorm3d(c)

    def forward(self, f):
        return self.bn_out(P.add(self.pw(self.resblock(f)), f))


class HybridBlock(nn.Module):
    """``comb(f + delta * cnn_attn(f) + gamma * vit_attn(f))``.

    ``delta`` and ``gamma`` are learnable scalars, both initialised to 1.
    """

    def __init__(self, c: int, cnn_kind: str, vit_kind: str, n_tokens: int, proj_len: int = 48,
                 n_heads: int = 4, lka_kernels=(5, 7, 3), deform_kernel: int = 3):
        super().__init__()
        self.cnn_kind, self.vit_kind = cnn_kind, vit_kind
        self.cnn = make_cnn_attention(cnn_kind, c, lka_kernels, deform_kernel)
        self.vit = make_vit_attention(vit_kind, c, n_tokens, proj_len, n_heads)
        self.delta = nn.Parameter(torch.ones(()))
        self.gamma = nn.Parameter(torch.ones(()))
        self.comb = Comb(c)

    def fused(self, f: torch.Tensor) -> torch.Tensor:
        """The pre-Comb sum ``f + delta*cnn(f) + gamma*vit(f)``."""
        d = self.cnn(f)
        v = self.vit(f)
        if d.shape != f.shape or v.shape != f.shape:
            raise P.ShapeError("attention branches changed the feature shape")
        return P.add(f, P.mul(self.delta.expand_as(d), d), P.mul(self.gamma.expand_as(v), v))

    def forward(self, f):
        return self.comb(self.fused(f))

    def fusion_weights(self) -> dict[str, float]:
        return {"delta": float(self.delta.detach()), "gamma": float(self.gamma.detach())}


class OmniFocusBlock(HybridBlock):
    """Bottleneck hybrid block (by default LKAd + channel attention).

    The block itself is the Eq.-style fusion; ``placement`` only records how
    the network wires it: ``"encoder"`` adds it residually to its input,
    ``"decoder"`` feeds it the reduced concatenation of bottleneck output and
    skip.
    """

    def __init__(self, c: int, n_tokens: int, cnn_kind: str = "D", vit_kind: str = "C",
                 placement: str = "encoder", **kw):
        if placement not in ("encoder", "decoder"):
            raise ValueError("placement must be 'encoder' or 'decoder'")
        super().__init__(c, cnn_kind, vit_kind, n_tokens, **kw)
        self.placement = placement


def stem(x: torch.Tensor, module: Stem) -> torch.Tensor:
    return module(x)


def resblock(x: torch.Tensor, module: ResBlock) -> torch.Tensor:
    return module(x)


def comb(f: torch.Tensor, module: Comb) -> torch.Tensor:
    return module(f)


def hybrid_fusion_block(f: torch.Tensor, module: HybridBlock) -> torch.Tensor:
    return module(f)


def omnifocus_block(f: torch.Tensor, module: OmniFocusBlock) -> torch.Tensor:
    return module(f)
