"""The five attention variants a schedule letter can select.

CNN side: ``D`` (large-kernel attention with a deformable stage), ``L``
(plain large-kernel attention) and ``I`` (identity). ViT side: ``S``
(spatial self-attention with key/value token projection) and ``C``
(channel attention).
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from . import primitives as P


class LKA(nn.Module):
    """Large-kernel attention, optionally with a deformable depth-wise stage.

    ``x_hat = GELU(pw_in(x))``; ``gate = pw_out(ddw(dwd(dw(x_hat))))``;
    output ``gate * x_hat``.  With ``deformable=False`` the ``ddw`` stage is a
    plain depth-wise conv of the same kernel.
    """

    def __init__(self, c: int, lka_kernels=(5, 7, 3), deform_kernel: int = 3, deformable: bool = True):
        super().__init__()
        dw_k, dil_k, dil = lka_kernels
        self.deformable = deformable
        self.pw_in = P.pw_conv(c, c)
        self.dw = P.dw_conv(c, dw_k)
        self.dwd = P.dw_conv(c, dil_k, dilation=dil)
        self.ddw = P.DeformDWConv3d(c, deform_kernel) if deformable else P.dw_conv(c, deform_kernel)
        self.pw_out = P.pw_conv(c, c)

    def forward(self, x: torch.Tensor, offsets: torch.Tensor | None = None) -> torch.Tensor:
        x_hat = P.gelu(self.pw_in(x))
        h = self.dwd(self.dw(x_hat))
        h = self.ddw(h, offsets) if self.deformable else self.ddw(h)
        return P.mul(self.pw_out(h), x_hat)


def lkad(x: torch.Tensor, module: LKA, offsets: torch.Tensor | None = None) -> torch.Tensor:
    if not module.deformable:
        raise ValueError("lkad needs a deformable LKA module")
    return module(x, offsets)


def lka(x: torch.Tensor, module: LKA) -> torch.Tensor:
    if module.deformable:
        raise ValueError("lka needs a non-deformable LKA module")
    return module(x)


class Identity(nn.Module):
    def forward(self, x):
        return x


def identity_attn(x: torch.Tensor) -> torch.Tensor:
    return x


def _tokens(x: torch.Tensor) -> torch.Tensor:
    return x.flatten(2).transpose(1, 2)  # (B, n, C)


def _untokens(t: torch.Tensor, spatial) -> torch.Tensor:
    B, _, C = t.shape
    return t.transpose(1, 2).reshape(B, C, *spatial)


class SpatialSelfAttention(nn.Module):
    """Multi-head self-attention whose keys/values are projected from ``n``
    tokens down to ``p``, so the score matrix is ``n x p``.

    The token projections bind the module to ``n_tokens``.
    """

    def __init__(self, c: int, n_tokens: int, proj_len: int, n_heads: int):
        super().__init__()
        if c % n_heads:
            raise ValueError(f"channels {c} not divisible by heads {n_heads}")
        if proj_len >= n_tokens:
            raise ValueError(f"projection length p={proj_len} must be < n={n_tokens}")
        self.c, self.n, self.p, self.h = c, n_tokens, proj_len, n_heads
        self.norm_in = P.LayerNorm(c)
        self.q = P.Linear(c, c, bias=False)
        self.k = P.Linear(c, c, bias=False)
        self.v = P.Linear(c, c, bias=False)
        self.proj_k = P.Linear(n_tokens, proj_len)
        self.proj_v = P.Linear(n_tokens, proj_len)
        self.alpha = nn.Parameter(torch.ones(n_heads))
        self.norm_out = P.LayerNorm(c)
        self.out = P.Linear(c, c)

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        B, C = x.shape[:2]
        spatial = x.shape[2:]
        n = math.prod(spatial)
        if C != self.c or n != self.n:
            raise P.ShapeError(f"spatial attention built for C={self.c}, n={self.n}; got C={C}, n={n}")
        h, d = self.h, C // self.h
        t = self.norm_in(_tokens(x))
        q, k, v = self.q(t), self.k(t), self.v(t)
        # token-axis projections n -> p, shared over channels
        k_p = self.proj_k(k.transpose(1, 2)).transpose(1, 2)  # (B, p, C)
        v_p = self.proj_v(v.transpose(1, 2)).transpose(1, 2)
        q = q.reshape(B, n, h, d).transpose(1, 2)  # (B, h, n, d)
        k_p = k_p.reshape(B, self.p, h, d).transpose(1, 2)
        v_p = v_p.reshape(B, self.p, h, d).transpose(1, 2)
        q = l2_normalize(q)
        scores = P.matmul(q, k_p.transpose(-2, -1))
        scale = self.alpha.view(1, h, 1, 1) / math.sqrt(d)
        weights = P.softmax(P.mul(scores, scale.expand_as(scores)), axis=-1)
        o = P.matmul(weights, v_p)  # (B, h, n, d)
        o = o.transpose(1, 2).reshape(B, n, C)
        y = _untokens(self.out(self.norm_out(o)), spatial)
        return (y, weights) if return_weights else y


class ChannelAttention(nn.Module):
    """Channel attention: a ``C x C`` softmax mixing matrix applied to the
    value channels identically at every voxel.

    ``A = softmax_i(Q^T K / sqrt(n))`` (normalised over the value-channel
    index ``i``), ``x_C = V A``; then layer norm and a linear layer.
    """

    def __init__(self, c: int):
        super().__init__()
        self.c = c
        self.norm_in = P.LayerNorm(c)
        self.q = P.Linear(c, c, bias=False)
        self.k = P.Linear(c, c, bias=False)
        self.v = P.Linear(c, c, bias=False)
        self.norm_out = P.LayerNorm(c)
        self.out = P.Linear(c, c)

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        C = x.shape[1]
        if C != self.c:
            raise P.ShapeError(f"channel attention built for C={self.c}, got {C}")
        spatial = x.shape[2:]
        n = math.prod(spatial)
        t = self.norm_in(_tokens(x))
        q, k, v = self.q(t), self.k(t), self.v(t)
        logits = P.matmul(q.transpose(1, 2), k)  # (B, C, C)
        logits = P.mul(logits, torch.full_like(logits, 1 / math.sqrt(n)))
        a = P.softmax(logits, axis=1)
        x_c = P.matmul(v, a)  # (B, n, C)
        y = _untokens(self.out(self.norm_out(x_c)), spatial)
        return (y, a) if return_weights else y


def l2_normalize(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Unit-normalise over the last axis (counted as 3 FLOPs per element)."""
    P._count("elementwise", 3 * P.ELEMWISE_FLOPS * x.numel())
    return x / x.norm(dim=-1, keepdim=True).clamp_min(eps)


def spatial_self_attention(x: torch.Tensor, params: SpatialSelfAttention) -> torch.Tensor:
    return params(x)


def channel_attention(x: torch.Tensor, params: ChannelAttention) -> torch.Tensor:
    return params(x)


def make_cnn_attention(kind: str, c: int, lka_kernels=(5, 7, 3), deform_kernel: int = 3) -> nn.Module:
    if kind == "D":
        return LKA(c, lka_kernels, deform_kernel, deformable=True)
    if kind == "L":
        return LKA(c, lka_kernels, deform_kernel, deformable=False)
    if kind == "I":
        return Identity()
    raise ValueError(f"unknown CNN attention kind {kind!r}")


def make_vit_attention(kind: str, c: int, n_tokens: int, proj_len: int, n_heads: int) -> nn.Module:
    if kind == "S":
        return SpatialSelfAttention(c, n_tokens, proj_len, n_heads)
    if kind == "C":
        return ChannelAttention(c)
    raise ValueError(f"unknown ViT attention kind {kind!r}")
