"""Assemble an :class:`ArchSpec` into the full encoder-decoder network.

Topology (``s`` = number of stages, ``f_i`` = downsample factors)::

    stem (full res)                                        -> skip_stem
    stage i < n_cnn : maxpool(f_i) -> ResBlock             -> E_i
    stage i hybrid  : strided conv(f_i) -> HybridBlock     -> E_i
    last stage      : strided conv(f_i) -> X ; E = X + OmniFocus_enc(X)

    decoder depth s-1 : OmniFocus_dec(reduce([E, X]))
    decoder depth i   : block_i(reduce([up(g_{i+1}), E_i]))
    full res          : ResBlock(reduce([up(g_0), skip_stem])) -> head

Decoder blocks mirror the encoder's kinds at the same depth.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import primitives as P
from .archconfig import ArchSpec, ConfigError, validate
from .blocks import HybridBlock, OmniFocusBlock, ResBlock, Stem

CKPT_FORMAT = "lhunet-ckpt/1"


class Downsample(nn.Module):
    """Strided conv (kernel == stride) followed by batchnorm."""

    def __init__(self, c_in: int, c_out: int, factors):
        super().__init__()
        self.conv = P.Conv3d(c_in, c_out, factors, stride=factors)
        self.bn = P.BatchNorm3d(c_out)

    def forward(self, x):
        return self.bn(self.conv(x))


class MaxPool(nn.Module):
    def __init__(self, factors):
        super().__init__()
        self.factors = tuple(factors)

    def forward(self, x):
        return P.maxpool3d(x, self.factors)


def _up(spec: ArchSpec, c_in: int, c_out: int, factors) -> nn.Module:
    if spec.upsample == "trilinear":
        return P.Upsample(c_in, c_out, factors)
    return P.ConvTranspose3d(c_in, c_out, factors)


class LhuNet(nn.Module):
    def __init__(self, spec: ArchSpec):
        super().__init__()
        problems = validate(spec)
        if problems:
            raise ConfigError("invalid ArchSpec: " + "; ".join(problems))
        self.spec = spec
        widths = spec.stage_widths
        shapes = spec.stage_shapes()
        kinds = spec.stage_kinds()
        s = spec.n_stages
        attn_kw = dict(proj_len=spec.kv_projection_len, n_heads=spec.n_heads,
                       lka_kernels=spec.lka_kernels, deform_kernel=spec.deform_kernel)

        self.stem = Stem(spec.in_channels, widths[0])
        self.down = nn.ModuleList()
        self.enc = nn.ModuleList()
        prev = widths[0]
        for i in range(s):
            w = widths[i]
            n_tok = math.prod(shapes[i])
            if kinds[i] is None:
                self.down.append(MaxPool(spec.downsample[i]))
                self.enc.append(ResBlock(prev, w))
            else:
                vit, cnn = kinds[i]
                self.down.append(Downsample(prev, w, spec.downsample[i]))
                if i == s - 1:
                    self.enc.append(OmniFocusBlock(w, n_tok, cnn, vit, placement="encoder", **attn_kw))
                else:
                    self.enc.append(HybridBlock(w, cnn, vit, n_tok, **attn_kw))
            prev = w

        # decoder, indexed by depth like the encoder
        self.up = nn.ModuleList()
        self.reduce = nn.ModuleList()
        self.dec = nn.ModuleList()
        for i in range(s):
            w = widths[i]
            n_tok = math.prod(shapes[i])
            if i == s - 1:
                self.up.append(nn.Identity())
            else:
                self.up.append(_up(spec, widths[i + 1], w, spec.downsample[i + 1]))
            self.reduce.append(P.pw_conv(2 * w, w))
            if kinds[i] is None:
                self.dec.append(ResBlock(w))
            else:
                vit, cnn = kinds[i]
                if i == s - 1:
                    self.dec.append(OmniFocusBlock(w, n_tok, cnn, vit, placement="decoder", **attn_kw))
                else:
                    self.dec.append(HybridBlock(w, cnn, vit, n_tok, **attn_kw))
        self.up_full = _up(spec, widths[0], widths[0], spec.downsample[0])
        self.reduce_full = P.pw_conv(2 * widths[0], widths[0])
        self.dec_full = ResBlock(widths[0])
        self.head = P.pw_conv(widths[0], spec.out_channels)

    # ------------------------------------------------------------ forward

    def _guard(self, name: str, t: torch.Tensor) -> torch.Tensor:
        if P.CHECK_FINITE and not torch.isfinite(t).all():
            raise P.NonFiniteError(name)
        return t

    def _run(self, name: str, fn, *args) -> torch.Tensor:
        """Call one stage, naming the stage in any non-finite error."""
        try:
            out = fn(*args)
        except P.NonFiniteError as e:
            raise P.NonFiniteError(f"{name} ({e.where})") from None
        return self._guard(name, out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        spec = self.spec
        if x.dim() != 5 or x.shape[1] != spec.in_channels or tuple(x.shape[2:]) != tuple(spec.patch_size):
            raise P.ShapeError(
                f"expected (B, {spec.in_channels}, {', '.join(map(str, spec.patch_size))}), got {tuple(x.shape)}"
            )
        s = spec.n_stages
        skip_stem = self._run("stem", self.stem, x)
        h = skip_stem
        skips = []
        for i in range(s):
            h = self._run(f"down.{i}", self.down[i], h)
            if i == s - 1:
                bottleneck_in = h
                h = P.add(h, self._run(f"enc.{i}", self.enc[i], h))
            else:
                h = self._run(f"enc.{i}", self.enc[i], h)
            skips.append(h)

        g = None
        for i in reversed(range(s)):
            if i == s - 1:
                cat = torch.cat([skips[i], bottleneck_in], dim=1)
            else:
                cat = torch.cat([self._run(f"up.{i}", self.up[i], g), skips[i]], dim=1)
            g = self._run(f"dec.{i}", lambda t, i=i: self.dec[i](self.reduce[i](t)), cat)
        cat = torch.cat([self._run("up_full", self.up_full, g), skip_stem], dim=1)
        g = self._run("dec_full", lambda t: self.dec_full(self.reduce_full(t)), cat)
        return self._run("head", self.head, g)

    # ------------------------------------------------------------ introspection

    def hybrid_blocks(self) -> dict[str, HybridBlock]:
        return {name: m for name, m in self.named_modules() if isinstance(m, HybridBlock)}

    def fusion_weights(self) -> dict[str, dict[str, float]]:
        return {name: m.fusion_weights() for name, m in self.hybrid_blocks().items()}

    def param_vector(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1) for p in self.parameters()])


def build(spec: ArchSpec, seed: int = 0) -> LhuNet:
    """Deterministically initialised network for ``spec``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return LhuNet(spec)


def forward(net: LhuNet, x: torch.Tensor, mode: str = "eval") -> torch.Tensor:
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    net.train(mode == "train")
    if mode == "eval":
        with torch.no_grad():
            return net(x)
    return net(x)


def parameters(net: LhuNet) -> list[tuple[str, torch.Tensor]]:
    return list(net.named_parameters())


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


# ------------------------------------------------------------ checkpoints

def _state_entries(net: LhuNet) -> list[tuple[str, torch.Tensor]]:
    return list(net.state_dict().items())


def save(net: LhuNet, path: str | Path) -> Path:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian blob).

    The blob holds every ``state_dict`` entry flattened in manifest order:
    float32 for floating tensors, int64 for integer buffers.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    with open(path.with_suffix(".bin"), "wb") as fh:
        for name, t in _state_entries(net):
            arr = t.detach().cpu().numpy()
            dtype = "float32" if arr.dtype.kind == "f" else "int64"
            fh.write(np.ascontiguousarray(arr, dtype="<f4" if dtype == "float32" else "<i8").tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype})
    manifest = {
        "format": CKPT_FORMAT,
        "arch": net.spec.to_dict(),
        "arch_hash": net.spec.spec_hash(),
        "entries": entries,
    }
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return path.with_suffix(".json")


def read_manifest(path: str | Path) -> dict:
    return json.loads(Path(path).with_suffix(".json").read_text(encoding="utf-8"))


def load(path: str | Path, net: LhuNet | None = None) -> LhuNet:
    """Load a checkpoint. With ``net`` given, its ArchSpec hash must match."""
    path = Path(path)
    manifest = read_manifest(path)
    if manifest.get("format") != CKPT_FORMAT:
        raise ValueError(f"not an {CKPT_FORMAT} checkpoint: {path}")
    if net is None:
        net = LhuNet(ArchSpec.from_dict(manifest["arch"]))
    elif net.spec.spec_hash() != manifest["arch_hash"]:
        raise ValueError("checkpoint ArchSpec hash does not match the network")
    blob = path.with_suffix(".bin").read_bytes()
    state = {}
    off = 0
    for e in manifest["entries"]:
        dt = np.dtype("<f4") if e["dtype"] == "float32" else np.dtype("<i8")
        n = math.prod(e["shape"]) * dt.itemsize
        if off + n > len(blob):
            raise ValueError("checkpoint blob is truncated")
        arr = np.frombuffer(blob, dtype=dt, count=math.prod(e["shape"]), offset=off).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.copy())
        off += n
    if off != len(blob):
        raise ValueError("checkpoint blob has trailing bytes")
    net.load_state_dict(state)
    return net


def checkpoint_bytes(net: LhuNet) -> int:
    """Size of the checkpoint blob in bytes."""
    return sum(t.numel() * (4 if t.is_floating_point() else 8) for _, t in _state_entries(net))
