"""Analytic parameter and FLOP accounting.

Counts come from shape algebra alone; nothing is built. The layer rows use
the same names as the network's sub-modules so each row can be checked
against the built model.

FLOP convention: 2 x MACs for convolutions, linear layers and attention
matmuls; 1 FLOP per element for norms, activations, pooling and
element-wise arithmetic; 16 per channel-sample for trilinear reads.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

from .archconfig import ArchSpec, ConfigError, validate
from .blocks import RES_KERNEL
from .primitives import ELEMWISE_FLOPS as EW, TRILINEAR_FLOPS


@dataclass
class CostRow:
    layer: str
    stage: str
    params: int
    flops: int
    out_shape: tuple[int, ...]


@dataclass
class CostReport:
    rows: list[CostRow] = field(default_factory=list)
    label: str = ""

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    def by_stage(self) -> dict[str, tuple[int, int]]:
        out: dict[str, tuple[int, int]] = {}
        for r in self.rows:
            p, f = out.get(r.stage, (0, 0))
            out[r.stage] = (p + r.params, f + r.flops)
        return out

    def row(self, layer: str) -> CostRow:
        for r in self.rows:
            if r.layer == layer:
                return r
        raise KeyError(layer)

    # -- output

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "stage", "params", "flops", "out_shape"])
        for r in self.rows:
            w.writerow([r.layer, r.stage, r.params, r.flops, "x".join(map(str, r.out_shape))])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({
            "label": self.label,
            "total_params": self.total_params,
            "total_flops": self.total_flops,
            "rows": [dict(layer=r.layer, stage=r.stage, params=r.params, flops=r.flops,
                          out_shape=list(r.out_shape)) for r in self.rows],
        }, indent=1)

    def to_text(self) -> str:
        lines = [f"{'layer':<14}{'stage':<14}{'params':>12}{'GFLOPs':>12}  out_shape"]
        for r in self.rows:
            lines.append(f"{r.layer:<14}{r.stage:<14}{r.params:>12,}{r.flops / 1e9:>12.4f}  "
                         + "x".join(map(str, r.out_shape)))
        lines.append(f"total params: {self.total_params:,} ({self.total_params / 1e6:.2f} M)")
        lines.append(f"total FLOPs:  {self.total_flops:,} ({self.total_flops / 1e9:.2f} G)")
        return "\n".join(lines)

    def render(self, fmt: str = "text") -> str:
        return {"text": self.to_text, "csv": self.to_csv, "json": self.to_json}[fmt]()


# ------------------------------------------------------------ layer algebra
# each helper returns (params, flops) for one sample at `v` output voxels

def _conv(c_in, c_out, k, v, groups=1, bias=True):
    kv = math.prod(k) if isinstance(k, tuple) else k ** 3
    w = c_out * (c_in // groups) * kv
    return w + (c_out if bias else 0), 2 * w * v


def _bn(c, v):
    return 2 * c, EW * c * v


def _ew(c, v, n=1):
    return 0, EW * c * v * n


def _sum(*pfs):
    return sum(p for p, _ in pfs), sum(f for _, f in pfs)


def resblock_cost(c_in, c_out, v):
    return _sum(
        _conv(c_in, c_out, RES_KERNEL, v, groups=c_in), _bn(c_out, v), _ew(c_out, v),
        _conv(c_out, c_out, RES_KERNEL, v, groups=c_out), _bn(c_out, v),
        _conv(c_in, c_out, 1, v), _bn(c_out, v),
        _ew(c_out, v), _ew(c_out, v),  # add, leakyrelu
    )


def comb_cost(c, v):
    return _sum(resblock_cost(c, c, v), _conv(c, c, 1, v), _ew(c, v), _bn(c, v))


def offset_predictor_cost(c, k, v):
    return _conv(c, 3 * k ** 3, k, v)


def lka_cost(c, v, lka_kernels, deform_kernel, deformable):
    dw_k, dil_k, _ = lka_kernels
    k = deform_kernel
    if deformable:
        taps = k ** 3
        third = _sum(
            offset_predictor_cost(c, k, v),
            (c * taps + c, TRILINEAR_FLOPS * c * taps * v + 2 * c * taps * v),
        )
    else:
        third = _conv(c, c, k, v, groups=c)
    return _sum(
        _conv(c, c, 1, v), _ew(c, v),  # pw_in, gelu
        _conv(c, c, dw_k, v, groups=c), _conv(c, c, dil_k, v, groups=c),
        third, _conv(c, c, 1, v), _ew(c, v),  # pw_out, product with x_hat
    )


def spatial_attention_cost(c, n, p, h):
    d = c // h
    params = 2 * c + 3 * c * c + 2 * (n * p + p) + h + 2 * c + c * c + c
    flops = (
        EW * n * c  # norm_in
        + 3 * 2 * n * c * c  # Q, K, V
        + 2 * 2 * c * n * p  # token projections n -> p
        + 3 * EW * n * c  # L2-normalised Q
        + 2 * h * n * p * d  # scores
        + 2 * EW * h * n * p  # alpha scale, softmax
        + 2 * h * n * p * d  # mixing with V_p
        + EW * n * c + 2 * n * c * c  # norm_out, out_proj
    )
    return params, flops


def channel_attention_cost(c, n):
    params = 2 * c + 3 * c * c + 2 * c + c * c + c
    flops = (
        EW * n * c
        + 3 * 2 * n * c * c
        + 2 * n * c * c  # Q^T K
        + 2 * EW * c * c  # scale, softmax
        + 2 * n * c * c  # V A
        + EW * n * c + 2 * n * c * c
    )
    return params, flops


def cnn_attention_cost(kind, c, v, spec: ArchSpec):
    if kind == "I":
        return 0, 0
    return lka_cost(c, v, spec.lka_kernels, spec.deform_kernel, deformable=(kind == "D"))


def vit_attention_cost(kind, c, n, spec: ArchSpec):
    if kind == "S":
        return spatial_attention_cost(c, n, spec.kv_projection_len, spec.n_heads)
    return channel_attention_cost(c, n)


def hybrid_cost(vit, cnn, c, v, spec: ArchSpec):
    return _sum(
        cnn_attention_cost(cnn, c, v, spec),
        vit_attention_cost(vit, c, v, spec),
        (2, EW * c * v * 4),  # delta/gamma scaling + three-way sum
        comb_cost(c, v),
    )


def _up_cost(spec: ArchSpec, c_in, c_out, f, v_out):
    if spec.upsample == "trilinear":
        interp = 0 if f == (1, 1, 1) else TRILINEAR_FLOPS * c_in * v_out
        return _sum((0, interp), _conv(c_in, c_out, 1, v_out))
    return c_in * c_out * math.prod(f) + c_out, 2 * c_in * c_out * v_out


# ------------------------------------------------------------ whole network

def _check(spec: ArchSpec) -> None:
    problems = validate(spec)
    if problems:
        raise ConfigError("invalid ArchSpec: " + "; ".join(problems))


def analyze(spec: ArchSpec, patch=None, batch: int = 1) -> CostReport:
    """Per-layer params and FLOPs of the full network at ``patch`` (default: the ArchSpec patch)."""
    _check(spec)
    patch = tuple(patch or spec.patch_size)
    if patch != tuple(spec.patch_size):
        # spatial attention binds the network to its patch; other sizes are
        # only meaningful for attention-free layers, so require divisibility
        cur = list(patch)
        for f in spec.downsample:
            if any(c % a for c, a in zip(cur, f)):
                raise ConfigError(f"patch {patch} not divisible by downsample schedule")
            cur = [c // a for c, a in zip(cur, f)]
        if any(k and k[0] == "S" for k in spec.stage_kinds()):
            raise ConfigError("spatial attention is bound to the configured patch size")
    widths = spec.stage_widths
    shapes = []
    cur = list(patch)
    for f in spec.downsample:
        cur = [c // a for c, a in zip(cur, f)]
        shapes.append(tuple(cur))
    kinds = spec.stage_kinds()
    s = spec.n_stages
    rows: list[CostRow] = []

    def add(layer, stage, pf, c, shape):
        rows.append(CostRow(layer, stage, pf[0], pf[1] * batch, (batch, c, *shape)))

    v_full = math.prod(patch)
    add("stem", "stem", _sum(_conv(spec.in_channels, widths[0], 1, v_full), _ew(widths[0], v_full),
                             (widths[0], 0), _bn(widths[0], v_full)), widths[0], patch)
    prev, prev_shape = widths[0], patch
    for i in range(s):
        w, shape = widths[i], shapes[i]
        v = math.prod(shape)
        f = spec.downsample[i]
        stage = f"encoder.{i}"
        if kinds[i] is None:
            pool = (0, 0) if f == (1, 1, 1) else _ew(prev, math.prod(prev_shape))
            add(f"down.{i}", stage, pool, prev, shape)
            add(f"enc.{i}", stage, resblock_cost(prev, w, v), w, shape)
        else:
            vit, cnn = kinds[i]
            add(f"down.{i}", stage, _sum(_conv(prev, w, f, v), _bn(w, v)), w, shape)
            blk = hybrid_cost(vit, cnn, w, v, spec)
            if i == s - 1:
                blk = _sum(blk, _ew(w, v))  # residual add around the bottleneck block
            add(f"enc.{i}", stage, blk, w, shape)
        prev, prev_shape = w, shape

    for i in reversed(range(s)):
        w, shape = widths[i], shapes[i]
        v = math.prod(shape)
        stage = f"decoder.{i}"
        if i < s - 1:
            add(f"up.{i}", stage, _up_cost(spec, widths[i + 1], w, spec.downsample[i + 1], v), w, shape)
        add(f"reduce.{i}", stage, _conv(2 * w, w, 1, v), w, shape)
        if kinds[i] is None:
            add(f"dec.{i}", stage, resblock_cost(w, w, v), w, shape)
        else:
            vit, cnn = kinds[i]
            add(f"dec.{i}", stage, hybrid_cost(vit, cnn, w, v, spec), w, shape)
    w0 = widths[0]
    add("up_full", "decoder.full", _up_cost(spec, w0, w0, spec.downsample[0], v_full), w0, patch)
    add("reduce_full", "decoder.full", _conv(2 * w0, w0, 1, v_full), w0, patch)
    add("dec_full", "decoder.full", resblock_cost(w0, w0, v_full), w0, patch)
    add("head", "head", _conv(w0, spec.out_channels, 1, v_full), spec.out_channels, patch)
    return CostReport(rows, label=spec.schedule.render())


def count_params(spec: ArchSpec) -> CostReport:
    """Parameter-only report (FLOP column zeroed)."""
    rep = analyze(spec)
    for r in rep.rows:
        r.flops = 0
    return rep


def estimate_flops(spec: ArchSpec, patch=None) -> CostReport:
    return analyze(spec, patch)


def compare(specs, column: str = "params", labels=None) -> list[dict]:
    """Rank specs by total ``params`` or ``flops`` (descending)."""
    if column not in ("params", "flops"):
        raise ValueError("column must be 'params' or 'flops'")
    specs = list(specs)
    labels = list(labels) if labels is not None else [s.schedule.render() for s in specs]
    table = []
    for label, spec in zip(labels, specs):
        rep = analyze(spec)
        table.append({"label": label, "params": rep.total_params, "flops": rep.total_flops})
    table.sort(key=lambda r: r[column], reverse=True)
    return table


def render_table(table: list[dict], fmt: str = "text") -> str:
    if fmt == "json":
        return json.dumps(table, indent=1)
    keys = list(table[0]) if table else ["label", "params", "flops"]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        w.writerows(table)
        return buf.getvalue()
    lines = ["  ".join(f"{k:>12}" for k in keys)]
    for r in table:
        cells = []
        for k in keys:
            val = r[k]
            if k == "params":
                cells.append(f"{val / 1e6:>10.2f} M")
            elif k == "flops":
                cells.append(f"{val / 1e9:>10.2f} G")
            elif isinstance(val, float):
                cells.append(f"{val:>12.4f}")
            else:
                cells.append(f"{str(val):>12}")
        lines.append("  ".join(cells))
    return "\n".join(lines)
