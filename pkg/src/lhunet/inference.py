"""Sliding-window prediction and the DSC / HD95 metrics."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
from scipy import ndimage
from scipy.spatial import cKDTree

Triple = tuple[int, int, int]


# ------------------------------------------------------------ window planning

def _axis_origins(size: int, patch: int, overlap: float) -> list[int]:
    if size <= patch:
        return [0]
    stride = max(int(patch * (1 - overlap)), 1)
    origins = list(range(0, size - patch + 1, stride))
    if origins[-1] != size - patch:
        origins.append(size - patch)
    return origins


def gaussian_weights(patch: Sequence[int], sigma_scale: float = 1 / 8) -> np.ndarray:
    """Separable Gaussian centred on the patch, peak 1, strictly positive."""
    axes = []
    for p in patch:
        sigma = max(p * sigma_scale, 1e-6)
        i = np.arange(p, dtype=np.float64) - (p - 1) / 2
        axes.append(np.exp(-0.5 * (i / sigma) ** 2))
    w = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    w /= w.max()
    w[w <= 0] = w[w > 0].min()
    return w


@dataclass
class WindowPlan:
    volume_shape: Triple  # after padding
    patch: Triple
    origins: list[Triple]
    weights: np.ndarray
    pad: tuple[tuple[int, int], ...] = ((0, 0), (0, 0), (0, 0))

    def __len__(self) -> int:
        return len(self.origins)

    def coverage(self) -> np.ndarray:
        cov = np.zeros(self.volume_shape, dtype=np.int32)
        for o in self.origins:
            cov[tuple(slice(a, a + p) for a, p in zip(o, self.patch))] += 1
        return cov


def plan_windows(volume_shape: Sequence[int], patch: Sequence[int], overlap: float = 0.5) -> WindowPlan:
    """Regular grid of window origins at stride ``patch*(1-overlap)``; the last
    origin per axis is clamped so the window ends on the boundary. Axes
    smaller than the patch are zero-padded symmetrically."""
    if not 0 <= overlap < 1:
        raise ValueError("overlap must lie in [0, 1)")
    vol = tuple(int(v) for v in volume_shape)
    patch = tuple(int(p) for p in patch)
    pad = tuple(((p - v) // 2, (p - v) - (p - v) // 2) if v < p else (0, 0) for v, p in zip(vol, patch))
    padded = tuple(v + a + b for v, (a, b) in zip(vol, pad))
    per_axis = [_axis_origins(v, p, overlap) for v, p in zip(padded, patch)]
    origins = sorted(set(itertools.product(*per_axis)))
    return WindowPlan(padded, patch, origins, gaussian_weights(patch), pad)


# ------------------------------------------------------------ prediction

def _net_patch(net) -> Triple | None:
    spec = getattr(net, "spec", None)
    return tuple(spec.patch_size) if spec is not None else None


def sliding_window_predict(net: Callable, volume, plan: WindowPlan | None = None,
                           patch: Sequence[int] | None = None, overlap: float = 0.5,
                           batch_windows: int = 1) -> np.ndarray:
    """Class probabilities ``(K, D, H, W)`` for a ``(C, D, H, W)`` volume.

    Per-window softmax outputs are blended with Gaussian weights and
    normalised by the accumulated weight. A single-window plan returns the
    direct softmax unchanged.
    """
    vol = torch.as_tensor(np.asarray(volume), dtype=torch.float32)
    if vol.dim() != 4:
        raise ValueError("volume must be (C, D, H, W)")
    patch = tuple(patch or _net_patch(net) or ())
    if len(patch) != 3:
        raise ValueError("patch size unknown: pass `patch` or a net with a spec")
    spec = getattr(net, "spec", None)
    if spec is not None and vol.shape[0] != spec.in_channels:
        raise ValueError(f"volume has {vol.shape[0]} channels, network expects {spec.in_channels}")
    orig = tuple(vol.shape[1:])
    if plan is None:
        plan = plan_windows(orig, patch, overlap)
    if any(a or b for a, b in plan.pad):
        vol = torch.nn.functional.pad(vol, [x for ab in reversed(plan.pad) for x in ab])
    if hasattr(net, "eval"):
        net.eval()

    def run(batch):
        with torch.no_grad():
            return torch.softmax(net(batch).double(), dim=1)

    def crop(a):
        sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(plan.pad, orig))
        return a[(slice(None),) + sl]

    if len(plan) == 1:
        o = plan.origins[0]
        win = vol[(slice(None),) + tuple(slice(a, a + p) for a, p in zip(o, patch))]
        probs = run(win.unsqueeze(0))[0].numpy()
        return crop(probs)

    w = torch.from_numpy(plan.weights)
    acc = None
    wsum = torch.zeros(plan.volume_shape, dtype=torch.float64)
    for start in range(0, len(plan), batch_windows):
        chunk = plan.origins[start:start + batch_windows]
        sls = [tuple(slice(a, a + p) for a, p in zip(o, patch)) for o in chunk]
        batch = torch.stack([vol[(slice(None),) + sl] for sl in sls])
        probs = run(batch)
        if acc is None:
            acc = torch.zeros((probs.shape[1], *plan.volume_shape), dtype=torch.float64)
        for sl, pr in zip(sls, probs):
            acc[(slice(None),) + sl] += pr * w
            wsum[sl] += w
    out = (acc / wsum).numpy()
    return crop(out)


def predict_labels(net, volume, **kw) -> np.ndarray:
    return sliding_window_predict(net, volume, **kw).argmax(0).astype(np.uint8)


# ------------------------------------------------------------ metrics

def dsc(pred, gt) -> float:
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise ValueError("masks must have the same shape")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


_SIX = ndimage.generate_binary_structure(3, 1)


def surface(mask) -> np.ndarray:
    """Foreground voxels with at least one 6-connected background neighbour
    (outside the volume counts as background)."""
    m = np.asarray(mask, dtype=bool)
    return m & ~ndimage.binary_erosion(m, structure=_SIX, border_value=0)


def surface_distances(pred, gt, spacing=(1.0, 1.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """Directed surface distances pred->gt and gt->pred (physical units)."""
    sp = np.asarray(spacing, dtype=np.float64)
    ps = np.argwhere(surface(pred)) * sp
    gs = np.argwhere(surface(gt)) * sp
    d_pg = cKDTree(gs).query(ps)[0]
    d_gp = cKDTree(ps).query(gs)[0]
    return d_pg, d_gp


def diagonal(shape, spacing=(1.0, 1.0, 1.0)) -> float:
    return float(math.sqrt(sum((n * s) ** 2 for n, s in zip(shape, spacing))))


def hd95(pred, gt, spacing=(1.0, 1.0, 1.0), empty_penalty: float | None = None) -> float:
    """95th percentile of the pooled symmetric surface distances.

    Both empty -> 0. Exactly one empty -> ``empty_penalty`` (default: the
    volume diagonal in physical units).
    """
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise ValueError("masks must have the same shape")
    pe, ge = not p.any(), not g.any()
    if pe and ge:
        return 0.0
    if pe or ge:
        return float(empty_penalty if empty_penalty is not None else diagonal(p.shape, spacing))
    d_pg, d_gp = surface_distances(p, g, spacing)
    return float(np.percentile(np.concatenate([d_pg, d_gp]), 95))


@dataclass
class ClassMetrics:
    dsc: float
    hd95: float
    flags: list[str] = field(default_factory=list)


@dataclass
class SegMetrics:
    per_class: dict[str, ClassMetrics]

    @property
    def mean_dsc(self) -> float:
        return float(np.mean([m.dsc for m in self.per_class.values()])) if self.per_class else float("nan")

    @property
    def mean_hd95(self) -> float:
        return float(np.mean([m.hd95 for m in self.per_class.values()])) if self.per_class else float("nan")

    def to_dict(self) -> dict:
        return {
            "per_class": {k: {"dsc": v.dsc, "hd95": v.hd95, "flags": v.flags} for k, v in self.per_class.items()},
            "mean_dsc": self.mean_dsc,
            "mean_hd95": self.mean_hd95,
        }


def parse_class_map(text: str) -> dict[str, list[int]]:
    """``"1,2,3"`` -> one class per label; ``"WT=1,2,3;TC=1,3;ET=3"`` -> label unions."""
    out: dict[str, list[int]] = {}
    text = text.strip()
    if "=" not in text:
        for tok in text.split(","):
            if tok.strip():
                out[tok.strip()] = [int(tok)]
        return out
    for part in text.split(";"):
        if not part.strip():
            continue
        name, _, labels = part.partition("=")
        out[name.strip()] = [int(t) for t in labels.split(",") if t.strip()]
    return out


def evaluate(pred_labels, gt_labels, class_map: Mapping[str, Sequence[int]] | str | None = None,
             spacing=(1.0, 1.0, 1.0)) -> SegMetrics:
    """Per-class (or per-region, as label unions) DSC and HD95."""
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth shapes differ")
    if class_map is None:
        labels = sorted(set(np.unique(gt).tolist()) | set(np.unique(pred).tolist()))
        class_map = {str(l): [l] for l in labels if l != 0}
    elif isinstance(class_map, str):
        class_map = parse_class_map(class_map)
    out = {}
    for name, labels in class_map.items():
        p = np.isin(pred, labels)
        g = np.isin(gt, labels)
        flags = []
        if not p.any() and not g.any():
            flags.append("both_empty")
        elif not p.any():
            flags.append("pred_empty")
        elif not g.any():
            flags.append("gt_empty")
        out[str(name)] = ClassMetrics(dsc(p, g), hd95(p, g, spacing), flags)
    return SegMetrics(out)
