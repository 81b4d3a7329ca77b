"""Desk-scale training: Dice+CE loss, Nesterov SGD with coupled L2 decay,
polynomial learning-rate decay and a minimal augmentation set."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .archconfig import TrainSpec
from .inference import dsc
from .network import LhuNet, save

log = logging.getLogger(__name__)

DICE_SMOOTH = 1e-5


class TrainingDiverged(FloatingPointError):
    def __init__(self, iteration: int, snapshot: dict):
        self.iteration = iteration
        self.snapshot = snapshot
        bad = [k for k, v in snapshot.items() if not v["finite"]]
        super().__init__(f"non-finite loss at iteration {iteration}; first non-finite layers: {bad[:5]}")


# ------------------------------------------------------------ loss

@dataclass
class LossTerms:
    total: torch.Tensor
    dice_loss: torch.Tensor  # mean over scored classes
    dice_per_class: torch.Tensor
    ce: torch.Tensor

    def as_floats(self) -> dict:
        return {"loss": self.total.item(), "dice_loss": self.dice_loss.item(), "ce": self.ce.item()}


def one_hot(target: torch.Tensor, k: int) -> torch.Tensor:
    return F.one_hot(target.long(), k).movedim(-1, 1).to(torch.get_default_dtype())


def dice_ce_loss(logits: torch.Tensor, target: torch.Tensor, weights=(1.0, 1.0),
                 smooth: float = DICE_SMOOTH, include_background: bool = False) -> LossTerms:
    """Soft Dice (per class, over the whole batch) + cross-entropy.

    ``target`` holds integer labels ``(B, *spatial)`` or one-hot ``(B, K, *spatial)``.
    """
    k = logits.shape[1]
    if target.dim() == logits.dim():
        onehot = target.to(logits.dtype)
        labels = target.argmax(1)
    else:
        labels = target.long()
        if labels.numel() and (labels.min() < 0 or labels.max() >= k):
            raise ValueError(f"labels must lie in [0, {k})")
        onehot = one_hot(labels, k).to(logits.dtype)
    probs = torch.softmax(logits, dim=1)
    axes = [0] + list(range(2, logits.dim()))
    inter = (probs * onehot).sum(axes)
    denom = probs.sum(axes) + onehot.sum(axes)
    dice = (2 * inter + smooth) / (denom + smooth)
    per_class = 1 - dice
    scored = per_class if include_background or k == 1 else per_class[1:]
    dice_loss = scored.mean()
    if target.dim() == logits.dim():
        ce = -(onehot * torch.log_softmax(logits, dim=1)).sum(1).mean()
    else:
        ce = F.cross_entropy(logits, labels)
    total = weights[0] * dice_loss + weights[1] * ce
    return LossTerms(total, dice_loss, per_class, ce)


# ------------------------------------------------------------ optimisation

def poly_lr(t: int, total: int, lr0: float, power: float = 0.9) -> float:
    if total <= 0:
        return lr0
    frac = min(max(t / total, 0.0), 1.0)
    return lr0 * (1 - frac) ** power


@dataclass
class OptState:
    velocity: list[torch.Tensor]
    step: int = 0
    lr: float = 0.0

    @classmethod
    def zeros_like(cls, params: Sequence[torch.Tensor]) -> "OptState":
        return cls([torch.zeros_like(p) for p in params])


@torch.no_grad()
def sgd_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor | None], state: OptState,
             lr: float, momentum: float = 0.99, weight_decay: float = 3e-5, nesterov: bool = True) -> OptState:
    """In-place Nesterov SGD with L2 decay added to the gradient.

    ``g <- g + wd*p``; ``v <- mu*v + g``; ``p <- p - lr*(g + mu*v)``.
    """
    for p, g, v in zip(params, grads, state.velocity):
        if g is None:
            g = torch.zeros_like(p)
        g = g + weight_decay * p
        v.mul_(momentum).add_(g)
        upd = g + momentum * v if nesterov else v
        p.sub_(lr * upd)
    state.step += 1
    state.lr = lr
    return state


# ------------------------------------------------------------ augmentation

def flip(patch: np.ndarray, label: np.ndarray, axes: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Flip spatial ``axes`` (0..2) of a ``(C, D, H, W)`` patch and its ``(D, H, W)`` label."""
    if not axes:
        return patch, label
    return (np.flip(patch, [a + 1 for a in axes]).copy(), np.flip(label, list(axes)).copy())


def intensity(patch: np.ndarray, scale: float = 1.0, shift: float = 0.0) -> np.ndarray:
    if scale == 1.0 and shift == 0.0:
        return patch
    return (patch * scale + shift).astype(patch.dtype)


def augment(patch: np.ndarray, label: np.ndarray, seed) -> tuple[np.ndarray, np.ndarray]:
    """Random axis flips (p=0.5 each) and intensity scale [0.9, 1.1] / shift [-0.1, 0.1]."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    axes = [a for a in range(3) if rng.random() < 0.5]
    patch, label = flip(patch, label, axes)
    return intensity(patch, rng.uniform(0.9, 1.1), rng.uniform(-0.1, 0.1)), label


# ------------------------------------------------------------ loop

def _crop(img, lab, patch, rng=None):
    """Random crop (or centre crop without ``rng``), zero-padding small volumes."""
    shape = lab.shape
    pads = [max(p - s, 0) for p, s in zip(patch, shape)]
    if any(pads):
        img = np.pad(img, [(0, 0)] + [(q // 2, q - q // 2) for q in pads])
        lab = np.pad(lab, [(q // 2, q - q // 2) for q in pads])
        shape = lab.shape
    if rng is None:
        starts = [(s - p) // 2 for s, p in zip(shape, patch)]
    else:
        starts = [int(rng.integers(0, s - p + 1)) for s, p in zip(shape, patch)]
    sl = tuple(slice(a, a + p) for a, p in zip(starts, patch))
    return img[(slice(None),) + sl], lab[sl]


def center_crop_dsc(net: LhuNet, dataset, n_classes: int | None = None) -> float:
    """Mean foreground DSC of single-patch (centre crop) predictions."""
    patch = tuple(net.spec.patch_size)
    k = n_classes or net.spec.out_channels
    net.eval()
    scores = []
    with torch.no_grad():
        for img, lab in dataset:
            x, y = _crop(img, lab, patch)
            pred = net(torch.from_numpy(np.ascontiguousarray(x))[None].float()).argmax(1)[0].numpy()
            scores.append(np.mean([dsc(pred == c, y == c) for c in range(1, k)]))
    return float(np.mean(scores))


def _activation_snapshot(net: LhuNet, x: torch.Tensor) -> dict:
    snap: dict = {}
    hooks = []

    def hook(name):
        def fn(_m, _inp, out):
            if isinstance(out, torch.Tensor):
                snap[name] = {"finite": bool(torch.isfinite(out).all()),
                              "absmax": float(out.detach().abs().nan_to_num(posinf=math.inf).max())}
        return fn

    for name, m in net.named_modules():
        if name:
            hooks.append(m.register_forward_hook(hook(name)))
    try:
        from . import primitives as P
        with torch.no_grad(), P.finite_checks(False):
            net(x)
    finally:
        for h in hooks:
            h.remove()
    return snap


@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)
    best_dsc: float = -1.0
    last_checkpoint: Path | None = None
    best_checkpoint: Path | None = None
    init_fusion: dict = field(default_factory=dict)
    final_fusion: dict = field(default_factory=dict)

    def losses(self) -> list[float]:
        return [r["loss"] for r in self.log if "loss" in r]


def train(net: LhuNet, dataset, spec: TrainSpec, iters: int | None = None, out_dir=None, seed: int = 0,
          val_dataset=None, do_augment: bool = True, include_background: bool = False) -> TrainResult:
    """Run ``iters`` (default ``spec.total_iters``) SGD steps on random patches.

    Validation (centre-crop DSC on ``val_dataset``, default the training set)
    runs every ``spec.iters_per_epoch`` iterations and at the end. With
    ``out_dir`` set, writes ``metrics.jsonl``, ``last.*`` and ``best.*``.
    """
    total = spec.total_iters if iters is None else int(iters)
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    patch = tuple(net.spec.patch_size)
    val = dataset if val_dataset is None else val_dataset
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    result = TrainResult(init_fusion=net.fusion_weights())
    logf = open(out / "metrics.jsonl", "w", encoding="utf-8") if out is not None else None

    def emit(rec):
        result.log.append(rec)
        if logf is not None:
            logf.write(json.dumps(rec, sort_keys=True) + "\n")

    params = [p for p in net.parameters()]
    state = OptState.zeros_like(params)
    try:
        if total == 0 and out is not None:
            result.last_checkpoint = save(net, out / "last")
            return result
        for it in range(total):
            net.train()
            xs, ys = [], []
            for _ in range(spec.batch_size):
                img, lab = dataset[int(rng.integers(len(dataset)))]
                x, y = _crop(img, lab, patch, rng)
                if do_augment:
                    x, y = augment(x, y, rng)
                xs.append(x)
                ys.append(y)
            xb = torch.from_numpy(np.stack(xs)).float()
            yb = torch.from_numpy(np.stack(ys)).long()
            lr = poly_lr(it, total, spec.base_lr, spec.poly_power)
            net.zero_grad(set_to_none=True)
            terms = dice_ce_loss(net(xb), yb, spec.loss_weights, include_background=include_background)
            if not torch.isfinite(terms.total):
                raise TrainingDiverged(it, _activation_snapshot(net, xb))
            terms.total.backward()
            sgd_step(params, [p.grad for p in params], state, lr, spec.momentum, spec.weight_decay)
            emit({"iter": it, "lr": lr, **terms.as_floats()})
            if (it + 1) % spec.iters_per_epoch == 0 or it + 1 == total:
                score = center_crop_dsc(net, val)
                emit({"iter": it, "epoch": it // spec.iters_per_epoch, "val_dsc": score})
                if score > result.best_dsc:
                    result.best_dsc = score
                    if out is not None:
                        result.best_checkpoint = save(net, out / "best")
        if out is not None:
            result.last_checkpoint = save(net, out / "last")
    finally:
        if logf is not None:
            logf.close()
    result.final_fusion = net.fusion_weights()
    return result
