"""Architecture, attention-schedule and training configuration.

Everything here is a plain frozen value. Presets are embedded; JSON config
files override them field-wise (see :func:`load_config`).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

VIT_KINDS = ("S", "C")
CNN_KINDS = ("D", "L", "I")

Triple = tuple[int, int, int]


class ScheduleParseError(ValueError):
    """Malformed attention-schedule string.

    ``position`` is the 0-based character index of the first offending
    character, or ``None`` when the problem is structural (e.g. unequal halves).
    """

    def __init__(self, text: str, message: str, position: int | None = None):
        self.text = text
        self.position = position
        where = f" at position {position}" if position is not None else ""
        super().__init__(f"invalid schedule {text!r}{where}: {message}")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AttentionSchedule:
    vit_kinds: tuple[str, ...]
    cnn_kinds: tuple[str, ...]

    def __post_init__(self):
        if not self.vit_kinds or len(self.vit_kinds) != len(self.cnn_kinds):
            raise ValueError("vit_kinds and cnn_kinds must be non-empty and of equal length")
        if any(k not in VIT_KINDS for k in self.vit_kinds):
            raise ValueError(f"vit kinds must be drawn from {VIT_KINDS}")
        if any(k not in CNN_KINDS for k in self.cnn_kinds):
            raise ValueError(f"cnn kinds must be drawn from {CNN_KINDS}")

    def __len__(self) -> int:
        return len(self.vit_kinds)

    def render(self) -> str:
        return "".join(self.vit_kinds) + "-" + "".join(self.cnn_kinds)

    def __str__(self) -> str:
        return self.render()


def parse_schedule(text: str) -> AttentionSchedule:
    """Parse strings like ``"SSC-DDD"`` into an :class:`AttentionSchedule`."""
    if not isinstance(text, str):
        raise ScheduleParseError(repr(text), "schedule must be a string")
    dash = text.find("-")
    if dash < 0:
        raise ScheduleParseError(text, "missing '-' separating ViT and CNN halves")
    vit, cnn = text[:dash], text[dash + 1:]
    for i, ch in enumerate(vit):
        if ch not in VIT_KINDS:
            raise ScheduleParseError(text, f"{ch!r} is not a ViT attention kind {VIT_KINDS}", i)
    for i, ch in enumerate(cnn):
        if ch not in CNN_KINDS:
            raise ScheduleParseError(text, f"{ch!r} is not a CNN attention kind {CNN_KINDS}", dash + 1 + i)
    if not vit:
        raise ScheduleParseError(text, "empty ViT half", 0)
    if not cnn:
        raise ScheduleParseError(text, "empty CNN half", dash + 1)
    if len(vit) != len(cnn):
        raise ScheduleParseError(text, f"unequal halves ({len(vit)} vs {len(cnn)})")
    return AttentionSchedule(tuple(vit), tuple(cnn))


def render_schedule(schedule: AttentionSchedule) -> str:
    return schedule.render()


def _triple(v) -> Triple:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(a) for a in v)
    if len(t) != 3:
        raise ConfigError(f"expected an int or a triple, got {v!r}")
    return t  # type: ignore[return-value]


@dataclass(frozen=True)
class ArchSpec:
    in_channels: int
    out_channels: int
    patch_size: Triple
    stage_widths: tuple[int, ...]
    downsample: tuple[Triple, ...]
    n_cnn_stages: int
    schedule: AttentionSchedule
    kv_projection_len: int = 48
    n_heads: int = 4
    lka_kernels: Triple = (5, 7, 3)
    deform_kernel: int = 3
    upsample: str = "transposed"

    @property
    def n_stages(self) -> int:
        return len(self.stage_widths)

    def stage_shapes(self) -> list[Triple]:
        """Spatial shape at the output of every encoder stage."""
        shapes = []
        cur = list(self.patch_size)
        for f in self.downsample:
            cur = [c // a for c, a in zip(cur, f)]
            shapes.append(tuple(cur))
        return shapes

    def stage_kinds(self) -> list[tuple[str, str] | None]:
        """``None`` for ResBlock stages, else ``(vit_kind, cnn_kind)``."""
        kinds: list[tuple[str, str] | None] = [None] * self.n_cnn_stages
        kinds += list(zip(self.schedule.vit_kinds, self.schedule.cnn_kinds))
        return kinds

    def with_schedule(self, text: str | AttentionSchedule) -> "ArchSpec":
        """Same architecture with another schedule.

        The stage list is truncated or extended (doubling widths, uniform
        factor 2) so that its length matches the new schedule.
        """
        sched = parse_schedule(text) if isinstance(text, str) else text
        n = self.n_cnn_stages + len(sched)
        widths = list(self.stage_widths[:n])
        down = list(self.downsample[:n])
        while len(widths) < n:
            widths.append(widths[-1] * 2)
            down.append((2, 2, 2))
        return dataclasses.replace(self, schedule=sched, stage_widths=tuple(widths), downsample=tuple(down))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["schedule"] = self.schedule.render()
        d["patch_size"] = list(self.patch_size)
        d["stage_widths"] = list(self.stage_widths)
        d["downsample"] = [list(f) for f in self.downsample]
        d["lka_kernels"] = list(self.lka_kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown arch keys: {sorted(unknown)}")
        d = dict(d)
        if "schedule" in d and isinstance(d["schedule"], str):
            d["schedule"] = parse_schedule(d["schedule"])
        if "patch_size" in d:
            d["patch_size"] = _triple(d["patch_size"])
        if "lka_kernels" in d:
            d["lka_kernels"] = _triple(d["lka_kernels"])
        if "stage_widths" in d:
            d["stage_widths"] = tuple(int(w) for w in d["stage_widths"])
        if "downsample" in d:
            d["downsample"] = tuple(_triple(f) for f in d["downsample"])
        return cls(**d)

    def spec_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class TrainSpec:
    base_lr: float = 0.01
    momentum: float = 0.99
    weight_decay: float = 3e-5
    epochs: int = 1000
    iters_per_epoch: int = 250
    poly_power: float = 0.9
    batch_size: int = 2
    loss_weights: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if not self.poly_power > 0:
            raise ConfigError("poly_power must be > 0")
        for name in ("epochs", "iters_per_epoch", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive int")

    @property
    def total_iters(self) -> int:
        return self.epochs * self.iters_per_epoch

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        d = dict(d)
        if "loss_weights" in d:
            d["loss_weights"] = tuple(float(w) for w in d["loss_weights"])
        return cls(**d)


def validate(spec: ArchSpec) -> list[str]:
    """Return every violated invariant as ``"field: rule"``; empty when valid."""
    out: list[str] = []
    for name in ("in_channels", "out_channels", "n_cnn_stages", "kv_projection_len", "n_heads", "deform_kernel"):
        if getattr(spec, name) < 1:
            out.append(f"{name}: must be a positive int")
    if any(p < 1 for p in spec.patch_size):
        out.append("patch_size: all dims must be positive")
    if any(w < 1 for w in spec.stage_widths):
        out.append("stage_widths: all widths must be positive")
    n_expected = spec.n_cnn_stages + len(spec.schedule)
    if not (len(spec.downsample) == len(spec.stage_widths) == n_expected):
        out.append(
            f"stage_widths/downsample: lengths {len(spec.stage_widths)}/{len(spec.downsample)} "
            f"must equal n_cnn_stages + len(schedule) = {n_expected}"
        )
        return out
    if spec.upsample not in ("transposed", "trilinear"):
        out.append("upsample: must be 'transposed' or 'trilinear'")
    if any(k < 1 or k % 2 == 0 for k in (*spec.lka_kernels[:2], spec.deform_kernel)):
        out.append("lka_kernels/deform_kernel: kernels must be odd positive ints")

    cur = list(spec.patch_size)
    for i, f in enumerate(spec.downsample):
        for axis, (c, a) in enumerate(zip(cur, f)):
            if a not in (1, 2):
                out.append(f"downsample[{i}]: axis {axis} factor {a} not in {{1, 2}}")
            elif c % a:
                out.append(f"downsample[{i}]: axis {axis} factor {a} does not divide running dim {c}")
        cur = [max(c // max(a, 1), 0) for c, a in zip(cur, f)]
        if any(c < 1 for c in cur):
            out.append(f"downsample[{i}]: spatial shape collapses to zero")
            return out

    for i, (shape, kinds) in enumerate(zip(spec.stage_shapes(), spec.stage_kinds())):
        if kinds is None:
            # ResBlock stages expand channels through a grouped conv
            prev = spec.stage_widths[max(i - 1, 0)]
            if spec.stage_widths[i] % prev:
                out.append(f"stage_widths[{i}]: ResBlock width {spec.stage_widths[i]} "
                           f"is not a multiple of the previous width {prev}")
            continue
        width = spec.stage_widths[i]
        if width % spec.n_heads:
            out.append(f"stage_widths[{i}]: width {width} not divisible by n_heads={spec.n_heads}")
        n_tokens = shape[0] * shape[1] * shape[2]
        # the n -> p projection only exists on spatial self-attention stages
        if kinds[0] == "S" and spec.kv_projection_len >= n_tokens:
            out.append(
                f"kv_projection_len: p={spec.kv_projection_len} must be < n={n_tokens} tokens at stage {i}"
            )
    return out


def check(spec: ArchSpec) -> ArchSpec:
    problems = validate(spec)
    if problems:
        raise ConfigError("invalid ArchSpec: " + "; ".join(problems))
    return spec


DEFAULT_WIDTHS = (36, 72, 144, 224, 320)
_UNIFORM2 = ((2, 2, 2),) * 5


def _arch(**kw) -> ArchSpec:
    base = dict(
        n_cnn_stages=2,
        stage_widths=DEFAULT_WIDTHS,
        schedule=parse_schedule("SSC-DDD"),
    )
    base.update(kw)
    return ArchSpec(**base)


PRESETS: dict[str, tuple[ArchSpec, TrainSpec]] = {
    "synapse": (
        _arch(in_channels=1, out_channels=9, patch_size=(128, 128, 64),
              downsample=((2, 2, 1),) + ((2, 2, 2),) * 4),
        TrainSpec(base_lr=0.003),
    ),
    "lung": (
        _arch(in_channels=1, out_channels=2, patch_size=(192, 192, 32),
              downsample=((2, 2, 1), (2, 2, 1)) + ((2, 2, 2),) * 3),
        TrainSpec(base_lr=0.003),
    ),
    "brats": (
        _arch(in_channels=4, out_channels=3, patch_size=(128, 128, 128), downsample=_UNIFORM2),
        TrainSpec(base_lr=0.01),
    ),
    "la": (
        _arch(in_channels=1, out_channels=2, patch_size=(96, 96, 96), downsample=_UNIFORM2),
        TrainSpec(base_lr=0.01),
    ),
    # desk-scale presets
    "toy8": (
        _arch(in_channels=2, out_channels=3, patch_size=(32, 32, 32),
              stage_widths=tuple(w // 4 for w in DEFAULT_WIDTHS[:4]),
              downsample=_UNIFORM2[:4], schedule=parse_schedule("SC-DD"),
              kv_projection_len=16),
        TrainSpec(base_lr=0.01, epochs=6, iters_per_epoch=100),
    ),
    "micro": (
        _arch(in_channels=1, out_channels=2, patch_size=(8, 8, 8), stage_widths=(2, 4, 4),
              downsample=((2, 2, 2), (2, 2, 2), (1, 1, 1)), schedule=parse_schedule("S-D"),
              kv_projection_len=4, n_heads=2, lka_kernels=(3, 3, 2)),
        TrainSpec(base_lr=0.01, epochs=1, iters_per_epoch=10),
    ),
}


def preset(name: str) -> tuple[ArchSpec, TrainSpec]:
    try:
        return PRESETS[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass(frozen=True)
class RunConfig:
    arch: ArchSpec
    train: TrainSpec
    data: dict = field(default_factory=dict)


def load_config(preset_name: str | None = None, path: str | Path | None = None,
                schedule: str | None = None) -> RunConfig:
    """Resolve preset + optional JSON overrides + optional schedule override.

    The JSON file may contain only the top-level keys ``arch``, ``train`` and
    ``data``; any other key (at any level of ``arch``/``train``) is an error.
    """
    arch, train = preset(preset_name or "toy8")
    data: dict = {}
    if path is not None:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(raw, dict):
            raise ConfigError("config root must be an object")
        unknown = set(raw) - {"arch", "train", "data"}
        if unknown:
            raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
        if "arch" in raw:
            arch = ArchSpec.from_dict({**arch.to_dict(), **raw["arch"]})
        if "train" in raw:
            train = TrainSpec.from_dict({**train.to_dict(), **raw["train"]})
        data = dict(raw.get("data", {}))
    if schedule is not None:
        arch = arch.with_schedule(schedule)
    return RunConfig(check(arch), train, data)


def table4_schedules() -> list[str]:
    return ["SSS-DDD", "CCC-DDD", "SSC-DDD", "SCC-DDD", "SSC-DDI", "SSC-III", "SSC-LLL", "SC-DD"]


_SCHEDULE_RE = re.compile(r"^[SC]+-[DLI]+$")


def is_schedule(text: str) -> bool:
    return bool(_SCHEDULE_RE.match(text)) and len(text.split("-")[0]) == len(text.split("-")[1])


__all__: Sequence[str] = [
    "ArchSpec", "AttentionSchedule", "TrainSpec", "RunConfig", "ScheduleParseError", "ConfigError",
    "parse_schedule", "render_schedule", "validate", "check", "preset", "PRESETS", "load_config",
    "table4_schedules", "is_schedule",
]
