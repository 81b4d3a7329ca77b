"""Volume files, synthetic phantoms and dataset splits.

Volume format: ``<base>.json`` header + ``<base>.raw`` little-endian blob
holding a C-ordered ``(C, D, H, W)`` array. Header keys: ``format``,
``shape``, ``dtype`` (``float32`` | ``uint8``), ``spacing`` (mm, z/y/x),
``names`` (channel or label names).
"""

from __future__ import annotations

import fcntl
import gzip
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

VOL_FORMAT = "lhunet-vol/1"
_DTYPES = {"float32": np.dtype("<f4"), "uint8": np.dtype("u1")}


class VolumeFormatError(ValueError):
    pass


@dataclass
class VolumeRecord:
    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.voxels.ndim == 3:
            self.voxels = self.voxels[None]
        if self.voxels.ndim != 4:
            raise VolumeFormatError("voxels must be (C, D, H, W)")
        if self.voxels.dtype not in (np.float32, np.uint8):
            kind = "uint8" if self.voxels.dtype.kind in "iub" else "float32"
            self.voxels = self.voxels.astype(_DTYPES[kind])
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise VolumeFormatError("spacing must be three positive numbers")

    @property
    def dtype_tag(self) -> str:
        return "uint8" if self.voxels.dtype == np.uint8 else "float32"

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.voxels.shape)

    def header(self) -> dict:
        return {"format": VOL_FORMAT, "shape": list(self.shape), "dtype": self.dtype_tag,
                "spacing": list(self.spacing), "names": list(self.names)}


def _paths(path) -> tuple[Path, Path]:
    p = str(path)
    for ext in (".json", ".raw"):
        if p.endswith(ext):
            p = p[: -len(ext)]
    return Path(p + ".json"), Path(p + ".raw")


def write_volume(path, rec: VolumeRecord) -> Path:
    hdr, blob = _paths(path)
    hdr.parent.mkdir(parents=True, exist_ok=True)
    data = np.ascontiguousarray(rec.voxels, dtype=_DTYPES[rec.dtype_tag])
    with open(blob, "ab") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            fh.truncate(0)
            fh.write(data.tobytes())
            fh.flush()
            hdr.write_text(json.dumps(rec.header(), indent=1), encoding="utf-8")
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)
    return hdr


def read_volume(path) -> VolumeRecord:
    p = str(path)
    if p.endswith((".nii", ".nii.gz")):
        return read_nifti(p)
    hdr_path, blob_path = _paths(path)
    hdr = json.loads(hdr_path.read_text(encoding="utf-8"))
    if hdr.get("format") != VOL_FORMAT:
        raise VolumeFormatError(f"{hdr_path}: not a {VOL_FORMAT} header")
    if hdr.get("dtype") not in _DTYPES:
        raise VolumeFormatError(f"{hdr_path}: unknown dtype {hdr.get('dtype')!r}")
    dt = _DTYPES[hdr["dtype"]]
    shape = tuple(int(s) for s in hdr["shape"])
    raw = blob_path.read_bytes()
    expected = math.prod(shape) * dt.itemsize
    if len(raw) != expected:
        raise VolumeFormatError(f"{blob_path}: blob has {len(raw)} bytes, header implies {expected}")
    arr = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
    return VolumeRecord(arr, tuple(hdr.get("spacing", (1, 1, 1))), list(hdr.get("names", [])))


# NIfTI-1 datatype codes -> numpy
_NIFTI_TYPES = {2: "u1", 4: "i2", 8: "i4", 16: "f4", 64: "f8", 256: "i1", 512: "u2", 768: "u4"}


def read_nifti(path) -> VolumeRecord:
    """Read-only NIfTI-1 ingestion (``.nii`` / ``.nii.gz``).

    Axes are kept in file order (x, y, z) as (D, H, W); a 4th dimension
    becomes channels. Integer data maps to uint8 labels only if it fits.
    """
    raw = Path(path).read_bytes()
    if str(path).endswith(".gz"):
        raw = gzip.decompress(raw)
    if struct.unpack("<i", raw[:4])[0] == 348:
        end = "<"
    elif struct.unpack(">i", raw[:4])[0] == 348:
        end = ">"
    else:
        raise VolumeFormatError(f"{path}: not a NIfTI-1 file")
    dim = struct.unpack(end + "8h", raw[40:56])
    datatype = struct.unpack(end + "h", raw[70:72])[0]
    pixdim = struct.unpack(end + "8f", raw[76:108])
    vox_offset = int(struct.unpack(end + "f", raw[108:112])[0])
    slope, inter = struct.unpack(end + "2f", raw[112:120])
    if datatype not in _NIFTI_TYPES:
        raise VolumeFormatError(f"{path}: unsupported NIfTI datatype {datatype}")
    nd = dim[0]
    shape = tuple(max(int(d), 1) for d in dim[1:1 + nd])
    dt = np.dtype(_NIFTI_TYPES[datatype]).newbyteorder(end)
    arr = np.frombuffer(raw, dtype=dt, count=math.prod(shape), offset=vox_offset).reshape(shape, order="F")
    if nd == 3:
        arr = arr[None]
    elif nd == 4:
        arr = np.moveaxis(arr, 3, 0)
    else:
        raise VolumeFormatError(f"{path}: expected 3-D or 4-D data, got {nd}-D")
    if slope not in (0.0, 1.0) or inter != 0.0:
        arr = arr.astype(np.float64) * (slope or 1.0) + inter
    if arr.dtype.kind in "iu" and arr.min() >= 0 and arr.max() <= 255:
        arr = arr.astype(np.uint8)
    else:
        arr = arr.astype(np.float32)
    spacing = tuple(float(abs(s)) or 1.0 for s in pixdim[1:4])
    return VolumeRecord(np.ascontiguousarray(arr), spacing)


# ------------------------------------------------------------ phantoms

@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple[int, int, int] = (32, 32, 32)
    n_blobs: int = 3
    radius_range: tuple[float, float] = (4.0, 8.0)
    n_classes: int = 3  # including background
    channels: int = 2
    profiles: tuple[tuple[float, ...], ...] | None = None  # (n_classes, channels)
    noise: float = 0.05
    seed: int = 0

    def intensity_profiles(self) -> np.ndarray:
        if self.profiles is not None:
            prof = np.asarray(self.profiles, dtype=np.float32)
            if prof.shape != (self.n_classes, self.channels):
                raise ValueError("profiles must be (n_classes, channels)")
            return prof
        base = np.arange(self.n_classes, dtype=np.float32) / max(self.n_classes - 1, 1)
        cols = [base if ch % 2 == 0 else 1 - base for ch in range(self.channels)]
        return np.stack(cols, axis=1)


def make_phantom(spec: PhantomSpec) -> tuple[VolumeRecord, VolumeRecord]:
    """Ellipsoidal blobs with class-dependent intensity plus Gaussian noise.

    Blob ``i`` gets class ``1 + i % (n_classes - 1)``; later blobs overwrite
    earlier ones. The label is the exact blob mask.
    """
    rng = np.random.default_rng(spec.seed)
    shape = tuple(spec.shape)
    lo, hi = spec.radius_range
    if any(2 * hi + 1 > s for s in shape) and spec.n_blobs:
        raise ValueError("radius_range too large for the volume")
    label = np.zeros(shape, dtype=np.uint8)
    grid = np.indices(shape, dtype=np.float64)
    for i in range(spec.n_blobs):
        radii = rng.uniform(lo, hi, size=3)
        center = np.array([rng.uniform(r, s - 1 - r) for r, s in zip(radii, shape)])
        d = sum(((grid[a] - center[a]) / radii[a]) ** 2 for a in range(3))
        label[d <= 1.0] = 1 + i % max(spec.n_classes - 1, 1)
    prof = spec.intensity_profiles()
    image = np.moveaxis(prof[label], -1, 0).astype(np.float32)
    if spec.noise > 0:
        image += rng.normal(0.0, spec.noise, size=image.shape).astype(np.float32)
    names = [f"ch{c}" for c in range(spec.channels)]
    return VolumeRecord(image, names=names), VolumeRecord(label, names=[f"class{k}" for k in range(spec.n_classes)])


def write_phantom_dataset(out_dir, spec: PhantomSpec, count: int) -> list[str]:
    """Write ``count`` phantoms (seeds ``spec.seed + i``) as ``images/`` + ``labels/``."""
    out = Path(out_dir)
    ids = []
    for i in range(count):
        rid = f"phantom_{i:03d}"
        img, lab = make_phantom(PhantomSpec(**{**spec.__dict__, "seed": spec.seed + i}))
        write_volume(out / "images" / rid, img)
        write_volume(out / "labels" / rid, lab)
        ids.append(rid)
    return ids


def list_records(dataset_dir) -> list[str]:
    img_dir = Path(dataset_dir) / "images"
    if not img_dir.is_dir():
        raise FileNotFoundError(f"{img_dir} does not exist")
    return sorted(p.name[: -len(".json")] for p in img_dir.glob("*.json"))


def load_dataset(dataset_dir, ids: Sequence[str] | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
    d = Path(dataset_dir)
    ids = list(ids) if ids is not None else list_records(d)
    out = []
    for rid in ids:
        img = read_volume(d / "images" / rid).voxels.astype(np.float32)
        lab = read_volume(d / "labels" / rid).voxels[0].astype(np.int64)
        out.append((img, lab))
    return out


# ------------------------------------------------------------ splits

def split(records, ratios: Sequence[float] | None = None, k_folds: int | None = None,
          seed: int = 0, write: bool = True) -> dict:
    """Deterministic train/val split or k-fold partition.

    ``records`` is a dataset directory (ids read from ``images/``) or a list
    of ids. Writes ``splits.json`` into the directory when one is given.
    """
    dataset_dir = None
    if isinstance(records, (str, os.PathLike)):
        dataset_dir = Path(records)
        ids = list_records(dataset_dir)
    else:
        ids = sorted(records)
    if (ratios is None) == (k_folds is None):
        raise ValueError("give exactly one of ratios or k_folds")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    manifest: dict = {"seed": seed, "n_records": len(ids)}
    if k_folds is not None:
        if not 1 < k_folds <= max(len(ids), 2):
            raise ValueError("k_folds must lie in [2, n_records]")
        folds = [sorted(order[i::k_folds]) for i in range(k_folds)]
        manifest["folds"] = folds
        manifest["splits"] = [
            {"train": sorted(x for j, f in enumerate(folds) if j != i for x in f), "val": folds[i]}
            for i in range(k_folds)
        ]
    else:
        r = np.asarray(ratios, dtype=np.float64)
        if r.ndim != 1 or len(r) != 2 or (r < 0).any() or r.sum() <= 0:
            raise ValueError("ratios must be a pair of non-negative numbers, e.g. (80, 20)")
        n_train = int(round(len(ids) * r[0] / r.sum()))
        manifest["splits"] = [{"train": sorted(order[:n_train]), "val": sorted(order[n_train:])}]
    if write and dataset_dir is not None:
        (dataset_dir / "splits.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return manifest
