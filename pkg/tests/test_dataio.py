import gzip
import json
import math
import struct

import numpy as np
import pytest

from lhunet import dataio as D


# ------------------------------------------------------------ volume files

def test_float_round_trip_with_spacing(tmp_path):
    arr = np.random.default_rng(0).standard_normal((2, 3, 4, 5)).astype(np.float32)
    rec = D.VolumeRecord(arr, (1.5, 0.8, 0.8), ["t1", "t2"])
    D.write_volume(tmp_path / "v", rec)
    back = D.read_volume(tmp_path / "v.json")
    assert np.array_equal(back.voxels, arr) and back.voxels.dtype == np.float32
    assert back.spacing == (1.5, 0.8, 0.8) and back.names == ["t1", "t2"]
    assert (tmp_path / "v.raw").stat().st_size == arr.nbytes


def test_uint8_labels_and_3d_input(tmp_path):
    lab = np.random.default_rng(1).integers(0, 4, (6, 5, 4))
    D.write_volume(tmp_path / "lab", D.VolumeRecord(lab))
    back = D.read_volume(tmp_path / "lab")
    assert back.voxels.dtype == np.uint8 and back.shape == (1, 6, 5, 4)
    assert np.array_equal(back.voxels[0], lab)


def test_header_contents(tmp_path):
    D.write_volume(tmp_path / "h", D.VolumeRecord(np.zeros((1, 2, 2, 2), np.float32)))
    hdr = json.loads((tmp_path / "h.json").read_text())
    assert hdr == {"format": D.VOL_FORMAT, "shape": [1, 2, 2, 2], "dtype": "float32",
                   "spacing": [1.0, 1.0, 1.0], "names": []}


def test_overwrite_shrinks_blob(tmp_path):
    D.write_volume(tmp_path / "o", D.VolumeRecord(np.zeros((1, 8, 8, 8), np.float32)))
    D.write_volume(tmp_path / "o", D.VolumeRecord(np.ones((1, 2, 2, 2), np.float32)))
    assert D.read_volume(tmp_path / "o").voxels.sum() == 8


def test_truncated_blob(tmp_path):
    D.write_volume(tmp_path / "t", D.VolumeRecord(np.zeros((1, 4, 4, 4), np.float32)))
    blob = tmp_path / "t.raw"
    blob.write_bytes(blob.read_bytes()[:-1])
    with pytest.raises(D.VolumeFormatError, match="bytes"):
        D.read_volume(tmp_path / "t")


def test_unknown_dtype_and_format(tmp_path):
    D.write_volume(tmp_path / "u", D.VolumeRecord(np.zeros((1, 2, 2, 2), np.float32)))
    hdr = json.loads((tmp_path / "u.json").read_text())
    (tmp_path / "u.json").write_text(json.dumps({**hdr, "dtype": "int16"}))
    with pytest.raises(D.VolumeFormatError, match="dtype"):
        D.read_volume(tmp_path / "u")
    (tmp_path / "u.json").write_text(json.dumps({**hdr, "format": "other"}))
    with pytest.raises(D.VolumeFormatError):
        D.read_volume(tmp_path / "u")


def test_bad_spacing_rejected():
    with pytest.raises(D.VolumeFormatError):
        D.VolumeRecord(np.zeros((1, 2, 2, 2), np.float32), (1.0, 0.0, 1.0))


# ------------------------------------------------------------ NIfTI ingestion

def nifti_bytes(arr_xyz: np.ndarray, code: int, pixdim=(1.0, 1.0, 1.0), slope=1.0, inter=0.0) -> bytes:
    """Minimal little-endian single-file NIfTI-1 (header written field by field)."""
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    dims = [arr_xyz.ndim, *arr_xyz.shape] + [1] * (7 - arr_xyz.ndim)
    struct.pack_into("<8h", hdr, 40, *dims)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, arr_xyz.dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *pixdim, 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<2f", hdr, 112, slope, inter)
    hdr[344:348] = b"n+1\0"
    return bytes(hdr) + b"\0" * 4 + arr_xyz.astype(arr_xyz.dtype.newbyteorder("<")).tobytes(order="F")


def test_read_nifti_float(tmp_path):
    arr = np.random.default_rng(2).standard_normal((4, 3, 2)).astype(np.float32)
    (tmp_path / "a.nii").write_bytes(nifti_bytes(arr, 16, (0.5, 0.7, 2.0)))
    rec = D.read_volume(tmp_path / "a.nii")
    assert rec.shape == (1, 4, 3, 2)
    assert np.array_equal(rec.voxels[0], arr)
    assert rec.spacing == pytest.approx((0.5, 0.7, 2.0))


def test_read_nifti_gz_labels(tmp_path):
    lab = np.random.default_rng(3).integers(0, 3, (3, 4, 5)).astype(np.int16)
    (tmp_path / "l.nii.gz").write_bytes(gzip.compress(nifti_bytes(lab, 4)))
    rec = D.read_volume(tmp_path / "l.nii.gz")
    assert rec.voxels.dtype == np.uint8 and np.array_equal(rec.voxels[0], lab)


def test_read_nifti_4d_and_scaling(tmp_path):
    arr = np.arange(2 * 2 * 2 * 3, dtype=np.int16).reshape(2, 2, 2, 3)
    (tmp_path / "m.nii").write_bytes(nifti_bytes(arr, 4, slope=2.0, inter=1.0))
    rec = D.read_volume(tmp_path / "m.nii")
    assert rec.shape == (3, 2, 2, 2)
    assert np.array_equal(rec.voxels, np.moveaxis(arr, 3, 0) * 2.0 + 1.0)


def test_not_nifti(tmp_path):
    (tmp_path / "x.nii").write_bytes(b"\0" * 400)
    with pytest.raises(D.VolumeFormatError):
        D.read_nifti(tmp_path / "x.nii")


# ------------------------------------------------------------ phantoms

def test_single_blob_volume_matches_ellipsoid():
    r = 6.0
    img, lab = D.make_phantom(D.PhantomSpec(shape=(24, 24, 24), n_blobs=1, radius_range=(r, r), noise=0))
    # lattice points inside a sphere of radius 6 approximate 4/3 pi r^3
    assert (lab.voxels > 0).sum() == pytest.approx(4 / 3 * math.pi * r ** 3, rel=0.03)


def test_phantom_noise_free_intensities_follow_labels():
    spec = D.PhantomSpec(noise=0, seed=4)
    img, lab = D.make_phantom(spec)
    prof = spec.intensity_profiles()
    assert np.array_equal(img.voxels, np.moveaxis(prof[lab.voxels[0]], -1, 0))
    assert set(np.unique(lab.voxels)) <= {0, 1, 2}


def test_phantom_seeded():
    a = D.make_phantom(D.PhantomSpec(seed=5))
    b = D.make_phantom(D.PhantomSpec(seed=5))
    c = D.make_phantom(D.PhantomSpec(seed=6))
    assert np.array_equal(a[0].voxels, b[0].voxels) and np.array_equal(a[1].voxels, b[1].voxels)
    assert not np.array_equal(a[1].voxels, c[1].voxels)


def test_zero_blobs_all_background():
    img, lab = D.make_phantom(D.PhantomSpec(n_blobs=0, noise=0.1))
    assert not lab.voxels.any()
    assert abs(float(img.voxels[0].std()) - 0.1) < 0.01


def test_phantom_noise_level():
    spec = D.PhantomSpec(noise=0.05, seed=7)
    clean, _ = D.make_phantom(D.PhantomSpec(noise=0, seed=7))
    noisy, _ = D.make_phantom(spec)
    assert float((noisy.voxels - clean.voxels).std()) == pytest.approx(0.05, rel=0.05)


def test_phantom_bad_arguments():
    with pytest.raises(ValueError):
        D.make_phantom(D.PhantomSpec(shape=(8, 8, 8), radius_range=(4, 6)))
    with pytest.raises(ValueError):
        D.PhantomSpec(profiles=((0.0,),)).intensity_profiles()


def test_phantom_dataset_on_disk(tmp_path):
    ids = D.write_phantom_dataset(tmp_path, D.PhantomSpec(shape=(16, 16, 16), radius_range=(2, 4)), 3)
    assert ids == D.list_records(tmp_path) == ["phantom_000", "phantom_001", "phantom_002"]
    data = D.load_dataset(tmp_path)
    assert data[0][0].shape == (2, 16, 16, 16) and data[0][1].shape == (16, 16, 16)
    _, lab1 = D.make_phantom(D.PhantomSpec(shape=(16, 16, 16), radius_range=(2, 4), seed=1))
    assert np.array_equal(data[1][1], lab1.voxels[0])


# ------------------------------------------------------------ splits

def test_ratio_split():
    ids = [f"r{i}" for i in range(10)]
    m = D.split(ids, ratios=(80, 20))
    s = m["splits"][0]
    assert len(s["train"]) == 8 and len(s["val"]) == 2
    assert sorted(s["train"] + s["val"]) == sorted(ids)


def test_kfold_split_disjoint():
    ids = [f"r{i:03d}" for i in range(100)]
    m = D.split(ids, k_folds=5, seed=3)
    folds = m["folds"]
    assert [len(f) for f in folds] == [20] * 5
    assert len(set().union(*map(set, folds))) == 100
    for i, s in enumerate(m["splits"]):
        assert set(s["val"]) == set(folds[i]) and not set(s["train"]) & set(s["val"])


def test_split_deterministic_and_seeded():
    ids = [f"r{i}" for i in range(30)]
    assert D.split(ids, ratios=(2, 1), seed=1) == D.split(ids, ratios=(2, 1), seed=1)
    assert D.split(ids, ratios=(2, 1), seed=1) != D.split(ids, ratios=(2, 1), seed=2)


def test_split_writes_manifest(tmp_path):
    D.write_phantom_dataset(tmp_path, D.PhantomSpec(shape=(12, 12, 12), radius_range=(2, 3)), 4)
    m = D.split(tmp_path, k_folds=2)
    assert json.loads((tmp_path / "splits.json").read_text()) == m


def test_split_argument_errors():
    with pytest.raises(ValueError):
        D.split(["a", "b"])
    with pytest.raises(ValueError):
        D.split(["a", "b"], ratios=(1, 1), k_folds=2)
    with pytest.raises(ValueError):
        D.split(["a", "b", "c"], k_folds=4)
