import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gradreg.volume import (
    DataSizeMismatchError,
    LabelMask,
    MalformedHeaderError,
    UnsupportedNiftiFeatureError,
    UnsupportedScalarTypeError,
    Volume,
    crop_pad,
    load_mask,
    load_volume,
    normalize_intensity,
    save_mask,
    save_volume,
    volume_from_flat,
)

f32_volumes = hnp.arrays(
    np.float32,
    hnp.array_shapes(min_dims=3, max_dims=3, min_side=1, max_side=6),
    elements=st.floats(-100, 100, width=32),
)


def test_volume_invariants():
    v = Volume(np.zeros((2, 3, 4)), spacing=(1, 2, 3))
    assert v.dims == (4, 3, 2)
    assert v.flat().shape == (24,)
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2)), spacing=(0, 1, 1))


def test_volume_data_is_read_only():
    v = Volume(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1.0


def test_volume_from_flat_is_x_fastest():
    v = volume_from_flat((3, 2, 1), np.arange(6))
    assert v.data[0, 0, 1] == 1  # x index moves fastest
    assert v.data[0, 1, 0] == 3


def test_labelmask_rejects_negative_and_fractional():
    with pytest.raises(ValueError):
        LabelMask(-np.ones((2, 2, 2), dtype=np.int32))
    with pytest.raises(ValueError):
        LabelMask(np.full((2, 2, 2), 0.5))


def test_normalize_examples():
    v = volume_from_flat((4, 1, 1), [2.0, 4.0, 6.0, 8.0])
    n = normalize_intensity(v)
    np.testing.assert_array_equal(n.flat(), [0.0, 1 / 3, 2 / 3, 1.0])
    assert n.intensity_range == (2.0, 8.0)

    const = Volume(np.full((2, 2, 2), 7.0))
    assert np.all(normalize_intensity(const).data == 0.0)

    full_range = volume_from_flat((4, 1, 1), [0.0, 1 / 3, 2 / 3, 1.0])
    again = normalize_intensity(full_range)
    assert again.data.tobytes() == full_range.data.tobytes()


@given(f32_volumes)
@settings(max_examples=30, deadline=None)
def test_normalize_idempotent_and_order_preserving(arr):
    v = Volume(arr)
    n1 = normalize_intensity(v)
    n2 = normalize_intensity(n1)
    assert n1.data.tobytes() == n2.data.tobytes()
    assert float(n1.data.min()) >= 0.0 and float(n1.data.max()) <= 1.0
    if v.data.max() > v.data.min():
        # monotone: sorting by the original values leaves the normalized
        # values non-decreasing (near-ties may merge in float arithmetic)
        order = np.argsort(v.flat(), kind="stable")
        assert np.all(np.diff(n1.flat()[order]) >= 0)


def test_normalize_strict_order_on_separated_values():
    vals = np.array([3.0, -1.0, 10.0, 0.5, 7.25, -4.0, 2.0, 9.0])
    v = volume_from_flat((8, 1, 1), vals)
    n = normalize_intensity(v)
    assert np.array_equal(np.argsort(vals), np.argsort(n.flat()))


def test_crop_pad_identity_crop_and_pad():
    rng = np.random.default_rng(0)
    v = Volume(rng.random((4, 4, 4)))
    same = crop_pad(v, (4, 4, 4))
    assert same.data.tobytes() == v.data.tobytes()

    big = Volume(rng.random((6, 6, 6)))
    cropped = crop_pad(big, (4, 4, 4))
    np.testing.assert_array_equal(cropped.data, big.data[1:5, 1:5, 1:5])

    small = Volume(rng.random((2, 2, 2)))
    padded = crop_pad(small, (4, 4, 4))
    np.testing.assert_array_equal(padded.data[1:3, 1:3, 1:3], small.data)
    outside = padded.data.copy()
    outside[1:3, 1:3, 1:3] = 0.0
    assert np.all(outside == 0.0)


@given(f32_volumes, st.integers(1, 7), st.integers(1, 7), st.integers(1, 7))
@settings(max_examples=30, deadline=None)
def test_crop_pad_roundtrip_restores_surviving_region(arr, tx, ty, tz):
    v = Volume(arr)
    once = crop_pad(v, (tx, ty, tz))
    back = crop_pad(once, v.dims)
    # the surviving region is whatever a direct crop to min-dims keeps
    keep = crop_pad(crop_pad(v, tuple(min(t, d) for t, d in zip((tx, ty, tz), v.dims))), v.dims)
    assert back.data.tobytes() == keep.data.tobytes()


def test_save_load_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    v = Volume(rng.random((3, 4, 5)).astype(np.float32), spacing=(1.0, 0.5, 2.0))
    save_volume(v, tmp_path / "a.vol")
    back = load_volume(tmp_path / "a.vol")
    assert back.data.tobytes() == v.data.tobytes()
    assert back.spacing == v.spacing
    assert (tmp_path / "a.volh").exists()


@given(f32_volumes)
@settings(max_examples=25, deadline=None)
def test_roundtrip_property(tmp_path_factory, arr):
    tmp = tmp_path_factory.mktemp("vols")
    v = Volume(arr)
    save_volume(v, tmp / "v.vol")
    assert load_volume(tmp / "v.vol").data.tobytes() == v.data.tobytes()


def test_save_payload_bytes_x_fastest(tmp_path):
    v = volume_from_flat((3, 2, 1), [0.0, 1.0, 2.0, 3.0, 4.0, 5.0])
    save_volume(v, tmp_path / "seq.vol")
    payload = (tmp_path / "seq.vol").read_bytes()
    assert payload == struct.pack("<6f", 0, 1, 2, 3, 4, 5)


def test_save_zero_filled_1x1x1(tmp_path):
    save_volume(Volume(np.zeros((1, 1, 1))), tmp_path / "z.vol")
    assert len((tmp_path / "z.vol").read_bytes()) == 4
    header = (tmp_path / "z.volh").read_text()
    assert "dims=1,1,1" in header and "dtype=float32" in header


def test_raw_loader_error_taxonomy(tmp_path):
    v = Volume(np.zeros((2, 2, 2)))
    save_volume(v, tmp_path / "v.vol")

    (tmp_path / "v.vol").write_bytes(b"\x00" * 12)  # wrong payload size
    with pytest.raises(DataSizeMismatchError):
        load_volume(tmp_path / "v.vol")

    save_volume(v, tmp_path / "v.vol")
    hdr = tmp_path / "v.volh"
    hdr.write_text("dims=2,2,2\nspacing=1,1,1\ndtype=float64\n")
    with pytest.raises(UnsupportedScalarTypeError):
        load_volume(tmp_path / "v.vol")

    hdr.write_text("dims=2,2\nspacing=1,1,1\ndtype=float32\n")
    with pytest.raises(MalformedHeaderError):
        load_volume(tmp_path / "v.vol")

    hdr.write_text("nonsense\n")
    with pytest.raises(MalformedHeaderError):
        load_volume(tmp_path / "v.vol")

    with pytest.raises(FileNotFoundError):
        load_volume(tmp_path / "missing.vol")


def test_int16_raw_payload(tmp_path):
    (tmp_path / "i.vol").write_bytes(struct.pack("<8h", *range(8)))
    (tmp_path / "i.volh").write_text("dims=2,2,2\nspacing=1,1,1\ndtype=int16\n")
    v = load_volume(tmp_path / "i.vol")
    np.testing.assert_array_equal(v.flat(), np.arange(8, dtype=np.float64))


def test_mask_roundtrip(tmp_path):
    m = LabelMask(np.arange(8).reshape(2, 2, 2) % 3)
    save_mask(m, tmp_path / "m.vol")
    back = load_mask(tmp_path / "m.vol")
    np.testing.assert_array_equal(back.labels, m.labels)
    assert back.label_set() == [1, 2]


# ---------------------------------------------------------------------------
# NIfTI-1: files are built byte-by-byte here, independent of the reader.
# ---------------------------------------------------------------------------


def make_nifti(
    dims=(4, 4, 4),
    datatype=16,
    bitpix=32,
    pixdim=(1.0, 1.0, 1.0),
    payload=None,
    magic=b"n+1\x00",
    scl_slope=0.0,
    scl_inter=0.0,
    sform_code=0,
    srow=None,
    qform_code=0,
    quatern=(0.0, 0.0, 0.0),
    vox_offset=352.0,
    sizeof_hdr=348,
):
    nx, ny, nz = dims
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, sizeof_hdr)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, datatype, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *pixdim, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<3f", hdr, 108, vox_offset, scl_slope, scl_inter)
    struct.pack_into("<2h", hdr, 252, qform_code, sform_code)
    struct.pack_into("<3f", hdr, 256, *quatern)
    if srow is not None:
        struct.pack_into("<12f", hdr, 280, *srow)
    hdr[344:348] = magic
    if payload is None:
        n = nx * ny * nz
        if datatype == 16:
            payload = struct.pack(f"<{n}f", *range(n))
        else:
            payload = struct.pack(f"<{n}h", *range(n))
    return bytes(hdr) + b"\x00" * (int(vox_offset) - 348) + payload


def test_nifti_int16_read(tmp_path):
    path = tmp_path / "a.nii"
    path.write_bytes(make_nifti(datatype=4, bitpix=16))
    v = load_volume(path)
    assert v.dims == (4, 4, 4)
    np.testing.assert_array_equal(v.flat(), np.arange(64, dtype=np.float64))
    assert v.spacing == (1.0, 1.0, 1.0)


def test_nifti_float32_read_with_spacing(tmp_path):
    path = tmp_path / "b.nii"
    path.write_bytes(make_nifti(datatype=16, bitpix=32, pixdim=(2.0, 1.5, 1.0)))
    v = load_volume(path)
    assert v.spacing == (2.0, 1.5, 1.0)
    np.testing.assert_array_equal(v.flat(), np.arange(64, dtype=np.float64))


def test_nifti_big_endian(tmp_path):
    blob = bytearray(make_nifti(datatype=4, bitpix=16))
    # rebuild fully big-endian
    nx = ny = nz = 4
    hdr = bytearray(348)
    struct.pack_into(">i", hdr, 0, 348)
    struct.pack_into(">8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into(">2h", hdr, 70, 4, 16)
    struct.pack_into(">8f", hdr, 76, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into(">3f", hdr, 108, 352.0, 0.0, 0.0)
    hdr[344:348] = b"n+1\x00"
    payload = struct.pack(">64h", *range(64))
    path = tmp_path / "be.nii"
    path.write_bytes(bytes(hdr) + b"\x00" * 4 + payload)
    v = load_volume(path)
    np.testing.assert_array_equal(v.flat(), np.arange(64, dtype=np.float64))


@pytest.mark.parametrize(
    "kwargs,exc",
    [
        (dict(datatype=8, bitpix=32), UnsupportedScalarTypeError),
        (dict(sizeof_hdr=340), MalformedHeaderError),
        (dict(magic=b"ni1\x00"), UnsupportedNiftiFeatureError),
        (dict(scl_slope=2.0), UnsupportedNiftiFeatureError),
        (
            dict(sform_code=1, srow=(1, 0.5, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0)),
            UnsupportedNiftiFeatureError,
        ),
        (dict(qform_code=1, quatern=(0.3, 0.0, 0.0)), UnsupportedNiftiFeatureError),
        (dict(payload=b"\x00" * 10), DataSizeMismatchError),
        (dict(bitpix=16), MalformedHeaderError),
    ],
)
def test_nifti_rejections(tmp_path, kwargs, exc):
    path = tmp_path / "bad.nii"
    path.write_bytes(make_nifti(**kwargs))
    with pytest.raises(exc):
        load_volume(path)


def test_nifti_gzip_rejected(tmp_path):
    import gzip

    path = tmp_path / "c.nii"
    path.write_bytes(gzip.compress(make_nifti()))
    with pytest.raises(UnsupportedNiftiFeatureError):
        load_volume(path)


def test_nifti_identity_sform_accepted(tmp_path):
    path = tmp_path / "d.nii"
    path.write_bytes(
        make_nifti(sform_code=1, srow=(1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0))
    )
    assert load_volume(path).dims == (4, 4, 4)
