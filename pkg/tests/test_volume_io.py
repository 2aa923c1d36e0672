import gzip
import struct
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oracles import nifti1_header
from subseg.errors import FormatError, RankError, TruncationError, UnsupportedTypeError
from subseg.volume_io import (
    DegenerateNormalizationWarning,
    Modality,
    Volume,
    normalize_intensity,
    parse_raw,
    raw_bytes,
    read_nifti,
    read_raw,
    write_nifti,
    write_raw,
)

VALUES_48 = np.arange(48, dtype=np.float32) * 0.25 - 3.0


@pytest.fixture
def fixture_bytes():
    hdr = nifti1_header(dim=(3, 4, 4, 3, 1, 1, 1, 1), datatype=16, bitpix=32)
    return hdr + VALUES_48.astype("<f4").tobytes()


def test_handbuilt_header_matches_nibabel_dump(tmp_path, fixture_bytes):
    nib = pytest.importorskip("nibabel")
    path = tmp_path / "fx.nii"
    path.write_bytes(fixture_bytes)
    with path.open("rb") as fh:
        hdr = nib.Nifti1Header.from_fileobj(fh, check=True)
    assert hdr["sizeof_hdr"] == 348
    assert hdr["magic"] == b"n+1"
    assert tuple(hdr["dim"]) == (3, 4, 4, 3, 1, 1, 1, 1)
    assert hdr["datatype"] == 16
    assert hdr["bitpix"] == 32
    assert hdr["vox_offset"] == 352
    img = nib.load(str(path))
    # nibabel returns (x, y, z); Fortran order matches x-fastest storage
    ref = np.asarray(img.dataobj, dtype=np.float32)
    np.testing.assert_array_equal(ref.ravel(order="F"), VALUES_48)


def test_read_nifti_handbuilt(tmp_path, fixture_bytes):
    path = tmp_path / "fx.nii"
    path.write_bytes(fixture_bytes)
    vol = read_nifti(path, "T1")
    assert vol.dims == (4, 4, 3)
    assert vol.modality is Modality.T1
    np.testing.assert_array_equal(vol.voxels, VALUES_48)


def test_read_nifti_gzip(tmp_path, fixture_bytes):
    path = tmp_path / "fx.nii.gz"
    path.write_bytes(gzip.compress(fixture_bytes))
    np.testing.assert_array_equal(read_nifti(path, "FLAIR").voxels, VALUES_48)


def test_read_nifti_big_endian(tmp_path):
    hdr = nifti1_header(dim=(3, 4, 4, 3, 1, 1, 1, 1), datatype=16, bitpix=32, endian=">")
    path = tmp_path / "be.nii"
    path.write_bytes(hdr + VALUES_48.astype(">f4").tobytes())
    np.testing.assert_array_equal(read_nifti(path, "T2").voxels, VALUES_48)


def test_scl_slope_and_inter(tmp_path):
    hdr = nifti1_header(dim=(3, 1, 1, 1, 1, 1, 1, 1), datatype=4, bitpix=16, scl_slope=2.0, scl_inter=1.0)
    path = tmp_path / "s.nii"
    path.write_bytes(hdr + np.array([3], dtype="<i2").tobytes())
    assert read_nifti(path, "T1").voxels[0] == 7.0


def test_zero_slope_is_identity(tmp_path):
    hdr = nifti1_header(dim=(3, 1, 1, 1, 1, 1, 1, 1), datatype=4, bitpix=16, scl_slope=0.0, scl_inter=5.0)
    path = tmp_path / "s.nii"
    path.write_bytes(hdr + np.array([3], dtype="<i2").tobytes())
    assert read_nifti(path, "T1").voxels[0] == 3.0


def test_zeroed_magic_is_format_error(tmp_path, fixture_bytes):
    buf = bytearray(fixture_bytes)
    buf[344:348] = b"\x00\x00\x00\x00"
    path = tmp_path / "bad.nii"
    path.write_bytes(bytes(buf))
    with pytest.raises(FormatError, match="magic"):
        read_nifti(path, "T1")


@pytest.mark.parametrize("code", [0, 64, 256, 512, 1024])
def test_unsupported_datatype(tmp_path, code):
    hdr = nifti1_header(dim=(3, 4, 4, 3, 1, 1, 1, 1), datatype=code, bitpix=32)
    path = tmp_path / "t.nii"
    path.write_bytes(hdr + VALUES_48.tobytes())
    with pytest.raises(UnsupportedTypeError):
        read_nifti(path, "T1")


def test_truncated_payload(tmp_path, fixture_bytes):
    path = tmp_path / "t.nii"
    path.write_bytes(fixture_bytes[:-4])
    with pytest.raises(TruncationError):
        read_nifti(path, "T1")


@pytest.mark.parametrize("rank", [2, 4])
def test_rank_error(tmp_path, rank):
    dim = (rank, 4, 4, 3, 1, 1, 1, 1)
    hdr = nifti1_header(dim=dim, datatype=16, bitpix=32)
    path = tmp_path / "r.nii"
    path.write_bytes(hdr + VALUES_48.tobytes())
    with pytest.raises(RankError):
        read_nifti(path, "T1")


def test_bitpix_mismatch(tmp_path):
    hdr = nifti1_header(dim=(3, 4, 4, 3, 1, 1, 1, 1), datatype=16, bitpix=16)
    path = tmp_path / "b.nii"
    path.write_bytes(hdr + VALUES_48.tobytes())
    with pytest.raises(FormatError):
        read_nifti(path, "T1")


def test_nifti2_rejected(tmp_path):
    buf = bytearray(600)
    struct.pack_into("<i", buf, 0, 540)
    path = tmp_path / "n2.nii"
    path.write_bytes(bytes(buf))
    with pytest.raises(FormatError):
        read_nifti(path, "T1")


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_every_field_corruption_is_rejected(tmp_path_factory, data):
    good = nifti1_header(dim=(3, 4, 4, 3, 1, 1, 1, 1), datatype=16, bitpix=32) + VALUES_48.tobytes()
    buf = bytearray(good)
    field = data.draw(st.sampled_from(["magic", "datatype", "payload"]))
    if field == "magic":
        pos = data.draw(st.integers(344, 347))
        buf[pos] = data.draw(st.integers(0, 255).filter(lambda b: b != good[pos]))
    elif field == "datatype":
        code = data.draw(st.integers(-32768, 32767).filter(lambda c: c != 16))
        struct.pack_into("<h", buf, 70, code)
    else:
        cut = data.draw(st.integers(1, len(VALUES_48) * 4))
        buf = buf[:-cut]
    path = tmp_path_factory.mktemp("corrupt") / "c.nii"
    path.write_bytes(bytes(buf))
    with pytest.raises(FormatError):
        read_nifti(path, "T1")


def test_write_read_nifti_roundtrip_int16_gz(tmp_path):
    data = np.arange(60, dtype=np.float32).reshape(3, 4, 5)
    vol = Volume(data, "T2", "c1")
    write_nifti(vol, tmp_path / "c1_t2.nii.gz", datatype_code=4)
    back = read_nifti(tmp_path / "c1_t2.nii.gz", "T2")
    np.testing.assert_array_equal(back.data, data)
    assert back.dims == (5, 4, 3)


def test_label_must_be_integer_codes(tmp_path):
    vol = Volume(np.full((1, 1, 2), 0.5, dtype=np.float32), "T1")
    write_nifti(vol, tmp_path / "l.nii")
    with pytest.raises(FormatError):
        read_nifti(tmp_path / "l.nii", "LABEL")


def test_raw_single_voxel(tmp_path):
    vol = Volume(np.full((1, 1, 1), 0.5, dtype=np.float32), "SUBTRACTION")
    path = tmp_path / "v.raw"
    write_raw(vol, path)
    assert path.stat().st_size == 32 + 4
    back = read_raw(path)
    assert back.data.tobytes() == vol.data.tobytes()
    assert back.modality is Modality.SUBTRACTION


def test_raw_ramp_roundtrip(tmp_path):
    vol = Volume(np.arange(8, dtype=np.float32).reshape(2, 2, 2), "T1")
    write_raw(vol, tmp_path / "r.raw")
    np.testing.assert_array_equal(read_raw(tmp_path / "r.raw").data, vol.data)


def test_raw_header_layout():
    vol = Volume(np.zeros((3, 2, 4), dtype=np.float32), "FLAIR")
    first = raw_bytes(vol).split(b"\n", 1)[0].decode().split()
    assert first == ["SUBSEGRAW", "v1", "4", "2", "3", "FLAIR"]


def test_raw_short_payload():
    buf = raw_bytes(Volume(np.zeros((2, 2, 2), dtype=np.float32), "T1"))
    with pytest.raises(TruncationError):
        parse_raw(buf[:-1])


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=3, max_dims=3, max_side=6),
                  elements=st.floats(width=32, allow_nan=False, allow_infinity=False)))
def test_raw_roundtrip_bit_exact(arr):
    vol = Volume(arr, "T1GD")
    back = parse_raw(raw_bytes(vol))
    assert back.data.tobytes() == vol.data.tobytes()
    assert raw_bytes(back) == raw_bytes(vol)


def test_normalize_zero_volume_warns():
    vol = Volume(np.zeros((2, 2, 2)), "T1")
    with pytest.warns(DegenerateNormalizationWarning):
        out = normalize_intensity(vol)
    assert not out.data.any()


def test_normalize_constant_nonzero_warns():
    data = np.zeros((2, 3, 3))
    data[0] = 5.0
    with pytest.warns(DegenerateNormalizationWarning):
        out = normalize_intensity(Volume(data, "T1"))
    assert not out.data.any()


def test_normalize_linear_ten_values():
    data = np.zeros((1, 2, 10))
    data[0, 0] = np.arange(10, 101, 10)
    out = normalize_intensity(Volume(data, "T1"), 0, 100)
    np.testing.assert_allclose(out.data[0, 0], np.arange(10) / 9, atol=1e-7)
    assert not out.data[0, 1].any()


def test_normalize_bad_percentiles():
    with pytest.raises(ValueError):
        normalize_intensity(Volume(np.ones((1, 1, 2)), "T1"), 50, 50)


volumes = hnp.arrays(
    np.float32,
    st.tuples(st.integers(1, 4), st.integers(1, 6), st.integers(1, 6)),
    elements=st.one_of(st.just(0.0), st.floats(-1e4, 1e4, width=32)),
)


@settings(max_examples=150, deadline=None)
@given(volumes, st.floats(0, 49), st.floats(51, 100))
def test_normalize_range_and_zero_preservation(arr, lo, hi):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateNormalizationWarning)
        out = normalize_intensity(Volume(arr, "T1"), lo, hi).data
    assert out.min() >= 0 and out.max() <= 1
    assert not out[arr == 0].any()


@settings(max_examples=150, deadline=None)
@given(volumes)
def test_normalize_second_pass_is_order_preserving(arr):
    # the minimum nonzero voxel maps to 0, so a second full-range pass
    # rescales the survivors; ordering and the top value are what persist
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateNormalizationWarning)
        once = normalize_intensity(Volume(arr, "T1"), 0, 100).data
        twice = normalize_intensity(Volume(once, "T1"), 0, 100).data
    nz = once != 0
    if np.unique(once[nz]).size >= 2:
        assert twice[nz].max() == pytest.approx(1.0)
        order = np.argsort(once[nz], kind="stable")
        assert np.all(np.diff(twice[nz][order]) >= -1e-7)
    assert not twice[~nz].any()


unit_values = hnp.arrays(
    np.float32,
    st.tuples(st.integers(1, 3), st.integers(2, 5), st.integers(2, 5)),
    elements=st.one_of(st.just(0.0), st.floats(0.0009765625, 1.0, width=32)),
)


@settings(max_examples=150, deadline=None)
@given(unit_values)
def test_normalize_fixed_point_on_unit_range_volumes(arr):
    # an already-normalized volume whose nonzero range is anchored at ~0 and 1
    arr = arr.copy().ravel()
    if arr.size < 3:
        return
    arr[0], arr[1] = np.float32(1e-30), np.float32(1.0)
    arr = arr.reshape(1, 1, -1)
    out = normalize_intensity(Volume(arr, "T1"), 0, 100).data
    np.testing.assert_allclose(out, np.where(arr == np.float32(1e-30), 0, arr), atol=1e-6)
