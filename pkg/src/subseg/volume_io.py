"""Volume container plus NIfTI-1 and raw fixture readers/writers.

Voxel arrays are held as ``(depth, height, width)`` C-ordered float32, which
is the x-fastest, then y, then z layout used on disk by both formats.
"""
from __future__ import annotations

import enum
import gzip
import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from subseg._atomic import atomic_write_bytes
from subseg.errors import (
    FormatError,
    RankError,
    TruncationError,
    UnsupportedTypeError,
)

log = logging.getLogger(__name__)

NIFTI1_HEADER_SIZE = 348
NIFTI1_SINGLE_FILE_OFFSET = 352
NIFTI1_MAGIC = b"n+1\x00"
GZIP_MAGIC = b"\x1f\x8b"

# datatype code -> (numpy dtype char, bitpix)
NIFTI_DTYPES = {
    2: ("u1", 8),
    4: ("i2", 16),
    8: ("i4", 32),
    16: ("f4", 32),
}

RAW_MAGIC = "SUBSEGRAW"
RAW_VERSION = "v1"
RAW_HEADER_SIZE = 32


class Modality(str, enum.Enum):
    T1 = "T1"
    T1GD = "T1GD"
    T2 = "T2"
    FLAIR = "FLAIR"
    LABEL = "LABEL"
    SUBTRACTION = "SUBTRACTION"


class DegenerateNormalizationWarning(UserWarning):
    pass


@dataclass(eq=False)
class Volume:
    """A 3D scalar grid with a modality tag.

    ``data`` has shape ``(depth, height, width)``; ``voxels`` exposes the
    flat x-fastest view.
    """

    data: np.ndarray
    modality: Modality
    case_id: str = ""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise RankError(f"volume data must be rank 3, got shape {data.shape}")
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        self.modality = Modality(self.modality)

    @classmethod
    def from_voxels(cls, voxels, width, height, depth, modality, case_id=""):
        voxels = np.asarray(voxels, dtype=np.float32).ravel()
        if voxels.size != width * height * depth:
            raise TruncationError(
                f"{voxels.size} voxels for dims {width}x{height}x{depth}"
            )
        return cls(voxels.reshape(depth, height, width), modality, case_id)

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def depth(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.width, self.height, self.depth)

    @property
    def voxels(self) -> np.ndarray:
        return self.data.reshape(-1)

    def with_data(self, data, modality=None) -> Volume:
        return Volume(data, self.modality if modality is None else modality, self.case_id)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.modality == other.modality
            and self.case_id == other.case_id
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


@dataclass
class VolumeHeader:
    dims: tuple[int, ...]
    datatype_code: int
    bitpix: int
    vox_offset: float
    scl_slope: float = 0.0
    scl_inter: float = 0.0
    endianness: str = "<"
    rank: int = field(init=False)

    def __post_init__(self):
        self.rank = len(self.dims)


def _maybe_gunzip(buf: bytes) -> bytes:
    if buf[:2] == GZIP_MAGIC:
        try:
            return gzip.decompress(buf)
        except (OSError, EOFError) as exc:
            raise TruncationError(f"corrupt gzip stream: {exc}") from exc
    return buf


def parse_nifti_header(buf: bytes) -> VolumeHeader:
    """Decode the subset of NIfTI-1 header fields the reader relies on."""
    if len(buf) < NIFTI1_HEADER_SIZE:
        raise TruncationError(f"header needs {NIFTI1_HEADER_SIZE} bytes, got {len(buf)}")

    # sizeof_hdr doubles as the byte-order probe
    if struct.unpack_from("<i", buf, 0)[0] == NIFTI1_HEADER_SIZE:
        end = "<"
    elif struct.unpack_from(">i", buf, 0)[0] == NIFTI1_HEADER_SIZE:
        end = ">"
    else:
        raise FormatError("sizeof_hdr is not 348 in either byte order (not NIfTI-1)")

    if buf[344:348] != NIFTI1_MAGIC:
        raise FormatError(f"bad magic {buf[344:348]!r}, expected {NIFTI1_MAGIC!r}")

    dim = struct.unpack_from(end + "8h", buf, 40)
    datatype, bitpix = struct.unpack_from(end + "2h", buf, 70)
    vox_offset, scl_slope, scl_inter = struct.unpack_from(end + "3f", buf, 108)

    if datatype not in NIFTI_DTYPES:
        raise UnsupportedTypeError(f"unsupported NIfTI datatype code {datatype}")
    if NIFTI_DTYPES[datatype][1] != bitpix:
        raise FormatError(f"bitpix {bitpix} inconsistent with datatype {datatype}")
    rank = dim[0]
    if rank != 3:
        raise RankError(f"only rank-3 volumes are supported, got rank {rank}")
    dims = tuple(int(d) for d in dim[1 : rank + 1])
    if any(d < 1 for d in dims):
        raise FormatError(f"non-positive dimension in {dims}")
    if not np.isfinite(vox_offset) or vox_offset < NIFTI1_SINGLE_FILE_OFFSET:
        raise FormatError(f"vox_offset {vox_offset} < {NIFTI1_SINGLE_FILE_OFFSET}")
    return VolumeHeader(
        dims=dims,
        datatype_code=datatype,
        bitpix=bitpix,
        vox_offset=float(vox_offset),
        scl_slope=float(scl_slope),
        scl_inter=float(scl_inter),
        endianness=end,
    )


def read_nifti(path, modality) -> Volume:
    """Read a single-file NIfTI-1 volume, optionally gzip-wrapped.

    Raw values are mapped through ``scl_slope * raw + scl_inter`` (identity
    when the slope is 0 or non-finite) and returned as float32.
    """
    path = Path(path)
    buf = _maybe_gunzip(path.read_bytes())
    hdr = parse_nifti_header(buf)
    char, _ = NIFTI_DTYPES[hdr.datatype_code]
    dtype = np.dtype(hdr.endianness + char)
    width, height, depth = hdr.dims
    count = width * height * depth
    start = int(hdr.vox_offset)
    end = start + count * dtype.itemsize
    if len(buf) < end:
        raise TruncationError(
            f"{path.name}: data section needs {end - start} bytes, "
            f"{max(len(buf) - start, 0)} present"
        )
    raw = np.frombuffer(buf, dtype=dtype, count=count, offset=start).astype(np.float64)
    if hdr.scl_slope != 0.0 and np.isfinite(hdr.scl_slope):
        inter = hdr.scl_inter if np.isfinite(hdr.scl_inter) else 0.0
        raw = raw * hdr.scl_slope + inter
    values = raw.astype(np.float32)

    bad = ~np.isfinite(values)
    if bad.any():
        warnings.warn(f"{path.name}: {int(bad.sum())} non-finite voxels replaced by 0")
        values[bad] = 0.0

    modality = Modality(modality)
    if modality is Modality.LABEL:
        if (values < 0).any() or (values != np.round(values)).any() or values.max(initial=0) > 255:
            raise FormatError(f"{path.name}: label volume holds non-integer or out-of-range codes")

    case_id = path.name.split(".")[0]
    return Volume.from_voxels(values, width, height, depth, modality, case_id)


def nifti_bytes(volume: Volume, datatype_code=16, scl_slope=0.0, scl_inter=0.0, endianness="<") -> bytes:
    """Serialize ``volume`` as single-file NIfTI-1 (no extensions, identity pixdim)."""
    char, bitpix = NIFTI_DTYPES[datatype_code]
    dtype = np.dtype(endianness + char)
    hdr = bytearray(NIFTI1_SINGLE_FILE_OFFSET)
    struct.pack_into(endianness + "i", hdr, 0, NIFTI1_HEADER_SIZE)
    struct.pack_into(endianness + "8h", hdr, 40, 3, volume.width, volume.height, volume.depth, 1, 1, 1, 1)
    struct.pack_into(endianness + "2h", hdr, 70, datatype_code, bitpix)
    struct.pack_into(endianness + "8f", hdr, 76, 1, 1, 1, 1, 0, 0, 0, 0)
    struct.pack_into(endianness + "3f", hdr, 108, float(NIFTI1_SINGLE_FILE_OFFSET), scl_slope, scl_inter)
    hdr[344:348] = NIFTI1_MAGIC
    data = volume.data
    if dtype.kind in "iu":
        data = np.round(data)
    return bytes(hdr) + data.astype(dtype).tobytes()


def write_nifti(volume: Volume, path, datatype_code=16, **kwargs) -> None:
    path = Path(path)
    payload = nifti_bytes(volume, datatype_code, **kwargs)
    if path.name.endswith(".gz"):
        payload = gzip.compress(payload, mtime=0)
    atomic_write_bytes(path, payload)


def raw_bytes(volume: Volume) -> bytes:
    line = f"{RAW_MAGIC} {RAW_VERSION} {volume.width} {volume.height} {volume.depth} {volume.modality.value}"
    if len(line) + 1 > RAW_HEADER_SIZE:
        # large dims overflow the nominal 32 bytes; the header is newline-terminated anyway
        header = (line + "\n").encode("ascii")
    else:
        header = (line.ljust(RAW_HEADER_SIZE - 1) + "\n").encode("ascii")
    return header + volume.data.astype("<f4").tobytes()


def write_raw(volume: Volume, path) -> None:
    atomic_write_bytes(path, raw_bytes(volume))


def parse_raw(buf: bytes, case_id="") -> Volume:
    nl = buf.find(b"\n")
    if nl < 0:
        raise FormatError("raw volume header is not newline-terminated")
    parts = buf[:nl].decode("ascii", errors="replace").split()
    if len(parts) != 6 or parts[0] != RAW_MAGIC or parts[1] != RAW_VERSION:
        raise FormatError(f"bad raw volume header {buf[:nl]!r}")
    try:
        width, height, depth = (int(p) for p in parts[2:5])
        modality = Modality(parts[5])
    except ValueError as exc:
        raise FormatError(f"bad raw volume header {buf[:nl]!r}") from exc
    payload = buf[nl + 1 :]
    expected = width * height * depth * 4
    if len(payload) != expected:
        raise TruncationError(f"raw payload is {len(payload)} bytes, dims imply {expected}")
    voxels = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    return Volume.from_voxels(voxels, width, height, depth, modality, case_id)


def read_raw(path) -> Volume:
    path = Path(path)
    return parse_raw(path.read_bytes(), case_id=path.parent.name)


def normalize_intensity(volume: Volume, lo_pct=1.0, hi_pct=99.0) -> Volume:
    """Percentile-scale nonzero voxels into [0, 1]; zeros stay exactly 0.

    ``lo`` and ``hi`` are percentiles of the nonzero voxels. A volume with
    no nonzero voxels, or with ``hi == lo``, maps to all zeros and emits a
    :class:`DegenerateNormalizationWarning`.
    """
    if not 0 <= lo_pct < hi_pct <= 100:
        raise ValueError(f"need 0 <= lo_pct < hi_pct <= 100, got {lo_pct}, {hi_pct}")
    data = volume.data
    nonzero = data != 0
    out = np.zeros_like(data)
    if not nonzero.any():
        warnings.warn(f"{volume.case_id or 'volume'}: all voxels zero", DegenerateNormalizationWarning)
        return volume.with_data(out)
    values = data[nonzero].astype(np.float64)
    lo, hi = np.percentile(values, [lo_pct, hi_pct])
    if hi == lo:
        warnings.warn(
            f"{volume.case_id or 'volume'}: degenerate intensity range (lo == hi == {lo})",
            DegenerateNormalizationWarning,
        )
        return volume.with_data(out)
    out[nonzero] = np.clip((values - lo) / (hi - lo), 0.0, 1.0)
    return volume.with_data(out)
