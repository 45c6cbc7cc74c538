"""Volume and label-map I/O: a small NIfTI-1 subset plus cohort manifests.

Supports single-frame 3D files (dim[0] = 3) with datatypes uint8, int16 and
float32, both endiannesses. Image data is returned as float32 after applying
the slope/intercept scaling; label maps go through a separate path that
requires integer datatypes. Orientation fields (qform/sform) are ignored:
volumes live in voxel space.

Voxel arrays are indexed ``[x, y, z]`` and serialized x-fastest, so voxel
(x, y, z) maps to flat payload index ``x + nx*(y + ny*z)``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"

# NIfTI-1 datatype codes for the supported subset.
_DTYPE_CODES = {2: "uint8", 4: "int16", 16: "float32"}
_DTYPE_BY_NAME = {v: k for k, v in _DTYPE_CODES.items()}
_BITPIX = {"uint8": 8, "int16": 16, "float32": 32}
_NP_DTYPES = {"uint8": np.uint8, "int16": np.int16, "float32": np.float32}

COHORT_TAGS = ("original", "new", "contrast_pair")


class FormatError(ValueError):
    """Raised for malformed volume files or manifests."""


@dataclass
class VolumeHeader:
    dims: tuple[int, int, int]
    voxel_size: tuple[float, float, float]
    datatype: str
    data_offset: int = 352
    endianness: str = "little"
    scale_slope: float = 1.0
    scale_intercept: float = 0.0

    def effective_slope(self) -> float:
        # a stored slope of 0 means "no scaling"
        return 1.0 if self.scale_slope == 0.0 else self.scale_slope

    def validate(self) -> None:
        if any(d < 1 for d in self.dims):
            raise FormatError(f"non-positive dims {self.dims}")
        if any(s <= 0 for s in self.voxel_size):
            raise FormatError(f"non-positive voxel size {self.voxel_size}")
        if self.datatype not in _NP_DTYPES:
            raise FormatError(f"unsupported datatype {self.datatype!r}")
        if self.data_offset < HEADER_SIZE:
            raise FormatError(f"data offset {self.data_offset} < {HEADER_SIZE}")
        if self.endianness not in ("little", "big"):
            raise FormatError(f"bad endianness {self.endianness!r}")


@dataclass
class Volume3D:
    """A scalar intensity grid with voxel dimensions in mm.

    ``data`` is float32 with shape ``dims``, indexed [x, y, z].
    """

    header: VolumeHeader
    data: np.ndarray

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.header.dims

    @property
    def voxel_size(self) -> tuple[float, float, float]:
        return self.header.voxel_size

    def validate(self) -> None:
        self.header.validate()
        if tuple(self.data.shape) != tuple(self.header.dims):
            raise FormatError(
                f"data shape {self.data.shape} != header dims {self.header.dims}"
            )
        if not np.isfinite(self.data).all():
            raise FormatError("volume contains non-finite values")


@dataclass
class LabelMap:
    """Integer segmentation grid sharing a volume's geometry."""

    dims: tuple[int, int, int]
    voxel_size: tuple[float, float, float]
    labels: np.ndarray  # int32, shape dims, indexed [x, y, z]
    vocabulary: list[tuple[int, str]]
    background_id: int = 0

    def label_ids(self) -> list[int]:
        return [i for i, _ in self.vocabulary]

    def validate(self) -> None:
        if tuple(self.labels.shape) != tuple(self.dims):
            raise FormatError(
                f"label shape {self.labels.shape} != dims {self.dims}"
            )
        if self.labels.min(initial=0) < 0:
            raise FormatError("labels must be non-negative")
        known = set(self.label_ids())
        present = set(np.unique(self.labels).tolist())
        unknown = present - known
        if unknown:
            raise FormatError(f"labels {sorted(unknown)} missing from vocabulary")


@dataclass
class SubjectRecord:
    subject_id: str
    image_path: str
    cohort_tag: str
    label_path: str | None = None
    paired_image_path: str | None = None


@dataclass
class CohortManifest:
    subjects: list[SubjectRecord] = field(default_factory=list)

    def subject_ids(self) -> list[str]:
        return [s.subject_id for s in self.subjects]


def _byte_order(raw: bytes) -> str:
    for prefix, name in (("<", "little"), (">", "big")):
        if struct.unpack_from(prefix + "i", raw, 0)[0] == HEADER_SIZE:
            return name
    raise FormatError("sizeof_hdr is not 348 in either byte order; not a NIfTI-1 header")


def parse_header(raw: bytes) -> VolumeHeader:
    """Decode a NIfTI-1 header from at least 348 bytes."""
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"header too short: {len(raw)} < {HEADER_SIZE} bytes")
    magic = raw[344:348]
    if magic not in (MAGIC_SINGLE, MAGIC_PAIR):
        raise FormatError(f"bad magic {magic!r}")
    endianness = _byte_order(raw)
    pre = "<" if endianness == "little" else ">"

    dim = struct.unpack_from(pre + "8h", raw, 40)
    if dim[0] != 3:
        raise FormatError(f"only single-frame 3D files supported, got dim[0]={dim[0]}")
    dims = tuple(int(d) for d in dim[1:4])
    if any(d < 1 for d in dims):
        raise FormatError(f"non-positive dims {dims}")

    datatype_code, bitpix = struct.unpack_from(pre + "2h", raw, 70)
    if datatype_code not in _DTYPE_CODES:
        raise FormatError(f"unsupported datatype code {datatype_code}")
    datatype = _DTYPE_CODES[datatype_code]
    if bitpix != _BITPIX[datatype]:
        raise FormatError(f"bitpix {bitpix} inconsistent with datatype {datatype}")

    pixdim = struct.unpack_from(pre + "8f", raw, 76)
    voxel_size = tuple(float(p) for p in pixdim[1:4])
    if any(not np.isfinite(s) or s <= 0 for s in voxel_size):
        raise FormatError(f"non-positive voxel size {voxel_size}")

    vox_offset, scl_slope, scl_inter = struct.unpack_from(pre + "3f", raw, 108)
    header = VolumeHeader(
        dims=dims,
        voxel_size=voxel_size,
        datatype=datatype,
        data_offset=int(vox_offset),
        endianness=endianness,
        scale_slope=float(scl_slope),
        scale_intercept=float(scl_inter),
    )
    header.validate()
    return header


def _encode_header(header: VolumeHeader) -> bytes:
    pre = "<" if header.endianness == "little" else ">"
    buf = bytearray(HEADER_SIZE)
    struct.pack_into(pre + "i", buf, 0, HEADER_SIZE)
    struct.pack_into(pre + "8h", buf, 40, 3, *header.dims, 1, 1, 1, 1)
    struct.pack_into(pre + "2h", buf, 70, _DTYPE_BY_NAME[header.datatype],
                     _BITPIX[header.datatype])
    struct.pack_into(pre + "8f", buf, 76, 1.0, *header.voxel_size, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into(pre + "3f", buf, 108, float(header.data_offset),
                     header.scale_slope, header.scale_intercept)
    buf[344:348] = MAGIC_SINGLE
    return bytes(buf)


def _payload_dtype(header: VolumeHeader) -> np.dtype:
    dt = np.dtype(_NP_DTYPES[header.datatype])
    return dt.newbyteorder("<" if header.endianness == "little" else ">")


def _read_stored(path, header: VolumeHeader, raw: bytes) -> np.ndarray:
    dt = _payload_dtype(header)
    count = int(np.prod(header.dims))
    need = header.data_offset + count * dt.itemsize
    if len(raw) < need:
        raise FormatError(
            f"{path}: file has {len(raw)} bytes, payload needs {need}"
        )
    flat = np.frombuffer(raw, dtype=dt, count=count, offset=header.data_offset)
    return flat.reshape(header.dims, order="F")


def read_volume(path) -> Volume3D:
    """Read a volume; voxel values are stored*slope + intercept as float32."""
    raw = Path(path).read_bytes()
    header = parse_header(raw)
    stored = _read_stored(path, header, raw)
    slope = header.effective_slope()
    inter = header.scale_intercept
    if slope == 1.0 and inter == 0.0:
        data = stored.astype(np.float32)
    else:
        data = stored.astype(np.float32) * np.float32(slope) + np.float32(inter)
    if not np.isfinite(data).all():
        raise FormatError(f"{path}: non-finite voxel values after scaling")
    return Volume3D(header=header, data=data)


def write_volume(volume: Volume3D, path) -> None:
    """Write a volume so that reading it back reproduces the data exactly.

    float32 volumes are written with slope 1 / intercept 0 (bit-exact payload);
    integer volumes are inverse-scaled back to stored values, which must land
    on representable integers.
    """
    volume.validate()
    header = volume.header
    if header.datatype == "float32":
        out_header = VolumeHeader(
            dims=header.dims, voxel_size=header.voxel_size, datatype="float32",
            data_offset=352, endianness=header.endianness,
            scale_slope=1.0, scale_intercept=0.0,
        )
        stored = volume.data.astype(np.float32, copy=False)
    else:
        slope = header.effective_slope()
        raw_vals = (volume.data.astype(np.float64) - header.scale_intercept) / slope
        rounded = np.rint(raw_vals)
        if np.abs(raw_vals - rounded).max(initial=0.0) > 1e-3:
            raise FormatError("data does not inverse-scale to integers")
        info = np.iinfo(_NP_DTYPES[header.datatype])
        if rounded.min() < info.min or rounded.max() > info.max:
            raise FormatError(f"values out of range for {header.datatype}")
        out_header = VolumeHeader(
            dims=header.dims, voxel_size=header.voxel_size,
            datatype=header.datatype, data_offset=352,
            endianness=header.endianness, scale_slope=header.scale_slope,
            scale_intercept=header.scale_intercept,
        )
        stored = rounded.astype(_NP_DTYPES[header.datatype])
    payload = np.asfortranarray(stored.astype(_payload_dtype(out_header), copy=False))
    blob = _encode_header(out_header) + b"\x00" * (out_header.data_offset - HEADER_SIZE)
    try:
        with open(path, "wb") as fh:
            fh.write(blob)
            fh.write(payload.tobytes(order="F"))
    except OSError as exc:
        raise OSError(f"cannot write volume to {path}: {exc}") from exc


def read_labelmap(path, vocabulary=None, background_id: int = 0) -> LabelMap:
    """Read a label map; requires an integer datatype and integral values."""
    raw = Path(path).read_bytes()
    header = parse_header(raw)
    if header.datatype == "float32":
        raise FormatError(f"{path}: label maps require an integer datatype")
    stored = _read_stored(path, header, raw)
    slope = header.effective_slope()
    inter = header.scale_intercept
    vals = stored.astype(np.float64) * slope + inter
    rounded = np.rint(vals)
    if np.abs(vals - rounded).max(initial=0.0) > 1e-6:
        raise FormatError(f"{path}: scaled label values are not integral")
    labels = rounded.astype(np.int32)
    if labels.min(initial=0) < 0:
        raise FormatError(f"{path}: negative label values")
    if vocabulary is None:
        present = sorted(int(v) for v in np.unique(labels))
        if background_id not in present:
            present = sorted(present + [background_id])
        vocabulary = [(i, f"label_{i}") for i in present]
    lm = LabelMap(
        dims=header.dims, voxel_size=header.voxel_size, labels=labels,
        vocabulary=list(vocabulary), background_id=background_id,
    )
    lm.validate()
    return lm


def write_labelmap(labelmap: LabelMap, path, endianness: str = "little") -> None:
    labelmap.validate()
    lo = int(labelmap.labels.min(initial=0))
    hi = int(labelmap.labels.max(initial=0))
    if 0 <= lo and hi <= 255:
        datatype = "uint8"
    elif hi <= 32767:
        datatype = "int16"
    else:
        raise FormatError(f"label id {hi} too large for int16 storage")
    header = VolumeHeader(
        dims=labelmap.dims, voxel_size=labelmap.voxel_size, datatype=datatype,
        data_offset=352, endianness=endianness,
    )
    payload = np.asfortranarray(labelmap.labels.astype(_NP_DTYPES[datatype]))
    payload = payload.astype(_payload_dtype(header), copy=False)
    blob = _encode_header(header) + b"\x00" * (header.data_offset - HEADER_SIZE)
    try:
        with open(path, "wb") as fh:
            fh.write(blob)
            fh.write(payload.tobytes(order="F"))
    except OSError as exc:
        raise OSError(f"cannot write label map to {path}: {exc}") from exc


def load_manifest(path) -> CohortManifest:
    """Load a cohort manifest; relative paths resolve against its directory."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "subjects" not in doc:
        raise FormatError(f"{path}: manifest must be an object with a 'subjects' list")
    base = path.parent
    seen: set[str] = set()
    subjects = []
    for entry in doc["subjects"]:
        sid = entry.get("id")
        if not sid:
            raise FormatError(f"{path}: subject with missing id")
        if sid in seen:
            raise FormatError(f"{path}: duplicate subject id {sid!r}")
        seen.add(sid)
        cohort = entry.get("cohort")
        if cohort not in COHORT_TAGS:
            raise FormatError(f"{path}: unknown cohort tag {cohort!r} for {sid}")
        image = entry.get("image")
        if not image:
            raise FormatError(f"{path}: subject {sid} has no image path")
        paired = entry.get("paired_image")
        if cohort == "contrast_pair" and not paired:
            raise FormatError(
                f"{path}: contrast_pair subject {sid} lacks a paired_image"
            )
        labels = entry.get("labels")

        def _resolve(p):
            return str((base / p).resolve()) if p else None

        subjects.append(SubjectRecord(
            subject_id=str(sid),
            image_path=_resolve(image),
            label_path=_resolve(labels),
            paired_image_path=_resolve(paired),
            cohort_tag=cohort,
        ))
    return CohortManifest(subjects=subjects)


def save_manifest(manifest: CohortManifest, path) -> None:
    """Write a manifest with paths stored relative to its directory."""
    path = Path(path)
    base = path.parent.resolve()

    def _rel(p):
        if p is None:
            return None
        p = Path(p).resolve()
        try:
            return str(p.relative_to(base))
        except ValueError:
            return str(p)

    doc = {"subjects": []}
    for s in manifest.subjects:
        entry = {"id": s.subject_id, "image": _rel(s.image_path), "cohort": s.cohort_tag}
        if s.label_path:
            entry["labels"] = _rel(s.label_path)
        if s.paired_image_path:
            entry["paired_image"] = _rel(s.paired_image_path)
        doc["subjects"].append(entry)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
