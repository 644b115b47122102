"""Volume data model, file I/O, phantoms, target spacing and resampling.

Array conventions used throughout the package:

* ``LabelVolume.data`` has shape ``(nx, ny, nz)`` holding integer class ids,
  0 = background.
* ``ProbVolume.data`` has shape ``(channels, nx, ny, nz)`` holding one
  probability field per class.
* On disk the voxel index varies fastest in x, then y, then z (Fortran order
  of the ``(nx, ny, nz)`` array); multi-channel payloads are channel-outermost
  in the JSON+raw format and channel-interleaved in MetaImage
  (``ElementNumberOfChannels``).

Supported file formats:

* MetaImage subset (``.mha`` / ``.mhd``): uncompressed, NDims = 3, element
  types MET_UCHAR / MET_SHORT / MET_FLOAT, little endian.  ``CompressedData =
  True`` and ``BinaryDataByteOrderMSB = True`` are rejected.
* JSON header + raw payload (``<name>.json`` / ``<name>.raw``): header fields
  ``dims``, ``spacing``, ``dtype`` ("u8" | "i16" | "f32"), ``channels``,
  ``class_names``; payload little endian.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage


class VolumeFormatError(ValueError):
    """A volume file violates the supported format subset."""


_JSON_DTYPES = {"u8": np.uint8, "i16": np.int16, "f32": np.float32}
_MET_TYPES = {"MET_UCHAR": np.uint8, "MET_SHORT": np.int16, "MET_FLOAT": np.float32}
_MET_NAMES = {np.dtype(np.uint8): "MET_UCHAR", np.dtype(np.int16): "MET_SHORT",
              np.dtype(np.float32): "MET_FLOAT"}

# per-voxel channel sums of a normalized probability volume must stay within
# this tolerance of 1
NORMALIZATION_TOL = 1e-5


def _check_dims_spacing(dims, spacing):
    if len(dims) != 3 or any(int(d) < 1 for d in dims):
        raise ValueError(f"dims must be three positive voxel counts, got {dims!r}")
    if len(spacing) != 3 or any(float(s) <= 0 for s in spacing):
        raise ValueError(f"spacing components must be > 0, got {spacing!r}")


@dataclass(frozen=True)
class LabelVolume:
    """3D integer class map with physical spacing (mm per voxel).

    ``class_names`` lists background plus the foreground classes, so every
    voxel value must be < ``len(class_names)``.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    data: np.ndarray
    class_names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        _check_dims_spacing(self.dims, self.spacing)
        if not np.issubdtype(self.data.dtype, np.integer):
            raise ValueError(f"label data must be integer, got {self.data.dtype}")
        if self.data.shape != self.dims:
            raise ValueError(
                f"data shape {self.data.shape} does not match dims {self.dims}")
        if self.data.size and (self.data.min() < 0
                               or self.data.max() >= self.num_classes):
            raise ValueError(
                f"class ids must lie in [0, {self.num_classes}), "
                f"got range [{self.data.min()}, {self.data.max()}]")

    @property
    def num_classes(self) -> int:
        """Total number of classes including background (C+1)."""
        return len(self.class_names)

    def class_counts(self) -> np.ndarray:
        """Voxel count per class id."""
        return np.bincount(self.data.ravel(), minlength=self.num_classes)


@dataclass(frozen=True)
class ProbVolume:
    """Per-class probability field over a volume or patch.

    ``normalized`` marks volumes whose per-voxel channel sums are 1 (within
    NORMALIZATION_TOL); the flag is validated at construction.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    data: np.ndarray
    class_names: tuple[str, ...]
    normalized: bool = True

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        _check_dims_spacing(self.dims, self.spacing)
        if self.data.shape != (len(self.class_names),) + self.dims:
            raise ValueError(
                f"data shape {self.data.shape} does not match "
                f"(channels,) + dims = {(len(self.class_names),) + self.dims}")
        if self.data.size:
            lo, hi = float(self.data.min()), float(self.data.max())
            if lo < 0.0 or hi > 1.0:
                raise ValueError(f"probabilities must lie in [0, 1], got [{lo}, {hi}]")
            if self.normalized:
                sums = self.data.sum(axis=0)
                err = float(np.abs(sums - 1.0).max())
                if err > NORMALIZATION_TOL:
                    raise ValueError(
                        f"per-voxel channel sums deviate from 1 by {err:.3g} "
                        f"(> {NORMALIZATION_TOL}) on a volume flagged normalized")

    @property
    def channels(self) -> int:
        return len(self.class_names)


@dataclass(frozen=True)
class SpacingRule:
    """Statistic selectors for the dataset target spacing.

    In-plane components use the median over volumes; the out-plane component
    uses a percentile (linear interpolation between closest ranks).
    """

    in_plane: str = "median"
    out_plane_percentile: float = 10.0

    def __post_init__(self):
        if self.in_plane != "median":
            raise ValueError(f"unsupported in-plane statistic {self.in_plane!r}")
        if not 0.0 <= self.out_plane_percentile <= 100.0:
            raise ValueError("percentile must lie in [0, 100]")


@dataclass(frozen=True)
class OrganSpec:
    """One painted organ: axis-aligned box or ellipsoid in voxel coordinates."""

    class_id: int
    shape: str  # "box" | "ellipsoid"
    center: tuple[float, float, float]
    radii: tuple[float, float, float]

    def __post_init__(self):
        if self.shape not in ("box", "ellipsoid"):
            raise ValueError(f"unknown organ shape {self.shape!r}")
        if self.class_id < 1:
            raise ValueError("organ class ids start at 1 (0 is background)")
        if any(r <= 0 for r in self.radii):
            raise ValueError("organ radii must be > 0")


@dataclass(frozen=True)
class PhantomSpec:
    """Deterministic phantom description; later organs overwrite earlier ones."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    organs: tuple[OrganSpec, ...] = ()
    class_names: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "organs", tuple(self.organs))
        _check_dims_spacing(self.dims, self.spacing)
        for idx, organ in enumerate(self.organs):
            for c, r, n in zip(organ.center, organ.radii, self.dims):
                if c - r < 0 or c + r > n - 1:
                    raise ValueError(
                        f"organ {idx} (class {organ.class_id}) extends outside "
                        f"the volume: bounds [{c - r}, {c + r}] vs axis size {n}")

    def resolve_class_names(self) -> tuple[str, ...]:
        if self.class_names is not None:
            return tuple(self.class_names)
        top = max((o.class_id for o in self.organs), default=0)
        return ("background",) + tuple(f"organ_{c}" for c in range(1, top + 1))


def generate_phantom(spec: PhantomSpec, seed: int = 0) -> tuple[LabelVolume, dict]:
    """Paint the phantom and report per-class voxel counts.

    Deterministic for (spec, seed); the current shapes are purely geometric,
    so the seed only enters the report (kept for provenance and future
    randomized phantoms).
    """
    names = spec.resolve_class_names()
    nx, ny, nz = spec.dims
    data = np.zeros(spec.dims, dtype=np.uint8 if len(names) <= 256 else np.int16)
    x = np.arange(nx, dtype=float)[:, None, None]
    y = np.arange(ny, dtype=float)[None, :, None]
    z = np.arange(nz, dtype=float)[None, None, :]
    for organ in spec.organs:
        cx, cy, cz = organ.center
        rx, ry, rz = organ.radii
        if organ.shape == "box":
            inside = ((np.abs(x - cx) <= rx) & (np.abs(y - cy) <= ry)
                      & (np.abs(z - cz) <= rz))
        else:
            inside = (((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2
                      + ((z - cz) / rz) ** 2) <= 1.0
        data[inside] = organ.class_id
    volume = LabelVolume(spec.dims, spec.spacing, data, names)
    counts = volume.class_counts()
    report = {
        "seed": int(seed),
        "class_counts": {names[c]: int(counts[c]) for c in range(len(names))},
    }
    return volume, report


def compute_target_spacing(volumes, rule: SpacingRule = SpacingRule()):
    """Dataset target spacing: in-plane medians, out-plane percentile.

    The percentile uses linear interpolation between closest ranks
    (numpy's default), so results are reproducible across implementations.
    """
    volumes = list(volumes)
    if not volumes:
        raise ValueError("compute_target_spacing requires a non-empty volume list")
    sx = float(np.median([v.spacing[0] for v in volumes]))
    sy = float(np.median([v.spacing[1] for v in volumes]))
    sz = float(np.percentile([v.spacing[2] for v in volumes],
                             rule.out_plane_percentile, method="linear"))
    return (sx, sy, sz)


def _resample_coords(old_dims, old_spacing, new_spacing):
    """Output voxel centers mapped into input voxel coordinates, per axis.

    Voxel-center convention, align-corners disabled: output index k sits at
    physical (k + 0.5) * new_spacing, i.e. input coordinate
    (k + 0.5) * new / old - 0.5.
    """
    new_dims = tuple(max(1, int(np.floor(n * so / sn + 0.5)))
                     for n, so, sn in zip(old_dims, old_spacing, new_spacing))
    coords = [
        (np.arange(nd) + 0.5) * (sn / so) - 0.5
        for nd, sn, so in zip(new_dims, new_spacing, old_spacing)
    ]
    return new_dims, coords


def resample(volume, target_spacing):
    """Resample a label or probability volume to ``target_spacing``.

    Labels use nearest-neighbor (round half up, clamped); probabilities use
    trilinear interpolation, clamped to [0, 1], then renormalized per voxel
    when the volume is flagged normalized.  New dims are
    round(old_dims * old_spacing / new_spacing), at least 1 per axis.
    """
    target_spacing = tuple(float(s) for s in target_spacing)
    if any(s <= 0 for s in target_spacing):
        raise ValueError("target spacing components must be > 0")
    new_dims, coords = _resample_coords(volume.dims, volume.spacing, target_spacing)

    if isinstance(volume, LabelVolume):
        idx = [np.clip(np.floor(c + 0.5).astype(np.intp), 0, n - 1)
               for c, n in zip(coords, volume.dims)]
        data = volume.data[np.ix_(idx[0], idx[1], idx[2])]
        return LabelVolume(new_dims, target_spacing, data, volume.class_names)

    grid = np.meshgrid(*coords, indexing="ij")
    out = np.empty((volume.channels,) + new_dims, dtype=volume.data.dtype)
    for c in range(volume.channels):
        out[c] = ndimage.map_coordinates(volume.data[c], grid, order=1,
                                         mode="nearest")
    np.clip(out, 0.0, 1.0, out=out)
    if volume.normalized:
        sums = out.sum(axis=0)
        # interpolation of a normalized field cannot drive sums to 0 unless the
        # input was degenerate; guard anyway
        safe = np.where(sums > 1e-12, sums, 1.0)
        out /= safe
        out[:, sums <= 1e-12] = 1.0 / volume.channels
    return ProbVolume(new_dims, target_spacing, out, volume.class_names,
                      normalized=volume.normalized)


def one_hot(volume: LabelVolume, num_classes: int | None = None) -> ProbVolume:
    """One-hot encode a label volume; exactly one channel is 1 per voxel."""
    if num_classes is None:
        num_classes = volume.num_classes
    if volume.data.size and volume.data.max() >= num_classes:
        raise ValueError(
            f"class id {int(volume.data.max())} out of range for "
            f"{num_classes} channels")
    ids = np.arange(num_classes).reshape(-1, 1, 1, 1)
    data = (volume.data[None] == ids).astype(np.float64)
    names = volume.class_names + tuple(
        f"class_{c}" for c in range(volume.num_classes, num_classes))
    return ProbVolume(volume.dims, volume.spacing, data, names, normalized=True)


def argmax_labels(volume: ProbVolume) -> LabelVolume:
    """Inverse of one_hot for hard probability volumes (ties go to the lowest id)."""
    data = volume.data.argmax(axis=0).astype(
        np.uint8 if volume.channels <= 256 else np.int16)
    return LabelVolume(volume.dims, volume.spacing, data, volume.class_names)


# ---------------------------------------------------------------------------
# file I/O


def save_volume(volume, path) -> Path:
    """Write a volume; format chosen by extension (.mha/.mhd or .json+.raw)."""
    path = Path(path)
    if path.suffix in (".mha", ".mhd"):
        return _save_metaimage(volume, path)
    if path.suffix == ".json":
        return _save_json_raw(volume, path)
    raise VolumeFormatError(f"unsupported volume extension {path.suffix!r}")


def load_volume(path, kind: str):
    """Load a volume of the given kind ("label" | "prob")."""
    if kind not in ("label", "prob"):
        raise ValueError(f"kind must be 'label' or 'prob', got {kind!r}")
    path = Path(path)
    if not path.exists():
        raise VolumeFormatError(f"volume file not found: {path}")
    if path.suffix in (".mha", ".mhd"):
        return _load_metaimage(path, kind)
    if path.suffix == ".json":
        return _load_json_raw(path, kind)
    raise VolumeFormatError(f"unsupported volume extension {path.suffix!r}")


def _payload_bytes(volume) -> bytes:
    if isinstance(volume, LabelVolume):
        return volume.data.ravel(order="F").tobytes()
    planes = [volume.data[c].astype("<f4").ravel(order="F")
              for c in range(volume.channels)]
    return np.concatenate(planes).tobytes()


def _save_json_raw(volume, path: Path) -> Path:
    raw_path = path.with_suffix(".raw")
    if isinstance(volume, LabelVolume):
        dtype = "u8" if volume.data.dtype == np.uint8 else "i16"
        data = volume.data.astype("<u1" if dtype == "u8" else "<i2")
        payload = data.ravel(order="F").tobytes()
        channels = 1
    else:
        dtype = "f32"
        payload = _payload_bytes(volume)
        channels = volume.channels
    header = {
        "dims": list(volume.dims),
        "spacing": list(volume.spacing),
        "dtype": dtype,
        "channels": channels,
        "class_names": list(volume.class_names),
    }
    path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    raw_path.write_bytes(payload)
    return path


def _load_json_raw(path: Path, kind: str):
    try:
        header = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"invalid JSON header in {path}: {exc}") from exc
    for key in ("dims", "spacing", "dtype", "channels", "class_names"):
        if key not in header:
            raise VolumeFormatError(f"missing header field {key!r} in {path}")
    dims = header["dims"]
    if len(dims) != 3:
        raise VolumeFormatError(f"dims arity: expected 3 entries, got {len(dims)}")
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in header["spacing"])
    if len(spacing) != 3:
        raise VolumeFormatError("spacing arity: expected 3 entries")
    dtype_name = header["dtype"]
    if dtype_name not in _JSON_DTYPES:
        raise VolumeFormatError(f"unsupported dtype {dtype_name!r} (field 'dtype')")
    channels = int(header["channels"])
    names = tuple(str(n) for n in header["class_names"])

    raw_path = path.with_suffix(".raw")
    if not raw_path.exists():
        raise VolumeFormatError(f"payload file not found: {raw_path}")
    payload = np.fromfile(raw_path, dtype=np.dtype(_JSON_DTYPES[dtype_name]).newbyteorder("<"))
    expected = channels * int(np.prod(dims))
    if payload.size != expected:
        raise VolumeFormatError(
            f"payload size mismatch for dims/channels: header implies "
            f"{expected} voxels, payload has {payload.size}")

    if kind == "label":
        if dtype_name == "f32":
            raise VolumeFormatError("label volumes require dtype u8 or i16, "
                                    "got 'f32' (field 'dtype')")
        if channels != 1:
            raise VolumeFormatError("label volumes must have channels = 1")
        data = payload.reshape(dims, order="F")
        return LabelVolume(dims, spacing, data, names)

    if dtype_name != "f32":
        raise VolumeFormatError("probability volumes require dtype 'f32' "
                                f"(field 'dtype'), got {dtype_name!r}")
    if channels != len(names):
        raise VolumeFormatError(
            f"channels ({channels}) does not match class_names ({len(names)})")
    data = np.stack([
        payload[c * np.prod(dims):(c + 1) * np.prod(dims)]
        .reshape(dims, order="F").astype(np.float64)
        for c in range(channels)
    ])
    sums = data.sum(axis=0)
    normalized = bool(np.abs(sums - 1.0).max() <= NORMALIZATION_TOL) if data.size else True
    return ProbVolume(dims, spacing, data, names, normalized=normalized)


def _save_metaimage(volume, path: Path) -> Path:
    local = path.suffix == ".mha"
    if isinstance(volume, LabelVolume):
        data = volume.data.astype(
            "<u1" if volume.data.dtype == np.uint8 else "<i2")
        element = _MET_NAMES[np.dtype(data.dtype.newbyteorder("="))]
        payload = data.ravel(order="F").tobytes()
        channels = 1
    else:
        element = "MET_FLOAT"
        channels = volume.channels
        # MetaImage stores multi-component data channel-interleaved per voxel
        planes = volume.data.astype("<f4")
        payload = np.stack([planes[c].ravel(order="F") for c in range(channels)],
                           axis=1)
        payload = np.ascontiguousarray(payload).tobytes()
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        f"DimSize = {volume.dims[0]} {volume.dims[1]} {volume.dims[2]}",
        f"ElementSpacing = {volume.spacing[0]!r} {volume.spacing[1]!r} "
        f"{volume.spacing[2]!r}",
    ]
    if channels != 1:
        lines.append(f"ElementNumberOfChannels = {channels}")
    lines.append(f"ElementType = {element}")
    if local:
        lines.append("ElementDataFile = LOCAL")
        with open(path, "wb") as fh:
            fh.write(("\n".join(lines) + "\n").encode("ascii"))
            fh.write(payload)
    else:
        raw_path = path.with_suffix(".raw")
        lines.append(f"ElementDataFile = {raw_path.name}")
        path.write_text("\n".join(lines) + "\n")
        raw_path.write_bytes(payload)
    return path


def _parse_mhd_header(blob: bytes, path: Path):
    header = {}
    offset = 0
    view = blob
    while True:
        eol = view.find(b"\n", offset)
        if eol < 0:
            raise VolumeFormatError(f"no ElementDataFile key found in {path}")
        line = view[offset:eol].decode("ascii", errors="replace").strip()
        offset = eol + 1
        if not line:
            continue
        if "=" not in line:
            raise VolumeFormatError(f"malformed header line {line!r} in {path}")
        key, value = (part.strip() for part in line.split("=", 1))
        header[key] = value
        if key == "ElementDataFile":
            break
    return header, offset


def _load_metaimage(path: Path, kind: str):
    blob = path.read_bytes()
    header, payload_offset = _parse_mhd_header(blob, path)

    if header.get("CompressedData", "False").lower() == "true":
        raise VolumeFormatError("CompressedData = True is not supported "
                                "(field 'CompressedData')")
    if header.get("BinaryDataByteOrderMSB", "False").lower() == "true":
        raise VolumeFormatError("big-endian payloads are not supported "
                                "(field 'BinaryDataByteOrderMSB')")
    ndims = int(header.get("NDims", "0"))
    if ndims != 3:
        raise VolumeFormatError(f"NDims must be 3, got {ndims} (field 'NDims')")
    sizes = header.get("DimSize", "").split()
    if len(sizes) != ndims:
        raise VolumeFormatError(
            f"DimSize arity: NDims = {ndims} but {len(sizes)} sizes listed")
    dims = tuple(int(s) for s in sizes)
    spacing_parts = header.get("ElementSpacing", "1 1 1").split()
    if len(spacing_parts) != 3:
        raise VolumeFormatError("ElementSpacing arity: expected 3 components")
    spacing = tuple(float(s) for s in spacing_parts)
    element = header.get("ElementType", "")
    if element not in _MET_TYPES:
        raise VolumeFormatError(
            f"unsupported ElementType {element!r} (field 'ElementType')")
    channels = int(header.get("ElementNumberOfChannels", "1"))

    datafile = header["ElementDataFile"]
    if datafile == "LOCAL":
        payload = np.frombuffer(
            blob, dtype=np.dtype(_MET_TYPES[element]).newbyteorder("<"),
            offset=payload_offset)
    else:
        raw_path = path.parent / datafile
        if not raw_path.exists():
            raise VolumeFormatError(f"ElementDataFile not found: {raw_path}")
        payload = np.fromfile(
            raw_path, dtype=np.dtype(_MET_TYPES[element]).newbyteorder("<"))
    expected = channels * int(np.prod(dims))
    if payload.size != expected:
        raise VolumeFormatError(
            f"DimSize/payload mismatch: header implies {expected} elements, "
            f"payload has {payload.size}")

    if kind == "label":
        if element == "MET_FLOAT":
            raise VolumeFormatError("label volumes require MET_UCHAR or "
                                    "MET_SHORT (field 'ElementType')")
        if channels != 1:
            raise VolumeFormatError("label volumes must have "
                                    "ElementNumberOfChannels = 1")
        data = payload.reshape(dims, order="F")
        names = _default_names(int(data.max()) + 1 if data.size else 1)
        return LabelVolume(dims, spacing, data, names)

    if element != "MET_FLOAT":
        raise VolumeFormatError("probability volumes require MET_FLOAT "
                                "(field 'ElementType')")
    per_voxel = payload.reshape(-1, channels)
    data = np.stack([per_voxel[:, c].reshape(dims, order="F").astype(np.float64)
                     for c in range(channels)])
    names = _default_names(channels)
    sums = data.sum(axis=0)
    normalized = bool(np.abs(sums - 1.0).max() <= NORMALIZATION_TOL) if data.size else True
    return ProbVolume(dims, spacing, data, names, normalized=normalized)


def _default_names(num_classes: int) -> tuple[str, ...]:
    return ("background",) + tuple(f"class_{c}" for c in range(1, num_classes))
