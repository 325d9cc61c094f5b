"""Grid data types and their on-disk format.

A stored object is a pair of files sharing a stem: ``<name>.json`` (UTF-8
header) and ``<name>.raw`` (little-endian float32 payload, row-major).
The header carries ``dims``, ``spacing``, ``dtype`` (always ``"f32"``) and
``kind`` (``"volume"``, ``"labels"``, ``"atlas"`` or ``"field"``); atlas
headers additionally carry ``num_labels`` and ``label_groups``, label
headers ``num_labels``, field headers ``stride`` and ``field_type``.
Atlas and field payloads interleave the per-voxel vector, so the channel
index varies fastest.

All types are immutable after construction and safe to share across
threads; their arrays are locked against writes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

KNOWN_SUFFIXES = (".json", ".raw", ".vol")
ATLAS_SUM_TOL = 1e-5


def _locked(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class GridShape:
    """Discrete 2D or 3D sampling grid: dimensions plus per-axis voxel size."""

    dims: tuple[int, ...]
    spacing: tuple[float, ...] = ()

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) not in (2, 3):
            raise DataError(f"grid must be 2D or 3D, got dims {dims}")
        if any(d < 2 for d in dims):
            raise DataError(f"all grid dims must be >= 2, got {dims}")
        spacing = tuple(float(s) for s in self.spacing) or (1.0,) * len(dims)
        if len(spacing) != len(dims):
            raise DataError("spacing length must match dims")
        if any(s <= 0 for s in spacing):
            raise DataError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def num_voxels(self) -> int:
        return int(np.prod(self.dims))


@dataclass(frozen=True)
class Volume:
    """Scalar intensity grid (float32, arbitrary units)."""

    shape: GridShape
    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, order="C")
        if data.size != self.shape.num_voxels:
            raise DataError(
                f"data size {data.size} does not match grid {self.shape.dims}"
            )
        data = data.reshape(self.shape.dims)
        if not np.all(np.isfinite(data)):
            raise DataError("volume contains non-finite values")
        object.__setattr__(self, "data", _locked(data))


@dataclass(frozen=True)
class LabelMap:
    """Discrete segmentation with labels in ``[0, num_labels)``."""

    shape: GridShape
    labels: np.ndarray
    num_labels: int

    def __post_init__(self):
        labels = np.array(self.labels, order="C")
        if labels.size != self.shape.num_voxels:
            raise DataError(
                f"label count {labels.size} does not match grid {self.shape.dims}"
            )
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == np.round(labels)):
                raise DataError("labels must be integral")
        labels = labels.astype(np.int32).reshape(self.shape.dims)
        if labels.min(initial=0) < 0 or labels.max(initial=0) >= self.num_labels:
            raise DataError(
                f"labels must lie in [0, {self.num_labels}), "
                f"got range [{labels.min()}, {labels.max()}]"
            )
        object.__setattr__(self, "labels", _locked(labels))


@dataclass(frozen=True)
class ProbAtlas:
    """Per-voxel label probability vectors with a label-to-class grouping.

    ``probs`` is stored channel-first, shape ``(num_labels, *dims)``; every
    per-voxel vector must be nonnegative and sum to 1 within 1e-5.
    ``label_groups[l]`` gives the intensity-class index of label ``l``;
    the grouping must be total and surjective onto ``[0, num_classes)``.
    """

    shape: GridShape
    num_labels: int
    probs: np.ndarray
    label_groups: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.num_labels < 1:
            raise DataError("atlas needs at least one label")
        probs = np.array(self.probs, dtype=np.float32, order="C")
        expected = (self.num_labels, *self.shape.dims)
        if probs.size != self.num_labels * self.shape.num_voxels:
            raise DataError(
                f"atlas payload size {probs.size} does not match "
                f"{self.num_labels} labels on grid {self.shape.dims}"
            )
        probs = probs.reshape(expected)
        if not np.all(np.isfinite(probs)):
            raise DataError("atlas contains non-finite probabilities")
        if probs.min() < 0:
            raise DataError(
                f"atlas contains negative probability {probs.min():.6g}"
            )
        sums = probs.sum(axis=0, dtype=np.float64)
        err = np.abs(sums - 1.0).max()
        if err > ATLAS_SUM_TOL:
            raise DataError(
                f"atlas probabilities must sum to 1 per voxel "
                f"(worst deviation {err:.3g} > {ATLAS_SUM_TOL:g})"
            )
        groups = self.label_groups
        if groups is None:
            groups = np.arange(self.num_labels)
        groups = np.asarray(groups)
        if groups.shape != (self.num_labels,):
            raise DataError("label_groups must assign a class to every label")
        if not np.issubdtype(groups.dtype, np.integer):
            raise DataError("label_groups must be integers")
        groups = groups.astype(np.int32)
        if groups.min() < 0:
            raise DataError("label_groups must be nonnegative")
        num_classes = int(groups.max()) + 1
        if set(np.unique(groups)) != set(range(num_classes)):
            raise DataError(
                f"label_groups must cover every class in [0, {num_classes})"
            )
        object.__setattr__(self, "probs", _locked(probs))
        object.__setattr__(self, "label_groups", _locked(groups))

    @property
    def num_classes(self) -> int:
        return int(self.label_groups.max()) + 1


def normalize_atlas(
    shape: GridShape, weights: np.ndarray, label_groups=None
) -> ProbAtlas:
    """Turn per-voxel nonnegative weights into a probability atlas.

    Parameters
    ----------
    shape : GridShape
        Target grid.
    weights : array, shape (num_labels, \\*dims)
        Nonnegative per-voxel weights; each voxel must have positive total.
    label_groups : array of int, optional
        Label-to-class map; defaults to the identity.

    Returns
    -------
    ProbAtlas with per-voxel vectors summing to 1 within 1e-6 and the
    input ratios preserved.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != len(shape.dims) + 1:
        raise DataError(
            f"weights must be (num_labels, *dims), got shape {w.shape}"
        )
    if w.shape[1:] != shape.dims:
        raise DataError(f"weights grid {w.shape[1:]} does not match {shape.dims}")
    if not np.all(np.isfinite(w)):
        raise DataError("weights contain non-finite values")
    if w.min() < 0:
        raise DataError(f"weights must be nonnegative, found {w.min():.6g}")
    totals = w.sum(axis=0)
    if totals.min() <= 0:
        raise DataError("voxel with all-zero weights cannot be normalized")
    return ProbAtlas(shape, w.shape[0], w / totals, label_groups)


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------


def _stem(path) -> Path:
    path = Path(path)
    if path.suffix in KNOWN_SUFFIXES:
        path = path.with_suffix("")
    return path


def write_raw(path, header: dict, payload: np.ndarray) -> None:
    """Write a header/payload pair; low-level primitive shared by all kinds."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    with open(stem.with_suffix(".json"), "w", encoding="utf-8") as f:
        json.dump(header, f, sort_keys=True, indent=1)
        f.write("\n")
    payload.astype("<f4").tofile(stem.with_suffix(".raw"))


def read_raw(path) -> tuple[dict, np.ndarray]:
    """Read a header/payload pair; validates header syntax and finiteness."""
    stem = _stem(path)
    header_path = stem.with_suffix(".json")
    try:
        with open(header_path, encoding="utf-8") as f:
            header = json.load(f)
    except FileNotFoundError:
        raise DataError(f"missing header file {header_path}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"malformed header {header_path}: {e}") from None
    if not isinstance(header, dict):
        raise DataError(f"malformed header {header_path}: not a JSON object")
    for key in ("dims", "spacing", "dtype", "kind"):
        if key not in header:
            raise DataError(f"malformed header {header_path}: missing '{key}'")
    if header["dtype"] != "f32":
        raise DataError(f"unsupported dtype {header['dtype']!r}")
    raw_path = stem.with_suffix(".raw")
    try:
        payload = np.fromfile(raw_path, dtype="<f4")
    except FileNotFoundError:
        raise DataError(f"missing payload file {raw_path}") from None
    if not np.all(np.isfinite(payload)):
        raise DataError(f"payload {raw_path} contains non-finite values")
    return header, payload


def _grid_from_header(header: dict) -> GridShape:
    return GridShape(tuple(header["dims"]), tuple(header["spacing"]))


def _check_payload(header: dict, payload: np.ndarray, channels: int) -> GridShape:
    shape = _grid_from_header(header)
    expected = shape.num_voxels * channels
    if payload.size != expected:
        raise DataError(
            f"payload length mismatch: expected {expected} values "
            f"for dims {shape.dims}, got {payload.size}"
        )
    return shape


def write_volume(volume: Volume, path) -> None:
    """Write a Volume; roundtrips bit-exactly through :func:`read_volume`."""
    header = {
        "dims": list(volume.shape.dims),
        "spacing": list(volume.shape.spacing),
        "dtype": "f32",
        "kind": "volume",
    }
    write_raw(path, header, volume.data)


def read_volume(path) -> Volume:
    header, payload = read_raw(path)
    if header["kind"] != "volume":
        raise DataError(f"expected kind 'volume', got {header['kind']!r}")
    shape = _check_payload(header, payload, 1)
    return Volume(shape, payload)


def write_labels(labels: LabelMap, path) -> None:
    header = {
        "dims": list(labels.shape.dims),
        "spacing": list(labels.shape.spacing),
        "dtype": "f32",
        "kind": "labels",
        "num_labels": labels.num_labels,
    }
    write_raw(path, header, labels.labels.astype(np.float32))


def read_labels(path) -> LabelMap:
    header, payload = read_raw(path)
    if header["kind"] != "labels":
        raise DataError(f"expected kind 'labels', got {header['kind']!r}")
    if "num_labels" not in header:
        raise DataError("label header missing 'num_labels'")
    shape = _check_payload(header, payload, 1)
    return LabelMap(shape, payload, int(header["num_labels"]))


def write_atlas(atlas: ProbAtlas, path) -> None:
    """Write a ProbAtlas with the per-voxel vector interleaved."""
    header = {
        "dims": list(atlas.shape.dims),
        "spacing": list(atlas.shape.spacing),
        "dtype": "f32",
        "kind": "atlas",
        "num_labels": atlas.num_labels,
        "label_groups": [int(g) for g in atlas.label_groups],
    }
    interleaved = np.moveaxis(atlas.probs, 0, -1)
    write_raw(path, header, np.ascontiguousarray(interleaved))


def read_atlas(path) -> ProbAtlas:
    header, payload = read_raw(path)
    if header["kind"] != "atlas":
        raise DataError(f"expected kind 'atlas', got {header['kind']!r}")
    for key in ("num_labels", "label_groups"):
        if key not in header:
            raise DataError(f"atlas header missing '{key}'")
    num_labels = int(header["num_labels"])
    shape = _check_payload(header, payload, num_labels)
    voxel_major = payload.reshape(*shape.dims, num_labels)
    probs = np.moveaxis(voxel_major, -1, 0)
    groups = np.asarray(header["label_groups"], dtype=np.int32)
    return ProbAtlas(shape, num_labels, probs, groups)
