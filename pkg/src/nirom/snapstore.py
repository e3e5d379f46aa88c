"""Snapshot storage: validated in-memory snapshot sets, a bit-exact binary
container, and min-max scaling between physical units and activation ranges.

Binary container layout (little-endian throughout):

    magic            4 bytes  b"NSNP"
    version          u32      1
    N                u64      rows (spatial degrees of freedom)
    M                u64      columns (time samples)
    F                u64      field count
    F field records: name length u32, UTF-8 name, offset u64, length u64
    times            M * f64
    matrix           N * M * f64, column-major

A sidecar JSON manifest (same basename, ".json") duplicates the sizes and
field names for human inspection and carries data the binary does not house
(mesh id, container kind). The binary file is authoritative for payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CorruptHeaderError,
    DimensionMismatchError,
    EmptySnapshotSetError,
    InvalidSpecError,
    LayoutMismatchError,
    NonFiniteValuesError,
    NonMonotoneTimesError,
    SnapshotIOError,
)

MAGIC = b"NSNP"
VERSION = 1


@dataclass(frozen=True)
class FieldLayout:
    """One physical variable's slice of the row dimension."""

    name: str
    offset: int
    length: int

    def rows(self) -> slice:
        return slice(self.offset, self.offset + self.length)


def _as_fields(fields, n_rows: int) -> tuple[FieldLayout, ...]:
    if fields is None:
        return (FieldLayout("u", 0, n_rows),)
    out = []
    for f in fields:
        if isinstance(f, FieldLayout):
            out.append(f)
        else:
            name, offset, length = f
            out.append(FieldLayout(str(name), int(offset), int(length)))
    return tuple(out)


def _check_fields(fields: tuple[FieldLayout, ...], n_rows: int) -> None:
    ordered = sorted(fields, key=lambda f: f.offset)
    cursor = 0
    for f in ordered:
        if f.length < 0 or f.offset != cursor:
            raise LayoutMismatchError(
                f"field segments must be disjoint and contiguous; got {fields}"
            )
        cursor += f.length
    if cursor != n_rows:
        raise LayoutMismatchError(
            f"field lengths sum to {cursor}, expected {n_rows} rows"
        )


@dataclass(frozen=True)
class SnapshotSet:
    """N x M matrix of full-field states, one column per time sample.

    Immutable after construction; the data buffer is marked read-only so the
    set can be shared across threads.
    """

    data: np.ndarray
    times: np.ndarray
    fields: tuple[FieldLayout, ...] = field(default=None)  # type: ignore[assignment]
    mesh_id: str = ""

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, order="F", copy=True)
        if data.ndim != 2:
            raise DimensionMismatchError("snapshot data must be a 2-D matrix")
        n, m = data.shape
        if m == 0 or n == 0:
            raise EmptySnapshotSetError("empty snapshot set")
        times = np.array(self.times, dtype=np.float64, copy=True)
        if times.shape != (m,):
            raise DimensionMismatchError(
                f"times has length {times.size}, expected {m} columns"
            )
        if m > 1 and not np.all(np.diff(times) > 0):
            raise NonMonotoneTimesError("times must be strictly increasing")
        if not np.isfinite(times).all():
            raise NonFiniteValuesError("times contain non-finite values")
        if not np.isfinite(data).all():
            raise NonFiniteValuesError("snapshot entries contain non-finite values")
        fields = _as_fields(self.fields, n)
        _check_fields(fields, n)
        data.setflags(write=False)
        times.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "fields", fields)

    @property
    def n_rows(self) -> int:
        return self.data.shape[0]

    @property
    def n_cols(self) -> int:
        return self.data.shape[1]

    def field_named(self, name: str) -> FieldLayout:
        for f in self.fields:
            if f.name == name:
                return f
        raise LayoutMismatchError(f"no field named {name!r}")

    def field_data(self, name: str) -> np.ndarray:
        return self.data[self.field_named(name).rows(), :]

    def with_data(self, data: np.ndarray) -> "SnapshotSet":
        """Same layout and times, new matrix."""
        return SnapshotSet(data, self.times, self.fields, self.mesh_id)

    def time_slice(self, start: float, end: float, rtol: float = 1e-9) -> "SnapshotSet":
        """Columns whose times fall in [start, end] (endpoint tolerance rtol)."""
        span = max(abs(start), abs(end), 1.0)
        keep = (self.times >= start - rtol * span) & (self.times <= end + rtol * span)
        if not keep.any():
            raise EmptySnapshotSetError(
                f"no snapshots in window [{start}, {end}]"
            )
        return SnapshotSet(self.data[:, keep], self.times[keep], self.fields, self.mesh_id)

    def same_layout(self, other: "SnapshotSet") -> bool:
        return self.n_rows == other.n_rows and self.fields == other.fields


def _sidecar_path(path, kind: str) -> Path:
    # snapshot files follow the "same basename + .json" contract; other
    # container kinds append the full suffix so a shared basename between a
    # snapshot file and a model file cannot collide
    path = Path(path)
    if kind == "snapshots":
        return path.with_suffix(".json")
    return Path(str(path) + ".json")


def _find_sidecar(path) -> Path | None:
    path = Path(path)
    for candidate in (Path(str(path) + ".json"), path.with_suffix(".json")):
        if candidate.exists():
            return candidate
    return None


def write_container(path, matrix: np.ndarray, vector: np.ndarray,
                    fields: tuple[FieldLayout, ...], kind: str = "snapshots",
                    extra: dict | None = None) -> None:
    """Low-level writer shared by snapshot, basis, and model persistence.

    ``vector`` fills the times slot; its meaning depends on ``kind``.
    """
    path = Path(path)
    matrix = np.asarray(matrix, dtype=np.float64)
    vector = np.asarray(vector, dtype=np.float64)
    n, m = matrix.shape
    if vector.shape != (m,):
        raise DimensionMismatchError("vector length must match column count")
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", VERSION))
            fh.write(struct.pack("<QQQ", n, m, len(fields)))
            for f in fields:
                name = f.name.encode("utf-8")
                fh.write(struct.pack("<I", len(name)))
                fh.write(name)
                fh.write(struct.pack("<QQ", f.offset, f.length))
            fh.write(vector.astype("<f8").tobytes())
            fh.write(np.asfortranarray(matrix).astype("<f8").tobytes(order="F"))
        manifest = {
            "magic": MAGIC.decode("ascii"),
            "version": VERSION,
            "kind": kind,
            "n_rows": n,
            "n_cols": m,
            "fields": [{"name": f.name, "offset": f.offset, "length": f.length}
                       for f in fields],
        }
        if extra:
            manifest.update(extra)
        with open(_sidecar_path(path, kind), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, sort_keys=True, indent=2)
            fh.write("\n")
    except OSError as exc:
        raise SnapshotIOError(f"cannot write {path}: {exc}") from exc


def read_container(path):
    """Parse the binary container; returns (matrix, vector, fields, manifest).

    Structural validation only; semantic checks (monotone times, finiteness)
    belong to the kind-specific loaders.
    """
    path = Path(path)
    if not path.exists():
        raise SnapshotIOError(f"file not found: {path}")
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise SnapshotIOError(f"cannot read {path}: {exc}") from exc

    view = memoryview(blob)
    if len(view) < 32:
        raise CorruptHeaderError(f"{path}: file shorter than fixed header")
    if bytes(view[:4]) != MAGIC:
        raise CorruptHeaderError(f"{path}: bad magic {bytes(view[:4])!r}")
    (version,) = struct.unpack_from("<I", view, 4)
    if version != VERSION:
        raise CorruptHeaderError(f"{path}: unsupported version {version}")
    n, m, n_fields = struct.unpack_from("<QQQ", view, 8)
    pos = 32
    fields = []
    for _ in range(n_fields):
        if pos + 4 > len(view):
            raise CorruptHeaderError(f"{path}: truncated field record")
        (name_len,) = struct.unpack_from("<I", view, pos)
        pos += 4
        if pos + name_len + 16 > len(view):
            raise CorruptHeaderError(f"{path}: truncated field record")
        name = bytes(view[pos:pos + name_len]).decode("utf-8")
        pos += name_len
        offset, length = struct.unpack_from("<QQ", view, pos)
        pos += 16
        fields.append(FieldLayout(name, offset, length))

    expected = pos + 8 * m + 8 * n * m
    if len(view) != expected:
        raise DimensionMismatchError(
            f"{path}: payload is {len(view)} bytes, header declares {expected}"
        )
    vector = np.frombuffer(blob, dtype="<f8", count=m, offset=pos).copy()
    matrix = np.frombuffer(blob, dtype="<f8", count=n * m,
                           offset=pos + 8 * m).reshape((n, m), order="F").copy()

    manifest = {}
    sidecar = _find_sidecar(path)
    if sidecar is not None:
        try:
            manifest = json.loads(sidecar.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError):
            manifest = {}
    return matrix, vector, tuple(fields), manifest


def save(snap: SnapshotSet, path) -> None:
    """Write a snapshot set; load(save(s)) reproduces s bit-exactly."""
    write_container(path, snap.data, snap.times, snap.fields,
                    kind="snapshots", extra={"mesh_id": snap.mesh_id})


def load(path) -> SnapshotSet:
    """Read and fully validate a snapshot file."""
    matrix, times, fields, manifest = read_container(path)
    kind = manifest.get("kind", "snapshots")
    if kind != "snapshots":
        raise CorruptHeaderError(f"{path}: container kind is {kind!r}, not snapshots")
    if matrix.shape[1] == 0:
        raise EmptySnapshotSetError(f"{path}: empty snapshot set")
    mesh_id = str(manifest.get("mesh_id", ""))
    return SnapshotSet(matrix, times, fields, mesh_id)


_TARGETS = {(0.0, 1.0), (-1.0, 1.0)}


@dataclass(frozen=True)
class ScalingParams:
    """Affine per-row maps onto a target interval.

    Per-field granularity stores one map per physical variable, expanded here
    to per-row arrays; ``degenerate_rows`` lists rows with zero range, which
    map to the interval midpoint and invert to their original constant.
    """

    granularity: str
    target: tuple[float, float]
    row_min: np.ndarray
    row_max: np.ndarray
    degenerate_rows: tuple[int, ...]
    fields: tuple[FieldLayout, ...]

    def __post_init__(self):
        self.row_min.setflags(write=False)
        self.row_max.setflags(write=False)


def fit_scaling(snap: SnapshotSet, target_interval=(0.0, 1.0),
                granularity: str = "per-field") -> ScalingParams:
    """Min/max over all columns, per row or per field."""
    target = (float(target_interval[0]), float(target_interval[1]))
    if target not in _TARGETS:
        raise InvalidSpecError(f"target interval must be [0,1] or [-1,1], got {target}")
    if granularity not in ("per-row", "per-field"):
        raise InvalidSpecError(f"unknown granularity {granularity!r}")

    n = snap.n_rows
    row_min = np.empty(n)
    row_max = np.empty(n)
    if granularity == "per-row":
        row_min[:] = snap.data.min(axis=1)
        row_max[:] = snap.data.max(axis=1)
    else:
        for f in snap.fields:
            block = snap.data[f.rows(), :]
            row_min[f.rows()] = block.min()
            row_max[f.rows()] = block.max()
    degenerate = tuple(int(i) for i in np.nonzero(row_max == row_min)[0])
    return ScalingParams(granularity, target, row_min, row_max, degenerate, snap.fields)


def apply_scaling(snap: SnapshotSet, params: ScalingParams,
                  direction: str = "forward") -> SnapshotSet:
    """Map into the target interval (forward) or back to original units."""
    if direction not in ("forward", "inverse"):
        raise InvalidSpecError(f"unknown direction {direction!r}")
    if snap.n_rows != params.row_min.size or snap.fields != params.fields:
        raise LayoutMismatchError("scaling params were fit for a different row layout")

    lo, hi = params.target
    span = params.row_max - params.row_min
    ok = span != 0.0
    safe = np.where(ok, span, 1.0)
    x = snap.data
    if direction == "forward":
        y = lo + (x - params.row_min[:, None]) * ((hi - lo) / safe[:, None])
        if not np.all(ok):
            y[~ok, :] = 0.5 * (lo + hi)
    else:
        y = params.row_min[:, None] + (x - lo) * (safe[:, None] / (hi - lo))
        if not np.all(ok):
            y[~ok, :] = params.row_min[~ok, None]
    return snap.with_data(y)


def scaling_to_dict(params: ScalingParams) -> dict:
    return {
        "granularity": params.granularity,
        "target": list(params.target),
        "row_min": params.row_min.tolist(),
        "row_max": params.row_max.tolist(),
        "degenerate_rows": list(params.degenerate_rows),
        "fields": [{"name": f.name, "offset": f.offset, "length": f.length}
                   for f in params.fields],
    }


def scaling_from_dict(d: dict) -> ScalingParams:
    fields = tuple(FieldLayout(f["name"], f["offset"], f["length"]) for f in d["fields"])
    return ScalingParams(
        d["granularity"],
        (float(d["target"][0]), float(d["target"][1])),
        np.asarray(d["row_min"], dtype=np.float64),
        np.asarray(d["row_max"], dtype=np.float64),
        tuple(int(i) for i in d["degenerate_rows"]),
        fields,
    )
