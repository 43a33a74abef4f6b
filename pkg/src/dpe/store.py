"""Feature stores: frozen embeddings with class and optional group labels.

Two on-disk formats are supported.  The binary ``DPEF`` layout is canonical
and round-trips bit-exactly; CSV exists for interoperability.

Binary layout (little-endian)::

    magic     4s   b"DPEF"
    version   u32  1
    flags     u32  bit 0 set iff group labels are present
    n_samples u64
    dim       u32
    K         u32  class count
    G         u32  group count (0 when absent)
    features  f32  n_samples * dim, row-major
    labels    i32  n_samples
    groups    i32  n_samples (only when flag bit 0 is set)
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DPEF"
VERSION = 1
FLAG_HAS_GROUPS = 1
_HEADER = struct.Struct("<4sIIQIII")


class StoreError(ValueError):
    """A feature store violates one of its invariants."""


class FormatError(ValueError):
    """A file could not be parsed.  ``where`` names the byte offset or line."""

    def __init__(self, message: str, where: str | None = None):
        self.where = where
        super().__init__(f"{message} ({where})" if where else message)


@dataclass(frozen=True, eq=False)
class FeatureStore:
    """Embedding matrix plus labels.

    Features are held as float64 but quantized to float32 precision on
    construction, so whatever lives in memory is exactly what the binary
    format stores.  ``name`` is a free-form tag and takes no part in
    equality.
    """

    features: np.ndarray
    labels: np.ndarray
    groups: np.ndarray | None = None
    n_classes: int | None = None
    n_groups: int | None = None
    name: str = ""
    _class_index: dict = field(default=None, init=False, repr=False)

    def __post_init__(self):
        feats = np.asarray(self.features)
        if feats.ndim != 2:
            raise StoreError(f"features must be 2-d, got shape {feats.shape}")
        n, dim = feats.shape
        if n < 1 or dim < 1:
            raise StoreError(f"empty feature matrix {feats.shape}")
        if not np.all(np.isfinite(feats)):
            bad = int(np.argwhere(~np.isfinite(feats))[0][0])
            raise StoreError(f"non-finite feature value in sample {bad}")
        feats32 = feats.astype(np.float32)
        if not np.all(np.isfinite(feats32)):
            raise StoreError("feature value overflows float32")
        feats = feats32.astype(np.float64)

        labels = _as_label_vector(self.labels, n, "labels")
        k = int(labels.max()) + 1 if self.n_classes is None else int(self.n_classes)
        if k < 2:
            raise StoreError(f"need at least 2 classes, got {k}")
        if k > n:
            raise StoreError(f"{k} classes cannot all be present in {n} samples")
        if labels.min() < 0 or labels.max() >= k:
            raise StoreError(f"class label out of range [0, {k})")
        missing = np.setdiff1d(np.arange(k), labels)
        if missing.size:
            raise StoreError(f"no samples for class {int(missing[0])}")

        groups = None
        g = None
        if self.groups is not None:
            groups = _as_label_vector(self.groups, n, "groups")
            g = int(groups.max()) + 1 if self.n_groups is None else int(self.n_groups)
            if g < 1:
                raise StoreError(f"group count must be positive, got {g}")
            if groups.min() < 0 or groups.max() >= g:
                raise StoreError(f"group label out of range [0, {g})")
        elif self.n_groups not in (None, 0):
            raise StoreError("n_groups given without group labels")

        for arr in (feats, labels) + ((groups,) if groups is not None else ()):
            arr.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "n_classes", k)
        object.__setattr__(self, "n_groups", g)

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def has_groups(self) -> bool:
        return self.groups is not None

    def subset(self, indices) -> FeatureStore:
        """Store restricted to ``indices``; class and group counts are kept."""
        idx = np.asarray(indices, dtype=np.int64)
        return FeatureStore(
            self.features[idx],
            self.labels[idx],
            None if self.groups is None else self.groups[idx],
            n_classes=self.n_classes,
            n_groups=self.n_groups,
            name=self.name,
        )

    def __eq__(self, other):
        if not isinstance(other, FeatureStore):
            return NotImplemented
        if (self.n_classes, self.n_groups) != (other.n_classes, other.n_groups):
            return False
        if self.has_groups != other.has_groups:
            return False
        same = np.array_equal(self.features, other.features) and np.array_equal(self.labels, other.labels)
        if self.has_groups:
            same = same and np.array_equal(self.groups, other.groups)
        return bool(same)

    __hash__ = None


def _as_label_vector(values, n: int, what: str) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1 or arr.shape[0] != n:
        raise StoreError(f"{what} must be a vector of length {n}, got shape {arr.shape}")
    if arr.dtype.kind == "f":
        if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
            raise StoreError(f"{what} must be integers")
    elif arr.dtype.kind not in "iub":
        raise StoreError(f"{what} must be integers, got dtype {arr.dtype}")
    if arr.size and (arr.min() < np.iinfo(np.int32).min or arr.max() > np.iinfo(np.int32).max):
        raise StoreError(f"{what} do not fit in int32")
    return arr.astype(np.int64)


def class_index(store: FeatureStore) -> dict[int, np.ndarray]:
    """Map each class label to the ascending indices of its samples."""
    if store._class_index is None:
        index = {k: np.flatnonzero(store.labels == k) for k in range(store.n_classes)}
        object.__setattr__(store, "_class_index", index)
    return store._class_index


def group_index(store: FeatureStore) -> dict[int, np.ndarray]:
    """Like :func:`class_index` but keyed by group label; empty groups are omitted."""
    if not store.has_groups:
        raise StoreError("store has no group labels")
    out = {}
    for g in range(store.n_groups):
        idx = np.flatnonzero(store.groups == g)
        if idx.size:
            out[g] = idx
    return out


# -- binary format --------------------------------------------------------

def to_bytes(store: FeatureStore) -> bytes:
    flags = FLAG_HAS_GROUPS if store.has_groups else 0
    header = _HEADER.pack(
        MAGIC, VERSION, flags, store.n_samples, store.dim,
        store.n_classes, store.n_groups or 0,
    )
    parts = [
        header,
        store.features.astype("<f4").tobytes(),
        store.labels.astype("<i4").tobytes(),
    ]
    if store.has_groups:
        parts.append(store.groups.astype("<i4").tobytes())
    return b"".join(parts)


def from_bytes(data: bytes, name: str = "") -> FeatureStore:
    if len(data) < _HEADER.size:
        raise FormatError(f"file too short for header: {len(data)} < {_HEADER.size} bytes", "offset 0")
    magic, version, flags, n, dim, k, g = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", "offset 0")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", "offset 4")
    if flags & ~FLAG_HAS_GROUPS:
        raise FormatError(f"unknown flag bits 0x{flags:x}", "offset 8")
    has_groups = bool(flags & FLAG_HAS_GROUPS)
    if n < 1 or dim < 1:
        raise FormatError(f"empty payload n_samples={n} dim={dim}", "offset 12")
    if k < 2 or k > n:
        raise FormatError(f"class count {k} outside [2, n_samples={n}]", "offset 24")
    if has_groups != (g > 0):
        raise FormatError(f"group count {g} inconsistent with flags 0x{flags:x}", "offset 28")

    off = _HEADER.size
    expected = off + n * dim * 4 + n * 4 * (2 if has_groups else 1)
    if len(data) != expected:
        raise FormatError(
            f"payload size mismatch: header n_samples={n} dim={dim} implies {expected} bytes, file has {len(data)}",
            f"offset {min(len(data), expected)}",
        )
    feats = np.frombuffer(data, dtype="<f4", count=n * dim, offset=off).reshape(n, dim)
    bad = np.argwhere(~np.isfinite(feats))
    if bad.size:
        i, j = (int(v) for v in bad[0])
        raise FormatError(f"non-finite feature at sample {i} column {j}", f"offset {off + 4 * (i * dim + j)}")
    off_labels = off + n * dim * 4
    labels = np.frombuffer(data, dtype="<i4", count=n, offset=off_labels)
    _check_range(labels, k, "class label", off_labels)
    groups = None
    if has_groups:
        off_groups = off_labels + n * 4
        groups = np.frombuffer(data, dtype="<i4", count=n, offset=off_groups)
        _check_range(groups, g, "group label", off_groups)
    try:
        return FeatureStore(feats.astype(np.float64), labels, groups, n_classes=k,
                            n_groups=g if has_groups else None, name=name)
    except StoreError as exc:
        raise FormatError(str(exc), "payload") from exc


def _check_range(values: np.ndarray, upper: int, what: str, base: int) -> None:
    bad = np.flatnonzero((values < 0) | (values >= upper))
    if bad.size:
        i = int(bad[0])
        raise FormatError(f"{what} {int(values[i])} out of range [0, {upper})", f"offset {base + 4 * i}")


# -- csv format -----------------------------------------------------------

def _write_csv(store: FeatureStore, path: Path) -> None:
    header = [f"f{j}" for j in range(store.dim)] + ["label"]
    if store.has_groups:
        header.append("group")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(store.n_samples):
            row = [repr(float(np.float32(v))) for v in store.features[i]]
            row.append(str(int(store.labels[i])))
            if store.has_groups:
                row.append(str(int(store.groups[i])))
            w.writerow(row)


def _read_csv(path: Path) -> FeatureStore:
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        try:
            header = next(rows)
        except StopIteration:
            raise FormatError("empty csv file", "line 1") from None
        has_groups = header[-1:] == ["group"]
        n_feat = len(header) - (2 if has_groups else 1)
        expect = [f"f{j}" for j in range(n_feat)] + ["label"] + (["group"] if has_groups else [])
        if n_feat < 1 or header != expect:
            raise FormatError("header must be f0,...,f{dim-1},label[,group]", "line 1")
        feats, labels, groups = [], [], []
        for lineno, row in enumerate(rows, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"expected {len(header)} fields, got {len(row)}", f"line {lineno}")
            try:
                vals = [float(v) for v in row[:n_feat]]
                lab = int(row[n_feat])
                grp = int(row[n_feat + 1]) if has_groups else None
            except ValueError as exc:
                raise FormatError(str(exc), f"line {lineno}") from None
            if not all(np.isfinite(vals)):
                raise FormatError("non-finite feature value", f"line {lineno}")
            if lab < 0 or (grp is not None and grp < 0):
                raise FormatError("negative label", f"line {lineno}")
            feats.append(vals)
            labels.append(lab)
            groups.append(grp)
    if not feats:
        raise FormatError("no samples", "line 2")
    try:
        return FeatureStore(np.array(feats), np.array(labels),
                            np.array(groups) if has_groups else None, name=path.stem)
    except StoreError as exc:
        raise FormatError(str(exc), str(path)) from exc


def _resolve_format(path: Path, fmt: str | None) -> str:
    if fmt is None:
        fmt = "csv" if path.suffix.lower() == ".csv" else "binary"
    if fmt not in ("binary", "csv"):
        raise ValueError(f"unknown store format {fmt!r}")
    return fmt


def save_store(store: FeatureStore, path, fmt: str | None = None) -> None:
    """Write ``store`` to ``path``.  The format defaults from the suffix."""
    path = Path(path)
    if _resolve_format(path, fmt) == "csv":
        _write_csv(store, path)
    else:
        path.write_bytes(to_bytes(store))


def load_store(path, fmt: str | None = None) -> FeatureStore:
    path = Path(path)
    if _resolve_format(path, fmt) == "csv":
        return _read_csv(path)
    return from_bytes(path.read_bytes(), name=path.stem)
