"""Feature tables, annotation files and minibatch sampling.

Formats
-------
features.csv
    D numeric columns, optional header row. A header column named
    ``instance_id`` (or ``id``) carries external instance ids; otherwise ids
    are the row numbers.
features binary
    ``SVGPFEAT`` magic, uint32 version, uint64 N, uint64 D, N*D little-endian
    float64 values in row-major order, then a uint32 CRC32 of everything before it.
annotations.csv
    header ``instance_id,annotator_id,label``; one row per annotation.
"""
from __future__ import annotations

import csv
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .crowd import AnnotationSet
from .errors import CheckpointVersionError, DataError, IntegrityError

FEATURE_MAGIC = b"SVGPFEAT"
FEATURE_VERSION = 1
ID_COLUMNS = ("instance_id", "id")


@dataclass
class FeatureTable:
    X: np.ndarray
    ids: np.ndarray  # external id of each row; row index is the internal id
    columns: list[str] | None = None
    _index: dict = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.X.ndim != 2 or len(self.ids) != len(self.X):
            raise DataError("feature matrix and id column disagree")
        if len(np.unique(self.ids)) != len(self.ids):
            raise DataError("instance ids are not unique")

    @classmethod
    def from_array(cls, X) -> "FeatureTable":
        X = np.asarray(X, dtype=np.float64)
        return cls(X, np.arange(len(X)))

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def D(self) -> int:
        return self.X.shape[1]

    def index_of(self, external_ids) -> np.ndarray:
        if self._index is None:
            self._index = {int(e): i for i, e in enumerate(self.ids)}
        ext = np.asarray(external_ids, dtype=np.int64)
        try:
            return np.array([self._index[int(e)] for e in ext], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"annotation references unknown instance id {exc.args[0]}") from None


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def load_features(path, format: str | None = None, header: bool | None = None) -> FeatureTable:
    """Read a feature table; ``format`` defaults from the extension (.csv or binary)."""
    path = Path(path)
    if format is None:
        format = "csv" if path.suffix.lower() in (".csv", ".txt") else "binary"
    if format == "binary":
        return _load_features_binary(path)
    if format != "csv":
        raise DataError(f"unknown feature format {format!r}")

    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: empty dataset")
    if header is None:
        header = not all(_is_number(c) for c in rows[0])
    columns = [c.strip() for c in rows[0]] if header else None
    body = rows[1:] if header else rows
    if not body:
        raise DataError(f"{path}: empty dataset (header only)")

    id_col = None
    if columns is not None:
        for name in ID_COLUMNS:
            if name in columns:
                id_col = columns.index(name)
                break
    width = len(columns) if columns is not None else len(body[0])
    values = np.empty((len(body), width))
    first_line = 2 if header else 1
    for r, row in enumerate(body):
        if len(row) != width:
            raise DataError(f"{path}: row {r + first_line} has {len(row)} columns, expected {width}")
        for c, cell in enumerate(row):
            try:
                values[r, c] = float(cell)
            except ValueError:
                raise DataError(f"{path}: non-numeric value {cell!r} at row {r + first_line}, column {c + 1}") from None
    bad = ~np.isfinite(values)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise DataError(f"{path}: non-finite value at row {r + first_line}, column {c + 1}")

    if id_col is None:
        return FeatureTable(values, np.arange(len(values)), columns)
    ids = values[:, id_col]
    if not np.all(ids == np.round(ids)):
        raise DataError(f"{path}: instance ids must be integers")
    keep = [c for c in range(width) if c != id_col]
    return FeatureTable(values[:, keep], ids.astype(np.int64), [columns[c] for c in keep])


def save_features(table: FeatureTable | np.ndarray, path, format: str | None = None) -> None:
    if not isinstance(table, FeatureTable):
        table = FeatureTable.from_array(table)
    path = Path(path)
    if format is None:
        format = "csv" if path.suffix.lower() in (".csv", ".txt") else "binary"
    if format == "binary":
        if not np.array_equal(table.ids, np.arange(table.N)):
            raise DataError("the binary feature format stores contiguous ids only")
        payload = FEATURE_MAGIC + struct.pack("<IQQ", FEATURE_VERSION, table.N, table.D)
        payload += table.X.astype("<f8").tobytes(order="C")
        path.write_bytes(payload + struct.pack("<I", zlib.crc32(payload)))
        return
    cols = table.columns or [f"x{d}" for d in range(table.D)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["instance_id", *cols])
        for i, row in zip(table.ids, table.X):
            w.writerow([int(i), *(repr(float(v)) for v in row)])


def _load_features_binary(path: Path) -> FeatureTable:
    data = path.read_bytes()
    head = len(FEATURE_MAGIC) + struct.calcsize("<IQQ")
    if len(data) < head + 4 or data[:len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise IntegrityError(f"{path}: not a feature file or truncated")
    if zlib.crc32(data[:-4]) != struct.unpack("<I", data[-4:])[0]:
        raise IntegrityError(f"{path}: checksum mismatch (corrupt or truncated)")
    version, N, D = struct.unpack("<IQQ", data[len(FEATURE_MAGIC):head])
    if version != FEATURE_VERSION:
        raise CheckpointVersionError(f"{path}: feature format version {version}, expected {FEATURE_VERSION}")
    if N == 0:
        raise DataError(f"{path}: empty dataset")
    if len(data) - head - 4 != N * D * 8:
        raise IntegrityError(f"{path}: payload size does not match N={N}, D={D}")
    X = np.frombuffer(data, dtype="<f8", count=N * D, offset=head).reshape(N, D).astype(np.float64)
    if not np.isfinite(X).all():
        raise DataError(f"{path}: non-finite values in row {int(np.argwhere(~np.isfinite(X))[0, 0])}")
    return FeatureTable(X, np.arange(N))


def load_annotations(path, num_classes: int | None = None) -> AnnotationSet:
    """Read ``instance_id,annotator_id,label`` rows; duplicate triples accumulate counts.

    Instance ids are kept as written; call ``bind_annotations`` to map them
    onto the rows of a FeatureTable.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"instance_id", "annotator_id", "label"}
        if reader.fieldnames is None or not need <= {f.strip() for f in reader.fieldnames}:
            raise DataError(f"{path}: expected columns instance_id,annotator_id,label")
        cols = {k: [] for k in need}
        for line, row in enumerate(reader, start=2):
            row = {k.strip(): v for k, v in row.items() if k is not None}
            for k in need:
                try:
                    cols[k].append(int(row[k]))
                except (TypeError, ValueError):
                    raise DataError(f"{path}: bad {k} {row.get(k)!r} on line {line}") from None
    labels = np.asarray(cols["label"], dtype=np.int64)
    if len(labels) and labels.min() < 0:
        bad = int(np.argmax(labels < 0)) + 2
        raise DataError(f"{path}: negative label on line {bad}")
    return AnnotationSet.from_triples(cols["instance_id"], cols["annotator_id"], labels, num_classes)


def bind_annotations(ann: AnnotationSet, table: FeatureTable) -> AnnotationSet:
    """Map external instance ids onto feature rows; dangling ids raise DataError."""
    rows = table.index_of(ann.instance)
    return AnnotationSet.from_triples(
        rows, ann.annotator, ann.label, ann.num_classes, table.N, ann.count, ann.annotator_ids
    )


def save_annotations(ann: AnnotationSet, path, instance_ids=None) -> None:
    """Write one CSV row per annotation (records with count c are written c times)."""
    ids = np.arange(ann.num_instances) if instance_ids is None else np.asarray(instance_ids)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["instance_id", "annotator_id", "label"])
        for i, a, y, c in zip(ann.instance, ann.annotator, ann.label, ann.count):
            for _ in range(int(c)):
                w.writerow([int(ids[i]), int(ann.annotator_ids[a]), int(y)])


def epoch_batches(N: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Seeded shuffle of range(N) for one epoch, chunked into ceil(N / batch_size) batches."""
    perm = np.random.default_rng([seed, epoch]).permutation(N)
    return [perm[i:i + batch_size] for i in range(0, N, batch_size)]


def minibatch_sampler(N: int, batch_size: int, seed: int, epochs: int | None = None):
    """Yield index batches epoch after epoch (forever when ``epochs`` is None)."""
    if not 1 <= batch_size <= N:
        raise DataError(f"batch size must lie in [1, {N}], got {batch_size}")
    epoch = 0
    while epochs is None or epoch < epochs:
        yield from epoch_batches(N, batch_size, seed, epoch)
        epoch += 1


def read_table(path) -> tuple[list[str], list[list[str]]]:
    """Header and rows of a CSV file, skipping ``#`` comment lines."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    if not rows:
        raise DataError(f"{path}: empty file")
    return rows[0], [r for r in rows[1:] if r]


def write_table(path, header, rows, comments=()) -> None:
    with open(path, "w", newline="") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def fmt(x) -> str:
    """Round-trippable text for floats; NaN becomes an empty cell."""
    if isinstance(x, (float, np.floating)):
        return "" if math.isnan(x) else repr(float(x))
    return str(x)


def load_probabilities(path) -> tuple[np.ndarray, np.ndarray]:
    """(ids, n x K probabilities) from an ``instance_id,p_0,...`` CSV."""
    header, rows = read_table(path)
    if not header or header[0] != "instance_id":
        raise DataError(f"{path}: first column must be instance_id")
    arr = np.array([[float(c) for c in r] for r in rows])
    if arr.size == 0:
        raise DataError(f"{path}: no predictions")
    return arr[:, 0].astype(np.int64), arr[:, 1:]


def load_truth(path) -> tuple[np.ndarray, np.ndarray]:
    header, rows = read_table(path)
    if header[:2] != ["instance_id", "label"]:
        raise DataError(f"{path}: expected columns instance_id,label")
    arr = np.array([[int(c) for c in r[:2]] for r in rows], dtype=np.int64)
    if arr.size == 0:
        raise DataError(f"{path}: no labels")
    return arr[:, 0], arr[:, 1]
