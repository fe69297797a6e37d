"""Array files, dataset manifests and score tables.

Arrays travel as NPY version 1.0 files restricted to little-endian, C-ordered
``<f4``, ``<f8`` and ``<i8`` payloads. Anything else is rejected rather than
converted, so a file that reads successfully is reproduced bit-for-bit by
:func:`write_array_file`.
"""

from __future__ import annotations

import ast
import csv
import io
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    InvariantViolation,
    IoFailure,
    Malformed,
    SchemaMismatch,
    UnsupportedDtype,
    UnsupportedLayout,
)

MAGIC = b"\x93NUMPY"
HEADER_ALIGN = 64
SUPPORTED_DTYPES = {"<f4": np.float32, "<f8": np.float64, "<i8": np.int64}

MANIFEST_HEADER = ["sample_id", "split", "label", "has_artefact", "counterfactual_id"]
SCORE_TABLE_FIXED = ["sample_id", "variant", "domain", "true_label", "predicted_label"]


# ---------------------------------------------------------------------------
# array files
# ---------------------------------------------------------------------------


def _descr(arr: np.ndarray) -> str:
    for descr, dtype in SUPPORTED_DTYPES.items():
        if arr.dtype == np.dtype(dtype):
            return descr
    raise UnsupportedDtype(f"dtype {arr.dtype} is not one of {sorted(SUPPORTED_DTYPES)}")


def _header_bytes(descr: str, shape: tuple[int, ...]) -> bytes:
    text = "{'descr': %r, 'fortran_order': False, 'shape': %r, }" % (descr, tuple(shape))
    # magic(6) + version(2) + length(2) + text + '\n' must be a multiple of 64
    unpadded = len(MAGIC) + 2 + 2 + len(text) + 1
    text += " " * (-unpadded % HEADER_ALIGN) + "\n"
    raw = text.encode("latin1")
    if len(raw) > 0xFFFF:
        raise UnsupportedLayout("header too long for a version 1.0 file")
    return MAGIC + b"\x01\x00" + len(raw).to_bytes(2, "little") + raw


def encode_array(arr: np.ndarray) -> bytes:
    """Serialise ``arr`` to NPY v1.0 bytes."""
    arr = np.asarray(arr)
    descr = _descr(arr)
    # tobytes() always emits C order, independent of the in-memory layout
    return _header_bytes(descr, arr.shape) + arr.astype(SUPPORTED_DTYPES[descr], copy=False).tobytes(order="C")


def decode_array(buf: bytes) -> np.ndarray:
    """Parse NPY v1.0 bytes produced by :func:`encode_array` or any compatible writer."""
    if len(buf) < 10 or buf[:6] != MAGIC:
        raise Malformed("missing array-file magic bytes")
    if buf[6:8] != b"\x01\x00":
        raise Malformed(f"unsupported format version {buf[6]}.{buf[7]}")
    hlen = int.from_bytes(buf[8:10], "little")
    end = 10 + hlen
    if len(buf) < end:
        raise Malformed("truncated header")
    try:
        header = ast.literal_eval(buf[10:end].decode("latin1"))
    except (ValueError, SyntaxError, UnicodeDecodeError) as exc:
        raise Malformed(f"unparseable header: {exc}") from None
    if not isinstance(header, dict) or set(header) != {"descr", "fortran_order", "shape"}:
        raise Malformed("header must hold exactly descr, fortran_order and shape")
    descr, fortran, shape = header["descr"], header["fortran_order"], header["shape"]
    if not isinstance(shape, tuple) or not all(isinstance(s, int) and s >= 0 for s in shape):
        raise Malformed(f"bad shape {shape!r}")
    if descr not in SUPPORTED_DTYPES:
        raise UnsupportedDtype(f"dtype {descr!r} is not one of {sorted(SUPPORTED_DTYPES)}")
    if fortran is not False:
        raise UnsupportedLayout("column-major payloads are not supported")
    dtype = np.dtype(SUPPORTED_DTYPES[descr])
    count = math.prod(shape)
    payload = buf[end:]
    if len(payload) != count * dtype.itemsize:
        raise Malformed(f"payload holds {len(payload)} bytes, expected {count * dtype.itemsize}")
    return np.frombuffer(payload, dtype=dtype, count=count).reshape(shape).copy()


def write_array_file(arr: np.ndarray, path: str | os.PathLike) -> None:
    data = encode_array(arr)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_array_file(path: str | os.PathLike) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return decode_array(buf)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


class Split(str, Enum):
    TRAIN = "train"
    ID_TEST = "id_test"
    OOD_TEST = "ood_test"


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    split: Split
    label: int
    has_artefact: bool
    counterfactual_id: str | None = None

    def __post_init__(self):
        if not self.sample_id:
            raise InvariantViolation("empty sample_id")
        if self.label < 0:
            raise InvariantViolation(f"{self.sample_id}: negative label")
        if self.split is Split.TRAIN and self.has_artefact:
            raise InvariantViolation(f"{self.sample_id}: training samples must be artefact-free")
        if bool(self.counterfactual_id) != bool(self.has_artefact):
            raise InvariantViolation(f"{self.sample_id}: a counterfactual twin is required exactly when the artefact is present")


@dataclass
class DatasetManifest:
    records: list[SampleRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def split(self, split: Split | str) -> list[SampleRecord]:
        split = Split(split)
        return [r for r in self.records if r.split is split]

    @property
    def num_classes(self) -> int:
        return max((r.label for r in self.records), default=-1) + 1

    def counts(self) -> dict[tuple[str, int, bool], int]:
        """Number of records per (split, label, has_artefact)."""
        out: dict[tuple[str, int, bool], int] = {}
        for r in self.records:
            key = (r.split.value, r.label, r.has_artefact)
            out[key] = out.get(key, 0) + 1
        return out

    def validate(self, num_classes: int | None = None, image_dir: str | os.PathLike | None = None) -> None:
        seen = set()
        for r in self.records:
            if r.sample_id in seen:
                raise InvariantViolation(f"duplicate sample_id {r.sample_id}")
            seen.add(r.sample_id)
            if num_classes is not None and r.label >= num_classes:
                raise InvariantViolation(f"{r.sample_id}: label {r.label} outside [0, {num_classes})")
            if image_dir is not None and r.has_artefact:
                if not r.counterfactual_id:
                    raise InvariantViolation(f"{r.sample_id}: artefact sample without counterfactual")
                if not (Path(image_dir) / f"{r.counterfactual_id}.npy").exists():
                    raise InvariantViolation(f"{r.sample_id}: counterfactual {r.counterfactual_id} missing")


def _parse_bool01(value: str, where: str) -> bool:
    if value not in ("0", "1"):
        raise SchemaMismatch(f"{where}: has_artefact must be 0 or 1, got {value!r}")
    return value == "1"


def parse_manifest(text: str, num_classes: int | None = None) -> DatasetManifest:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaMismatch("empty manifest") from None
    if header != MANIFEST_HEADER:
        raise SchemaMismatch(f"manifest header {header} != {MANIFEST_HEADER}")
    records = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(MANIFEST_HEADER):
            raise SchemaMismatch(f"line {lineno}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
        sid, split, label, artefact, cf = row
        try:
            split_v = Split(split)
            label_v = int(label)
        except ValueError as exc:
            raise SchemaMismatch(f"line {lineno}: {exc}") from None
        records.append(
            SampleRecord(sid, split_v, label_v, _parse_bool01(artefact, f"line {lineno}"), cf or None)
        )
    manifest = DatasetManifest(records)
    manifest.validate(num_classes)
    return manifest


def read_manifest(
    path: str | os.PathLike, num_classes: int | None = None, image_dir: str | os.PathLike | None = None
) -> DatasetManifest:
    """Load a manifest CSV, enforcing the record invariants.

    When ``image_dir`` is given, every artefact sample must also have its
    counterfactual array file present there.
    """
    try:
        with open(path, newline="") as fh:
            text = fh.read()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    manifest = parse_manifest(text, num_classes)
    if image_dir is not None:
        manifest.validate(num_classes, image_dir)
    return manifest


def format_manifest(manifest: DatasetManifest) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_HEADER)
    for r in manifest.records:
        w.writerow([r.sample_id, r.split.value, r.label, int(r.has_artefact), r.counterfactual_id or ""])
    return buf.getvalue()


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    try:
        Path(path).write_text(format_manifest(manifest), newline="")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


# ---------------------------------------------------------------------------
# score tables
# ---------------------------------------------------------------------------


class Variant(str, Enum):
    ORIGINAL = "original"
    COUNTERFACTUAL = "counterfactual"


class Domain(str, Enum):
    ID = "ID"
    OOD = "OOD"


@dataclass
class ScoreTable:
    """Per-sample scores, one column per method, higher meaning more in-distribution.

    Rows are kept sorted by ``(sample_id, variant)``; columns follow ``methods``.
    """

    sample_ids: list[str]
    variants: list[Variant]
    domains: list[Domain]
    true_labels: np.ndarray
    predicted_labels: np.ndarray
    scores: dict[str, np.ndarray]

    def __post_init__(self):
        n = len(self.sample_ids)
        self.variants = [Variant(v) for v in self.variants]
        self.domains = [Domain(d) for d in self.domains]
        self.true_labels = np.asarray(self.true_labels, dtype=np.int64).reshape(-1)
        self.predicted_labels = np.asarray(self.predicted_labels, dtype=np.int64).reshape(-1)
        self.scores = {m: np.asarray(s, dtype=np.float64).reshape(-1) for m, s in self.scores.items()}
        lengths = {len(self.variants), len(self.domains), len(self.true_labels), len(self.predicted_labels)}
        lengths |= {len(s) for s in self.scores.values()}
        if lengths - {n}:
            raise InvariantViolation("score table columns have unequal lengths")
        for m, s in self.scores.items():
            if m in SCORE_TABLE_FIXED or "," in m or not m:
                raise InvariantViolation(f"bad method column name {m!r}")
            if np.isnan(s).any():
                raise InvariantViolation(f"missing scores in column {m}")
        keys = list(zip(self.sample_ids, (v.value for v in self.variants)))
        if len(set(keys)) != n:
            raise InvariantViolation("duplicate (sample_id, variant) rows")
        order = sorted(range(n), key=keys.__getitem__)
        if order != list(range(n)):
            self._reorder(order)

    def _reorder(self, order):
        idx = np.asarray(order, dtype=np.int64)
        self.sample_ids = [self.sample_ids[i] for i in order]
        self.variants = [self.variants[i] for i in order]
        self.domains = [self.domains[i] for i in order]
        self.true_labels = self.true_labels[idx]
        self.predicted_labels = self.predicted_labels[idx]
        self.scores = {m: s[idx] for m, s in self.scores.items()}

    @classmethod
    def empty(cls, methods: Sequence[str] = ()) -> "ScoreTable":
        return cls([], [], [], np.zeros(0), np.zeros(0), {m: np.zeros(0) for m in methods})

    def __len__(self):
        return len(self.sample_ids)

    @property
    def methods(self) -> list[str]:
        return list(self.scores)

    @property
    def correct(self) -> np.ndarray:
        return self.predicted_labels == self.true_labels

    def mask(self, *, variant: Variant | str | None = None, domain: Domain | str | None = None) -> np.ndarray:
        keep = np.ones(len(self), dtype=bool)
        if variant is not None:
            variant = Variant(variant)
            keep &= np.array([v is variant for v in self.variants], dtype=bool)
        if domain is not None:
            domain = Domain(domain)
            keep &= np.array([d is domain for d in self.domains], dtype=bool)
        return keep

    def select(self, keep: np.ndarray) -> "ScoreTable":
        """Rows where ``keep`` is true, in their existing order."""
        keep = np.asarray(keep, dtype=bool)
        idx = np.flatnonzero(keep)
        return ScoreTable(
            [self.sample_ids[i] for i in idx],
            [self.variants[i] for i in idx],
            [self.domains[i] for i in idx],
            self.true_labels[idx],
            self.predicted_labels[idx],
            {m: s[idx] for m, s in self.scores.items()},
        )

    def keys(self) -> list[tuple[str, str]]:
        return [(s, v.value) for s, v in zip(self.sample_ids, self.variants)]

    def __eq__(self, other):
        if not isinstance(other, ScoreTable):
            return NotImplemented
        return (
            self.sample_ids == other.sample_ids
            and self.variants == other.variants
            and self.domains == other.domains
            and np.array_equal(self.true_labels, other.true_labels)
            and np.array_equal(self.predicted_labels, other.predicted_labels)
            and self.methods == other.methods
            and all(np.array_equal(self.scores[m], other.scores[m]) for m in self.methods)
        )


def format_score_table(table: ScoreTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCORE_TABLE_FIXED + table.methods)
    cols = [table.scores[m] for m in table.methods]
    for i in range(len(table)):
        w.writerow(
            [
                table.sample_ids[i],
                table.variants[i].value,
                table.domains[i].value,
                int(table.true_labels[i]),
                int(table.predicted_labels[i]),
            ]
            + [repr(float(c[i])) for c in cols]
        )
    return buf.getvalue()


def parse_score_table(text: str) -> ScoreTable:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaMismatch("empty score table") from None
    if header[: len(SCORE_TABLE_FIXED)] != SCORE_TABLE_FIXED:
        raise SchemaMismatch(f"score table header must start with {SCORE_TABLE_FIXED}")
    methods = header[len(SCORE_TABLE_FIXED):]
    if len(set(methods)) != len(methods):
        raise SchemaMismatch("duplicate method columns")
    ids, variants, domains, truth, pred = [], [], [], [], []
    values: list[list[float]] = [[] for _ in methods]
    for lineno, row in enumerate(reader, start=2):
        if len(row) != len(header):
            raise SchemaMismatch(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            ids.append(row[0])
            variants.append(Variant(row[1]))
            domains.append(Domain(row[2]))
            truth.append(int(row[3]))
            pred.append(int(row[4]))
            for col, v in zip(values, row[5:]):
                col.append(float(v))
        except ValueError as exc:
            raise SchemaMismatch(f"line {lineno}: {exc}") from None
    return ScoreTable(ids, variants, domains, np.array(truth), np.array(pred),
                      {m: np.array(v, dtype=np.float64) for m, v in zip(methods, values)})


def write_score_table(table: ScoreTable, path: str | os.PathLike) -> None:
    try:
        Path(path).write_text(format_score_table(table), newline="")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_score_table(path: str | os.PathLike) -> ScoreTable:
    try:
        with open(path, newline="") as fh:
            text = fh.read()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return parse_score_table(text)

