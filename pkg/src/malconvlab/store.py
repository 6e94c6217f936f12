"""On-disk formats: manifests, model checkpoints, reports, CSV tables.

Checkpoints are a small binary format with a magic string, a format
version, the architecture fields, and the recorded byte length of every
parameter array. Length bookkeeping lives entirely in the header, so an
architecture mismatch is detected before any parameter bytes are read;
a body shorter or longer than the header promises is reported as
corruption, not silently padded or truncated.

Manifests are headerless CSV rows ``path,label,split,size,digest``.
Evaluation reports are line-delimited records under a single
self-describing header line that carries the format version and the field
order; floats are written with repr so a read-back reproduces them
exactly. Key-value files (``key = <json value>`` under their own header)
hold effective-config records and small free-form reports.
"""

import csv
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    CorruptCheckpointError,
    IncompatibleCheckpointError,
    ManifestError,
    StoreError,
)
from .model import BENIGN, MALWARE, Hyperparams, MalConvModel, PARAM_ORDER, param_shapes

CHECKPOINT_MAGIC = b"MCKP"
CHECKPOINT_VERSION = 1
_HYPER_STRUCT = struct.Struct("<IIIIIIIq")
_MAGIC_STRUCT = struct.Struct("<4sH")
_LEN_STRUCT = struct.Struct(f"<{len(PARAM_ORDER)}Q")

REPORT_VERSION = 1
REPORT_FIELDS = (
    "attack",
    "budget",
    "eps_step",
    "eps_ball",
    "n_candidates",
    "n_success",
    "success_rate",
    "mean_modified_bytes",
    "mean_gradient_evals",
    "model_id",
    "seed",
)
_REPORT_PREFIX = "# malconvlab eval-report "
KEYVALUES_HEADER = "# malconvlab keyvalues 1"

_SPLITS = ("train", "test")


def bytes_digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_digest(path) -> str:
    return bytes_digest(Path(path).read_bytes())


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: int
    split: str
    size: int
    digest: str


def write_manifest(entries, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for e in entries:
            writer.writerow([e.path, e.label, e.split, e.size, e.digest])


def read_manifest(path) -> list[ManifestEntry]:
    """Parse a manifest; an empty file is an empty manifest.

    Raises ManifestError with a 1-based line number for malformed rows,
    out-of-range labels, unknown split names, and duplicate paths.
    """
    entries = []
    seen = set()
    with open(path, newline="") as fh:
        for line_no, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) != 5:
                raise ManifestError(f"expected 5 fields, got {len(row)}", line=line_no)
            p, label_s, split, size_s, digest = row
            try:
                label = int(label_s)
                size = int(size_s)
            except ValueError:
                raise ManifestError("label and size must be integers", line=line_no) from None
            if label not in (BENIGN, MALWARE):
                raise ManifestError(f"label must be {BENIGN} or {MALWARE}, got {label}", line=line_no)
            if split not in _SPLITS:
                raise ManifestError(f"unknown split {split!r}", line=line_no)
            if size < 0:
                raise ManifestError("size must be >= 0", line=line_no)
            if p in seen:
                raise ManifestError(f"duplicate path {p!r}", line=line_no)
            seen.add(p)
            entries.append(ManifestEntry(p, label, split, size, digest))
    return entries


def load_sample(root, entry: ManifestEntry) -> bytes:
    """Read one manifest entry's bytes, verifying size and digest."""
    data = (Path(root) / entry.path).read_bytes()
    if len(data) != entry.size:
        raise StoreError(f"{entry.path}: size {len(data)} does not match manifest {entry.size}")
    if bytes_digest(data) != entry.digest:
        raise StoreError(f"{entry.path}: content digest does not match manifest")
    return data


def load_split(root, entries, split: str):
    """All samples of one split: (byte strings, labels array, their entries)."""
    if split not in _SPLITS:
        raise ValueError(f"unknown split {split!r}")
    picked = [e for e in entries if e.split == split]
    samples = [load_sample(root, e) for e in picked]
    labels = np.array([e.label for e in picked], dtype=np.int64)
    return samples, labels, picked


def save_checkpoint(model: MalConvModel, path) -> None:
    h = model.hyper
    bodies = [arr.astype("<f4").tobytes() for _, arr in model.parameters()]
    with open(path, "wb") as fh:
        fh.write(_MAGIC_STRUCT.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION))
        fh.write(
            _HYPER_STRUCT.pack(
                h.max_len,
                h.embed_dim,
                h.kernel_size,
                h.stride,
                h.num_filters,
                h.hidden_units,
                h.vocab_size,
                h.seed,
            )
        )
        fh.write(_LEN_STRUCT.pack(*(len(b) for b in bodies)))
        for b in bodies:
            fh.write(b)


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CorruptCheckpointError(f"checkpoint ends inside {what}")
    return data


def load_checkpoint(path, expect: Hyperparams | None = None) -> MalConvModel:
    """Rebuild a model from a checkpoint.

    Header problems (wrong version, architecture disagreeing with ``expect``,
    recorded lengths inconsistent with the recorded architecture) raise
    IncompatibleCheckpointError before any parameter byte is read. A body
    that is shorter or longer than the header promises raises
    CorruptCheckpointError.
    """
    with open(path, "rb") as fh:
        magic, version = _MAGIC_STRUCT.unpack(_read_exact(fh, _MAGIC_STRUCT.size, "magic"))
        if magic != CHECKPOINT_MAGIC:
            raise IncompatibleCheckpointError(f"bad magic {magic!r}")
        if version != CHECKPOINT_VERSION:
            raise IncompatibleCheckpointError(
                f"checkpoint format version {version}, expected {CHECKPOINT_VERSION}"
            )
        fields = _HYPER_STRUCT.unpack(_read_exact(fh, _HYPER_STRUCT.size, "header"))
        max_len, embed_dim, kernel_size, stride, num_filters, hidden_units, vocab_size, seed = fields
        try:
            hyper = Hyperparams(
                max_len=max_len,
                embed_dim=embed_dim,
                kernel_size=kernel_size,
                stride=stride,
                num_filters=num_filters,
                hidden_units=hidden_units,
                vocab_size=vocab_size,
                seed=seed,
            )
        except ValueError as exc:
            raise IncompatibleCheckpointError(f"invalid architecture in header: {exc}") from None
        if expect is not None and hyper.architecture() != expect.architecture():
            raise IncompatibleCheckpointError(
                f"checkpoint architecture {hyper.architecture()} does not match "
                f"expected {expect.architecture()}"
            )
        lengths = _LEN_STRUCT.unpack(_read_exact(fh, _LEN_STRUCT.size, "length table"))
        shapes = param_shapes(hyper)
        arrays = {}
        for name, length in zip(PARAM_ORDER, lengths):
            expected = int(np.prod(shapes[name], dtype=np.int64)) * 4
            if length != expected:
                raise IncompatibleCheckpointError(
                    f"parameter {name}: header records {length} bytes, "
                    f"architecture requires {expected}"
                )
        for name, length in zip(PARAM_ORDER, lengths):
            body = _read_exact(fh, length, f"parameter {name}")
            arrays[name] = np.frombuffer(body, dtype="<f4").reshape(shapes[name])
        if fh.read(1):
            raise CorruptCheckpointError("trailing bytes after final parameter")
    return MalConvModel(hyper, arrays)


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


_REPORT_TYPES = {
    "attack": str,
    "budget": int,
    "eps_step": float,
    "eps_ball": float,
    "n_candidates": int,
    "n_success": int,
    "success_rate": float,
    "mean_modified_bytes": float,
    "mean_gradient_evals": float,
    "model_id": str,
    "seed": int,
}


def write_report(report, path) -> None:
    """Serialize an evaluation report: one record line per grid cell.

    The first line names the format version and the field order; every
    following line is one comma-separated record in that order. An empty
    report is just the header line. ``report`` must expose ``rows`` whose
    items carry the named fields as attributes.
    """
    header = _REPORT_PREFIX + f"{REPORT_VERSION}: " + ",".join(REPORT_FIELDS)
    lines = [header]
    for row in report.rows:
        lines.append(",".join(_format_cell(getattr(row, name)) for name in REPORT_FIELDS))
    Path(path).write_text("\n".join(lines) + "\n")


def read_report(path) -> list[dict]:
    """Parse an evaluation report back into one dict per record line."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith(_REPORT_PREFIX):
        raise StoreError(f"{path}: not an evaluation report (missing header line)")
    version_s, sep, fields_s = lines[0][len(_REPORT_PREFIX) :].partition(": ")
    if not sep or not version_s.isdigit():
        raise StoreError(f"{path}: malformed report header")
    if int(version_s) != REPORT_VERSION:
        raise StoreError(f"{path}: unsupported report version {version_s}")
    fields = fields_s.split(",")
    unknown = [f for f in fields if f not in _REPORT_TYPES]
    if unknown:
        raise StoreError(f"{path}: unknown report fields {unknown}")
    rows = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != len(fields):
            raise StoreError(
                f"{path}:{line_no}: expected {len(fields)} fields, got {len(cells)}"
            )
        row = {}
        for name, cell in zip(fields, cells):
            if cell == "":
                row[name] = None
                continue
            try:
                row[name] = _REPORT_TYPES[name](cell)
            except ValueError:
                raise StoreError(f"{path}:{line_no}: invalid {name} value {cell!r}") from None
        rows.append(row)
    return rows


def write_keyvalues(mapping: dict, path) -> None:
    """Write a flat mapping as ``key = <json>`` lines under a header line."""
    lines = [KEYVALUES_HEADER]
    for key, value in mapping.items():
        if not key or any(c in key for c in " =\n"):
            raise StoreError(f"invalid key {key!r}")
        lines.append(f"{key} = {json.dumps(value)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_keyvalues(path) -> dict:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or lines[0] != KEYVALUES_HEADER:
        raise StoreError(f"{path}: not a key-value file (missing header line)")
    mapping = {}
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        key, sep, raw = line.partition(" = ")
        if not sep:
            raise StoreError(f"{path}:{line_no}: expected 'key = value'")
        try:
            mapping[key] = json.loads(raw)
        except json.JSONDecodeError:
            raise StoreError(f"{path}:{line_no}: invalid value {raw!r}") from None
    return mapping


def write_csv_table(path, header: list, rows) -> None:
    """CSV with one header row; cells are written as str()."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(list(row))


def read_csv_table(path) -> tuple[list, list]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise StoreError(f"{path}: empty table (missing header row)") from None
        return header, [row for row in reader]
