"""
Persistence layer for AFIU runs.

This module owns every on-disk format the project writes: the
single-file checkpoint container (see ``CHECKPOINT_FORMAT.md``), the
per-stage loss logs, the PR/F-measure curve and summary CSVs, the
``key = value`` text used for effective configs and checkpoint
metadata, and the ``FAILED`` marker a command leaves behind when it
aborts.  It knows nothing about models or configs; callers hand it
plain tensors, dictionaries and rows.

Writes go to a temporary sibling first and are moved into place with
:func:`os.replace`, so a crashed run never leaves a half-written file
under the final name.
"""
import json
import logging
import os
import struct
import zlib
from typing import Any, Dict, Iterable, List, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

logger = logging.getLogger(__name__)

MAGIC = b"AFIUCKP1"
FAILURE_MARKER = "FAILED"

# manifest element type -> little-endian numpy dtype
DTYPES = {
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
    "int64": np.dtype("<i8"),
}
_TORCH_DTYPES = {torch.float32: "float32", torch.float64: "float64", torch.int64: "int64"}

LOSS_COLUMNS = ["epoch", "iteration", "loss"]
CURVE_COLUMNS = ["threshold", "precision", "recall", "f_beta"]
SUMMARY_COLUMNS = ["dataset", "count", "mae", "max_fbeta"]
PER_IMAGE_COLUMNS = ["dataset", "image", "mae"]


class CheckpointError(RuntimeError):
    """Raised for corrupt checkpoint files and incompatible parameter sets."""


class CsvFormatError(ValueError):
    """Raised when a CSV input does not have the expected layout."""


def _atomic_write(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_text(path: str, text: str) -> None:
    _atomic_write(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# key = value text
# ---------------------------------------------------------------------------

def format_kv(values: Dict[str, Any]) -> str:
    """Serialise a nested dictionary as sorted ``dotted.key = json`` lines."""
    flat: Dict[str, Any] = {}

    def walk(prefix: str, node: Any) -> None:
        if isinstance(node, dict) and node and all(isinstance(k, str) for k in node):
            for key, value in node.items():
                walk(f"{prefix}.{key}" if prefix else key, value)
        else:
            flat[prefix] = node

    walk("", values)
    lines = [f"{key} = {json.dumps(flat[key], sort_keys=True)}" for key in sorted(flat)]
    return "\n".join(lines) + "\n"


def parse_kv(text: str) -> List[Tuple[int, str, Any]]:
    """Parse ``key = value`` lines into ``(line_number, key, value)`` triples.

    Lines beginning with ``#`` and blank lines are skipped.  Values are
    decoded as JSON when possible; anything else is kept as a plain
    string, so ``flip_axis = horizontal`` and ``flip_axis = "horizontal"``
    are equivalent.
    """
    entries = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {number}: expected 'key = value', got {raw!r}")
        key, value_raw = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ValueError(f"line {number}: empty key")
        try:
            value = json.loads(value_raw)
        except ValueError:
            value = value_raw
        entries.append((number, key, value))
    return entries


def nest(entries: Iterable[Tuple[int, str, Any]]) -> Dict[str, Any]:
    tree: Dict[str, Any] = {}
    for number, key, value in entries:
        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ValueError(f"line {number}: {key!r} conflicts with an earlier scalar key")
            node = child
        node[parts[-1]] = value
    return tree


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

def write_container(path: str, tensors: Dict[str, torch.Tensor], metadata_text: str) -> None:
    """Write named tensors and a metadata text block to a checkpoint file."""
    manifest = []
    chunks = []
    offset = 0
    for name, tensor in tensors.items():
        dtype_name = _TORCH_DTYPES.get(tensor.dtype)
        if dtype_name is None:
            raise CheckpointError(f"tensor {name!r} has unsupported element type {tensor.dtype}")
        array = tensor.detach().cpu().contiguous().numpy().astype(DTYPES[dtype_name], copy=False)
        blob = array.tobytes()
        manifest.append(
            {"name": name, "shape": list(array.shape), "dtype": dtype_name, "offset": offset, "nbytes": len(blob)}
        )
        chunks.append(blob)
        offset += len(blob)
    payload = b"".join(chunks)
    header = json.dumps(
        {"tensors": manifest, "payload_bytes": len(payload), "crc32": zlib.crc32(payload)}
    ).encode("utf-8")
    meta = metadata_text.encode("utf-8")
    data = MAGIC + struct.pack("<Q", len(header)) + header + struct.pack("<Q", len(meta)) + meta + payload
    _atomic_write(path, data)
    logger.debug("wrote %d tensors (%d payload bytes) to %s", len(manifest), len(payload), path)


def read_container(path: str) -> Tuple[Dict[str, torch.Tensor], str]:
    """Read a checkpoint file written by :func:`write_container`."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc

    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path} is not an AFIU checkpoint (bad magic)")
    pos = len(MAGIC)
    try:
        (header_len,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        header = json.loads(data[pos:pos + header_len].decode("utf-8"))
        pos += header_len
        (meta_len,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        metadata_text = data[pos:pos + meta_len].decode("utf-8")
        pos += meta_len
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc

    payload = data[pos:]
    if len(payload) != header.get("payload_bytes"):
        raise CheckpointError(
            f"{path}: truncated payload ({len(payload)} of {header.get('payload_bytes')} bytes)"
        )
    if zlib.crc32(payload) != header.get("crc32"):
        raise CheckpointError(f"{path}: payload checksum mismatch")

    tensors: Dict[str, torch.Tensor] = {}
    for entry in header["tensors"]:
        dtype = DTYPES.get(entry["dtype"])
        if dtype is None:
            raise CheckpointError(f"{path}: tensor {entry['name']!r} has unknown element type {entry['dtype']!r}")
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if count * dtype.itemsize != entry["nbytes"] or entry["offset"] + entry["nbytes"] > len(payload):
            raise CheckpointError(f"{path}: manifest entry for {entry['name']!r} is inconsistent")
        array = np.frombuffer(payload, dtype=dtype, count=count, offset=entry["offset"])
        tensors[entry["name"]] = torch.from_numpy(array.reshape(entry["shape"]).astype(dtype.newbyteorder("="), copy=True))
    return tensors, metadata_text


def read_manifest(path: str) -> List[Dict[str, Any]]:
    """Return the manifest entries without decoding any payload."""
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC) + 8)
        if not head.startswith(MAGIC):
            raise CheckpointError(f"{path} is not an AFIU checkpoint (bad magic)")
        (header_len,) = struct.unpack_from("<Q", head, len(MAGIC))
        return json.loads(fh.read(header_len).decode("utf-8"))["tensors"]


# ---------------------------------------------------------------------------
# CSV files
# ---------------------------------------------------------------------------

def write_loss_log(path: str, rows: Sequence[Tuple[int, int, float]]) -> None:
    frame = pd.DataFrame(list(rows), columns=LOSS_COLUMNS)
    frame["epoch"] = frame["epoch"].astype("int64")
    frame["iteration"] = frame["iteration"].astype("int64")
    write_text(path, frame.to_csv(index=False, float_format="%.6f", lineterminator="\n"))


def write_curve_csv(path: str, thresholds, precision, recall, f_beta) -> None:
    frame = pd.DataFrame(
        {
            "threshold": np.asarray(thresholds, dtype=np.int64),
            "precision": np.asarray(precision, dtype=np.float64),
            "recall": np.asarray(recall, dtype=np.float64),
            "f_beta": np.asarray(f_beta, dtype=np.float64),
        }
    )
    write_text(path, frame.to_csv(index=False, float_format="%.6f", lineterminator="\n"))


def write_summary_csv(path: str, rows: Sequence[Tuple[str, int, float, float]]) -> None:
    frame = pd.DataFrame(list(rows), columns=SUMMARY_COLUMNS)
    write_text(path, frame.to_csv(index=False, float_format="%.6f", lineterminator="\n"))


def write_per_image_csv(path: str, rows: Sequence[Tuple[str, str, float]]) -> None:
    frame = pd.DataFrame(list(rows), columns=PER_IMAGE_COLUMNS)
    write_text(path, frame.to_csv(index=False, float_format="%.6f", lineterminator="\n"))


def read_csv_checked(path: str, columns: Sequence[str], text_columns: Sequence[str] = ()) -> pd.DataFrame:
    """Read a CSV and check it has ``columns`` with numeric values.

    Errors name the file and the 1-based line number of the first bad row.
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError as exc:
        raise CsvFormatError(f"{path}: no such file") from exc
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise CsvFormatError(f"{path}: {exc}") from exc

    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise CsvFormatError(f"{path}: line 1: missing column(s) {', '.join(missing)}")
    for column in columns:
        if column in text_columns:
            continue
        values = pd.to_numeric(frame[column], errors="coerce")
        bad = values.isna()
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise CsvFormatError(
                f"{path}: line {row + 2}: column {column!r} is not numeric ({frame[column].iloc[row]!r})"
            )
        frame[column] = values
    return frame


# ---------------------------------------------------------------------------
# failure markers
# ---------------------------------------------------------------------------

def write_failure_marker(out_dir: str, message: str) -> str:
    path = os.path.join(out_dir, FAILURE_MARKER)
    write_text(path, message.rstrip() + "\n")
    return path


def clear_failure_marker(out_dir: str) -> None:
    path = os.path.join(out_dir, FAILURE_MARKER)
    if os.path.exists(path):
        os.remove(path)
