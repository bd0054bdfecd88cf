"""On-disk formats: dense matrix files, CSV emission, run manifests.

All writes are atomic (temp file + rename in the same directory) so a
crashed run never leaves a half-written artifact. Output files embed the
manifest *id* — a digest of the run's parameters — rather than anything
time-dependent, so re-running the same command reproduces outputs byte for
byte; wall time and input digests live in the manifest sidecar only.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import InputFormatError, UsageError

MATRIX_MAGIC = b"SPDM"
MATRIX_VERSION = 1
MANIFEST_SCHEMA = "run-manifest/v1"


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# dense symmetric matrix file: magic, u32 version, u64 dim (little endian),
# then dim*dim float64 little-endian row-major
# ---------------------------------------------------------------------------

def write_matrix(path, A: np.ndarray) -> None:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise UsageError(f"matrix file holds square matrices; got {A.shape}")
    header = MATRIX_MAGIC + struct.pack("<IQ", MATRIX_VERSION, A.shape[0])
    payload = np.ascontiguousarray(A, dtype="<f8").tobytes()
    atomic_write_bytes(path, header + payload)


def read_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != MATRIX_MAGIC:
        raise InputFormatError(f"{path}: not a matrix file (bad magic)")
    version, dim = struct.unpack("<IQ", blob[4:16])
    if version != MATRIX_VERSION:
        raise InputFormatError(f"{path}: unsupported matrix format version {version}")
    expected = 16 + dim * dim * 8
    if len(blob) != expected:
        raise InputFormatError(
            f"{path}: truncated or padded payload "
            f"({len(blob)} bytes, expected {expected} for dim {dim})"
        )
    flat = np.frombuffer(blob, dtype="<f8", offset=16)
    return flat.reshape(dim, dim).astype(np.float64)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def build_manifest(command: str, params: dict, inputs=(),
                   version: str = "") -> dict:
    """Identify a run by its reproducible ingredients.

    The id digests the command, parameters, input file digests, and the
    package version — everything that determines the outputs, and nothing
    (timestamps, host) that does not.
    """
    input_entries = [
        {"path": str(p), "sha256": sha256_file(p)} for p in inputs
    ]
    core = {
        "schema": MANIFEST_SCHEMA,
        "command": command,
        "params": params,
        "inputs": input_entries,
        "package_version": version,
    }
    digest = sha256_bytes(
        json.dumps(core, sort_keys=True, separators=(",", ":")).encode()
    )
    return {**core, "id": digest}


def write_manifest(path, manifest: dict, wall_time_s: float | None = None,
                   outputs=()) -> None:
    doc = dict(manifest)
    if wall_time_s is not None:
        doc["wall_time_s"] = wall_time_s
    if outputs:
        doc["outputs"] = [str(p) for p in outputs]
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def csv_text(columns, rows, manifest_id: str, schema: str) -> str:
    """Render a CSV with the standard provenance comment line.

    Rows are formatted with repr-level float precision so values survive a
    round trip exactly.
    """
    lines = [f"# manifest={manifest_id} schema={schema}"]
    lines.append(",".join(columns))
    for row in rows:
        cells = []
        for item in row:
            if isinstance(item, float) or isinstance(item, np.floating):
                cells.append(repr(float(item)))
            else:
                cells.append(str(item))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
