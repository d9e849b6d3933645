"""Artifact persistence: atomic writes, headered JSONL files, tensor containers.

Every artifact embeds the producing stage name and a hash of the pipeline
configuration, so downstream stages can refuse to mix outputs from different
runs. All writers are deterministic: identical inputs produce identical bytes.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Iterable, Iterator, Union

import numpy as np

from .errors import PathQAError

JSONL_FORMAT_VERSION = 1
TENSOR_MAGIC = b"PQTC"
TENSOR_VERSION = 1


class ArtifactError(PathQAError):
    """Missing, stale, or structurally invalid artifact file."""


@contextlib.contextmanager
def atomic_write(path: Union[str, Path], *, binary: bool = False) -> Iterator[Any]:
    """Write to a temp file in the target directory, then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb" if binary else "w", **({} if binary else {"encoding": "utf-8"})) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        raise


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def config_hash(config: dict) -> str:
    """Short stable digest of a configuration mapping."""
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()[:12]


def derive_seed(global_seed: int, name: str) -> int:
    """Deterministic per-stage (or per-question) seed from a global seed."""
    digest = hashlib.sha256(f"{global_seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


# -- headered JSONL -----------------------------------------------------------


def write_jsonl(path: Union[str, Path], stage: str, cfg_hash: str, rows: Iterable[dict],
                extra_header: dict | None = None) -> int:
    """Write a JSONL artifact whose first line is a provenance header."""
    header = {
        "artifact": stage,
        "format_version": JSONL_FORMAT_VERSION,
        "config_hash": cfg_hash,
    }
    if extra_header:
        header.update(extra_header)
    n = 0
    with atomic_write(path) as fh:
        fh.write(canonical_json(header) + "\n")
        for row in rows:
            fh.write(canonical_json(row) + "\n")
            n += 1
    return n


def read_jsonl(path: Union[str, Path], expected_stage: str | None = None,
               expected_hash: str | None = None, *, force: bool = False) -> tuple[dict, list[dict]]:
    """Read a headered JSONL artifact, validating stage name and config hash."""
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"{path}: artifact does not exist")
    rows: list[dict] = []
    header: dict | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ArtifactError(f"{path}: line {lineno} is not valid JSON: {exc}") from None
            if header is None:
                header = obj
            else:
                rows.append(obj)
    if header is None or "artifact" not in header:
        raise ArtifactError(f"{path}: missing artifact header line")
    if header.get("format_version") != JSONL_FORMAT_VERSION:
        raise ArtifactError(f"{path}: unsupported format_version {header.get('format_version')}")
    if expected_stage is not None and header["artifact"] != expected_stage:
        raise ArtifactError(f"{path}: expected a {expected_stage!r} artifact, found {header['artifact']!r}")
    if expected_hash is not None and not force and header.get("config_hash") != expected_hash:
        raise ArtifactError(
            f"{path}: stale artifact (config hash {header.get('config_hash')!r}, "
            f"current {expected_hash!r}); rerun the producing stage or pass --force"
        )
    return header, rows


# -- named-tensor container ---------------------------------------------------


def save_tensors(path: Union[str, Path], stage: str, cfg_hash: str, config: dict,
                 tensors: dict[str, np.ndarray]) -> None:
    """Write a self-describing checkpoint: magic, version, config echo, tensors."""
    manifest = []
    buffers = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if not np.all(np.isfinite(arr)):
            raise ArtifactError(f"tensor {name!r} contains non-finite values")
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)})
        buffers.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    header = {
        "artifact": stage,
        "format_version": TENSOR_VERSION,
        "config_hash": cfg_hash,
        "config": config,
        "tensors": manifest,
    }
    header_bytes = canonical_json(header).encode("utf-8")
    with atomic_write(path, binary=True) as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<I", TENSOR_VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for buf in buffers:
            fh.write(buf)


def load_tensors(path: Union[str, Path], expected_stage: str | None = None,
                 expected_hash: str | None = None, *, force: bool = False
                 ) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint written by :func:`save_tensors`; returns (header, tensors)."""
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"{path}: checkpoint does not exist")
    raw = path.read_bytes()
    if raw[:4] != TENSOR_MAGIC:
        raise ArtifactError(f"{path}: not a tensor container (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != TENSOR_VERSION:
        raise ArtifactError(f"{path}: unsupported container version {version}")
    (header_len,) = struct.unpack_from("<I", raw, 8)
    header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
    if expected_stage is not None and header.get("artifact") != expected_stage:
        raise ArtifactError(f"{path}: expected a {expected_stage!r} checkpoint, found {header.get('artifact')!r}")
    if expected_hash is not None and not force and header.get("config_hash") != expected_hash:
        raise ArtifactError(
            f"{path}: stale checkpoint (config hash {header.get('config_hash')!r}, current {expected_hash!r})"
        )
    offset = 12 + header_len
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        nbytes = dtype.itemsize * count
        chunk = raw[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise ArtifactError(f"{path}: truncated tensor data for {entry['name']!r}")
        tensors[entry["name"]] = np.frombuffer(chunk, dtype=dtype).reshape(entry["shape"]).copy()
        offset += nbytes
    return header, tensors
