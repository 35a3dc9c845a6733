"""Small file helpers shared by datasets, checkpoints and CLI outputs.

Binary artifacts are "framed": a 4-byte magic, a little-endian uint32 format
version, a little-endian uint64 header length, the UTF-8 JSON header, then the
raw payload.
"""

from __future__ import annotations

import json
import shutil
import struct
from pathlib import Path
from typing import Any, BinaryIO, Iterable

import pandas as pd

from jamwatch.errors import FormatError

_PREAMBLE = struct.Struct("<4sIQ")


def ensure_dir(p: Path) -> None:
    p.mkdir(parents=True, exist_ok=True)


def read_json(path: Path) -> Any:
    path = Path(path)
    if path.exists() and not path.is_file():
        raise FormatError(f"{path} is not a file", field="path")
    try:
        with path.open("r", encoding="utf-8") as f:
            return json.load(f)
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path} is not valid JSON: {e}", field="path") from e


def write_json(path: Path, payload: dict[str, Any]) -> None:
    ensure_dir(path.parent)
    with path.open("w", encoding="utf-8") as f:
        json.dump(payload, f, ensure_ascii=False, indent=2, sort_keys=True)
        f.write("\n")


def write_csv(path: Path, rows: list[dict[str, Any]], columns: list[str]) -> None:
    """Writes rows with a fixed header; an empty row list still gets the header."""
    ensure_dir(path.parent)
    frame = pd.DataFrame(rows, columns=columns)
    frame.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")


def _encode_header(header: dict[str, Any]) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_framed(path: Path, magic: bytes, version: int, header: dict[str, Any], chunks: Iterable[bytes]) -> int:
    """Writes a framed file and returns the byte offset where the payload starts."""
    ensure_dir(path.parent)
    encoded = _encode_header(header)
    with path.open("wb") as f:
        f.write(_PREAMBLE.pack(magic, version, len(encoded)))
        f.write(encoded)
        for chunk in chunks:
            f.write(chunk)
    return _PREAMBLE.size + len(encoded)


def write_framed_from_file(path: Path, magic: bytes, version: int, header: dict[str, Any], payload: BinaryIO) -> int:
    """Like `write_framed`, copying an already written payload file after the header."""
    ensure_dir(path.parent)
    encoded = _encode_header(header)
    with path.open("wb") as f:
        f.write(_PREAMBLE.pack(magic, version, len(encoded)))
        f.write(encoded)
        shutil.copyfileobj(payload, f)
    return _PREAMBLE.size + len(encoded)


def read_framed_header(path: Path, magic: bytes, supported_versions: tuple[int, ...]) -> tuple[dict[str, Any], int, int]:
    """Returns (header, payload_offset, payload_size) of a framed file."""
    if not path.exists():
        raise FileNotFoundError(f"Artifact not found: {path}")
    if not path.is_file():
        raise FormatError(f"{path} is not a file", field="path")
    size = path.stat().st_size
    with path.open("rb") as f:
        preamble = f.read(_PREAMBLE.size)
        if len(preamble) < _PREAMBLE.size:
            raise FormatError(f"{path} is truncated: missing preamble", field="preamble")
        got_magic, version, header_len = _PREAMBLE.unpack(preamble)
        if got_magic != magic:
            raise FormatError(f"{path} is not a {magic.decode()} file (magic {got_magic!r})", field="magic")
        if version not in supported_versions:
            raise FormatError(f"{path} has unsupported format version {version}", field="format_version")
        raw = f.read(header_len)
        if len(raw) < header_len:
            raise FormatError(f"{path} is truncated inside its header", field="header")
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path} has a corrupt header: {e}", field="header") from e
    offset = _PREAMBLE.size + header_len
    return header, offset, size - offset
