"""Spectrogram dataset files.

One file per split: framed JSON manifest followed by raw little-endian float32
matrices, row-major, concatenated in manifest order. Reading memory-maps the
payload so full-scale datasets stay on disk.
"""

from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np
import torch

from jamwatch.artifact_io import read_framed_header, write_framed_from_file
from jamwatch.enums import ChannelLabel, SpectrogramDomain
from jamwatch.errors import ArgumentError, FormatError
from jamwatch.spectrogram_service import Spectrogram

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"JWDS"
DATASET_VERSION = 1
_FLOAT = np.dtype("<f4")


def write_dataset(specs: Iterable[Spectrogram], path: Path, extra: Optional[dict[str, Any]] = None) -> dict[str, Any]:
    """Streams spectrograms to `path` and returns the manifest written in its header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    part = path.with_name(path.name + ".part")

    labels: list[Optional[str]] = []
    shape: Optional[tuple[int, int]] = None
    domain: Optional[SpectrogramDomain] = None
    try:
        with part.open("wb") as payload:
            for i, spec in enumerate(specs):
                if shape is None:
                    shape, domain = spec.data.shape, spec.domain
                elif spec.data.shape != shape or spec.domain is not domain:
                    raise ArgumentError(
                        f"spectrogram {i} is {spec.data.shape}/{spec.domain}, dataset is {shape}/{domain}",
                        field="specs",
                    )
                payload.write(np.ascontiguousarray(spec.data, dtype=_FLOAT).tobytes())
                labels.append(str(spec.label) if spec.label is not None else None)

        manifest: dict[str, Any] = {
            "count": len(labels),
            "rows": shape[0] if shape else 0,
            "cols": shape[1] if shape else 0,
            "domain": str(domain) if domain else None,
            "labels": labels,
        }
        manifest.update(extra or {})
        with part.open("rb") as payload:
            write_framed_from_file(path, DATASET_MAGIC, DATASET_VERSION, manifest, payload)
    finally:
        if part.exists():
            os.remove(part)

    logger.info("Wrote %d spectrograms to %s", len(labels), path)
    return manifest


def read_manifest(path: Path) -> tuple[dict[str, Any], int, int]:
    header, offset, size = read_framed_header(Path(path), DATASET_MAGIC, (DATASET_VERSION,))
    for key in ("count", "rows", "cols", "domain", "labels"):
        if key not in header:
            raise FormatError(f"{path} manifest is missing '{key}'", field=key)
    if len(header["labels"]) != header["count"]:
        raise FormatError(f"{path} lists {len(header['labels'])} labels for {header['count']} matrices", field="labels")
    expected = header["count"] * header["rows"] * header["cols"] * _FLOAT.itemsize
    if size != expected:
        raise FormatError(
            f"{path} payload is {size} bytes, manifest ({header['count']}x{header['rows']}x{header['cols']}) needs {expected}",
            field="count",
        )
    return header, offset, size


def read_dataset(path: Path) -> list[Spectrogram]:
    header, offset, _ = read_manifest(path)
    count, rows, cols = header["count"], header["rows"], header["cols"]
    if count == 0:
        return []
    mat = np.memmap(path, dtype=_FLOAT, mode="r", offset=offset, shape=(count, rows, cols))
    domain = SpectrogramDomain(header["domain"])
    return [
        Spectrogram(
            data=np.asarray(mat[i], dtype=np.float32),
            domain=domain,
            label=ChannelLabel(label) if label is not None else None,
        )
        for i, label in enumerate(header["labels"])
    ]


class SpectrogramDataset:
    """A split on disk plus helpers to batch it into tensors."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.manifest, _, _ = read_manifest(self.path)
        self.specs = read_dataset(self.path)

    def __len__(self) -> int:
        return len(self.specs)

    @property
    def labels(self) -> list[Optional[ChannelLabel]]:
        return [s.label for s in self.specs]


def stack_inputs(specs: Sequence[Spectrogram]) -> torch.Tensor:
    """(N, 1, rows, cols) float32 tensor from spectrograms."""
    if not specs:
        raise ArgumentError("cannot stack an empty list of spectrograms", field="specs")
    return torch.from_numpy(np.stack([s.data for s in specs])[:, None, :, :].astype(np.float32))


def jammed_targets(specs: Sequence[Spectrogram]) -> torch.Tensor:
    """Binary labels: 0 for trusted cases, 1 for jammed cases."""
    if any(s.label is None for s in specs):
        raise ArgumentError("supervised targets need labeled spectrograms", field="labels")
    return torch.tensor([0.0 if s.label.is_trusted else 1.0 for s in specs], dtype=torch.float32)
