"""IQ frames to model-ready spectrograms.

A spectrogram stacks `rows` PSD arrays computed on contiguous, non-overlapping
windows of `n` samples (rectangular window, no averaging), each centered at
0 Hz. `neg_log` then maps PSD values to -ln(x + eps).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional

import numpy as np

from jamwatch.enums import ChannelLabel, SpectrogramDomain
from jamwatch.errors import ConfigurationError, LengthError, StateError
from jamwatch.iq_simulation_service import IQFrame, _is_power_of_two

logger = logging.getLogger(__name__)

DEFAULT_N = 1024
DEFAULT_ROWS = 100
DEFAULT_EPSILON = 1e-21


@dataclass(frozen=True)
class PsdArray:
    values: np.ndarray  # float64, fftshifted

    @property
    def n(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class Spectrogram:
    data: np.ndarray  # (rows, cols) float32
    domain: SpectrogramDomain
    label: Optional[ChannelLabel] = None

    def __post_init__(self) -> None:
        if self.data.ndim != 2 or self.data.dtype != np.float32:
            raise ConfigurationError("spectrogram data must be a 2-D float32 matrix", field="data")
        if self.domain is SpectrogramDomain.LINEAR:
            if not np.all(self.data >= 0):
                raise ConfigurationError("linear spectrogram entries must be non-negative", field="data")
        elif not np.all(np.isfinite(self.data)):
            raise ConfigurationError("neg-log spectrogram entries must be finite", field="data")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


def fftshift(values: np.ndarray) -> np.ndarray:
    return np.fft.fftshift(values, axes=-1)


def compute_psd(window: np.ndarray, sampling_rate: float) -> PsdArray:
    """|FFT(window)|^2 / (n * sampling_rate), shifted so index n/2 is 0 Hz."""
    n = len(window)
    if not _is_power_of_two(n):
        raise ConfigurationError(f"window length must be a power of two, got {n}", field="n")
    spectrum = np.fft.fft(np.asarray(window, dtype=np.complex128))
    psd = (spectrum.real**2 + spectrum.imag**2) / (n * sampling_rate)
    return PsdArray(values=fftshift(psd))


def build_spectrogram(frame: IQFrame, n: int = DEFAULT_N, rows: int = DEFAULT_ROWS) -> Spectrogram:
    """Row i is the PSD of samples [i*n, (i+1)*n); samples past rows*n are ignored."""
    required = n * rows
    if len(frame.samples) < required:
        raise LengthError(
            f"frame holds {len(frame.samples)} samples, a {rows}x{n} spectrogram needs {required}",
            required=required,
            field="samples",
        )
    mat = np.zeros((rows, n), dtype=np.float32)
    lower = 0
    for i in range(rows):
        mat[i] = compute_psd(frame.samples[lower : lower + n], frame.sampling_rate).values
        lower += n
    return Spectrogram(data=mat, domain=SpectrogramDomain.LINEAR, label=frame.label)


def neg_log(s: Spectrogram, epsilon: float = DEFAULT_EPSILON) -> Spectrogram:
    """Elementwise f(x) = -ln(x + epsilon); bounded above by -ln(epsilon)."""
    if s.domain is not SpectrogramDomain.LINEAR:
        raise StateError("neg_log expects a linear-domain spectrogram", field="domain")
    data = -np.log(s.data.astype(np.float64) + epsilon)
    return Spectrogram(data=data.astype(np.float32), domain=SpectrogramDomain.NEG_LOG, label=s.label)


def frame_to_input(frame: IQFrame, n: int = DEFAULT_N, rows: int = DEFAULT_ROWS, epsilon: float = DEFAULT_EPSILON) -> Spectrogram:
    return neg_log(build_spectrogram(frame, n=n, rows=rows), epsilon=epsilon)


class SpectrogramService:
    """Fixed (n, rows, epsilon) transform from IQ frames to neg-log model inputs."""

    def __init__(self, n: int = DEFAULT_N, rows: int = DEFAULT_ROWS, epsilon: float = DEFAULT_EPSILON):
        if not _is_power_of_two(n):
            raise ConfigurationError(f"window length must be a power of two, got {n}", field="n")
        self.n = n
        self.rows = rows
        self.epsilon = epsilon

    @property
    def frame_len(self) -> int:
        return self.n * self.rows

    def transform(self, frame: IQFrame) -> Spectrogram:
        return frame_to_input(frame, n=self.n, rows=self.rows, epsilon=self.epsilon)

    def transform_all(self, frames: Iterable[IQFrame]) -> Iterator[Spectrogram]:
        for frame in frames:
            yield self.transform(frame)
