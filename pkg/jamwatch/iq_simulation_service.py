"""Synthetic complex-baseband IQ frames for the three watchdog channel cases.

The generator replaces over-the-air captures with a parametric model:

- EmptyChannel: receiver noise plus periodic gNB beacon bursts.
- ActiveChannel: receiver noise plus multicarrier data bursts filling TDD slots.
- Jammed: receiver noise plus a full-band noise jammer and residual beacons.

Every frame is a pure function of (config, label, seed), so corpora can be
regenerated bit for bit.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Mapping, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from tqdm import tqdm

from jamwatch.artifact_io import ensure_dir, read_json, write_json
from jamwatch.enums import ChannelLabel, CorpusLayout, JammerKind
from jamwatch.errors import ConfigurationError, FormatError

logger = logging.getLogger(__name__)

# 100 MHz carrier observed over 120 MHz
OCCUPIED_FRACTION = 100.0 / 120.0

IQ_DTYPE = np.dtype("<c8")
MANIFEST_NAME = "manifest.json"
CONCATENATED_NAME = "frames.iq"

_QPSK = np.array([1 + 1j, -1 + 1j, -1 - 1j, 1 - 1j], dtype=np.complex128) / np.sqrt(2.0)


def _is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


class ScenarioConfig(BaseModel):
    """Parameters of the simulated radio scene. Powers are linear mean-square per complex sample."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    sampling_rate: float = Field(120e6, gt=0)
    frame_len: int = Field(102_400, gt=0)
    noise_floor_power: float = Field(1e-6, gt=0)
    signal_power: float = Field(1e-4, gt=0)
    jammer_power: float = Field(1e-1, gt=0)
    jammer_kind: JammerKind = JammerKind.GAUSSIAN
    beacon_period: int = Field(20_480, gt=0)
    beacon_len: int = Field(1024, gt=0)
    burst_duty: float = Field(0.5, ge=0.0, le=1.0)
    slot_len: int = Field(5120, gt=0)
    n_subcarriers: int = Field(1024, gt=0)
    occupied_fraction: float = Field(OCCUPIED_FRACTION, gt=0.0, le=1.0)
    residual_beacon_prob: float = Field(0.5, ge=0.0, le=1.0)
    seed: int = Field(0, ge=0, lt=2**64)

    @model_validator(mode="after")
    def _check_sizes(self) -> "ScenarioConfig":
        if not _is_power_of_two(self.n_subcarriers):
            raise ValueError(f"n_subcarriers must be a power of two, got {self.n_subcarriers}")
        if self.beacon_len > self.beacon_period:
            raise ValueError("beacon_len must not exceed beacon_period")
        if self.beacon_len < self.n_subcarriers:
            raise ValueError("beacon_len must hold at least one multicarrier block (n_subcarriers)")
        if self.slot_len < self.n_subcarriers:
            raise ValueError("slot_len must hold at least one multicarrier block (n_subcarriers)")
        return self

    @classmethod
    def desk(cls, **overrides: Any) -> "ScenarioConfig":
        """Preset sized for 32x128 spectrograms (4096-sample frames)."""
        values: dict[str, Any] = dict(
            frame_len=4096,
            beacon_period=1024,
            beacon_len=128,
            slot_len=1024,
            n_subcarriers=128,
        )
        values.update(overrides)
        return cls(**values)

    @property
    def jammer_to_signal_db(self) -> float:
        return 10.0 * math.log10(self.jammer_power / self.signal_power)

    def check_frame(self) -> None:
        if self.frame_len < self.beacon_period:
            raise ConfigurationError(
                f"frame_len {self.frame_len} is too small for one beacon period ({self.beacon_period})",
                field="scenario.frame_len",
            )


@dataclass(frozen=True)
class IQFrame:
    samples: np.ndarray
    sampling_rate: float
    label: ChannelLabel
    seed: int

    def __post_init__(self) -> None:
        if self.samples.ndim != 1 or self.samples.dtype != np.complex64:
            raise ConfigurationError("IQFrame samples must be a 1-D complex64 array", field="samples")
        if not np.all(np.isfinite(self.samples)):
            raise ConfigurationError("IQFrame samples must be finite", field="samples")

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class IQCorpus:
    frames: list[IQFrame]
    manifest: dict[str, Any] = field(default_factory=dict)


def synth_noise(n: int, power: float, kind: Union[JammerKind, str], rng: np.random.Generator) -> np.ndarray:
    """i.i.d. complex noise with per-sample mean-square `power`.

    Gaussian noise is circularly symmetric; uniform noise draws I and Q from
    [-a, a] with a = sqrt(3 * power / 2).
    """
    if n <= 0:
        raise ConfigurationError(f"sample count must be positive, got {n}", field="n")
    if power < 0:
        raise ConfigurationError(f"power must be non-negative, got {power}", field="power")
    if power == 0:
        return np.zeros(n, dtype=np.complex64)

    kind = JammerKind(kind)
    if kind is JammerKind.GAUSSIAN:
        iq = rng.normal(0.0, np.sqrt(power / 2.0), size=(2, n))
    else:
        a = np.sqrt(3.0 * power / 2.0)
        iq = rng.uniform(-a, a, size=(2, n))
    return (iq[0] + 1j * iq[1]).astype(np.complex64)


def _active_subcarriers(n_subcarriers: int, occupied_fraction: float) -> np.ndarray:
    # natural FFT order; DC stays empty
    offsets = np.fft.fftfreq(n_subcarriers) * n_subcarriers
    half = max(1, int(round(occupied_fraction * n_subcarriers)) // 2)
    return (np.abs(offsets) <= half) & (offsets != 0)


def synth_multicarrier_burst(
    n_subcarriers: int,
    burst_len: int,
    power: float,
    rng: np.random.Generator,
    occupied_fraction: float = OCCUPIED_FRACTION,
) -> np.ndarray:
    """Concatenated inverse-FFT blocks of random QPSK symbols, truncated to `burst_len`.

    Each complete block has mean-square exactly `power` (Parseval on the
    orthonormal inverse FFT).
    """
    if not _is_power_of_two(n_subcarriers):
        raise ConfigurationError(f"n_subcarriers must be a power of two, got {n_subcarriers}", field="n_subcarriers")
    if burst_len < n_subcarriers:
        raise ConfigurationError(
            f"burst_len {burst_len} is shorter than one block of {n_subcarriers} subcarriers", field="burst_len"
        )
    if power < 0:
        raise ConfigurationError(f"power must be non-negative, got {power}", field="power")
    if power == 0:
        return np.zeros(burst_len, dtype=np.complex64)

    active = _active_subcarriers(n_subcarriers, occupied_fraction)
    n_active = int(active.sum())
    n_blocks = -(-burst_len // n_subcarriers)

    grid = np.zeros((n_blocks, n_subcarriers), dtype=np.complex128)
    grid[:, active] = _QPSK[rng.integers(0, 4, size=(n_blocks, n_active))]
    blocks = np.fft.ifft(grid, axis=1, norm="ortho")
    scale = np.sqrt(power * n_subcarriers / n_active)
    return (blocks.reshape(-1)[:burst_len] * scale).astype(np.complex64)


def _add_beacons(samples: np.ndarray, cfg: ScenarioConfig, rng: np.random.Generator, keep_prob: float) -> None:
    phase = int(rng.integers(cfg.beacon_period))
    for start in range(phase, cfg.frame_len, cfg.beacon_period):
        if keep_prob < 1.0 and rng.random() >= keep_prob:
            continue
        burst = synth_multicarrier_burst(cfg.n_subcarriers, cfg.beacon_len, cfg.signal_power, rng, cfg.occupied_fraction)
        stop = min(start + cfg.beacon_len, cfg.frame_len)
        samples[start:stop] += burst[: stop - start]


def _add_tdd_bursts(samples: np.ndarray, cfg: ScenarioConfig, rng: np.random.Generator) -> None:
    n_slots = -(-cfg.frame_len // cfg.slot_len)
    n_on = int(round(cfg.burst_duty * n_slots))
    for slot in np.sort(rng.choice(n_slots, size=n_on, replace=False)):
        start = int(slot) * cfg.slot_len
        stop = min(start + cfg.slot_len, cfg.frame_len)
        burst = synth_multicarrier_burst(cfg.n_subcarriers, cfg.slot_len, cfg.signal_power, rng, cfg.occupied_fraction)
        samples[start:stop] += burst[: stop - start]


def gen_frame(cfg: ScenarioConfig, label: Union[ChannelLabel, str], seed: int) -> IQFrame:
    """Generates one labeled frame; identical (cfg, label, seed) give identical samples."""
    cfg.check_frame()
    label = ChannelLabel(label)
    rng = np.random.default_rng(seed)

    samples = synth_noise(cfg.frame_len, cfg.noise_floor_power, JammerKind.GAUSSIAN, rng).astype(np.complex128)
    if label is ChannelLabel.EMPTY_CHANNEL:
        _add_beacons(samples, cfg, rng, keep_prob=1.0)
    elif label is ChannelLabel.ACTIVE_CHANNEL:
        _add_tdd_bursts(samples, cfg, rng)
    else:
        samples += synth_noise(cfg.frame_len, cfg.jammer_power, cfg.jammer_kind, rng)
        _add_beacons(samples, cfg, rng, keep_prob=cfg.residual_beacon_prob)

    return IQFrame(samples=samples.astype(np.complex64), sampling_rate=cfg.sampling_rate, label=label, seed=int(seed))


def frame_seed(seed: int, index: int) -> int:
    """Per-frame seed derived from the corpus seed and the frame index."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1, dtype=np.uint64)[0])


def _normalize_counts(counts: Mapping[Union[ChannelLabel, str], int]) -> dict[ChannelLabel, int]:
    out = {label: 0 for label in ChannelLabel}
    for key, n in counts.items():
        label = ChannelLabel(key)
        if n < 0:
            raise ConfigurationError(f"count for {label} must be non-negative, got {n}", field=f"counts.{label}")
        out[label] = int(n)
    return out


def corpus_plan(counts: Mapping[Union[ChannelLabel, str], int], seed: int) -> list[tuple[int, ChannelLabel, int]]:
    """(index, label, frame seed) for every frame, labels in enum order."""
    plan = []
    index = 0
    for label, n in _normalize_counts(counts).items():
        for _ in range(n):
            plan.append((index, label, frame_seed(seed, index)))
            index += 1
    return plan


def iter_corpus(
    cfg: ScenarioConfig,
    counts: Mapping[Union[ChannelLabel, str], int],
    seed: Optional[int] = None,
    progress: bool = False,
) -> Iterator[IQFrame]:
    seed = cfg.seed if seed is None else seed
    plan = corpus_plan(counts, seed)
    for _, label, s in tqdm(plan, desc="simulate", unit="frame", disable=not progress):
        yield gen_frame(cfg, label, s)


def corpus_manifest(cfg: ScenarioConfig, counts: Mapping[Union[ChannelLabel, str], int], seed: int) -> dict[str, Any]:
    normalized = _normalize_counts(counts)
    return {
        "config": cfg.model_dump(mode="json"),
        "sampling_rate": cfg.sampling_rate,
        "frame_len": cfg.frame_len,
        "seed": int(seed),
        "counts": {str(label): n for label, n in normalized.items()},
        "frames": [
            {"index": index, "label": str(label), "seed": s} for index, label, s in corpus_plan(normalized, seed)
        ],
    }


def gen_corpus(
    cfg: ScenarioConfig,
    counts: Mapping[Union[ChannelLabel, str], int],
    seed: Optional[int] = None,
) -> IQCorpus:
    seed = cfg.seed if seed is None else seed
    frames = list(iter_corpus(cfg, counts, seed))
    return IQCorpus(frames=frames, manifest=corpus_manifest(cfg, counts, seed))


class CorpusWriter:
    """Streams frames to disk in either layout and writes the manifest on close."""

    def __init__(self, directory: Path, layout: CorpusLayout, manifest: dict[str, Any]):
        self.directory = Path(directory)
        self.layout = CorpusLayout(layout)
        self.manifest = dict(manifest)
        self.manifest["layout"] = str(self.layout)
        self._entries: list[dict[str, Any]] = []
        self._offset = 0
        self._concat = None
        ensure_dir(self.directory)
        if self.layout is CorpusLayout.CONCATENATED:
            self._concat = (self.directory / CONCATENATED_NAME).open("wb")

    def add(self, frame: IQFrame) -> None:
        index = len(self._entries)
        data = frame.samples.astype(IQ_DTYPE, copy=False).tobytes()
        if self._concat is not None:
            self._concat.write(data)
            entry = {"index": index, "label": str(frame.label), "seed": frame.seed, "file": CONCATENATED_NAME, "offset": self._offset}
        else:
            name = f"frame_{index:06d}"
            (self.directory / f"{name}.iq").write_bytes(data)
            write_json(
                self.directory / f"{name}.json",
                {
                    "sampling_rate": frame.sampling_rate,
                    "frame_len": len(frame),
                    "label": str(frame.label),
                    "seed": frame.seed,
                    "config": self.manifest.get("config"),
                    "config_hash": self.manifest.get("config_hash"),
                },
            )
            entry = {"index": index, "label": str(frame.label), "seed": frame.seed, "file": f"{name}.iq", "offset": 0}
        self._offset += len(frame)
        self._entries.append(entry)

    def close(self) -> dict[str, Any]:
        if self._concat is not None:
            self._concat.close()
            self._concat = None
        counts = {str(label): 0 for label in ChannelLabel}
        for entry in self._entries:
            counts[entry["label"]] += 1
        self.manifest["frames"] = self._entries
        self.manifest["counts"] = counts
        write_json(self.directory / MANIFEST_NAME, self.manifest)
        logger.info("Wrote %d frames to %s (%s layout)", len(self._entries), self.directory, self.layout)
        return self.manifest

    def __enter__(self) -> "CorpusWriter":
        return self

    def abort(self) -> None:
        """Closes the payload without a manifest, so readers treat the corpus as missing."""
        if self._concat is not None:
            self._concat.close()
            self._concat = None
        (self.directory / MANIFEST_NAME).unlink(missing_ok=True)
        logger.warning("Corpus %s left incomplete after %d frames", self.directory, len(self._entries))

    def __exit__(self, exc_type: Any, *exc: Any) -> None:
        if exc_type is None:
            self.close()
        else:
            self.abort()


def write_corpus(
    corpus: IQCorpus, directory: Path, layout: CorpusLayout = CorpusLayout.CONCATENATED, extra: Optional[dict[str, Any]] = None
) -> dict[str, Any]:
    manifest = {**corpus.manifest, **(extra or {})}
    with CorpusWriter(directory, layout, manifest) as writer:
        for frame in corpus.frames:
            writer.add(frame)
    return writer.manifest


class IQFileSource:
    """Random access to frames of a corpus on disk; each `load` reads one slice from the file."""

    def __init__(self, directory: Path, cycle: bool = False):
        self.directory = Path(directory)
        path = self.directory / MANIFEST_NAME
        if not path.exists():
            raise FileNotFoundError(f"Corpus manifest not found: {path}")
        self.manifest = read_json(path)
        try:
            self.frames: list[dict[str, Any]] = list(self.manifest["frames"])
            self.frame_len = int(self.manifest["frame_len"])
            self.sampling_rate = float(self.manifest["sampling_rate"])
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{path} is not a corpus manifest: {e!r}", field="manifest") from e
        self.cycle = cycle

    def __len__(self) -> int:
        return len(self.frames)

    def load(self, index: int) -> IQFrame:
        if self.cycle and self.frames:
            index %= len(self.frames)
        entry = self.frames[index]
        path = self.directory / entry["file"]
        samples = np.fromfile(path, dtype=IQ_DTYPE, count=self.frame_len, offset=int(entry["offset"]) * IQ_DTYPE.itemsize)
        if len(samples) != self.frame_len:
            raise FormatError(
                f"{path} holds {len(samples)} samples at offset {entry['offset']}, expected {self.frame_len}",
                field="frame_len",
            )
        return IQFrame(
            samples=samples.astype(np.complex64),
            sampling_rate=self.sampling_rate,
            label=ChannelLabel(entry["label"]),
            seed=int(entry["seed"]),
        )

    def __iter__(self) -> Iterator[IQFrame]:
        for i in range(len(self.frames)):
            yield self.load(i)


def read_corpus(directory: Path) -> IQCorpus:
    source = IQFileSource(directory)
    return IQCorpus(frames=list(source), manifest=source.manifest)


class IQSimulationService:
    """Generates corpora for one scenario and streams them to disk."""

    def __init__(self, scenario: ScenarioConfig, layout: CorpusLayout = CorpusLayout.CONCATENATED):
        scenario.check_frame()
        self.scenario = scenario
        self.layout = CorpusLayout(layout)

    def simulate(
        self,
        directory: Path,
        counts: Mapping[Union[ChannelLabel, str], int],
        seed: int,
        extra: Optional[dict[str, Any]] = None,
        progress: bool = False,
    ) -> dict[str, Any]:
        """Writes one split; the manifest appears only once every frame is on disk."""
        manifest = {**corpus_manifest(self.scenario, counts, seed), **(extra or {})}
        with CorpusWriter(directory, self.layout, manifest) as writer:
            for frame in iter_corpus(self.scenario, counts, seed, progress=progress):
                writer.add(frame)
        return writer.manifest
