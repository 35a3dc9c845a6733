import json

import numpy as np
import pytest
from pydantic import ValidationError

from jamwatch.enums import ChannelLabel, CorpusLayout, JammerKind
from jamwatch.errors import ConfigurationError, FormatError
from jamwatch.iq_simulation_service import (
    CONCATENATED_NAME,
    MANIFEST_NAME,
    CorpusWriter,
    IQFileSource,
    IQSimulationService,
    ScenarioConfig,
    corpus_manifest,
    corpus_plan,
    frame_seed,
    gen_corpus,
    gen_frame,
    read_corpus,
    synth_multicarrier_burst,
    synth_noise,
    write_corpus,
)


def mean_square(x: np.ndarray) -> float:
    return float(np.mean(np.abs(x.astype(np.complex128)) ** 2))


def test_zero_power_noise_is_exact_zeros(rng):
    out = synth_noise(8, 0.0, JammerKind.GAUSSIAN, rng)
    assert out.shape == (8,)
    assert np.all(out == 0)


def test_gaussian_noise_mean_square(rng):
    out = synth_noise(10**6, 2.0, JammerKind.GAUSSIAN, rng)
    assert out.dtype == np.complex64
    assert 1.99 <= mean_square(out) <= 2.01


def test_uniform_noise_is_bounded_with_requested_power(rng):
    out = synth_noise(10**6, 2.0, JammerKind.UNIFORM, rng)
    bound = np.sqrt(3.0) * (1 + 1e-6)
    assert np.abs(out.real).max() <= bound
    assert np.abs(out.imag).max() <= bound
    assert 1.99 <= mean_square(out) <= 2.01


def test_negative_noise_power_rejected(rng):
    with pytest.raises(ConfigurationError):
        synth_noise(8, -1.0, JammerKind.GAUSSIAN, rng)


def test_multicarrier_burst_power_and_length(rng):
    out = synth_multicarrier_burst(64, 640, 1.0, rng)
    assert len(out) == 640
    assert 0.9 <= mean_square(out) <= 1.1


def test_multicarrier_burst_truncates_partial_block(rng):
    assert len(synth_multicarrier_burst(64, 100, 1.0, rng)) == 100
    assert np.all(synth_multicarrier_burst(64, 128, 0.0, rng) == 0)


def test_multicarrier_burst_keeps_band_edges_and_dc_empty(rng):
    out = synth_multicarrier_burst(128, 128 * 20, 1.0, rng)
    spectrum = np.abs(np.fft.fft(out.reshape(20, 128).astype(np.complex128), axis=1)) ** 2
    power = spectrum.sum(axis=0)
    assert power[0] < 1e-6 * power.max()
    assert power[64] < 1e-6 * power.max()  # Nyquist edge outside the occupied band


@pytest.mark.parametrize("kwargs", [dict(n_subcarriers=100), dict(beacon_len=30000), dict(slot_len=512)])
def test_scenario_rejects_inconsistent_sizes(kwargs):
    with pytest.raises(ValidationError):
        ScenarioConfig(**kwargs)


def test_frame_shorter_than_beacon_period_is_rejected():
    cfg = ScenarioConfig(frame_len=8192)
    with pytest.raises(ConfigurationError) as exc:
        gen_frame(cfg, ChannelLabel.EMPTY_CHANNEL, seed=1)
    assert exc.value.field == "scenario.frame_len"


def test_frames_are_deterministic(desk_cfg):
    a = gen_frame(desk_cfg, ChannelLabel.JAMMED, seed=99)
    b = gen_frame(desk_cfg, ChannelLabel.JAMMED, seed=99)
    c = gen_frame(desk_cfg, ChannelLabel.JAMMED, seed=100)
    assert a.samples.tobytes() == b.samples.tobytes()
    assert a.samples.tobytes() != c.samples.tobytes()
    assert len(a) == desk_cfg.frame_len


def test_jammed_frame_power_matches_jammer():
    cfg = ScenarioConfig()
    frame = gen_frame(cfg, ChannelLabel.JAMMED, seed=5)
    expected = cfg.noise_floor_power + cfg.jammer_power
    assert abs(mean_square(frame.samples) - expected) <= 0.05 * expected


def test_power_ordering_between_cases():
    cfg = ScenarioConfig()
    power = {label: mean_square(gen_frame(cfg, label, seed=11).samples) for label in ChannelLabel}
    gap_db = lambda hi, lo: 10 * np.log10(power[hi] / power[lo])  # noqa: E731
    assert gap_db(ChannelLabel.ACTIVE_CHANNEL, ChannelLabel.EMPTY_CHANNEL) >= 3.0
    assert gap_db(ChannelLabel.JAMMED, ChannelLabel.ACTIVE_CHANNEL) >= 3.0


def test_active_channel_fills_half_the_slots():
    cfg = ScenarioConfig(noise_floor_power=1e-12)
    frame = gen_frame(cfg, ChannelLabel.ACTIVE_CHANNEL, seed=3)
    slot_power = np.abs(frame.samples.reshape(-1, cfg.slot_len).astype(np.complex128)) ** 2
    on = slot_power.mean(axis=1) > 0.5 * cfg.signal_power
    assert on.sum() == round(cfg.burst_duty * len(on))


def test_default_jammer_is_at_least_ten_db_above_signal():
    assert ScenarioConfig().jammer_to_signal_db >= 10.0


def test_corpus_counts_labels_and_seeds(desk_cfg):
    counts = {ChannelLabel.EMPTY_CHANNEL: 2, ChannelLabel.ACTIVE_CHANNEL: 2, ChannelLabel.JAMMED: 0}
    corpus = gen_corpus(desk_cfg, counts, seed=21)
    assert [f.label for f in corpus.frames] == [ChannelLabel.EMPTY_CHANNEL] * 2 + [ChannelLabel.ACTIVE_CHANNEL] * 2
    assert corpus.manifest["counts"] == {"empty": 2, "active": 2, "jammed": 0}
    assert [f.seed for f in corpus.frames] == [frame_seed(21, i) for i in range(4)]
    assert corpus.frames[0].samples.tobytes() == gen_frame(desk_cfg, ChannelLabel.EMPTY_CHANNEL, frame_seed(21, 0)).samples.tobytes()


def test_corpus_plan_rejects_negative_counts():
    with pytest.raises(ConfigurationError):
        corpus_plan({ChannelLabel.JAMMED: -1}, seed=0)


@pytest.mark.parametrize("layout", list(CorpusLayout))
def test_corpus_files_reload_exactly(tmp_path, desk_cfg, layout):
    corpus = gen_corpus(desk_cfg, {"empty": 1, "active": 1, "jammed": 1}, seed=4)
    manifest = write_corpus(corpus, tmp_path / "iq", layout)
    assert manifest["layout"] == str(layout)
    loaded = read_corpus(tmp_path / "iq")
    assert [f.label for f in loaded.frames] == [f.label for f in corpus.frames]
    for a, b in zip(corpus.frames, loaded.frames):
        assert a.samples.tobytes() == b.samples.tobytes()
        assert a.seed == b.seed


def test_file_source_cycles_and_detects_truncation(tmp_path, desk_cfg):
    corpus = gen_corpus(desk_cfg, {"empty": 2}, seed=4)
    write_corpus(corpus, tmp_path, CorpusLayout.CONCATENATED)
    source = IQFileSource(tmp_path, cycle=True)
    assert source.load(3).samples.tobytes() == corpus.frames[1].samples.tobytes()

    data = (tmp_path / CONCATENATED_NAME).read_bytes()
    (tmp_path / CONCATENATED_NAME).write_bytes(data[:-16])
    with pytest.raises(FormatError):
        IQFileSource(tmp_path).load(1)


def test_missing_corpus_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        IQFileSource(tmp_path)


def test_failed_write_leaves_no_manifest(tmp_path, desk_cfg):
    corpus = gen_corpus(desk_cfg, {"empty": 2}, seed=4)
    with pytest.raises(RuntimeError):
        with CorpusWriter(tmp_path, CorpusLayout.CONCATENATED, corpus_manifest(desk_cfg, {"empty": 5}, 4)) as writer:
            for frame in corpus.frames:
                writer.add(frame)
            raise RuntimeError("simulation interrupted")
    assert not (tmp_path / MANIFEST_NAME).exists()
    with pytest.raises(FileNotFoundError):
        IQFileSource(tmp_path)


@pytest.mark.parametrize("content", ["{", "[]", '{"frames": []}', '{"frames": [], "frame_len": "long", "sampling_rate": 1}'])
def test_corrupt_manifest_is_a_format_error(tmp_path, content):
    (tmp_path / MANIFEST_NAME).write_text(content, encoding="utf-8")
    with pytest.raises(FormatError):
        IQFileSource(tmp_path)


def test_per_frame_sidecars_carry_config_hash(tmp_path, desk_cfg):
    corpus = gen_corpus(desk_cfg, {"active": 1}, seed=4)
    write_corpus(corpus, tmp_path, CorpusLayout.PER_FRAME, extra={"config_hash": "f00d"})
    sidecar = json.loads((tmp_path / "frame_000000.json").read_text(encoding="utf-8"))
    assert sidecar["config_hash"] == "f00d"
    assert sidecar["config"]["frame_len"] == desk_cfg.frame_len


@pytest.mark.parametrize("layout", list(CorpusLayout))
def test_simulation_service_writes_a_split(tmp_path, desk_cfg, layout):
    counts = {"empty": 1, "jammed": 2}
    manifest = IQSimulationService(desk_cfg, layout).simulate(tmp_path / "val", counts, seed=3, extra={"split": "val"})
    assert manifest["split"] == "val"
    assert manifest["counts"] == {"empty": 1, "active": 0, "jammed": 2}
    expected = gen_corpus(desk_cfg, counts, seed=3)
    loaded = read_corpus(tmp_path / "val")
    assert [f.samples.tobytes() for f in loaded.frames] == [f.samples.tobytes() for f in expected.frames]


def test_simulation_service_rejects_short_frames():
    with pytest.raises(ConfigurationError):
        IQSimulationService(ScenarioConfig(frame_len=8192))
