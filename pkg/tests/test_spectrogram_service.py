import numpy as np
import pytest

from jamwatch.enums import ChannelLabel, SpectrogramDomain
from jamwatch.errors import ConfigurationError, LengthError, StateError
from jamwatch.iq_simulation_service import IQFrame, gen_frame
from jamwatch.spectrogram_service import (
    Spectrogram,
    SpectrogramService,
    build_spectrogram,
    compute_psd,
    fftshift,
    frame_to_input,
    neg_log,
)

FS = 120e6
N = 1024


def dft_psd(window: np.ndarray, fs: float) -> np.ndarray:
    n = len(window)
    k = np.arange(n)
    matrix = np.exp(-2j * np.pi * (np.outer(k, k) % n) / n)
    spectrum = matrix @ window.astype(np.complex128)
    return np.roll(np.abs(spectrum) ** 2 / (n * fs), n // 2)


def frame_of(samples: np.ndarray, label=ChannelLabel.EMPTY_CHANNEL) -> IQFrame:
    return IQFrame(samples=samples.astype(np.complex64), sampling_rate=FS, label=label, seed=0)


def test_zero_window_gives_zero_psd():
    assert np.all(compute_psd(np.zeros(N, dtype=np.complex64), FS).values == 0)


def test_constant_window_has_single_dc_bin():
    psd = compute_psd(np.ones(N, dtype=np.complex128), FS).values
    assert psd[512] == pytest.approx(N**2 / (N * FS), rel=1e-12)
    assert np.abs(np.delete(psd, 512)).max() < 1e-12


def test_tone_lands_in_shifted_bin():
    k = np.arange(N)
    psd = compute_psd(np.exp(2j * np.pi * 100 * k / N), FS).values
    assert int(np.argmax(psd)) == 612
    assert psd[612] == pytest.approx(N / FS, rel=1e-9)
    assert np.abs(np.delete(psd, 612)).max() < 1e-12


def test_psd_matches_direct_dft(rng):
    windows = (rng.standard_normal((100, N)) + 1j * rng.standard_normal((100, N))).astype(np.complex64)
    for window in windows:
        ours = compute_psd(window, FS).values
        oracle = dft_psd(window, FS)
        assert np.max(np.abs(ours - oracle)) <= 1e-9 * np.max(np.abs(oracle))


def test_parseval(rng):
    window = rng.standard_normal(N) + 1j * rng.standard_normal(N)
    total = compute_psd(window, FS).values.sum()
    assert total == pytest.approx(np.sum(np.abs(window) ** 2) / FS, rel=1e-6)


def test_psd_rejects_non_power_of_two():
    with pytest.raises(ConfigurationError):
        compute_psd(np.zeros(1000, dtype=np.complex64), FS)


def test_fftshift_is_an_involution(rng):
    v = rng.standard_normal(N)
    assert np.array_equal(fftshift(fftshift(v)), v)


def test_zero_frame_gives_zero_matrix():
    spec = build_spectrogram(frame_of(np.zeros(102_400)))
    assert spec.data.shape == (100, 1024)
    assert spec.domain is SpectrogramDomain.LINEAR
    assert not spec.data.any()


def test_short_frame_names_required_length():
    with pytest.raises(LengthError) as exc:
        build_spectrogram(frame_of(np.zeros(102_399)))
    assert exc.value.required == 102_400


def test_rows_are_independent_windows(desk_cfg):
    frame = gen_frame(desk_cfg, ChannelLabel.ACTIVE_CHANNEL, seed=8)
    spec = build_spectrogram(frame, n=128, rows=32)
    assert spec.data.shape == (32, 128)
    assert np.array_equal(spec.data[0], compute_psd(frame.samples[:128], FS).values.astype(np.float32))
    assert np.array_equal(spec.data[5], compute_psd(frame.samples[640:768], FS).values.astype(np.float32))
    assert spec.label is ChannelLabel.ACTIVE_CHANNEL


def test_excess_samples_are_ignored(rng):
    samples = rng.standard_normal(4096 + 77) + 1j * rng.standard_normal(4096 + 77)
    full = build_spectrogram(frame_of(samples), n=128, rows=32)
    trimmed = build_spectrogram(frame_of(samples[:4096]), n=128, rows=32)
    assert np.array_equal(full.data, trimmed.data)


def test_neg_log_values():
    linear = Spectrogram(data=np.array([[0.0, 1.0]], dtype=np.float32), domain=SpectrogramDomain.LINEAR)
    out = neg_log(linear)
    assert out.domain is SpectrogramDomain.NEG_LOG
    assert out.data[0, 0] == pytest.approx(48.354, abs=1e-3)
    assert abs(out.data[0, 1]) < 1e-6


def test_neg_log_is_decreasing_and_bounded():
    x = np.geomspace(1e-12, 1e-3, 50).astype(np.float32)
    out = neg_log(Spectrogram(data=x[None, :], domain=SpectrogramDomain.LINEAR)).data[0]
    assert np.all(np.diff(out) < 0)
    assert out.max() <= -np.log(1e-21) + 1e-4


def test_neg_log_twice_is_a_state_error():
    once = neg_log(Spectrogram(data=np.zeros((2, 2), dtype=np.float32), domain=SpectrogramDomain.LINEAR))
    with pytest.raises(StateError):
        neg_log(once)


def test_spectrogram_validates_domain_constraints():
    with pytest.raises(ConfigurationError):
        Spectrogram(data=np.array([[-1.0]], dtype=np.float32), domain=SpectrogramDomain.LINEAR)
    with pytest.raises(ConfigurationError):
        Spectrogram(data=np.array([[np.inf]], dtype=np.float32), domain=SpectrogramDomain.NEG_LOG)


def test_frame_to_input_on_jammed_frame_is_finite(desk_cfg):
    spec = frame_to_input(gen_frame(desk_cfg, ChannelLabel.JAMMED, seed=2), n=128, rows=32)
    assert spec.domain is SpectrogramDomain.NEG_LOG
    assert np.all(np.isfinite(spec.data))


def test_spectrogram_service_matches_frame_to_input(desk_cfg):
    frames = [gen_frame(desk_cfg, label, seed=5) for label in ChannelLabel]
    service = SpectrogramService(n=128, rows=32)
    assert service.frame_len == desk_cfg.frame_len
    specs = list(service.transform_all(frames))
    assert [s.label for s in specs] == list(ChannelLabel)
    for frame, spec in zip(frames, specs):
        assert np.array_equal(spec.data, frame_to_input(frame, n=128, rows=32).data)
    with pytest.raises(ConfigurationError):
        SpectrogramService(n=100)
