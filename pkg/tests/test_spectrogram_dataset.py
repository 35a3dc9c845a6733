import numpy as np
import pytest

from conftest import neglog_spec
from jamwatch.enums import ChannelLabel, SpectrogramDomain
from jamwatch.errors import ArgumentError, FormatError
from jamwatch.spectrogram_dataset import (
    SpectrogramDataset,
    jammed_targets,
    read_dataset,
    read_manifest,
    stack_inputs,
    write_dataset,
)
from jamwatch.spectrogram_service import Spectrogram


@pytest.fixture
def three_specs(rng):
    labels = [ChannelLabel.EMPTY_CHANNEL, ChannelLabel.ACTIVE_CHANNEL, ChannelLabel.JAMMED]
    return [neglog_spec(rng.uniform(0, 48, size=(4, 16)), label) for label in labels]


def test_written_dataset_reads_back_bit_identical(tmp_path, three_specs):
    path = tmp_path / "test.jwds"
    manifest = write_dataset(three_specs, path, extra={"split": "test"})
    assert manifest["count"] == 3
    assert (manifest["rows"], manifest["cols"], manifest["domain"]) == (4, 16, "neglog")

    loaded = read_dataset(path)
    assert [s.label for s in loaded] == [s.label for s in three_specs]
    for a, b in zip(three_specs, loaded):
        assert a.data.tobytes() == b.data.tobytes()
        assert b.domain is SpectrogramDomain.NEG_LOG
    header, _, _ = read_manifest(path)
    assert header["split"] == "test"
    assert not path.with_name("test.jwds.part").exists()


def test_empty_dataset_is_valid(tmp_path):
    path = tmp_path / "empty.jwds"
    manifest = write_dataset([], path)
    assert manifest["count"] == 0
    assert read_dataset(path) == []


def test_truncated_dataset_is_a_format_error(tmp_path, three_specs):
    path = tmp_path / "cut.jwds"
    write_dataset(three_specs, path)
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(FormatError):
        read_dataset(path)
    path.write_bytes(data[:6])
    with pytest.raises(FormatError):
        read_dataset(path)


def test_wrong_magic_is_a_format_error(tmp_path):
    path = tmp_path / "other.jwds"
    path.write_bytes(b"NOPE" + bytes(32))
    with pytest.raises(FormatError) as exc:
        read_manifest(path)
    assert exc.value.field == "magic"


def test_mixed_shapes_are_rejected(tmp_path, rng):
    specs = [neglog_spec(rng.uniform(size=(4, 16))), neglog_spec(rng.uniform(size=(4, 8)))]
    with pytest.raises(ArgumentError):
        write_dataset(specs, tmp_path / "mixed.jwds")
    assert not (tmp_path / "mixed.jwds.part").exists()


def test_dataset_helpers(tmp_path, three_specs):
    path = tmp_path / "d.jwds"
    write_dataset(three_specs, path)
    dataset = SpectrogramDataset(path)
    assert len(dataset) == 3
    assert dataset.labels.count(ChannelLabel.JAMMED) == 1

    x = stack_inputs(dataset.specs)
    assert tuple(x.shape) == (3, 1, 4, 16)
    assert jammed_targets(dataset.specs).tolist() == [0.0, 0.0, 1.0]


def test_targets_need_labels(rng):
    spec = Spectrogram(data=np.zeros((2, 2), dtype=np.float32), domain=SpectrogramDomain.NEG_LOG)
    with pytest.raises(ArgumentError):
        jammed_targets([spec])
