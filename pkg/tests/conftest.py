import numpy as np
import pytest

from jamwatch.enums import ChannelLabel, SpectrogramDomain
from jamwatch.iq_simulation_service import ScenarioConfig
from jamwatch.spectrogram_service import Spectrogram


@pytest.fixture
def desk_cfg() -> ScenarioConfig:
    return ScenarioConfig.desk()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def neglog_spec(data, label=None) -> Spectrogram:
    return Spectrogram(data=np.asarray(data, dtype=np.float32), domain=SpectrogramDomain.NEG_LOG, label=label)


def labeled_specs(rng, n_per_label, shape=(8, 8), labels=(ChannelLabel.EMPTY_CHANNEL, ChannelLabel.ACTIVE_CHANNEL)):
    out = []
    for label in labels:
        base = 1.0 if label is ChannelLabel.JAMMED else 0.0
        for _ in range(n_per_label):
            out.append(neglog_spec(base + 0.05 * rng.standard_normal(shape), label))
    return out
