try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    from enum import Enum

    class StrEnum(str, Enum):
        def __str__(self) -> str:
            return str(self.value)

        def __format__(self, format_spec: str) -> str:
            return str(self.value).__format__(format_spec)


class ChannelLabel(StrEnum):
    EMPTY_CHANNEL = "empty"
    ACTIVE_CHANNEL = "active"
    JAMMED = "jammed"

    @property
    def is_trusted(self) -> bool:
        return self is not ChannelLabel.JAMMED


class JammerKind(StrEnum):
    UNIFORM = "uniform"
    GAUSSIAN = "gaussian"


class SpectrogramDomain(StrEnum):
    LINEAR = "linear"
    NEG_LOG = "neglog"


class ModelKind(StrEnum):
    CAE = "cae"
    CNN = "cnn"


class ModelScale(StrEnum):
    FULL = "full"
    DESK = "desk"


class ActivationKind(StrEnum):
    RELU = "relu"
    SIGMOID = "sigmoid"
    LINEAR = "linear"


class LossKind(StrEnum):
    MSE = "mse"  # self-target reconstruction
    BCE = "bce"  # binary labels


class ScoreKind(StrEnum):
    RECONSTRUCTION_ERROR = "reconstruction_error"
    CLASS_PROBABILITY = "class_probability"


class Hypothesis(StrEnum):
    H0 = "H0"
    H1 = "H1"


class CorpusLayout(StrEnum):
    PER_FRAME = "per-frame"
    CONCATENATED = "concatenated"
