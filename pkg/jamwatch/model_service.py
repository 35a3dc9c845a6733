"""Builders for the watchdog models: the convolutional autoencoder (CAE) and the
convolutional classifier (CNN), at full scale or as desk-scale variants.

Full-scale builds reproduce the reference layer tables exactly, including the
two pooling layers the tables leave out (one after the CAE's second
convolution, one after the CNN's third) that the listed flatten sizes require.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Optional

import pandas as pd
from pydantic import BaseModel, ConfigDict, ValidationError

from jamwatch.enums import ActivationKind, ModelKind, ModelScale
from jamwatch.errors import ArgumentError, ConstructionError, FormatError
from jamwatch.nn_engine import (
    Activation,
    Conv2D,
    ConvT2D,
    Dense,
    Flatten,
    LayerSpec,
    MaxPool2D,
    Network,
    Reshape,
    ZeroPad2D,
    analytic_param_count,
    infer_shapes,
    load_checkpoint,
    param_count,
    save_checkpoint,
)

logger = logging.getLogger(__name__)

# Reference parameter columns, one entry per layer with parameters.
CAE_TABLE_PARAMS = [320, 18496, 709640, 798336, 73856, 73792, 577]
CNN_TABLE_PARAMS = [320, 18496, 73856, 507920, 136, 9]

FULL_WIDTHS = (32, 64, 128)
DESK_WIDTH_DIVISOR = 4
LATENT_SIZE = 8
CNN_HIDDEN = (16, 8)
MIN_SIDE = 16


class ModelDescriptor(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: ModelKind
    scale: ModelScale
    input_shape: tuple[int, int, int]  # rows, cols, channels
    layers: list[LayerSpec]
    expected_param_total: int
    decoder_start: Optional[int] = None

    @property
    def network_input_shape(self) -> tuple[int, int, int]:
        rows, cols, channels = self.input_shape
        return (channels, rows, cols)


def _relu() -> Activation:
    return Activation(kind=ActivationKind.RELU)


def _encoder(widths: tuple[int, ...], first_stride: int) -> list:
    layers: list = []
    for i, width in enumerate(widths):
        layers += [Conv2D(out_channels=width, kernel=3, stride=first_stride if i == 0 else 1), _relu(), MaxPool2D()]
    return layers


def _cae_layers(rows: int, cols: int, widths: tuple[int, int, int], first_stride: int) -> tuple[list, int]:
    layers = _encoder(widths[:2], first_stride)
    c, h, w = infer_shapes(layers, (1, rows, cols))[-1]
    layers += [Flatten(), Dense(out_features=LATENT_SIZE), _relu()]
    decoder_start = len(layers)

    layers += [
        Dense(out_features=c * h * w),
        _relu(),
        Reshape(channels=c, height=h, width=w),
        ConvT2D(out_channels=widths[2], kernel=3, stride=2),
        _relu(),
        ConvT2D(out_channels=widths[1], kernel=3, stride=2),
        _relu(),
    ]
    _, dh, dw = infer_shapes(layers, (1, rows, cols))[-1]
    if rows % first_stride or cols % first_stride:
        raise ConstructionError(
            f"{rows}x{cols} is not divisible by the first stride {first_stride}", layer_index=len(layers) + 1
        )
    pad_bottom, pad_right = rows // first_stride - dh, cols // first_stride - dw
    if pad_bottom < 0 or pad_right < 0:
        raise ConstructionError(
            f"decoder reaches {dh}x{dw} before padding, larger than {rows // first_stride}x{cols // first_stride}",
            layer_index=len(layers),
        )
    # end-aligned: bottom rows and right columns
    layers += [
        ZeroPad2D(bottom=pad_bottom, right=pad_right),
        ConvT2D(out_channels=1, kernel=3, stride=first_stride, padding=1, output_padding=first_stride - 1),
        Activation(kind=ActivationKind.LINEAR),
    ]
    return layers, decoder_start


def _cnn_layers(rows: int, cols: int, widths: tuple[int, int, int], first_stride: int) -> list:
    layers = _encoder(widths, first_stride)
    layers.append(Flatten())
    for hidden in CNN_HIDDEN:
        layers += [Dense(out_features=hidden), _relu()]
    layers += [Dense(out_features=1), Activation(kind=ActivationKind.SIGMOID)]
    return layers


def describe_model(
    kind: ModelKind,
    rows: int,
    cols: int,
    scale: ModelScale = ModelScale.FULL,
    first_stride: int = 2,
) -> ModelDescriptor:
    """Layer list and expected parameter total for a model; raises ConstructionError if the chain breaks."""
    kind, scale = ModelKind(kind), ModelScale(scale)
    if rows < MIN_SIDE or cols < MIN_SIDE:
        raise ArgumentError(f"spectrograms must be at least {MIN_SIDE}x{MIN_SIDE}, got {rows}x{cols}", field="rows")
    widths = FULL_WIDTHS if scale is ModelScale.FULL else tuple(w // DESK_WIDTH_DIVISOR for w in FULL_WIDTHS)

    decoder_start = None
    if kind is ModelKind.CAE:
        layers, decoder_start = _cae_layers(rows, cols, widths, first_stride)
    else:
        layers = _cnn_layers(rows, cols, widths, first_stride)

    shapes = infer_shapes(layers, (1, rows, cols))
    expected_out = (1, rows, cols) if kind is ModelKind.CAE else (1,)
    if shapes[-1] != expected_out:
        raise ConstructionError(f"{kind} output is {shapes[-1]}, expected {expected_out}", layer_index=len(layers) - 1)

    return ModelDescriptor(
        kind=kind,
        scale=scale,
        input_shape=(rows, cols, 1),
        layers=layers,
        expected_param_total=analytic_param_count(layers, (1, rows, cols)),
        decoder_start=decoder_start,
    )


def build_from_descriptor(descriptor: ModelDescriptor, seed: int = 0) -> Network:
    net = Network(descriptor.layers, descriptor.network_input_shape, seed=seed)
    total = param_count(net)
    if total != descriptor.expected_param_total:
        raise ConstructionError(
            f"{descriptor.kind} has {total} parameters, descriptor expects {descriptor.expected_param_total}"
        )
    net.descriptor = descriptor
    return net


def build_cae(rows: int = 100, cols: int = 1024, seed: int = 0) -> Network:
    return build_from_descriptor(describe_model(ModelKind.CAE, rows, cols), seed=seed)


def build_cnn(rows: int = 100, cols: int = 1024, seed: int = 0) -> Network:
    return build_from_descriptor(describe_model(ModelKind.CNN, rows, cols), seed=seed)


def scaled_descriptor(kind: ModelKind, rows: int, cols: int) -> ModelDescriptor:
    """Desk-scale descriptor; the first convolution keeps stride 2 when the chain allows it, else stride 1."""
    error: Optional[ConstructionError] = None
    for first_stride in (2, 1):
        try:
            return describe_model(kind, rows, cols, ModelScale.DESK, first_stride=first_stride)
        except ConstructionError as e:
            logger.debug("desk %s at %dx%d with stride %d: %s", kind, rows, cols, first_stride, e)
            error = e
    raise error


def model_descriptor(kind: ModelKind, scale: ModelScale, rows: int, cols: int) -> ModelDescriptor:
    if ModelScale(scale) is ModelScale.DESK:
        return scaled_descriptor(kind, rows, cols)
    return describe_model(kind, rows, cols)


def build_scaled(kind: ModelKind, rows: int, cols: int, seed: int = 0) -> Network:
    """Same topology as the full model with channel widths divided by four."""
    return build_from_descriptor(scaled_descriptor(kind, rows, cols), seed=seed)


def build_model(kind: ModelKind, scale: ModelScale, rows: int, cols: int, seed: int = 0) -> Network:
    return build_from_descriptor(model_descriptor(kind, scale, rows, cols), seed=seed)


def save_model(net: Network, path: Path, metadata: Optional[dict[str, Any]] = None) -> dict[str, Any]:
    """Checkpoint with the model descriptor stored next to the caller's metadata."""
    descriptor = getattr(net, "descriptor", None)
    payload = dict(metadata or {})
    if descriptor is not None:
        payload["descriptor"] = descriptor.model_dump(mode="json")
    return save_checkpoint(net, path, payload)


def load_model(path: Path) -> tuple[Network, dict[str, Any]]:
    net, metadata = load_checkpoint(path)
    if "descriptor" in metadata:
        try:
            descriptor = ModelDescriptor.model_validate(metadata["descriptor"])
        except ValidationError as e:
            raise FormatError(f"{path} holds an invalid model descriptor: {e}", field="descriptor") from e
        if list(descriptor.layers) != list(net.specs):
            raise FormatError(f"{path} descriptor does not match its architecture", field="descriptor")
        net.descriptor = descriptor
    return net, metadata


def _size(shape: tuple[int, ...]) -> str:
    if len(shape) == 1:
        return str(shape[0])
    c, h, w = shape
    return f"{h} x {w} x {c}"


def layer_table(descriptor: ModelDescriptor) -> pd.DataFrame:
    """Layer / output size / parameter rows in the reference table layout (activations omitted)."""
    shapes = infer_shapes(descriptor.layers, descriptor.network_input_shape)
    sections = descriptor.kind is ModelKind.CAE
    rows: list[dict[str, object]] = []
    counters = {"conv2d": 0, "convt2d": 0}
    names = {"maxpool2d": "Max Pooling", "flatten": "Flatten", "dense": "Dense", "reshape": "Reshape", "zeropad2d": "Zero Padding"}

    def add(section: str, name: str, shape: tuple[int, ...], params: int) -> None:
        row: dict[str, object] = {"Layer": name, "Output size": _size(shape), "No. of parameters": params}
        rows.append({"Section": section, **row} if sections else row)

    section = "Encoder"
    add(section, "Input", shapes[0], 0)
    for i, spec in enumerate(descriptor.layers):
        if descriptor.decoder_start is not None and i == descriptor.decoder_start:
            section = "Decoder"
            add(section, "Input", shapes[i], 0)
        if isinstance(spec, Activation):
            continue
        if spec.type in counters:
            counters[spec.type] += 1
            name = f"Convolutional {counters[spec.type]}" + ("^T" if spec.type == "convt2d" else "")
        else:
            name = names[spec.type]
        add(section, name, shapes[i + 1], spec.param_count(shapes[i]))
    return pd.DataFrame(rows)


def format_layer_table(descriptor: ModelDescriptor) -> str:
    table = layer_table(descriptor)
    total = int(table["No. of parameters"].sum())
    return f"{table.to_string(index=False)}\nTotal parameters: {total}"
