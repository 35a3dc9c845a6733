"""Minimal neural-network engine built on torch.

Architectures are ordered lists of pydantic `LayerSpec` variants, each with a
static shape function and an analytic parameter count. A `Network` realizes
them as torch modules. Shapes are channel-first without the batch axis:
(channels, height, width) for images, (features,) for vectors.

`forward` keeps every intermediate tensor so `backward` can return parameter
and input gradients for an arbitrary upstream gradient; losses accumulate in
double precision while storage stays float32.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Annotated, Any, Literal, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, TypeAdapter
from torch import nn

from jamwatch.artifact_io import read_framed_header, write_framed
from jamwatch.enums import ActivationKind
from jamwatch.errors import ArgumentError, ConstructionError, FormatError, ShapeError, StateError, TrainingError

logger = logging.getLogger(__name__)

Shape = tuple[int, ...]

BCE_CLIP = 1e-7


def _spatial(in_shape: Shape, layer: str) -> tuple[int, int, int]:
    if len(in_shape) != 3:
        raise ValueError(f"{layer} needs a (channels, height, width) input, got {in_shape}")
    return in_shape  # type: ignore[return-value]


class _Layer(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    def output_shape(self, in_shape: Shape) -> Shape:
        return in_shape

    def param_count(self, in_shape: Shape) -> int:
        return 0

    def build(self, in_shape: Shape) -> nn.Module:
        raise NotImplementedError

    @property
    def has_params(self) -> bool:
        return False


class Conv2D(_Layer):
    """3x3 convolution; padding 0 is 'valid', p > 0 pads p zeros on every side."""

    type: Literal["conv2d"] = "conv2d"
    out_channels: int = Field(gt=0)
    kernel: int = Field(3, gt=0)
    stride: int = Field(1, gt=0)
    padding: int = Field(0, ge=0)

    def output_shape(self, in_shape: Shape) -> Shape:
        c, h, w = _spatial(in_shape, "Conv2D")
        if h + 2 * self.padding < self.kernel or w + 2 * self.padding < self.kernel:
            raise ValueError(f"Conv2D kernel {self.kernel} does not fit {h}x{w} (padding {self.padding})")
        oh = (h + 2 * self.padding - self.kernel) // self.stride + 1
        ow = (w + 2 * self.padding - self.kernel) // self.stride + 1
        return (self.out_channels, oh, ow)

    def param_count(self, in_shape: Shape) -> int:
        return self.kernel * self.kernel * in_shape[0] * self.out_channels + self.out_channels

    def build(self, in_shape: Shape) -> nn.Module:
        return nn.Conv2d(in_shape[0], self.out_channels, self.kernel, stride=self.stride, padding=self.padding)

    @property
    def has_params(self) -> bool:
        return True


class MaxPool2D(_Layer):
    """Floor-mode max pooling; gradient goes to the first maximum in scan order."""

    type: Literal["maxpool2d"] = "maxpool2d"
    kernel: int = Field(2, gt=0)
    stride: int = Field(2, gt=0)

    def output_shape(self, in_shape: Shape) -> Shape:
        c, h, w = _spatial(in_shape, "MaxPool2D")
        if h < self.kernel or w < self.kernel:
            raise ValueError(f"MaxPool2D window {self.kernel} does not fit {h}x{w}")
        return (c, (h - self.kernel) // self.stride + 1, (w - self.kernel) // self.stride + 1)

    def build(self, in_shape: Shape) -> nn.Module:
        return nn.MaxPool2d(self.kernel, stride=self.stride, ceil_mode=False)


class ConvT2D(_Layer):
    type: Literal["convt2d"] = "convt2d"
    out_channels: int = Field(gt=0)
    kernel: int = Field(3, gt=0)
    stride: int = Field(1, gt=0)
    padding: int = Field(0, ge=0)
    output_padding: int = Field(0, ge=0)

    def output_shape(self, in_shape: Shape) -> Shape:
        c, h, w = _spatial(in_shape, "ConvT2D")
        if self.output_padding >= self.stride:
            raise ValueError(f"ConvT2D output_padding {self.output_padding} must be smaller than stride {self.stride}")
        oh = (h - 1) * self.stride + self.kernel - 2 * self.padding + self.output_padding
        ow = (w - 1) * self.stride + self.kernel - 2 * self.padding + self.output_padding
        if oh <= 0 or ow <= 0:
            raise ValueError(f"ConvT2D produces an empty {oh}x{ow} output")
        return (self.out_channels, oh, ow)

    def param_count(self, in_shape: Shape) -> int:
        return self.kernel * self.kernel * in_shape[0] * self.out_channels + self.out_channels

    def build(self, in_shape: Shape) -> nn.Module:
        return nn.ConvTranspose2d(
            in_shape[0],
            self.out_channels,
            self.kernel,
            stride=self.stride,
            padding=self.padding,
            output_padding=self.output_padding,
        )

    @property
    def has_params(self) -> bool:
        return True


class ZeroPad2D(_Layer):
    type: Literal["zeropad2d"] = "zeropad2d"
    top: int = Field(0, ge=0)
    bottom: int = Field(0, ge=0)
    left: int = Field(0, ge=0)
    right: int = Field(0, ge=0)

    def output_shape(self, in_shape: Shape) -> Shape:
        c, h, w = _spatial(in_shape, "ZeroPad2D")
        return (c, h + self.top + self.bottom, w + self.left + self.right)

    def build(self, in_shape: Shape) -> nn.Module:
        return nn.ZeroPad2d((self.left, self.right, self.top, self.bottom))


class Dense(_Layer):
    type: Literal["dense"] = "dense"
    out_features: int = Field(gt=0)

    def output_shape(self, in_shape: Shape) -> Shape:
        if len(in_shape) != 1:
            raise ValueError(f"Dense needs a flat input, got {in_shape}")
        return (self.out_features,)

    def param_count(self, in_shape: Shape) -> int:
        return in_shape[0] * self.out_features + self.out_features

    def build(self, in_shape: Shape) -> nn.Module:
        return nn.Linear(in_shape[0], self.out_features)

    @property
    def has_params(self) -> bool:
        return True


class Flatten(_Layer):
    type: Literal["flatten"] = "flatten"

    def output_shape(self, in_shape: Shape) -> Shape:
        return (math.prod(in_shape),)

    def build(self, in_shape: Shape) -> nn.Module:
        return nn.Flatten()


class Reshape(_Layer):
    type: Literal["reshape"] = "reshape"
    channels: int = Field(gt=0)
    height: int = Field(gt=0)
    width: int = Field(gt=0)

    def output_shape(self, in_shape: Shape) -> Shape:
        target = (self.channels, self.height, self.width)
        if math.prod(in_shape) != math.prod(target):
            raise ValueError(f"Reshape cannot map {in_shape} onto {target}")
        return target

    def build(self, in_shape: Shape) -> nn.Module:
        return nn.Unflatten(1, (self.channels, self.height, self.width))


class Activation(_Layer):
    type: Literal["activation"] = "activation"
    kind: ActivationKind = ActivationKind.RELU

    def build(self, in_shape: Shape) -> nn.Module:
        if self.kind is ActivationKind.RELU:
            return nn.ReLU()
        if self.kind is ActivationKind.SIGMOID:
            return nn.Sigmoid()
        return nn.Identity()


LayerSpec = Annotated[
    Union[Conv2D, MaxPool2D, ConvT2D, ZeroPad2D, Dense, Flatten, Reshape, Activation],
    Field(discriminator="type"),
]
_LAYER_LIST = TypeAdapter(list[LayerSpec])


def parse_layers(raw: list[dict[str, Any]]) -> list[_Layer]:
    return _LAYER_LIST.validate_python(raw)


def infer_shapes(layers: Sequence[_Layer], input_shape: Shape) -> list[Shape]:
    """Static shape chain: input shape followed by each layer's output shape."""
    shapes = [tuple(input_shape)]
    for i, spec in enumerate(layers):
        try:
            shapes.append(tuple(spec.output_shape(shapes[-1])))
        except ValueError as e:
            raise ConstructionError(f"layer {i} ({spec.type}) breaks the shape chain: {e}", layer_index=i) from e
    return shapes


class Network(nn.Module):
    """Sequential network built from layer specs with deterministic initialization.

    ReLU-fed layers get He-uniform weights, the others Glorot-uniform; biases
    start at zero.
    """

    def __init__(self, layers: Sequence[_Layer], input_shape: Shape, seed: int = 0):
        super().__init__()
        self.specs: tuple[_Layer, ...] = tuple(layers)
        self.input_shape: Shape = tuple(int(d) for d in input_shape)
        self.seed = int(seed)
        self.shapes = infer_shapes(self.specs, self.input_shape)
        self.body = nn.ModuleList(spec.build(shape) for spec, shape in zip(self.specs, self.shapes))
        self.generation = 0
        self.reset_parameters(self.seed)

    @property
    def output_shape(self) -> Shape:
        return self.shapes[-1]

    def _followed_by_relu(self, index: int) -> bool:
        for spec in self.specs[index + 1 :]:
            if isinstance(spec, Activation):
                return spec.kind is ActivationKind.RELU
            if spec.has_params:
                return False
        return False

    def reset_parameters(self, seed: int) -> None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            for i, (spec, module) in enumerate(zip(self.specs, self.body)):
                if not spec.has_params:
                    continue
                if self._followed_by_relu(i):
                    nn.init.kaiming_uniform_(module.weight, nonlinearity="relu")
                else:
                    nn.init.xavier_uniform_(module.weight)
                nn.init.zeros_(module.bias)
        self.mark_updated()

    def mark_updated(self) -> None:
        """Invalidates activations recorded before a parameter update."""
        self.generation += 1

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for module in self.body:
            x = module(x)
        return x

    def architecture(self) -> dict[str, Any]:
        return {
            "input_shape": list(self.input_shape),
            "layers": [spec.model_dump(mode="json") for spec in self.specs],
            "seed": self.seed,
        }


def param_count(net: Network) -> int:
    return sum(p.numel() for p in net.parameters())


def layer_param_counts(net: Network) -> list[int]:
    """Parameter count of every layer that has parameters, in order."""
    return [
        sum(p.numel() for p in module.parameters())
        for spec, module in zip(net.specs, net.body)
        if spec.has_params
    ]


def analytic_param_count(layers: Sequence[_Layer], input_shape: Shape) -> int:
    shapes = infer_shapes(layers, input_shape)
    return sum(spec.param_count(shape) for spec, shape in zip(layers, shapes))


@dataclass
class Activations:
    tensors: list[torch.Tensor]  # input first, then every layer output
    generation: int
    network_id: int
    consumed: bool = False

    @property
    def output(self) -> torch.Tensor:
        return self.tensors[-1]


@dataclass
class Gradients:
    params: list[torch.Tensor]
    input: torch.Tensor


def _param_dtype(net: Network, default: torch.dtype = torch.float32) -> torch.dtype:
    for p in net.parameters():
        return p.dtype
    return default


def _as_batch(net: Network, x: torch.Tensor) -> torch.Tensor:
    x = torch.as_tensor(x)
    if x.dim() == len(net.input_shape):
        x = x.unsqueeze(0)
    if tuple(x.shape[1:]) != net.input_shape:
        raise ShapeError(
            f"input shape {tuple(x.shape[1:])} does not match network input {net.input_shape}",
            layer_index=0,
            field="x",
        )
    return x.to(_param_dtype(net, x.dtype if x.is_floating_point() else torch.float32))


def forward(net: Network, x: torch.Tensor) -> Activations:
    """Runs the network keeping every intermediate tensor for `backward`."""
    x = _as_batch(net, x).detach().requires_grad_(True)
    tensors = [x]
    with torch.enable_grad():
        for i, (spec, module) in enumerate(zip(net.specs, net.body)):
            try:
                out = module(tensors[-1])
            except RuntimeError as e:
                raise ShapeError(f"layer {i} ({spec.type}) failed: {e}", layer_index=i) from e
            if tuple(out.shape[1:]) != net.shapes[i + 1]:
                raise ShapeError(
                    f"layer {i} ({spec.type}) produced {tuple(out.shape[1:])}, expected {net.shapes[i + 1]}",
                    layer_index=i,
                )
            tensors.append(out)
    return Activations(tensors=tensors, generation=net.generation, network_id=id(net))


def predict(net: Network, x: torch.Tensor) -> torch.Tensor:
    """Inference-only forward pass."""
    x = _as_batch(net, x)
    with torch.inference_mode():
        return net(x)


def backward(net: Network, activations: Activations, upstream: torch.Tensor, at: int = -1) -> Gradients:
    """Gradients of sum(upstream * activations.tensors[at]) w.r.t. every parameter and the input."""
    if activations.network_id != id(net) or activations.generation != net.generation:
        raise StateError("activations are stale: the network changed since forward()", field="activations")
    if activations.consumed:
        raise StateError("activations were already used by backward()", field="activations")
    if at == 0 or at < -len(activations.tensors) or at >= len(activations.tensors):
        raise ArgumentError(f"cannot backpropagate from activation index {at}", field="at")

    target = activations.tensors[at]
    if tuple(upstream.shape) != tuple(target.shape):
        raise ShapeError(f"upstream gradient {tuple(upstream.shape)} does not match {tuple(target.shape)}", field="upstream")

    params = list(net.parameters())
    inputs = params + [activations.tensors[0]]
    grads = torch.autograd.grad(target, inputs, grad_outputs=upstream.to(target.dtype), allow_unused=True)
    activations.consumed = True
    filled = [torch.zeros_like(t) if g is None else g.detach() for g, t in zip(grads, inputs)]
    return Gradients(params=filled[:-1], input=filled[-1])


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ", field=what)


def mse_loss(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Squared Frobenius norm ||x - y||^2, accumulated in double precision (differentiable)."""
    x, y = torch.as_tensor(x), torch.as_tensor(y)
    _check_same_shape(x, y, "mse")
    return (x.double() - y.double()).pow(2).sum()


def mse(x: torch.Tensor, y: torch.Tensor) -> float:
    with torch.no_grad():
        return float(mse_loss(x, y))


def bce_loss(y: torch.Tensor, y_hat: torch.Tensor, n: Optional[int] = None) -> torch.Tensor:
    """-(1/N) sum[y ln p + (1-y) ln(1-p)] with p clipped to [1e-7, 1 - 1e-7]."""
    y, y_hat = torch.as_tensor(y, dtype=torch.float64), torch.as_tensor(y_hat)
    _check_same_shape(y, y_hat, "bce")
    n = y.numel() if n is None else n
    if n <= 0:
        raise ArgumentError("binary cross-entropy needs N > 0", field="N")
    p = y_hat.double().clamp(BCE_CLIP, 1.0 - BCE_CLIP)
    return -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p)).sum() / n


def bce(y: torch.Tensor, y_hat: torch.Tensor, n: Optional[int] = None) -> float:
    with torch.no_grad():
        return float(bce_loss(y, y_hat, n))


def bce_with_logits_loss(y: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """Same quantity as `bce_loss` on sigmoid(logits), without clipping; stays trainable when saturated."""
    y, logits = torch.as_tensor(y), torch.as_tensor(logits)
    _check_same_shape(y, logits, "bce")
    if y.numel() == 0:
        raise ArgumentError("binary cross-entropy needs N > 0", field="N")
    return F.binary_cross_entropy_with_logits(logits.double(), y.double(), reduction="mean")


@dataclass
class AdamState:
    """Bias-corrected Adam; moments live in the wrapped torch optimizer."""

    optimizer: torch.optim.Adam
    step: int = 0
    param_ids: frozenset = field(default_factory=frozenset)

    @classmethod
    def create(
        cls,
        params: Union[Network, Sequence[torch.nn.Parameter]],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> "AdamState":
        params = list(params.parameters()) if isinstance(params, Network) else list(params)
        optimizer = torch.optim.Adam(params, lr=lr, betas=(beta1, beta2), eps=eps)
        return cls(optimizer=optimizer, param_ids=frozenset(id(p) for p in params))

    def moments(self, param: torch.nn.Parameter) -> tuple[torch.Tensor, torch.Tensor]:
        """(first, second) moment of a parameter; zeros before the first step."""
        state = self.optimizer.state.get(param, {})
        if "exp_avg" not in state:
            return torch.zeros_like(param), torch.zeros_like(param)
        return state["exp_avg"], state["exp_avg_sq"]


def adam_step(
    params: Union[Network, Sequence[torch.nn.Parameter]],
    grads: Sequence[torch.Tensor],
    state: AdamState,
) -> AdamState:
    net = params if isinstance(params, Network) else None
    params = list(params.parameters()) if net is not None else list(params)
    if len(params) != len(grads):
        raise ShapeError(f"{len(grads)} gradients for {len(params)} parameters", field="grads")
    for i, (p, g) in enumerate(zip(params, grads)):
        if id(p) not in state.param_ids:
            raise StateError(f"parameter {i} is not tracked by this Adam state", field="params")
        _check_same_shape(p, g, f"grads[{i}]")
        if not torch.isfinite(g).all():
            raise TrainingError(f"gradient {i} holds NaN or infinite values", field="grads")

    for p, g in zip(params, grads):
        p.grad = g.detach().to(p.dtype).clone()
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    state.step += 1
    if net is not None:
        net.mark_updated()
    return state


def gradient_check(net: Network, x: torch.Tensor, h: float = 1e-3, seed: int = 0) -> float:
    """Max relative error between `backward` and central differences, in double precision.

    The objective is sum(w * output) for a fixed random w; the relative error
    of each gradient tensor is ||a - n|| / max(||a||, ||n||).
    """
    net64 = copy.deepcopy(net).double()
    x64 = _as_batch(net64, x).detach().clone()
    generator = torch.Generator().manual_seed(seed)

    activations = forward(net64, x64)
    weights = torch.randn(activations.output.shape, generator=generator, dtype=torch.float64)
    grads = backward(net64, activations, weights)

    def objective() -> float:
        with torch.no_grad():
            return float((net64(x64) * weights).sum())

    worst = 0.0
    for tensor, analytic in zip([*net64.parameters(), x64], [*grads.params, grads.input]):
        flat = tensor.data.view(-1)
        numeric = torch.zeros_like(flat)
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + h
            plus = objective()
            flat[i] = orig - h
            minus = objective()
            flat[i] = orig
            numeric[i] = (plus - minus) / (2.0 * h)
        a = analytic.reshape(-1)
        scale = max(float(a.norm()), float(numeric.norm()))
        if scale > 0.0:
            worst = max(worst, float((a - numeric).norm()) / scale)
    return worst


CHECKPOINT_MAGIC = b"JWCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(net: Network, path: Path, metadata: Optional[dict[str, Any]] = None) -> dict[str, Any]:
    params = list(net.parameters())
    header = {
        "architecture": net.architecture(),
        "param_shapes": [list(p.shape) for p in params],
        "param_count": param_count(net),
        "metadata": metadata or {},
    }
    chunks = (p.detach().cpu().numpy().astype("<f4").tobytes() for p in params)
    write_framed(Path(path), CHECKPOINT_MAGIC, CHECKPOINT_VERSION, header, chunks)
    logger.info("Saved checkpoint with %d parameters to %s", header["param_count"], path)
    return header


def load_checkpoint(path: Path) -> tuple[Network, dict[str, Any]]:
    """Rebuilds the network from the header and fills in the float32 parameter blob."""
    path = Path(path)
    header, offset, size = read_framed_header(path, CHECKPOINT_MAGIC, (CHECKPOINT_VERSION,))
    try:
        arch = header["architecture"]
        net = Network(parse_layers(arch["layers"]), tuple(arch["input_shape"]), seed=arch.get("seed", 0))
    except (KeyError, ValueError) as e:
        raise FormatError(f"{path} has an invalid architecture: {e}", field="architecture") from e

    params = list(net.parameters())
    shapes = [list(p.shape) for p in params]
    if shapes != header.get("param_shapes"):
        raise FormatError(f"{path} parameter shapes do not match its architecture", field="param_shapes")
    expected = sum(p.numel() for p in params) * 4
    if size != expected:
        raise FormatError(f"{path} parameter blob is {size} bytes, expected {expected}", field="parameters")

    with path.open("rb") as f:
        f.seek(offset)
        blob = np.frombuffer(f.read(size), dtype="<f4")
    start = 0
    with torch.no_grad():
        for p in params:
            chunk = blob[start : start + p.numel()].reshape(p.shape)
            p.copy_(torch.from_numpy(chunk.astype(np.float32)))
            start += p.numel()
    net.mark_updated()
    return net, header.get("metadata", {})
