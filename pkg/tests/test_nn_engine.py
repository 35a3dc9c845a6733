import math

import pytest
import torch

from jamwatch.enums import ActivationKind
from jamwatch.errors import ArgumentError, ConstructionError, FormatError, ShapeError, StateError, TrainingError
from jamwatch.nn_engine import (
    Activation,
    AdamState,
    Conv2D,
    ConvT2D,
    Dense,
    Flatten,
    MaxPool2D,
    Network,
    Reshape,
    ZeroPad2D,
    adam_step,
    analytic_param_count,
    backward,
    bce,
    forward,
    gradient_check,
    infer_shapes,
    load_checkpoint,
    mse,
    param_count,
    parse_layers,
    predict,
    save_checkpoint,
)


def relu():
    return Activation(kind=ActivationKind.RELU)


def test_layer_shape_functions():
    assert Conv2D(out_channels=32, stride=2).output_shape((1, 100, 1024)) == (32, 49, 511)
    assert MaxPool2D().output_shape((32, 49, 511)) == (32, 24, 255)
    assert ConvT2D(out_channels=128, stride=2).output_shape((64, 11, 126)) == (128, 23, 253)
    assert ConvT2D(out_channels=1, stride=2, padding=1, output_padding=1).output_shape((64, 50, 512)) == (1, 100, 1024)
    assert ZeroPad2D(bottom=3, right=5).output_shape((64, 47, 507)) == (64, 50, 512)
    assert Flatten().output_shape((64, 11, 126)) == (88704,)


def test_layer_param_counts():
    assert Conv2D(out_channels=32).param_count((1, 100, 1024)) == 320
    assert Dense(out_features=8).param_count((88704,)) == 709640
    assert Dense(out_features=1).param_count((8,)) == 9


def test_broken_chain_names_the_layer():
    layers = [Conv2D(out_channels=4), MaxPool2D(), Conv2D(out_channels=4, kernel=3)]
    with pytest.raises(ConstructionError) as exc:
        infer_shapes(layers, (1, 5, 5))
    assert exc.value.layer_index == 2


def test_layer_specs_parse_from_plain_dicts():
    raw = [{"type": "conv2d", "out_channels": 2}, {"type": "activation", "kind": "sigmoid"}]
    layers = parse_layers(raw)
    assert isinstance(layers[0], Conv2D) and layers[1].kind is ActivationKind.SIGMOID


def test_param_count_matches_analytic_count():
    layers = [Conv2D(out_channels=3), relu(), MaxPool2D(), ConvT2D(out_channels=2, stride=2), Flatten(), Dense(out_features=5)]
    net = Network(layers, (1, 8, 10))
    assert param_count(net) == analytic_param_count(layers, (1, 8, 10))


def test_initialization_is_seeded():
    layers = [Flatten(), Dense(out_features=4), relu(), Dense(out_features=1)]
    a, b, c = (Network(layers, (1, 3, 3), seed=s) for s in (1, 1, 2))
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
    assert not torch.equal(a.body[1].weight, c.body[1].weight)
    assert not a.body[1].bias.any()


def test_forward_shape_mismatch_names_layer_zero():
    net = Network([Flatten(), Dense(out_features=2)], (1, 4, 4))
    with pytest.raises(ShapeError) as exc:
        forward(net, torch.zeros(1, 1, 4, 5))
    assert exc.value.layer_index == 0


def test_forward_keeps_every_activation():
    net = Network([Conv2D(out_channels=2), relu(), Flatten(), Dense(out_features=3)], (1, 5, 5))
    acts = forward(net, torch.randn(2, 1, 5, 5))
    assert [tuple(t.shape[1:]) for t in acts.tensors] == [tuple(s) for s in net.shapes]


def test_dense_gradient_matches_closed_form():
    net = Network([Dense(out_features=2)], (3,), seed=3)
    x = torch.tensor([[0.5, -1.0, 2.0]])
    y = torch.tensor([[1.0, -1.0]])
    acts = forward(net, x)
    upstream = 2.0 * (acts.output.detach() - y)
    grads = backward(net, acts, upstream)
    weight, bias = grads.params
    assert torch.allclose(weight, upstream.T @ x, atol=1e-6)
    assert torch.allclose(bias, upstream[0], atol=1e-6)
    assert torch.allclose(grads.input, upstream @ net.body[0].weight.detach(), atol=1e-6)


def test_zero_upstream_gives_zero_gradients():
    net = Network([Conv2D(out_channels=2), relu(), Flatten(), Dense(out_features=2)], (1, 4, 4))
    acts = forward(net, torch.randn(1, 1, 4, 4))
    grads = backward(net, acts, torch.zeros_like(acts.output))
    assert all(not g.any() for g in grads.params)


def test_stale_and_reused_activations_are_state_errors():
    net = Network([Flatten(), Dense(out_features=1)], (1, 2, 2))
    acts = forward(net, torch.ones(1, 1, 2, 2))
    backward(net, acts, torch.ones(1, 1))
    with pytest.raises(StateError):
        backward(net, acts, torch.ones(1, 1))

    acts = forward(net, torch.ones(1, 1, 2, 2))
    net.mark_updated()
    with pytest.raises(StateError):
        backward(net, acts, torch.ones(1, 1))


def test_backward_rejects_the_input_index():
    net = Network([Flatten(), Dense(out_features=1)], (1, 2, 2))
    acts = forward(net, torch.ones(1, 1, 2, 2))
    with pytest.raises(ArgumentError):
        backward(net, acts, torch.ones(1, 1, 2, 2), at=0)


def test_max_pool_ties_route_to_first_index():
    net = Network([MaxPool2D()], (1, 2, 2))
    acts = forward(net, torch.ones(1, 1, 2, 2))
    grads = backward(net, acts, torch.ones(1, 1, 1, 1))
    assert grads.input.reshape(-1).tolist() == [1.0, 0.0, 0.0, 0.0]


@pytest.mark.parametrize(
    "layers, shape",
    [
        ([Conv2D(out_channels=3, stride=2)], (2, 6, 8)),
        ([Conv2D(out_channels=2, padding=1)], (1, 5, 6)),
        ([ConvT2D(out_channels=2, stride=2, padding=1, output_padding=1)], (3, 4, 5)),
        ([ZeroPad2D(top=1, bottom=2, left=0, right=3), Conv2D(out_channels=1)], (1, 4, 4)),
        ([Flatten(), Dense(out_features=6), Reshape(channels=1, height=2, width=3)], (2, 3, 3)),
        ([Flatten(), Dense(out_features=3), Activation(kind=ActivationKind.SIGMOID)], (1, 4, 4)),
        ([Conv2D(out_channels=2), Activation(kind=ActivationKind.LINEAR)], (1, 4, 4)),
    ],
)
def test_gradients_match_central_differences(layers, shape):
    x = torch.randn(2, *shape, generator=torch.Generator().manual_seed(0))
    assert gradient_check(Network(layers, shape, seed=0), x) < 1e-4


def test_max_pool_gradient_matches_central_differences():
    values = torch.randperm(48, generator=torch.Generator().manual_seed(0)).double() * 0.1
    assert gradient_check(Network([MaxPool2D()], (1, 6, 8)), values.reshape(1, 1, 6, 8)) < 1e-4


def test_relu_gradient_matches_central_differences():
    net = Network([Dense(out_features=4), relu(), Dense(out_features=2)], (3,), seed=0)
    with torch.no_grad():
        net.body[0].weight.uniform_(-0.1, 0.1, generator=torch.Generator().manual_seed(1))
        net.body[0].bias.copy_(torch.tensor([1.0, -1.0, 1.0, -1.0]))
    x = torch.rand(5, 3, generator=torch.Generator().manual_seed(2)) * 2 - 1
    assert gradient_check(net, x) < 1e-4


def test_mse_values():
    x = torch.randn(3, 4, generator=torch.Generator().manual_seed(0))
    y = torch.randn(3, 4, generator=torch.Generator().manual_seed(1))
    assert mse(x, x) == 0.0
    assert mse(torch.ones(100, 1024), torch.zeros(100, 1024)) == 102400.0
    brute = sum((float(a) - float(b)) ** 2 for a, b in zip(x.reshape(-1), y.reshape(-1)))
    assert mse(x, y) == pytest.approx(brute, rel=1e-9)
    with pytest.raises(ShapeError):
        mse(torch.zeros(2, 2), torch.zeros(2, 3))


def test_bce_values():
    delta = 1e-7
    assert bce(torch.tensor([1.0]), torch.tensor([1 - delta], dtype=torch.float64)) < 1e-6
    assert bce(torch.tensor([1.0, 0.0]), torch.tensor([0.5, 0.5])) == pytest.approx(math.log(2), rel=1e-9)
    assert bce(torch.tensor([1.0]), torch.tensor([0.0])) == pytest.approx(-math.log(delta), rel=1e-9)
    with pytest.raises(ArgumentError):
        bce(torch.tensor([]), torch.tensor([]))


def test_adam_zero_gradient_leaves_parameters():
    p = torch.nn.Parameter(torch.tensor([0.3, -0.2]))
    before = p.detach().clone()
    state = AdamState.create([p])
    for _ in range(3):
        adam_step([p], [torch.zeros(2)], state)
    assert torch.equal(p.detach(), before)
    assert state.step == 3


def test_adam_first_step_moves_by_learning_rate():
    p = torch.nn.Parameter(torch.zeros(1, dtype=torch.float64))
    state = AdamState.create([p], lr=1e-3)
    adam_step([p], [torch.ones(1, dtype=torch.float64)], state)
    assert float(p) == pytest.approx(-1e-3, rel=1e-6)
    assert state.step == 1
    m, v = state.moments(p)
    assert m.shape == p.shape and v.shape == p.shape


def test_adam_rejects_bad_gradients():
    p = torch.nn.Parameter(torch.zeros(2))
    state = AdamState.create([p])
    with pytest.raises(TrainingError):
        adam_step([p], [torch.tensor([float("nan"), 0.0])], state)
    with pytest.raises(StateError):
        adam_step([torch.nn.Parameter(torch.zeros(2))], [torch.zeros(2)], state)


def test_adam_step_on_network_invalidates_activations():
    net = Network([Flatten(), Dense(out_features=1)], (1, 2, 2))
    state = AdamState.create(net)
    acts = forward(net, torch.ones(1, 1, 2, 2))
    grads = backward(net, forward(net, torch.ones(1, 1, 2, 2)), torch.ones(1, 1))
    adam_step(net, grads.params, state)
    assert state.step == 1
    with pytest.raises(StateError):
        backward(net, acts, torch.ones(1, 1))


def test_checkpoint_reload_predicts_identically(tmp_path):
    net = Network([Conv2D(out_channels=2), relu(), MaxPool2D(), Flatten(), Dense(out_features=1)], (1, 6, 6), seed=4)
    x = torch.randn(3, 1, 6, 6, generator=torch.Generator().manual_seed(0))
    save_checkpoint(net, tmp_path / "m.jwck", {"note": "x"})
    loaded, metadata = load_checkpoint(tmp_path / "m.jwck")
    assert metadata == {"note": "x"}
    assert torch.equal(predict(net, x), predict(loaded, x))


def test_corrupt_checkpoint_is_a_format_error(tmp_path):
    net = Network([Flatten(), Dense(out_features=1)], (1, 2, 2))
    path = tmp_path / "m.jwck"
    save_checkpoint(net, path)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(FormatError):
        load_checkpoint(path)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.jwck")
