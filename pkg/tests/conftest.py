import os

# small-matrix workloads run fastest (and deterministically) single-threaded
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import numpy as np
import pytest

from fedpartial import nn


def loss_of(net, x, labels):
    logits, _ = net.forward(x, "train")
    return nn.SoftmaxCrossEntropy.loss_and_grad(logits, labels)[0]


def numeric_param_grad(net, x, labels, layer_idx, name, eps=1e-4):
    """Central finite differences of the training loss wrt one parameter."""
    p = net.layers[layer_idx].params[name]
    num = np.zeros_like(p)
    it = np.nditer(p, flags=["multi_index"])
    for _ in it:
        ix = it.multi_index
        orig = p[ix]
        p[ix] = orig + eps
        fp = loss_of(net, x, labels)
        p[ix] = orig - eps
        fm = loss_of(net, x, labels)
        p[ix] = orig
        num[ix] = (fp - fm) / (2 * eps)
    return num


def assert_grads_match(net, x, labels, tol=1e-5, eps=1e-4, zero_floor=1e-10):
    """Check every analytic parameter gradient against finite differences.

    The relative error is norm-based per parameter tensor; gradients whose
    analytic and numeric norms are both below `zero_floor` count as matching
    (e.g. a conv bias directly followed by batch normalization has an exactly
    zero gradient).
    """
    logits, trace = net.forward(x, "train")
    grads, _ = net.backward(trace, labels)
    assert grads.members(), "net has no parametric layers to check"
    for i in grads.members():
        for name, g in grads.grads[i].items():
            num = numeric_param_grad(net, x, labels, i, name, eps)
            ref = max(np.linalg.norm(num), np.linalg.norm(g))
            if ref < zero_floor:
                continue
            rel = np.linalg.norm(g - num) / ref
            assert rel < tol, f"layer {i} param {name}: relative error {rel:.3e}"


def _kink_margins_ok(net, x, min_gap):
    # finite differences are only valid away from relu/pool kinks: require
    # every relu input and every pool window's top-two gap to clear min_gap
    out = x
    for layer in net.layers[:-1]:
        if isinstance(layer, nn.ReLU):
            if np.abs(out).min() < min_gap:
                return False
        if isinstance(layer, nn.MaxPool):
            win = np.lib.stride_tricks.sliding_window_view(
                out, (layer.kernel, layer.kernel), axis=(2, 3)
            )[:, :, :: layer.stride, :: layer.stride]
            win = win.reshape(*win.shape[:4], -1)
            if win.shape[-1] > 1:
                top2 = np.partition(win, -2, axis=-1)[..., -2:]
                runner, top = top2[..., 0], top2[..., 1]
                # ties between exact zeros (relu-clipped pairs) resolve by
                # position and are stable under perturbation
                hazard = (top - runner < min_gap) & ~((top == 0.0) & (runner == 0.0))
                if hazard.any():
                    return False
        out, _ = layer.forward(out, train=True)
    return True


def draw_safe_input(net, rng, shape, min_gap=1e-3, tries=50):
    """Random batch whose forward pass stays clear of relu/pool kinks."""
    for _ in range(tries):
        x = rng.normal(size=shape)
        if _kink_margins_ok(net, x, min_gap):
            return x
    raise AssertionError("could not draw a kink-safe input")


def all_kinds_net(seed, bn_mode="global"):
    """Tiny net touching every layer kind, for gradient checks."""
    net = nn.Network.from_blocks(
        [
            ("feat", [nn.Conv2D(1, 3, 3, 1, 1), nn.BatchNorm(3, bn_mode), nn.ReLU(), nn.MaxPool(2)]),
            ("head", [nn.Flatten(), nn.Dense(27, 4), nn.BatchNorm(4, bn_mode), nn.SoftmaxCrossEntropy()]),
        ],
        input_shape=(1, 6, 6),
    )
    net.init_params(np.random.Generator(np.random.PCG64(seed)))
    return net


def strided_net(seed):
    """Variant with conv stride 2 and overlapping pooling."""
    net = nn.Network.from_blocks(
        [
            ("feat", [nn.Conv2D(2, 3, 3, 2, 0), nn.ReLU(), nn.MaxPool(2, 1)]),
            ("head", [nn.Flatten(), nn.Dense(12, 3), nn.SoftmaxCrossEntropy()]),
        ],
        input_shape=(2, 7, 7),
    )
    net.init_params(np.random.Generator(np.random.PCG64(seed)))
    return net


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
