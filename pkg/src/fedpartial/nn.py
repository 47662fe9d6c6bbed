"""Layered feed-forward network with exact manual backpropagation.

Networks are ordered layer stacks ending in a softmax cross-entropy layer.
Layers are grouped into named blocks; layer-wise training splits (the
prefix/suffix boundary, and the `from_layer` argument of `backward`) may only
land on block boundaries so a normalization layer is never separated from its
convolution.

A Network is single-writer:`forward`/`backward`/`SGD.step` need exclusive
access, but distinct (e.g. cloned) instances can run on distinct threads.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .tensor import DimensionError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_CKPT_MAGIC = b"FPNETCK1"


class StateError(RuntimeError):
    """A trace no longer matches the network it was produced from."""


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class Layer:
    """Base layer: parameter dict plus forward/backward kernels."""

    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.state: dict[str, np.ndarray] = {}

    def out_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def init_params(self, rng: np.random.Generator) -> None:
        pass

    def forward(self, x: np.ndarray, train: bool):
        raise NotImplementedError

    def backward(self, dy: np.ndarray, cache, need_dx: bool = True):
        raise NotImplementedError

    def spec_dict(self) -> dict:
        return {"kind": self.kind}

    def clone(self) -> "Layer":
        dup = layer_from_spec(self.spec_dict())
        dup.params = {k: v.copy() for k, v in self.params.items()}
        dup.state = {k: v.copy() for k, v in self.state.items()}
        return dup

    @property
    def param_count(self) -> int:
        return sum(int(v.size) for v in self.params.values())


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        if in_dim < 1 or out_dim < 1:
            raise DimensionError(f"dense dims must be positive, got {in_dim}x{out_dim}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.params = {"w": np.zeros((in_dim, out_dim)), "b": np.zeros(out_dim)}

    def out_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.in_dim:
            raise DimensionError(
                f"dense({self.in_dim}->{self.out_dim}) cannot take input {in_shape}"
            )
        return (self.out_dim,)

    def init_params(self, rng):
        bound = np.sqrt(6.0 / self.in_dim)
        self.params["w"] = rng.uniform(-bound, bound, (self.in_dim, self.out_dim))
        self.params["b"] = np.zeros(self.out_dim)

    def forward(self, x, train):
        return x @ self.params["w"] + self.params["b"], x

    def backward(self, dy, cache, need_dx=True):
        x = cache
        dw = x.T @ dy
        db = dy.sum(axis=0)
        dx = dy @ self.params["w"].T if need_dx else None
        return dx, {"w": dw, "b": db}

    def spec_dict(self):
        return {"kind": self.kind, "in_dim": self.in_dim, "out_dim": self.out_dim}


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, pad: int = 0):
        super().__init__()
        if min(in_ch, out_ch, kernel, stride) < 1 or pad < 0:
            raise DimensionError("conv2d parameters must be positive (pad >= 0)")
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel = kernel
        self.stride = stride
        self.pad = pad
        self.params = {
            "w": np.zeros((out_ch, in_ch, kernel, kernel)),
            "b": np.zeros(out_ch),
        }

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_ch:
            raise DimensionError(f"conv2d({self.in_ch}ch) cannot take input {in_shape}")
        oh, ow = tensor.conv2d_out_shape(in_shape[1], in_shape[2], self.kernel, self.stride, self.pad)
        return (self.out_ch, oh, ow)

    def init_params(self, rng):
        fan_in = self.in_ch * self.kernel * self.kernel
        bound = np.sqrt(6.0 / fan_in)
        self.params["w"] = rng.uniform(-bound, bound, (self.out_ch, self.in_ch, self.kernel, self.kernel))
        self.params["b"] = np.zeros(self.out_ch)

    def forward(self, x, train):
        # patch columns are cached so backward skips a second extraction
        n, _, h, w = x.shape
        oh, ow = tensor.conv2d_out_shape(h, w, self.kernel, self.stride, self.pad)
        cols = tensor.im2col(x, self.kernel, self.stride, self.pad)
        out = cols @ self.params["w"].reshape(self.out_ch, -1).T + self.params["b"]
        y = np.ascontiguousarray(out.reshape(n, oh, ow, self.out_ch).transpose(0, 3, 1, 2))
        return y, (cols, x.shape)

    def backward(self, dy, cache, need_dx=True):
        cols, x_shape = cache
        dx, dw, db = tensor.conv2d_backward_cols(
            dy, cols, x_shape, self.params["w"], self.stride, self.pad, need_dx
        )
        return dx, {"w": dw, "b": db}

    def spec_dict(self):
        return {
            "kind": self.kind,
            "in_ch": self.in_ch,
            "out_ch": self.out_ch,
            "kernel": self.kernel,
            "stride": self.stride,
            "pad": self.pad,
        }


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, cache, need_dx=True):
        return dy * cache, None


class MaxPool(Layer):
    kind = "maxpool"

    def __init__(self, kernel: int, stride: int | None = None):
        super().__init__()
        self.kernel = kernel
        self.stride = kernel if stride is None else stride

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise DimensionError(f"maxpool needs (C,H,W) input, got {in_shape}")
        oh, ow = tensor.conv2d_out_shape(in_shape[1], in_shape[2], self.kernel, self.stride, 0)
        return (in_shape[0], oh, ow)

    def forward(self, x, train):
        y, switches = tensor.maxpool_forward(x, self.kernel, self.stride)
        return y, (switches, x.shape)

    def backward(self, dy, cache, need_dx=True):
        switches, x_shape = cache
        return tensor.maxpool_backward(dy, switches, x_shape, self.kernel, self.stride), None

    def spec_dict(self):
        return {"kind": self.kind, "kernel": self.kernel, "stride": self.stride}


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, train):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache, need_dx=True):
        return dy.reshape(cache), None


class BatchNorm(Layer):
    """Batch normalization over the channel axis.

    `mode` selects how running statistics behave in a federated run:
    "global" updates them from batch statistics during training (and they
    get averaged across clients at aggregation), "static" leaves them
    frozen at their initial values (mean 0, var 1) forever.  Evaluation
    always normalizes with the stored running statistics.
    """

    kind = "batchnorm"

    def __init__(self, channels: int, mode: str = "global"):
        super().__init__()
        if mode not in ("static", "global"):
            raise ValueError(f"bn mode must be 'static' or 'global', got {mode!r}")
        self.channels = channels
        self.mode = mode
        self.params = {"gamma": np.ones(channels), "beta": np.zeros(channels)}
        self.state = {"running_mean": np.zeros(channels), "running_var": np.ones(channels)}

    def out_shape(self, in_shape):
        if in_shape[0] != self.channels:
            raise DimensionError(
                f"batchnorm({self.channels}) cannot take input {in_shape}"
            )
        return in_shape

    def _axes_and_bshape(self, x):
        if x.ndim == 4:
            return (0, 2, 3), (1, self.channels, 1, 1)
        if x.ndim == 2:
            return (0,), (1, self.channels)
        raise DimensionError(f"batchnorm needs 2-D or 4-D input, got {x.shape}")

    def forward(self, x, train):
        axes, bshape = self._axes_and_bshape(x)
        if train:
            mean = x.mean(axis=axes)
            xm = x - mean.reshape(bshape)
            var = (xm * xm).mean(axis=axes)
            if self.mode == "global":
                self.state["running_mean"] = (
                    (1 - BN_MOMENTUM) * self.state["running_mean"] + BN_MOMENTUM * mean
                )
                self.state["running_var"] = (
                    (1 - BN_MOMENTUM) * self.state["running_var"] + BN_MOMENTUM * var
                )
        else:
            mean = self.state["running_mean"]
            var = self.state["running_var"]
            xm = x - mean.reshape(bshape)
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = xm * inv.reshape(bshape)
        y = self.params["gamma"].reshape(bshape) * xhat + self.params["beta"].reshape(bshape)
        return y, (xhat, inv, train)

    def backward(self, dy, cache, need_dx=True):
        xhat, inv, _train = cache
        axes, bshape = self._axes_and_bshape(dy)
        gamma = self.params["gamma"]
        dgamma = (dy * xhat).sum(axis=axes)
        dbeta = dy.sum(axis=axes)
        if not need_dx:
            return None, {"gamma": dgamma, "beta": dbeta}
        # backprop through the batch statistics; note sum(dxhat) =
        # gamma*dbeta and sum(dxhat*xhat) = gamma*dgamma, so the
        # reductions above are reused
        n_eff = dy.size // self.channels
        a = (inv * gamma).reshape(bshape)
        b = (-inv * gamma * dbeta / n_eff).reshape(bshape)
        c = (-inv * gamma * dgamma / n_eff).reshape(bshape)
        dx = a * dy + c * xhat
        dx += b
        return dx, {"gamma": dgamma, "beta": dbeta}

    def spec_dict(self):
        return {"kind": self.kind, "channels": self.channels, "mode": self.mode}


class SoftmaxCrossEntropy(Layer):
    """Terminal loss layer; forward is the identity on logits."""

    kind = "softmax_ce"

    def forward(self, x, train):
        return x, x

    def backward(self, dy, cache, need_dx=True):  # pragma: no cover
        raise StateError("loss layer is driven by Network.backward, not chained")

    @staticmethod
    def loss_and_grad(logits: np.ndarray, labels: np.ndarray):
        n, c = logits.shape
        if labels.shape != (n,):
            raise DimensionError(f"labels shape {labels.shape} vs batch {n}")
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss = float(-logp[np.arange(n), labels].mean())
        probs = np.exp(logp)
        dlogits = probs.copy()
        dlogits[np.arange(n), labels] -= 1.0
        return loss, dlogits / n


_LAYER_KINDS = {
    cls.kind: cls for cls in (Dense, Conv2D, ReLU, MaxPool, Flatten, BatchNorm, SoftmaxCrossEntropy)
}


def layer_from_spec(spec: dict) -> Layer:
    kind = spec.get("kind")
    if kind not in _LAYER_KINDS:
        raise ValueError(f"unknown layer kind {kind!r}")
    args = {k: v for k, v in spec.items() if k != "kind"}
    return _LAYER_KINDS[kind](**args)


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


@dataclass
class Trace:
    """Bookkeeping from one forward pass, consumed by `backward`."""

    net_token: int
    version: int
    mode: str
    from_layer: int
    to_layer: int
    caches: list
    out: np.ndarray
    n: int


@dataclass
class GradientSet:
    """Per-layer parameter gradients; membership is the key set."""

    grads: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)

    def members(self) -> tuple[int, ...]:
        return tuple(sorted(self.grads))


class Network:
    """Ordered layer stack with a designated prefix/suffix split.

    `boundaries` is the sorted set of valid split points (block starts); 0
    and len(layers) are always valid.  `split_index` marks the canonical
    boundary between the input-side partition trained by strong clients
    only and the output-side partition trained by everyone.
    """

    def __init__(self, layers, input_shape, boundaries=None, split_index: int = 0):
        if not layers:
            raise DimensionError("network needs at least one layer")
        if not isinstance(layers[-1], SoftmaxCrossEntropy):
            raise DimensionError("last layer must be the softmax cross-entropy loss")
        if sum(isinstance(l, SoftmaxCrossEntropy) for l in layers) != 1:
            raise DimensionError("exactly one loss layer allowed")
        self.layers: list[Layer] = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        n_layers = len(self.layers)
        if boundaries is None:
            boundaries = range(n_layers + 1)
        self.boundaries: tuple[int, ...] = tuple(sorted({0, n_layers, *map(int, boundaries)}))
        if self.boundaries[0] < 0 or self.boundaries[-1] > n_layers:
            raise DimensionError(f"block boundaries {self.boundaries} out of range")

        # shape propagation doubles as adjacency validation
        self.in_shapes: list[tuple] = []
        shape = self.input_shape
        for layer in self.layers:
            self.in_shapes.append(shape)
            shape = layer.out_shape(shape)
        self.out_shapes = self.in_shapes[1:] + [shape]
        if len(shape) != 1:
            raise DimensionError(f"network must end in a class-score vector, got {shape}")
        self.num_classes = int(shape[0])

        if not self.is_boundary(split_index):
            raise DimensionError(f"split_index {split_index} bisects a block")
        self.split_index = int(split_index)
        self._version = 0

    @classmethod
    def from_blocks(cls, blocks, input_shape, split_index: int = 0) -> "Network":
        """Build from [(block_name, [layers...]), ...]; boundaries at block starts."""
        layers: list[Layer] = []
        boundaries = []
        names = []
        for name, group in blocks:
            boundaries.append(len(layers))
            names.append(name)
            layers.extend(group)
        net = cls(layers, input_shape, boundaries, split_index)
        net.block_names = tuple(names)
        return net

    def __len__(self) -> int:
        return len(self.layers)

    def is_boundary(self, idx: int) -> bool:
        return idx in self.boundaries

    def parametric_layers(self) -> tuple[int, ...]:
        return tuple(i for i, l in enumerate(self.layers) if l.params)

    def feature_layers(self) -> tuple[int, ...]:
        """Indices of layers whose outputs carry learned representations."""
        return tuple(i for i, l in enumerate(self.layers) if isinstance(l, (Conv2D, Dense)))

    def param_count(self, layer_indices=None) -> int:
        idx = self.parametric_layers() if layer_indices is None else layer_indices
        return sum(self.layers[i].param_count for i in idx)

    def clone(self) -> "Network":
        dup = Network.__new__(Network)
        dup.layers = [l.clone() for l in self.layers]
        dup.input_shape = self.input_shape
        dup.boundaries = self.boundaries
        dup.in_shapes = self.in_shapes
        dup.out_shapes = self.out_shapes
        dup.num_classes = self.num_classes
        dup.split_index = self.split_index
        dup._version = 0
        if hasattr(self, "block_names"):
            dup.block_names = self.block_names
        return dup

    def init_params(self, rng: np.random.Generator) -> None:
        for layer in self.layers:
            layer.init_params(rng)
        self.bump_version()

    def bump_version(self) -> None:
        self._version += 1

    def set_layer_params(self, idx: int, values: dict[str, np.ndarray]) -> None:
        layer = self.layers[idx]
        for name, arr in values.items():
            if layer.params[name].shape != arr.shape:
                raise DimensionError(
                    f"layer {idx} param {name}: shape {arr.shape} vs {layer.params[name].shape}"
                )
            layer.params[name] = arr.copy()
        self.bump_version()

    def _check_split(self, idx: int, what: str) -> None:
        if not (0 <= idx <= len(self.layers)) or not self.is_boundary(idx):
            raise DimensionError(f"{what} {idx} is not a block boundary of {self.boundaries}")

    def forward(self, x: np.ndarray, mode: str = "train", from_layer: int = 0, to_layer: int | None = None):
        """Run layers [from_layer, to_layer) on a batch.

        Returns (output, Trace).  With the default to_layer the output is the
        logits (the loss layer is an identity in the forward direction).  In
        "eval" mode batch normalization uses its stored running statistics and
        the pass mutates nothing.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        to_layer = len(self.layers) if to_layer is None else to_layer
        self._check_split(from_layer, "from_layer")
        self._check_split(to_layer, "to_layer")
        if from_layer >= to_layer:
            raise DimensionError(f"empty layer range [{from_layer}, {to_layer})")
        x = np.asarray(x, dtype=np.float64)
        want = self.in_shapes[from_layer]
        if x.ndim != len(want) + 1 or tuple(x.shape[1:]) != want:
            raise DimensionError(
                f"batch shape {x.shape} does not match layer-{from_layer} input {want}"
            )
        caches: list = [None] * len(self.layers)
        out = x
        train = mode == "train"
        for i in range(from_layer, to_layer):
            out, caches[i] = self.layers[i].forward(out, train)
        tensor.check_finite(out, "forward output")
        trace = Trace(
            net_token=id(self),
            version=self._version,
            mode=mode,
            from_layer=from_layer,
            to_layer=to_layer,
            caches=caches,
            out=out,
            n=x.shape[0],
        )
        return out, trace

    def backward(self, trace: Trace, labels, from_layer: int = 0):
        """Backpropagate the softmax cross-entropy loss from a forward trace.

        Gradients are produced only for layers >= from_layer; the error
        signal is not propagated below it.  Returns (GradientSet, loss).
        """
        n_layers = len(self.layers)
        if trace.net_token != id(self) or trace.version != self._version:
            raise StateError("trace is stale: parameters changed since forward")
        if trace.mode != "train":
            raise StateError("backward needs a trace from a train-mode forward")
        if trace.to_layer != n_layers:
            raise StateError("trace stops before the loss layer; cannot backpropagate")
        self._check_split(from_layer, "from_layer")
        if from_layer < trace.from_layer:
            raise StateError(
                f"trace starts at layer {trace.from_layer}; no activations below it"
            )
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (trace.n,):
            raise DimensionError(f"labels shape {labels.shape} vs batch {trace.n}")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise DimensionError("labels out of range")

        logits = trace.caches[n_layers - 1]
        loss, delta = SoftmaxCrossEntropy.loss_and_grad(logits, labels)
        grads: dict[int, dict[str, np.ndarray]] = {}
        for i in range(n_layers - 2, from_layer - 1, -1):
            delta, pg = self.layers[i].backward(delta, trace.caches[i], need_dx=i > from_layer)
            if pg is not None:
                grads[i] = pg
        return GradientSet(grads), loss


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class SGD:
    """Mini-batch SGD with momentum and decoupled-from-nothing weight decay.

    Per member layer: v <- momentum*v + g + weight_decay*w; w <- w - lr*v.
    Velocities exist only for layers that have received gradients.
    """

    def __init__(self, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        if not (0.0 <= momentum < 1.0):
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        if weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {weight_decay}")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities: dict[tuple[int, str], np.ndarray] = {}

    def step(self, net: Network, grads: GradientSet) -> None:
        members = grads.members()
        if not members:
            return
        for idx in members:
            layer = net.layers[idx]
            for name in sorted(grads.grads[idx]):
                g = grads.grads[idx][name]
                w = layer.params[name]
                if g.shape != w.shape:
                    raise DimensionError(
                        f"layer {idx} grad {name} shape {g.shape} vs param {w.shape}"
                    )
                key = (idx, name)
                v = self.velocities.get(key)
                if v is None:
                    v = np.zeros_like(w)
                v = self.momentum * v + g + self.weight_decay * w
                self.velocities[key] = v
                layer.params[name] = w - self.lr * v
        net.bump_version()


def check_lr_constraint(lr: float, tau: int, l_max: float):
    """Closed-form step-size bound for tau local steps under smoothness l_max.

    Returns (satisfied, bound) with
    bound = min(1/(tau*l_max), 1/(4*l_max*sqrt(tau*(tau-1)))); the second
    term is +inf at tau=1.
    """
    if l_max <= 0:
        raise ValueError(f"l_max must be positive, got {l_max}")
    if tau < 1:
        raise ValueError(f"tau must be >= 1, got {tau}")
    first = 1.0 / (tau * l_max)
    second = np.inf if tau == 1 else 1.0 / (4.0 * l_max * np.sqrt(tau * (tau - 1.0)))
    bound = float(min(first, second))
    return lr <= bound, bound


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _arch_dict(net: Network) -> dict:
    return {
        "input_shape": list(net.input_shape),
        "boundaries": list(net.boundaries),
        "split_index": net.split_index,
        "layers": [l.spec_dict() for l in net.layers],
    }


def save_checkpoint(net: Network, path) -> None:
    """Write architecture + parameters; save->load->save is byte-identical."""
    entries = []
    for i, layer in enumerate(net.layers):
        for name in sorted(layer.params):
            entries.append((f"{i:03d}.{name}", layer.params[name]))
        for name in sorted(layer.state):
            entries.append((f"{i:03d}.{name}", layer.state[name]))
    arch = json.dumps(_arch_dict(net), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(arch)))
        fh.write(arch)
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Network:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    off = len(_CKPT_MAGIC)
    (arch_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    arch = json.loads(blob[off : off + arch_len])
    off += arch_len
    net = Network(
        [layer_from_spec(s) for s in arch["layers"]],
        arch["input_shape"],
        arch["boundaries"],
        arch["split_index"],
    )
    (n_entries,) = struct.unpack_from("<I", blob, off)
    off += 4
    for _ in range(n_entries):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + name_len].decode()
        off += name_len
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
        idx_s, pname = name.split(".", 1)
        layer = net.layers[int(idx_s)]
        target = layer.params if pname in layer.params else layer.state
        if pname not in target or target[pname].shape != arr.shape:
            raise ValueError(f"{path}: unexpected entry {name} with shape {arr.shape}")
        target[pname] = arr
    net.bump_version()
    return net
