"""Federated round loop with layer-wise partial training for weak clients.

Strong clients train the full model; weak clients either train an
output-side suffix of layers on activations cached by a once-per-round
multi-step forward pass, or (baseline) a width-reduced copy of every layer.
The server averages each layer over exactly the clients that trained it:
suffix layers over all sampled clients, prefix layers over the clients whose
strategy covers them.

Sampled clients may train concurrently: each works on a private clone with a
private RNG stream, and aggregation reduces contributions in client-id
order, so serial and parallel execution produce identical bits.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import analysis
from .data import Dataset
from .nn import SGD, BatchNorm, Conv2D, Dense, Flatten, MaxPool, Network, ReLU, SoftmaxCrossEntropy

MODES = (
    "embracing",
    "fedavg",
    "width_reduction",
    "ablation:first_half",
    "ablation:second_half",
    "ablation:channel_wise",
    "independent",
)

#: modes whose clients keep persistent local models across rounds
PERSISTENT_MODES = ("independent", "ablation:first_half", "ablation:second_half", "ablation:channel_wise")


class AggregationError(ValueError):
    """A contribution does not fit the global model."""


# ---------------------------------------------------------------------------
# Client descriptions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Strategy:
    """What a client trains: the full model, an output-side suffix of
    layers (from `split_index` on), or a width-reduced copy."""

    kind: str
    split_index: int = 0
    keep_fraction: float = 1.0

    def __post_init__(self):
        if self.kind not in ("full", "suffix", "width"):
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        if self.kind == "suffix" and self.split_index < 1:
            raise ValueError("suffix strategy needs split_index >= 1")
        if self.kind == "full" and (self.split_index != 0 or self.keep_fraction != 1.0):
            raise ValueError("full strategy is split_index=0, keep_fraction=1")
        if not (0.0 < self.keep_fraction <= 1.0):
            raise ValueError(f"keep_fraction must be in (0, 1], got {self.keep_fraction}")

    @classmethod
    def full(cls):
        return cls("full")

    @classmethod
    def suffix(cls, split_index: int):
        return cls("suffix", split_index=split_index)

    @classmethod
    def width(cls, keep_fraction: float):
        return cls("width", keep_fraction=keep_fraction)

    def first_trained_layer(self) -> int:
        return self.split_index if self.kind == "suffix" else 0


@dataclass(frozen=True)
class ClientProfile:
    id: int
    tier: str  # "strong" | "moderate" | "weak"
    strategy: Strategy
    shard: np.ndarray  # sample indices into the training set
    seed_stream: int  # per-client RNG stream id

    def __post_init__(self):
        if len(self.shard) == 0:
            raise ValueError(f"client {self.id} has an empty shard")


@dataclass(frozen=True)
class ActivationCache:
    """Split-point activations for one client's whole shard, recorded once
    per communication round and reused for every local step."""

    client_id: int
    round_index: int
    recorded: np.ndarray
    labels: np.ndarray
    spill_path: str | None = None

    def __post_init__(self):
        if len(self.recorded) != len(self.labels):
            raise ValueError("cache rows must match label count")


@dataclass(frozen=True)
class ClientUpdate:
    """Trained parameters for the layers a client actually trained."""

    client_id: int
    strategy: Strategy
    params: dict[int, dict[str, np.ndarray]]
    bn_stats: dict[int, dict[str, np.ndarray]]
    width_maps: dict[int, dict[str, np.ndarray]] | None = None


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    global_loss: float
    global_accuracy: float
    per_layer_svcca: dict[str, float] | None
    sampled_clients: list[int]

    def __post_init__(self):
        if not (0.0 <= self.global_accuracy <= 1.0):
            raise ValueError(f"accuracy {self.global_accuracy} outside [0, 1]")


@dataclass(frozen=True)
class AggregationWeights:
    """Exact per-layer averaging weights (client id -> 1/#participants)."""

    per_layer: dict[int, dict[int, Fraction]]

    def check_normalized(self) -> bool:
        return all(sum(w.values()) == 1 for w in self.per_layer.values() if w)


def aggregation_weights(net: Network, updates) -> AggregationWeights:
    per_layer: dict[int, dict[int, Fraction]] = {}
    for idx in net.parametric_layers():
        members = [u.client_id for u in updates if idx in u.params]
        per_layer[idx] = {cid: Fraction(1, len(members)) for cid in members}
    return AggregationWeights(per_layer)


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


class BatchSampler:
    """Shuffled batches without replacement; reshuffles at exhaustion.

    If the shard is smaller than the batch size, every draw is the whole
    shard (in a fresh shuffled order).  A tail shorter than one batch is
    dropped at the reshuffle.
    """

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 1 or batch_size < 1:
            raise ValueError("need n >= 1 and batch_size >= 1")
        self.n = n
        self.batch = min(batch_size, n)
        self.rng = rng
        self.perm = rng.permutation(n)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos + self.batch > self.n:
            self.perm = self.rng.permutation(self.n)
            self.pos = 0
        out = self.perm[self.pos : self.pos + self.batch]
        self.pos += self.batch
        return out


def client_stream(clients_seed: int, stream_id: int, round_index: int) -> np.random.Generator:
    """Private PCG64 stream for one client in one round.

    Keyed by (base seed, stream id, round) so streams are independent of
    execution order and of how many other clients run."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([clients_seed, stream_id, round_index])))


# ---------------------------------------------------------------------------
# Width reduction (HeteroFL/FjORD-style baseline)
# ---------------------------------------------------------------------------


def width_reduce(net: Network, keep_fraction: float):
    """Shrink every hidden width to ceil(keep_fraction * width), keeping the
    first consecutive units; returns (sub_network, index_maps).

    Weight slices are taken consistently on input and output dimensions by
    propagating the kept-index set through the stack.  The data channels of
    the first layer and the class dimension of the final classifier are
    never reduced.  index_maps[layer] = {"in": idx, "out": idx} locates the
    sub-model's parameters inside the full model for aggregation.
    """
    if not (0.0 < keep_fraction <= 1.0):
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    param_idx = [i for i, l in enumerate(net.layers) if isinstance(l, (Conv2D, Dense))]
    last_param = max(param_idx)

    def kept(width: int, full: bool) -> np.ndarray:
        n = width if full else math.ceil(keep_fraction * width)
        if n < 1:
            raise ValueError(f"layer reduced to zero width (from {width})")
        return np.arange(n)

    cur = np.arange(net.input_shape[0])
    sub_layers: list = []
    maps: dict[int, dict[str, np.ndarray]] = {}
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Conv2D):
            out_idx = kept(layer.out_ch, i == last_param)
            sub = Conv2D(len(cur), len(out_idx), layer.kernel, layer.stride, layer.pad)
            sub.params["w"] = layer.params["w"][np.ix_(out_idx, cur)].copy()
            sub.params["b"] = layer.params["b"][out_idx].copy()
            maps[i] = {"in": cur, "out": out_idx}
            cur = out_idx
        elif isinstance(layer, Dense):
            out_idx = kept(layer.out_dim, i == last_param)
            sub = Dense(len(cur), len(out_idx))
            sub.params["w"] = layer.params["w"][np.ix_(cur, out_idx)].copy()
            sub.params["b"] = layer.params["b"][out_idx].copy()
            maps[i] = {"in": cur, "out": out_idx}
            cur = out_idx
        elif isinstance(layer, BatchNorm):
            sub = BatchNorm(len(cur), layer.mode)
            for name in ("gamma", "beta"):
                sub.params[name] = layer.params[name][cur].copy()
            for name in ("running_mean", "running_var"):
                sub.state[name] = layer.state[name][cur].copy()
            maps[i] = {"in": cur, "out": cur}
        elif isinstance(layer, Flatten):
            hw = int(np.prod(net.in_shapes[i][1:])) if len(net.in_shapes[i]) == 3 else 1
            cur = (cur[:, None] * hw + np.arange(hw)[None, :]).ravel()
            sub = Flatten()
        elif isinstance(layer, MaxPool):
            sub = MaxPool(layer.kernel, layer.stride)
        elif isinstance(layer, ReLU):
            sub = ReLU()
        elif isinstance(layer, SoftmaxCrossEntropy):
            sub = SoftmaxCrossEntropy()
        else:  # pragma: no cover
            raise ValueError(f"cannot width-reduce layer kind {layer.kind!r}")
        sub_layers.append(sub)
    sub_net = Network(sub_layers, net.input_shape, net.boundaries, net.split_index)
    return sub_net, maps


def _param_selection(layer, name: str, m: dict[str, np.ndarray]):
    if isinstance(layer, Conv2D) and name == "w":
        return np.ix_(m["out"], m["in"])
    if isinstance(layer, Dense) and name == "w":
        return np.ix_(m["in"], m["out"])
    # biases, BN gamma/beta and running statistics all live on the out axis
    return (m["out"],)


# ---------------------------------------------------------------------------
# Weak-client training
# ---------------------------------------------------------------------------


def multi_step_forward(
    net: Network,
    client: ClientProfile,
    ds: Dataset,
    round_index: int = 0,
    chunk: int | None = 256,
    spill_dir=None,
) -> ActivationCache:
    """Record the prefix output for the client's entire shard, once per round.

    The prefix (layers below the split) runs in eval mode in fixed-size
    chunks; its parameters are used read-only and can be discarded by the
    client afterwards.  With `spill_dir` the cache round-trips through an
    .npz file instead of staying purely in memory.
    """
    if client.strategy.kind != "suffix":
        raise ValueError(f"client {client.id} is {client.strategy.kind}; only suffix clients cache")
    k = client.strategy.split_index
    xs = ds.samples[client.shard]
    labels = ds.labels[client.shard].copy()
    step = len(xs) if chunk is None else chunk
    pieces = [net.forward(xs[lo : lo + step], "eval", 0, k)[0] for lo in range(0, len(xs), step)]
    recorded = pieces[0] if len(pieces) == 1 else np.concatenate(pieces)
    spill_path = None
    if spill_dir is not None:
        spill_path = os.path.join(str(spill_dir), f"cache_r{round_index:05d}_c{client.id:04d}.npz")
        np.savez(spill_path, recorded=recorded, labels=labels)
        loaded = np.load(spill_path)
        recorded, labels = loaded["recorded"], loaded["labels"]
    return ActivationCache(client.id, round_index, recorded, labels, spill_path)


def local_train(
    client: ClientProfile,
    global_net: Network,
    source,
    tau: int,
    batch_size: int,
    opt: SGD,
    rng: np.random.Generator,
) -> ClientUpdate:
    """Run tau local SGD steps from the current global model and return the
    trained parameters of the client's trainable layers.

    `source` is the client's shard (a Dataset) for full/width clients, or
    the round's ActivationCache for suffix clients.  Batches are drawn
    shuffled without replacement, reshuffling at exhaustion; a batch larger
    than the shard degrades to the whole shard.
    """
    if tau < 1:
        raise ValueError(f"tau must be >= 1, got {tau}")
    strat = client.strategy
    width_maps = None
    if strat.kind == "suffix":
        if not isinstance(source, ActivationCache):
            raise ValueError("suffix clients train from an ActivationCache")
        xs, ys = source.recorded, source.labels
        work = global_net.clone()
        from_layer = strat.split_index
    else:
        if not isinstance(source, Dataset):
            raise ValueError("full/width clients train from their shard Dataset")
        xs, ys = source.samples, source.labels
        from_layer = 0
        if strat.kind == "width":
            work, width_maps = width_reduce(global_net, strat.keep_fraction)
        else:
            work = global_net.clone()

    sampler = BatchSampler(len(xs), batch_size, rng)
    for _ in range(tau):
        b = sampler.next()
        _, trace = work.forward(xs[b], "train", from_layer=from_layer)
        grads, _ = work.backward(trace, ys[b], from_layer=from_layer)
        opt.step(work, grads)

    params: dict[int, dict[str, np.ndarray]] = {}
    bn_stats: dict[int, dict[str, np.ndarray]] = {}
    for i in work.parametric_layers():
        if i < from_layer:
            continue
        layer = work.layers[i]
        params[i] = dict(layer.params)
        if isinstance(layer, BatchNorm) and layer.mode == "global":
            bn_stats[i] = dict(layer.state)
    return ClientUpdate(client.id, strat, params, bn_stats, width_maps)


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


def _blend(base: np.ndarray, contribs) -> np.ndarray:
    """Mean of contributions per scalar, anchored at the previous value.

    contribs is a list of (selection, values); selection None means full
    coverage.  Scalars covered by nobody keep `base` bitwise; scalars with
    one contributor take it bitwise; the rest take base + mean(delta).
    """
    raw = np.zeros_like(base)
    delta = np.zeros_like(base)
    count = np.zeros(base.shape, dtype=np.int64)
    for sel, val in contribs:
        if sel is None:
            raw += val
            delta += val - base
            count += 1
        elif isinstance(sel, np.ndarray):  # boolean mask
            raw[sel] += val[sel]
            delta[sel] += val[sel] - base[sel]
            count[sel] += 1
        else:  # index expression for a width-reduced slice
            raw[sel] += val
            delta[sel] += val - base[sel]
            count[sel] += 1
    out = base.copy()
    single = count == 1
    out[single] = raw[single]
    many = count >= 2
    out[many] = base[many] + delta[many] / count[many]
    return out


def _half_boundary(net: Network) -> int:
    internal = [b for b in net.boundaries if 0 < b < len(net.layers)]
    if not internal:
        raise ValueError("network declares no internal block boundary to halve at")
    mid = len(net.layers) / 2.0
    return min(internal, key=lambda b: (abs(b - mid), b))


def ablation_selection(net: Network, which: str) -> dict[int, dict[str, np.ndarray]]:
    """Boolean masks of the parameter subset a partial-sync scheme averages.

    first_half / second_half synchronize whole layers on either side of the
    block boundary nearest the middle of the stack; channel_wise
    synchronizes the first half of the channels at every layer.
    """
    if which in ("first_half", "second_half"):
        h = _half_boundary(net)
        want_first = which == "first_half"
        return {
            i: {n: np.ones(p.shape, dtype=bool) for n, p in net.layers[i].params.items()}
            for i in net.parametric_layers()
            if (i < h) == want_first
        }
    if which == "channel_wise":
        _, maps = width_reduce(net, 0.5)
        sel: dict[int, dict[str, np.ndarray]] = {}
        for i in net.parametric_layers():
            layer = net.layers[i]
            masks = {}
            for name, p in layer.params.items():
                mask = np.zeros(p.shape, dtype=bool)
                mask[_param_selection(layer, name, maps[i])] = True
                masks[name] = mask
            sel[i] = masks
        return sel
    raise ValueError(f"unknown ablation scheme {which!r}")


def aggregate(net: Network, updates, mode: str) -> Network:
    """Partitioned server averaging; returns a new global network.

    Every layer's parameters become the mean over exactly the clients that
    trained that layer (width-reduced clients contribute per scalar through
    their index maps; ablation modes average only the designated subset).
    Scalars with no participants keep their previous global values.
    Contributions are reduced in client-id order, so the result is invariant
    to the order of the `updates` list.
    """
    if not updates:
        raise AggregationError("no contributions to aggregate")
    updates = sorted(updates, key=lambda u: u.client_id)
    selection = None
    if mode.startswith("ablation:"):
        selection = ablation_selection(net, mode.split(":", 1)[1])
    new = net.clone()
    for idx in net.parametric_layers():
        layer = net.layers[idx]
        for name, base in layer.params.items():
            contribs = []
            for u in updates:
                if idx not in u.params or name not in u.params[idx]:
                    continue
                val = u.params[idx][name]
                if u.width_maps is not None:
                    sel = _param_selection(layer, name, u.width_maps[idx])
                    if base[sel].shape != val.shape:
                        raise AggregationError(
                            f"client {u.client_id} layer {idx} param {name}: "
                            f"slice shape {val.shape} does not fit {base.shape}"
                        )
                elif selection is not None:
                    if val.shape != base.shape:
                        raise AggregationError(
                            f"client {u.client_id} layer {idx} param {name}: "
                            f"shape {val.shape} vs {base.shape}"
                        )
                    sel = selection.get(idx, {}).get(name)
                    if sel is None:
                        continue  # outside the synchronized subset
                else:
                    if val.shape != base.shape:
                        raise AggregationError(
                            f"client {u.client_id} layer {idx} param {name}: "
                            f"shape {val.shape} vs {base.shape}"
                        )
                    sel = None
                contribs.append((sel, val))
            if contribs:
                new.layers[idx].params[name] = _blend(base, contribs)
        # running statistics follow the same participant sets (global BN only)
        if isinstance(layer, BatchNorm) and layer.mode == "global":
            for name, base in layer.state.items():
                contribs = []
                for u in updates:
                    if idx not in u.bn_stats or name not in u.bn_stats[idx]:
                        continue
                    val = u.bn_stats[idx][name]
                    if u.width_maps is not None:
                        sel = _param_selection(layer, name, u.width_maps[idx])
                    elif selection is not None:
                        sel = selection.get(idx, {}).get("gamma")
                        if sel is None:
                            continue
                    else:
                        sel = None
                    contribs.append((sel, val))
                if contribs:
                    new.layers[idx].state[name] = _blend(base, contribs)
    new.bump_version()
    return new


# ---------------------------------------------------------------------------
# Round loop
# ---------------------------------------------------------------------------


@dataclass
class RoundSettings:
    """Everything one communication round needs besides the state."""

    mode: str
    tau: int = 10
    batch_size: int = 32
    lr: float = 0.04
    lr_decay_factor: float = 10.0
    lr_decay_rounds: tuple[int, ...] = ()
    momentum: float = 0.9
    weight_decay: float = 1e-4
    sample_fraction: float = 1.0
    clients_seed: int = 0
    parallel_clients: int = 1
    cache_chunk: int | None = 256
    cache_dir: str | None = None
    svcca_every: int = 0
    svcca_k: int = 4
    svcca_samples: int = 512
    svcca_batch: int = 256
    svcca_layers: tuple[int, ...] | None = None
    eval_batch: int = 512

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.tau < 1 or self.batch_size < 1:
            raise ValueError("tau and batch_size must be >= 1")
        if not (0.0 < self.sample_fraction <= 1.0):
            raise ValueError(f"sample_fraction must be in (0, 1], got {self.sample_fraction}")

    def lr_at(self, round_index: int) -> float:
        decays = sum(1 for r in self.lr_decay_rounds if round_index >= r)
        return self.lr / (self.lr_decay_factor**decays)


@dataclass
class RunState:
    global_net: Network
    roster: list[ClientProfile]
    train_ds: Dataset
    eval_ds: Dataset
    round_rng: np.random.Generator
    round_index: int = 0
    client_nets: dict[int, Network] | None = None
    metrics: list[RoundMetrics] = field(default_factory=list)


def init_run_state(net: Network, roster, train_ds: Dataset, eval_ds: Dataset, rounds_seed: int, mode: str) -> RunState:
    ids = [c.id for c in roster]
    if ids != list(range(len(roster))):
        raise ValueError("roster ids must be 0..m-1 in order")
    client_nets = {c.id: net.clone() for c in roster} if mode in PERSISTENT_MODES else None
    return RunState(
        global_net=net.clone(),
        roster=list(roster),
        train_ds=train_ds,
        eval_ds=eval_ds,
        round_rng=np.random.Generator(np.random.PCG64(np.random.SeedSequence([rounds_seed]))),
        client_nets=client_nets,
    )


def evaluate(net: Network, ds: Dataset, batch: int = 512):
    """Eval-mode loss and accuracy over a dataset, in fixed-size chunks."""
    loss_sum = 0.0
    correct = 0
    for lo in range(0, len(ds), batch):
        x = ds.samples[lo : lo + batch]
        y = ds.labels[lo : lo + batch]
        logits, _ = net.forward(x, "eval")
        loss, _ = SoftmaxCrossEntropy.loss_and_grad(logits, y)
        loss_sum += loss * len(y)
        correct += int((logits.argmax(axis=1) == y).sum())
    return loss_sum / len(ds), correct / len(ds)


def _apply_update(net: Network, update: ClientUpdate) -> None:
    for idx, ps in update.params.items():
        net.set_layer_params(idx, ps)
    for idx, st in update.bn_stats.items():
        for name, arr in st.items():
            net.layers[idx].state[name] = arr.copy()


def _client_round(state: RunState, settings: RoundSettings, cid: int, lr: float) -> ClientUpdate:
    client = state.roster[cid]
    if settings.mode != "embracing" and client.strategy.kind == "suffix":
        raise ValueError(f"suffix clients require mode 'embracing', not {settings.mode!r}")
    if settings.mode in ("fedavg",) + tuple(PERSISTENT_MODES) and client.strategy.kind != "full":
        client = replace(client, strategy=Strategy.full())
    base = state.client_nets[cid] if state.client_nets is not None else state.global_net
    rng = client_stream(settings.clients_seed, client.seed_stream, state.round_index)
    opt = SGD(lr, settings.momentum, settings.weight_decay)
    if client.strategy.kind == "suffix":
        cache = multi_step_forward(
            base, client, state.train_ds, state.round_index, settings.cache_chunk, settings.cache_dir
        )
        return local_train(client, base, cache, settings.tau, settings.batch_size, opt, rng)
    shard_ds = state.train_ds.subset(client.shard)
    return local_train(client, base, shard_ds, settings.tau, settings.batch_size, opt, rng)


def run_round(state: RunState, settings: RoundSettings) -> RoundMetrics:
    """One communication round: sample, train locally, aggregate, evaluate.

    Mutates `state` in place and returns the round's metrics.  Client
    sampling draws from the dedicated round stream, so it is unaffected by
    tau, batch sizes, or anything the clients do.
    """
    t = state.round_index
    m = len(state.roster)
    n_sampled = math.ceil(settings.sample_fraction * m)
    sampled = np.sort(state.round_rng.choice(m, size=n_sampled, replace=False))
    lr = settings.lr_at(t)

    if settings.parallel_clients > 1:
        with ThreadPoolExecutor(max_workers=settings.parallel_clients) as pool:
            updates = list(pool.map(lambda cid: _client_round(state, settings, int(cid), lr), sampled))
    else:
        updates = [_client_round(state, settings, int(cid), lr) for cid in sampled]

    pre_global = state.global_net
    if settings.mode == "independent":
        for u in updates:
            _apply_update(state.client_nets[u.client_id], u)
    elif settings.mode.startswith("ablation:"):
        new_global = aggregate(pre_global, updates, settings.mode)
        selection = ablation_selection(pre_global, settings.mode.split(":", 1)[1])
        for u in updates:
            local = state.client_nets[u.client_id]
            _apply_update(local, u)
            for idx, masks in selection.items():
                for name, mask in masks.items():
                    merged = local.layers[idx].params[name].copy()
                    merged[mask] = new_global.layers[idx].params[name][mask]
                    local.layers[idx].params[name] = merged
            local.bump_version()
        state.global_net = new_global
    else:
        state.global_net = aggregate(pre_global, updates, settings.mode)

    per_layer_svcca = None
    if settings.svcca_every > 0 and t % settings.svcca_every == 0 and len(updates) >= 2:
        if state.client_nets is not None:
            views = [state.client_nets[u.client_id] for u in updates]
        else:
            views = []
            for u in updates:
                view = pre_global.clone()
                _apply_update(view, u)
                views.append(view)
        eval_x = state.eval_ds.samples[: settings.svcca_samples]
        per_layer_svcca = svcca_layer_scores(
            views, eval_x, settings.svcca_k, settings.svcca_batch, settings.svcca_layers
        )

    loss, acc = evaluate(state.global_net, state.eval_ds, settings.eval_batch)
    metrics = RoundMetrics(t, loss, acc, per_layer_svcca, [int(c) for c in sampled])
    state.metrics.append(metrics)
    state.round_index += 1
    return metrics


def svcca_layer_scores(nets, eval_x: np.ndarray, k: int = 4, batch: int = 256, only=None) -> dict[str, float]:
    """Pairwise-max SVCCA per feature layer across client models.

    Activations are collected in small evaluation batches and per-batch
    scores averaged before taking the max over client pairs.  `only`
    restricts the measurement to the given layer indices."""
    per_client: list[dict[str, list[np.ndarray]]] = []
    for net in nets:
        batches: dict[str, list[np.ndarray]] = {}
        for lo in range(0, len(eval_x), batch):
            for mat in analysis.collect_activation_matrices(net, eval_x[lo : lo + batch], chunk=batch, only=only):
                batches.setdefault(mat.layer, []).append(mat.matrix)
        per_client.append(batches)
    layers = per_client[0].keys()
    return {
        layer: analysis.pairwise_max_batched_svcca([pc[layer] for pc in per_client], k)
        for layer in layers
    }


def rounds_to_target(metrics, target_acc: float):
    """First round index whose accuracy reaches the target, or None."""
    for rec in metrics:
        if rec.global_accuracy >= target_acc:
            return rec.round
    return None
