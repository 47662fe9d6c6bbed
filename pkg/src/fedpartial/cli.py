"""Experiment orchestration: config parsing, the run loop, and reports.

A run is described by one JSON config file.  Every source of randomness is
keyed by the four named seeds (data, init, rounds, clients); repeated runs
of the same config produce byte-identical artifact files, with any number
of parallel client workers.

Artifacts written per run: metrics.csv (round, loss, accuracy, sampled
clients), summary.json, config_echo.json, optionally svcca.csv and
checkpoint files.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys

import numpy as np

from . import fedsim, nn
from .data import dirichlet_partition, load_idx, synth_dataset, synth_image_dataset
from .fedsim import MODES, PERSISTENT_MODES, ClientProfile, RoundSettings, Strategy

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Config validation failure; the message names the offending field."""


def _need(d: dict, key: str, where: str):
    if key not in d:
        raise ConfigError(f"{where}.{key}: required field missing" if where else f"{key}: required field missing")
    return d[key]


def _as_int(val, field: str, minimum=None) -> int:
    if isinstance(val, bool) or not isinstance(val, int):
        raise ConfigError(f"{field}: expected an integer, got {val!r}")
    if minimum is not None and val < minimum:
        raise ConfigError(f"{field}: must be >= {minimum}, got {val}")
    return val


def _as_real(val, field: str, minimum=None, maximum=None, exclusive_min=False) -> float:
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(f"{field}: expected a number, got {val!r}")
    v = float(val)
    if minimum is not None and (v <= minimum if exclusive_min else v < minimum):
        op = ">" if exclusive_min else ">="
        raise ConfigError(f"{field}: must be {op} {minimum}, got {val}")
    if maximum is not None and v > maximum:
        raise ConfigError(f"{field}: must be <= {maximum}, got {val}")
    return v


_DEFAULTS = {
    "tau": 10,
    "batch_size": 32,
    "momentum": 0.9,
    "weight_decay": 1e-4,
    "sample_fraction": 1.0,
    "bn_mode": "global",
}


class ExperimentConfig:
    """Validated, fully-resolved run description.

    `resolved` is the config dict with all defaults filled in; echoing it
    and re-running reproduces the run exactly.
    """

    def __init__(self, raw: dict):
        if not isinstance(raw, dict):
            raise ConfigError("config: expected a JSON object")
        cfg = dict(raw)

        self.mode = _need(cfg, "mode", "")
        if self.mode not in MODES:
            raise ConfigError(f"mode: must be one of {MODES}, got {self.mode!r}")
        self.rounds = _as_int(_need(cfg, "rounds", ""), "rounds", 1)
        self.tau = _as_int(cfg.setdefault("tau", _DEFAULTS["tau"]), "tau", 1)
        self.batch_size = _as_int(cfg.setdefault("batch_size", _DEFAULTS["batch_size"]), "batch_size", 1)
        self.momentum = _as_real(cfg.setdefault("momentum", _DEFAULTS["momentum"]), "momentum", 0.0)
        if self.momentum >= 1.0:
            raise ConfigError(f"momentum: must be < 1, got {self.momentum}")
        self.weight_decay = _as_real(cfg.setdefault("weight_decay", _DEFAULTS["weight_decay"]), "weight_decay", 0.0)
        self.sample_fraction = _as_real(
            cfg.setdefault("sample_fraction", _DEFAULTS["sample_fraction"]),
            "sample_fraction", 0.0, 1.0, exclusive_min=True,
        )
        self.bn_mode = cfg.setdefault("bn_mode", _DEFAULTS["bn_mode"])
        if self.bn_mode not in ("static", "global"):
            raise ConfigError(f"bn_mode: must be 'static' or 'global', got {self.bn_mode!r}")

        lr = _need(cfg, "lr", "")
        if isinstance(lr, (int, float)) and not isinstance(lr, bool):
            lr = {"initial": float(lr)}
            cfg["lr"] = lr
        self.lr_initial = _as_real(_need(lr, "initial", "lr"), "lr.initial", 0.0, exclusive_min=True)
        self.lr_decay_factor = _as_real(lr.setdefault("decay_factor", 10.0), "lr.decay_factor", 0.0, exclusive_min=True)
        self.lr_decay_rounds = tuple(
            _as_int(r, "lr.decay_rounds[]", 0) for r in lr.setdefault("decay_rounds", [])
        )

        seeds = _need(cfg, "seeds", "")
        self.seeds = {
            name: _as_int(_need(seeds, name, "seeds"), f"seeds.{name}", 0)
            for name in ("data", "init", "rounds", "clients")
        }

        part = cfg.setdefault("partition", {"alpha": 0.1})
        self.alpha = _as_real(part.setdefault("alpha", 0.1), "partition.alpha", 0.0, exclusive_min=True)

        self.dataset = _need(cfg, "dataset", "")
        self.model = _need(cfg, "model", "")
        self.roster = _need(cfg, "roster", "")

        svcca = cfg.setdefault("svcca", {})
        self.svcca_enabled = bool(svcca.setdefault("enabled", False))
        self.svcca_k = _as_int(svcca.setdefault("k", 4), "svcca.k", 1)
        self.svcca_every = _as_int(svcca.setdefault("every_n_rounds", 10), "svcca.every_n_rounds", 1)
        self.svcca_samples = _as_int(svcca.setdefault("samples", 512), "svcca.samples", 2)
        self.svcca_batch = _as_int(svcca.setdefault("batch", 256), "svcca.batch", 2)

        ckpt = cfg.setdefault("checkpoint", {})
        self.ckpt_every = _as_int(ckpt.setdefault("every_n_rounds", 0), "checkpoint.every_n_rounds", 0)
        self.ckpt_dir = ckpt.setdefault("dir", "checkpoints")

        self.targets = [
            _as_real(t, "targets[]", 0.0, 1.0) for t in cfg.setdefault("targets", [])
        ]
        self.l_max = None
        if cfg.get("l_max") is not None:
            self.l_max = _as_real(cfg["l_max"], "l_max", 0.0, exclusive_min=True)
        cfg.setdefault("l_max", None)
        self.cache_dir = cfg.setdefault("cache_dir", None)
        self.eval_batch = _as_int(cfg.setdefault("eval_batch", 512), "eval_batch", 1)

        self.resolved = cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config: invalid JSON ({exc})") from exc
        return cls(raw)


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def build_dataset(spec: dict, data_seed: int):
    """Returns (train, eval) datasets from a dataset spec dict."""
    kind = _need(spec, "type", "dataset")
    if kind == "blobs":
        n = _as_int(_need(spec, "n_per_class", "dataset"), "dataset.n_per_class", 1)
        n_eval = _as_int(spec.get("eval_per_class", max(1, n // 5)), "dataset.eval_per_class", 1)
        ds = synth_dataset(
            _as_int(_need(spec, "num_classes", "dataset"), "dataset.num_classes", 2),
            n + n_eval,
            _as_int(_need(spec, "dim", "dataset"), "dataset.dim", 1),
            data_seed,
            spread=_as_real(spec.get("spread", 3.0), "dataset.spread", 0.0, exclusive_min=True),
        )
        return ds.take_per_class(n)
    if kind == "images":
        n = _as_int(_need(spec, "n_per_class", "dataset"), "dataset.n_per_class", 1)
        n_eval = _as_int(spec.get("eval_per_class", max(1, n // 5)), "dataset.eval_per_class", 1)
        ds = synth_image_dataset(
            _as_int(_need(spec, "num_classes", "dataset"), "dataset.num_classes", 2),
            n + n_eval,
            data_seed,
            size=_as_int(spec.get("size", 28), "dataset.size", 4),
            noise=_as_real(spec.get("noise", 0.25), "dataset.noise", 0.0),
            max_shift=_as_int(spec.get("max_shift", 3), "dataset.max_shift", 0),
        )
        return ds.take_per_class(n)
    if kind == "idx":
        train = load_idx(_need(spec, "images", "dataset"), _need(spec, "labels", "dataset"))
        if spec.get("limit"):
            train = train.subset(np.arange(_as_int(spec["limit"], "dataset.limit", 1)))
        if spec.get("eval_images"):
            evald = load_idx(spec["eval_images"], _need(spec, "eval_labels", "dataset"))
        else:
            n_eval = _as_int(spec.get("eval_count", max(1, len(train) // 5)), "dataset.eval_count", 1)
            evald = train.subset(np.arange(len(train) - n_eval, len(train)))
            train = train.subset(np.arange(len(train) - n_eval))
        return train, evald
    raise ConfigError(f"dataset.type: unknown type {kind!r}")


def build_network(model_spec: dict, input_shape, bn_mode: str, init_seed: int) -> nn.Network:
    """Instantiate the layer stack; input dims are inferred by propagation."""
    layer_specs = _need(model_spec, "layers", "model")
    if not isinstance(layer_specs, list) or not layer_specs:
        raise ConfigError("model.layers: expected a non-empty list")
    shape = tuple(input_shape)
    layers = []
    labels = []
    prev_label = "b0"
    for i, d in enumerate(layer_specs):
        where = f"model.layers[{i}]"
        kind = _need(d, "kind", where)
        label = d.get("block", prev_label)
        prev_label = label
        if kind == "conv2d":
            if len(shape) != 3:
                raise ConfigError(f"{where}: conv2d needs (C,H,W) input, have {shape}")
            layer = nn.Conv2D(
                shape[0],
                _as_int(_need(d, "out_ch", where), f"{where}.out_ch", 1),
                _as_int(_need(d, "kernel", where), f"{where}.kernel", 1),
                _as_int(d.get("stride", 1), f"{where}.stride", 1),
                _as_int(d.get("pad", 0), f"{where}.pad", 0),
            )
        elif kind == "dense":
            if len(shape) != 1:
                raise ConfigError(f"{where}: dense needs a flat input, have {shape}")
            layer = nn.Dense(shape[0], _as_int(_need(d, "out", where), f"{where}.out", 1))
        elif kind == "batchnorm":
            layer = nn.BatchNorm(shape[0], bn_mode)
        elif kind == "relu":
            layer = nn.ReLU()
        elif kind == "maxpool":
            layer = nn.MaxPool(
                _as_int(_need(d, "kernel", where), f"{where}.kernel", 1),
                _as_int(d["stride"], f"{where}.stride", 1) if d.get("stride") else None,
            )
        elif kind == "flatten":
            layer = nn.Flatten()
        elif kind == "softmax_ce":
            layer = nn.SoftmaxCrossEntropy()
        else:
            raise ConfigError(f"{where}.kind: unknown layer kind {kind!r}")
        try:
            shape = layer.out_shape(shape)
        except Exception as exc:
            raise ConfigError(f"{where}: {exc}") from exc
        layers.append(layer)
        labels.append(label)

    boundaries = [i for i in range(len(layers)) if i == 0 or labels[i] != labels[i - 1]]
    net = nn.Network(layers, input_shape, boundaries)
    net.init_params(np.random.Generator(np.random.PCG64(np.random.SeedSequence([init_seed]))))
    return net


def _tier_spec(roster_spec: dict, tier: str):
    raw = roster_spec.get(tier, 0)
    if isinstance(raw, int) and not isinstance(raw, bool):
        raw = {"count": raw}
    if not isinstance(raw, dict):
        raise ConfigError(f"roster.{tier}: expected a count or an object")
    count = _as_int(raw.get("count", 0), f"roster.{tier}.count", 0)
    return count, raw


def build_roster(roster_spec: dict, mode: str, net: nn.Network, plan) -> list[ClientProfile]:
    """Clients ordered strong, moderate, weak; ids double as stream ids."""
    profiles = []
    cid = 0
    for tier in ("strong", "moderate", "weak"):
        count, raw = _tier_spec(roster_spec, tier)
        if count == 0:
            continue
        if tier == "strong" or mode in ("fedavg",) + tuple(PERSISTENT_MODES):
            strat = Strategy.full()
        elif mode == "embracing":
            k = _as_int(_need(raw, "split_index", f"roster.{tier}"), f"roster.{tier}.split_index", 1)
            if not net.is_boundary(k):
                raise ConfigError(
                    f"roster.{tier}.split_index: {k} is not a block boundary of {net.boundaries}"
                )
            strat = Strategy.suffix(k)
        elif mode == "width_reduction":
            f = _as_real(
                _need(raw, "keep_fraction", f"roster.{tier}"),
                f"roster.{tier}.keep_fraction", 0.0, 1.0, exclusive_min=True,
            )
            strat = Strategy.width(f)
        else:
            raise ConfigError(f"roster.{tier}: tier not supported in mode {mode!r}")
        for _ in range(count):
            profiles.append(ClientProfile(cid, tier, strat, plan.assignments[cid], cid))
            cid += 1
    if not profiles:
        raise ConfigError("roster: no clients declared")
    return profiles


def _roster_size(roster_spec: dict) -> int:
    return sum(_tier_spec(roster_spec, t)[0] for t in ("strong", "moderate", "weak"))


# ---------------------------------------------------------------------------
# Run command
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def run_experiment(cfg: ExperimentConfig, out_dir, parallel_clients: int = 1) -> dict:
    """Execute a full run and write its artifact files; returns the summary."""
    os.makedirs(out_dir, exist_ok=True)
    train_ds, eval_ds = build_dataset(cfg.dataset, cfg.seeds["data"])
    m = _roster_size(cfg.roster)
    if m < 1:
        raise ConfigError("roster: needs at least one client")
    plan = dirichlet_partition(train_ds, m, cfg.alpha, cfg.seeds["data"] + 1)
    net = build_network(cfg.model, train_ds.sample_shape, cfg.bn_mode, cfg.seeds["init"])
    roster = build_roster(cfg.roster, cfg.mode, net, plan)
    splits = [c.strategy.split_index for c in roster if c.strategy.kind == "suffix"]
    if splits:
        net.split_index = min(splits)

    if cfg.l_max is not None:
        ok, bound = nn.check_lr_constraint(cfg.lr_initial, cfg.tau, cfg.l_max)
        if not ok:
            log.warning(
                "lr %.6g exceeds the smoothness bound %.6g (tau=%d, l_max=%g)",
                cfg.lr_initial, bound, cfg.tau, cfg.l_max,
            )

    settings = RoundSettings(
        mode=cfg.mode,
        tau=cfg.tau,
        batch_size=cfg.batch_size,
        lr=cfg.lr_initial,
        lr_decay_factor=cfg.lr_decay_factor,
        lr_decay_rounds=cfg.lr_decay_rounds,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
        sample_fraction=cfg.sample_fraction,
        clients_seed=cfg.seeds["clients"],
        parallel_clients=parallel_clients,
        cache_dir=cfg.cache_dir,
        svcca_every=cfg.svcca_every if cfg.svcca_enabled else 0,
        svcca_k=cfg.svcca_k,
        svcca_samples=cfg.svcca_samples,
        svcca_batch=cfg.svcca_batch,
        eval_batch=cfg.eval_batch,
    )
    state = fedsim.init_run_state(net, roster, train_ds, eval_ds, cfg.seeds["rounds"], cfg.mode)

    ckpt_dir = os.path.join(out_dir, cfg.ckpt_dir)
    if cfg.ckpt_every:
        os.makedirs(ckpt_dir, exist_ok=True)
    svcca_rows = []
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="\n") as fh:
        fh.write("round,loss,accuracy,sampled_clients\n")
        for _ in range(cfg.rounds):
            rec = fedsim.run_round(state, settings)
            ids = ";".join(str(c) for c in rec.sampled_clients)
            fh.write(f"{rec.round},{_fmt(rec.global_loss)},{_fmt(rec.global_accuracy)},{ids}\n")
            if rec.per_layer_svcca:
                for layer in sorted(rec.per_layer_svcca):
                    svcca_rows.append((rec.round, layer, rec.per_layer_svcca[layer]))
            if cfg.ckpt_every and rec.round % cfg.ckpt_every == 0:
                _write_checkpoints(state, ckpt_dir, rec.round)

    if svcca_rows:
        with open(os.path.join(out_dir, "svcca.csv"), "w", newline="\n") as fh:
            fh.write("round,layer,max_svcca\n")
            for r, layer, val in svcca_rows:
                fh.write(f"{r},{layer},{_fmt(val)}\n")

    echo_path = os.path.join(out_dir, "config_echo.json")
    with open(echo_path, "w", newline="\n") as fh:
        json.dump(cfg.resolved, fh, indent=2, sort_keys=True)
        fh.write("\n")

    summary = {
        "rounds": cfg.rounds,
        "final_accuracy": state.metrics[-1].global_accuracy,
        "final_loss": state.metrics[-1].global_loss,
        "rounds_to_target": {
            _fmt(t): fedsim.rounds_to_target(state.metrics, t) for t in cfg.targets
        },
        "seeds": cfg.seeds,
        "mode": cfg.mode,
        "clients": len(roster),
        "config_echo": "config_echo.json",
    }
    with open(os.path.join(out_dir, "summary.json"), "w", newline="\n") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def _write_checkpoints(state: fedsim.RunState, ckpt_dir: str, round_index: int) -> None:
    if state.client_nets is not None:
        for cid, cnet in sorted(state.client_nets.items()):
            nn.save_checkpoint(cnet, os.path.join(ckpt_dir, f"round_{round_index:05d}__client_{cid:04d}.ckpt"))
    else:
        nn.save_checkpoint(state.global_net, os.path.join(ckpt_dir, f"round_{round_index:05d}__global.ckpt"))


# ---------------------------------------------------------------------------
# SVCCA report command
# ---------------------------------------------------------------------------

_CKPT_RE = re.compile(r"round_(\d+)__client_(\d+)\.ckpt$")


def run_svcca_report(ckpt_dir, eval_spec_path, k: int, out_csv, samples: int = 512, batch: int = 256) -> int:
    """Per-layer pairwise-max SVCCA time series over checkpointed rounds.

    Needs >= 2 client checkpoints per round tag; rows are
    (round, layer, max_svcca).  Returns the number of rows written.
    """
    with open(eval_spec_path) as fh:
        spec = json.load(fh)
    data_seed = _as_int(spec.get("seed", 0), "eval.seed", 0)
    train, evald = build_dataset(spec, data_seed)
    eval_x = evald.samples[:samples]

    by_round: dict[int, list[str]] = {}
    for name in sorted(os.listdir(ckpt_dir)):
        match = _CKPT_RE.search(name)
        if match:
            by_round.setdefault(int(match.group(1)), []).append(os.path.join(ckpt_dir, name))
    if not by_round:
        raise ValueError(f"{ckpt_dir}: no per-client checkpoints (round_*__client_*.ckpt)")

    rows = []
    for r in sorted(by_round):
        paths = by_round[r]
        if len(paths) < 2:
            raise ValueError(f"round {r}: need >= 2 client checkpoints, found {len(paths)}")
        nets = []
        for p in paths:
            try:
                nets.append(nn.load_checkpoint(p))
            except Exception as exc:
                raise ValueError(f"unreadable checkpoint {p}: {exc}") from exc
        scores = fedsim.svcca_layer_scores(nets, eval_x, k, batch)
        for layer in sorted(scores):
            rows.append((r, layer, scores[layer]))

    with open(out_csv, "w", newline="\n") as fh:
        fh.write("round,layer,max_svcca\n")
        for r, layer, val in rows:
            fh.write(f"{r},{layer},{_fmt(val)}\n")
    return len(rows)


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _apply_seed_overrides(cfg_dict: dict, overrides) -> dict:
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--seed-override: expected key=value, got {item!r}")
        key, _, value = item.partition("=")
        if key not in ("data", "init", "rounds", "clients"):
            raise ConfigError(f"--seed-override: unknown seed {key!r}")
        try:
            cfg_dict.setdefault("seeds", {})[key] = int(value)
        except ValueError as exc:
            raise ConfigError(f"--seed-override: {value!r} is not an integer") from exc
    return cfg_dict


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fedpartial", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one experiment config")
    p_run.add_argument("config", help="path to the JSON config")
    p_run.add_argument("--out", default="out", help="artifact directory")
    p_run.add_argument("--parallel-clients", type=int, default=1, metavar="N")
    p_run.add_argument("--seed-override", action="append", metavar="KEY=VALUE")

    p_sv = sub.add_parser("svcca", help="pairwise-max SVCCA report over checkpoints")
    p_sv.add_argument("ckpt_dir", help="directory of round_*__client_*.ckpt files")
    p_sv.add_argument("--eval", required=True, help="dataset spec JSON for evaluation data")
    p_sv.add_argument("--k", type=int, default=4)
    p_sv.add_argument("--out", default="svcca.csv")
    p_sv.add_argument("--samples", type=int, default=512)
    p_sv.add_argument("--batch", type=int, default=256)

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            with open(args.config) as fh:
                raw = json.load(fh)
            cfg = ExperimentConfig(_apply_seed_overrides(raw, args.seed_override))
            if args.parallel_clients < 1:
                raise ConfigError("--parallel-clients: must be >= 1")
            summary = run_experiment(cfg, args.out, args.parallel_clients)
            print(json.dumps(summary, indent=2, sort_keys=True))
        else:
            n = run_svcca_report(args.ckpt_dir, args.eval, args.k, args.out, args.samples, args.batch)
            print(f"wrote {n} rows to {args.out}")
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
