import numpy as np
import numpy.testing as npt
import pytest

from fedpartial import data, fedsim, nn
from fedpartial.fedsim import (
    AggregationError,
    BatchSampler,
    ClientProfile,
    ClientUpdate,
    RoundSettings,
    Strategy,
    aggregate,
    aggregation_weights,
    client_stream,
    local_train,
    multi_step_forward,
    rounds_to_target,
    run_round,
    width_reduce,
)


def conv_net(seed=0, bn_mode="global", channels=(4, 6)):
    net = nn.Network.from_blocks(
        [
            ("stem", [nn.Conv2D(1, channels[0], 3, 1, 1), nn.MaxPool(2), nn.BatchNorm(channels[0], bn_mode), nn.ReLU()]),
            ("mid", [nn.Conv2D(channels[0], channels[1], 3, 1, 1), nn.BatchNorm(channels[1], bn_mode), nn.ReLU()]),
            ("head", [nn.Flatten(), nn.Dense(channels[1] * 16, 5), nn.SoftmaxCrossEntropy()]),
        ],
        input_shape=(1, 8, 8),
    )
    net.init_params(np.random.Generator(np.random.PCG64(seed)))
    return net


def tiny_dense_net(values=None):
    net = nn.Network(
        [nn.Dense(1, 1), nn.Dense(1, 1), nn.SoftmaxCrossEntropy()], (1,), boundaries=[0, 1]
    )
    if values:
        for i, v in values.items():
            net.set_layer_params(i, {"w": np.array([[float(v)]])})
    return net


def full_update(cid, vals, strategy=None):
    return ClientUpdate(
        cid,
        strategy or Strategy.full(),
        {i: {"w": np.array([[float(v)]]), "b": np.zeros(1)} for i, v in vals.items()},
        {},
    )


@pytest.fixture(scope="module")
def image_ds():
    return data.synth_image_dataset(5, 40, seed=21, size=8, noise=0.2, max_shift=1)


class TestStrategy:
    def test_full_equivalents_enforced(self):
        with pytest.raises(ValueError):
            Strategy("full", split_index=2)
        with pytest.raises(ValueError):
            Strategy.suffix(0)
        with pytest.raises(ValueError):
            Strategy.width(0.0)

    def test_first_trained_layer(self):
        assert Strategy.full().first_trained_layer() == 0
        assert Strategy.suffix(4).first_trained_layer() == 4


class TestBatchSampler:
    def test_without_replacement_until_exhaustion(self):
        rng = np.random.default_rng(0)
        s = BatchSampler(10, 5, rng)
        first = np.concatenate([s.next(), s.next()])
        assert sorted(first.tolist()) == list(range(10))

    def test_reshuffles_after_epoch(self):
        rng = np.random.default_rng(0)
        s = BatchSampler(6, 3, rng)
        epoch1 = [s.next().tolist(), s.next().tolist()]
        epoch2 = [s.next().tolist(), s.next().tolist()]
        assert sorted(sum(epoch1, [])) == sorted(sum(epoch2, [])) == list(range(6))
        assert epoch1 != epoch2  # reshuffled order

    def test_batch_larger_than_shard_degrades_to_whole_shard(self):
        s = BatchSampler(4, 32, np.random.default_rng(0))
        assert sorted(s.next().tolist()) == list(range(4))
        assert sorted(s.next().tolist()) == list(range(4))


class TestMultiStepForward:
    def test_cache_matches_full_forward(self, image_ds):
        net = conv_net(1)
        shard = np.arange(30)
        client = ClientProfile(0, "weak", Strategy.suffix(4), shard, 0)
        cache = multi_step_forward(net, client, image_ds, 0, chunk=8)
        assert len(cache.recorded) == len(shard) == len(cache.labels)
        full_logits, _ = net.forward(image_ds.samples[shard], "eval")
        suffix_logits, _ = net.forward(cache.recorded, "eval", from_layer=4)
        assert np.abs(full_logits - suffix_logits).max() < 1e-12

    def test_full_clients_rejected(self, image_ds):
        client = ClientProfile(0, "strong", Strategy.full(), np.arange(4), 0)
        with pytest.raises(ValueError):
            multi_step_forward(conv_net(), client, image_ds, 0)

    def test_split_beyond_depth_rejected(self, image_ds):
        client = ClientProfile(0, "weak", Strategy.suffix(99), np.arange(4), 0)
        with pytest.raises(Exception):
            multi_step_forward(conv_net(), client, image_ds, 0)

    def test_spill_to_disk(self, image_ds, tmp_path):
        net = conv_net(1)
        client = ClientProfile(3, "weak", Strategy.suffix(4), np.arange(10), 3)
        mem = multi_step_forward(net, client, image_ds, 2, chunk=4)
        spilled = multi_step_forward(net, client, image_ds, 2, chunk=4, spill_dir=tmp_path)
        assert spilled.spill_path is not None
        assert (tmp_path / "cache_r00002_c0003.npz").exists()
        npt.assert_array_equal(mem.recorded, spilled.recorded)
        npt.assert_array_equal(mem.labels, spilled.labels)


class TestLocalTrain:
    def test_zero_lr_keeps_global_params(self, image_ds):
        net = conv_net(2)
        client = ClientProfile(0, "strong", Strategy.full(), np.arange(16), 0)
        upd = local_train(
            client, net, image_ds.subset(client.shard), tau=1, batch_size=8,
            opt=nn.SGD(lr=1e-300), rng=client_stream(0, 0, 0),
        )
        for i, ps in upd.params.items():
            for name, arr in ps.items():
                npt.assert_allclose(arr, net.layers[i].params[name], atol=1e-290)

    def test_single_step_matches_manual_sgd(self, image_ds):
        net = conv_net(3)
        shard = np.arange(12)
        client = ClientProfile(0, "strong", Strategy.full(), shard, 0)
        rng_a = client_stream(9, 0, 0)
        rng_b = client_stream(9, 0, 0)
        upd = local_train(client, net, image_ds.subset(shard), tau=1, batch_size=12,
                          opt=nn.SGD(0.2), rng=rng_a)
        # oracle: one explicit step on a clone with the same batch order
        work = net.clone()
        batch = BatchSampler(12, 12, rng_b).next()
        _, tr = work.forward(image_ds.samples[shard][batch], "train")
        grads, _ = work.backward(tr, image_ds.labels[shard][batch])
        nn.SGD(0.2).step(work, grads)
        for i in upd.params:
            for name in upd.params[i]:
                assert upd.params[i][name].tobytes() == work.layers[i].params[name].tobytes()

    def test_suffix_gradients_bitwise_equal_full_suffix(self, image_ds):
        # with a forced batch order (tau=1, batch = whole shard) and a cache
        # equal to the true prefix outputs, suffix training equals a full
        # client's suffix update bit for bit; the prefix must be
        # normalization-free so train-mode and eval-mode outputs coincide,
        # and tau must be 1 because the full client's prefix moves after the
        # first step while the weak client keeps reusing the round cache
        net = nn.Network.from_blocks(
            [
                ("stem", [nn.Conv2D(1, 4, 3, 1, 1), nn.MaxPool(2), nn.ReLU()]),
                ("head", [nn.Flatten(), nn.Dense(64, 5), nn.SoftmaxCrossEntropy()]),
            ],
            input_shape=(1, 8, 8),
        )
        net.init_params(np.random.Generator(np.random.PCG64(4)))
        shard = np.arange(10)
        weak = ClientProfile(0, "weak", Strategy.suffix(3), shard, 0)
        cache = multi_step_forward(net, weak, image_ds, 0, chunk=None)
        upd_weak = local_train(weak, net, cache, tau=1, batch_size=10,
                               opt=nn.SGD(0.1, 0.9), rng=client_stream(5, 0, 0))
        strong = ClientProfile(1, "strong", Strategy.full(), shard, 0)
        upd_strong = local_train(strong, net, image_ds.subset(shard), tau=1, batch_size=10,
                                 opt=nn.SGD(0.1, 0.9), rng=client_stream(5, 0, 0))
        assert set(upd_weak.params) == {i for i in upd_strong.params if i >= 3}
        for i in upd_weak.params:
            for name in upd_weak.params[i]:
                assert upd_weak.params[i][name].tobytes() == upd_strong.params[i][name].tobytes()

    def test_suffix_needs_cache(self, image_ds):
        client = ClientProfile(0, "weak", Strategy.suffix(4), np.arange(8), 0)
        with pytest.raises(ValueError):
            local_train(client, conv_net(), image_ds.subset(client.shard), tau=1,
                        batch_size=4, opt=nn.SGD(0.1), rng=client_stream(0, 0, 0))

    def test_tau_zero_invalid(self, image_ds):
        client = ClientProfile(0, "strong", Strategy.full(), np.arange(8), 0)
        with pytest.raises(ValueError):
            local_train(client, conv_net(), image_ds.subset(client.shard), tau=0,
                        batch_size=4, opt=nn.SGD(0.1), rng=client_stream(0, 0, 0))


class TestWidthReduce:
    def test_keep_one_is_identity(self):
        net = conv_net(5)
        sub, maps = width_reduce(net, 1.0)
        for i in net.parametric_layers():
            for name in net.layers[i].params:
                assert (sub.layers[i].params[name] == net.layers[i].params[name]).all()
            npt.assert_array_equal(maps[i]["out"], np.arange(len(maps[i]["out"])))

    def test_dense_slicing_definition(self):
        # hidden Dense(4,4) at keep 0.5 becomes Dense(2,2): top-left block
        net = nn.Network(
            [nn.Dense(8, 4), nn.ReLU(), nn.Dense(4, 4), nn.ReLU(), nn.Dense(4, 3), nn.SoftmaxCrossEntropy()],
            (8,),
        )
        net.init_params(np.random.default_rng(0))
        sub, maps = width_reduce(net, 0.5)
        mid = sub.layers[2]
        assert (mid.in_dim, mid.out_dim) == (2, 2)
        npt.assert_array_equal(mid.params["w"], net.layers[2].params["w"][:2, :2])
        # classifier output dimension never reduced
        assert sub.layers[4].out_dim == 3

    def test_first_layer_input_channels_not_reduced(self):
        sub, _ = width_reduce(conv_net(5), 0.5)
        assert sub.layers[0].in_ch == 1

    def test_shape_contract_forward(self, image_ds):
        sub, _ = width_reduce(conv_net(5), 0.5)
        logits, _ = sub.forward(image_ds.samples[:6], "eval")
        assert logits.shape == (6, 5)

    def test_flatten_map_selects_kept_channels(self):
        net = conv_net(5, channels=(4, 6))
        sub, maps = width_reduce(net, 0.5)
        # dense input rows = all spatial positions of the mid conv's kept
        # channels (layer 4 -> flatten -> dense at layer 8, 4x4 feature maps)
        hw = 16
        expect = (maps[4]["out"][:, None] * hw + np.arange(hw)[None, :]).ravel()
        npt.assert_array_equal(maps[8]["in"], expect)

    def test_invalid_fraction(self):
        with pytest.raises(ValueError):
            width_reduce(conv_net(), 0.0)


class TestAggregate:
    def test_single_contribution_bitwise(self):
        net = tiny_dense_net({0: 0.25, 1: -0.5})
        upd = full_update(7, {0: 0.123456789, 1: 2.0})
        out = aggregate(net, [upd], "embracing")
        assert out.layers[0].params["w"][0, 0] == 0.123456789
        assert out.layers[1].params["w"][0, 0] == 2.0

    def test_two_clients_mean(self):
        out = aggregate(tiny_dense_net(), [full_update(0, {0: 2.0, 1: 0.0}), full_update(1, {0: 4.0, 1: 0.0})], "fedavg")
        assert out.layers[0].params["w"][0, 0] == 3.0

    def test_partitioned_hand_example(self):
        # 2 strong + 1 weak(split 1): layer 0 strong-only mean, layer 1 all-client mean
        base = tiny_dense_net()
        updates = [
            full_update(0, {0: 1.0, 1: 1.0}),
            full_update(1, {0: 3.0, 1: 2.0}),
            ClientUpdate(2, Strategy.suffix(1), {1: {"w": np.array([[6.0]]), "b": np.zeros(1)}}, {}),
        ]
        out = aggregate(base, updates, "embracing")
        assert out.layers[0].params["w"][0, 0] == 2.0
        assert out.layers[1].params["w"][0, 0] == 3.0

    def test_permutation_invariance_bitwise(self, rng):
        base = tiny_dense_net({0: 0.7, 1: -0.3})
        updates = [full_update(i, {0: rng.normal(), 1: rng.normal()}) for i in range(5)]
        a = aggregate(base, updates, "fedavg")
        b = aggregate(base, updates[::-1], "fedavg")
        for i in (0, 1):
            assert a.layers[i].params["w"].tobytes() == b.layers[i].params["w"].tobytes()

    def test_zero_participants_keep_previous(self):
        base = tiny_dense_net({0: 0.7, 1: -0.3})
        updates = [ClientUpdate(0, Strategy.suffix(1), {1: {"w": np.array([[2.0]]), "b": np.zeros(1)}}, {})]
        out = aggregate(base, updates, "embracing")
        assert out.layers[0].params["w"][0, 0] == 0.7
        assert out.layers[1].params["w"][0, 0] == 2.0

    def test_conservation_under_unchanged_params(self):
        base = tiny_dense_net({0: 0.1, 1: 0.7})
        updates = [full_update(i, {0: 0.1, 1: 0.7}) for i in range(3)]
        out = aggregate(base, updates, "fedavg")
        assert out.layers[0].params["w"][0, 0] == 0.1
        assert out.layers[1].params["w"][0, 0] == 0.7

    def test_empty_contributions_rejected(self):
        with pytest.raises(AggregationError):
            aggregate(tiny_dense_net(), [], "fedavg")

    def test_shape_error_names_client_and_layer(self):
        bad = ClientUpdate(9, Strategy.full(), {0: {"w": np.zeros((2, 2)), "b": np.zeros(1)}}, {})
        with pytest.raises(AggregationError, match="client 9 layer 0"):
            aggregate(tiny_dense_net(), [bad], "fedavg")

    def test_width_overlap_mean(self, rng):
        net = conv_net(6)
        sub, maps = width_reduce(net, 0.5)
        for i in sub.parametric_layers():
            for name in sub.layers[i].params:
                sub.layers[i].params[name] = sub.layers[i].params[name] + 1.0
        upd_w = ClientUpdate(0, Strategy.width(0.5),
                             {i: dict(sub.layers[i].params) for i in sub.parametric_layers()},
                             {}, maps)
        out = aggregate(net, [upd_w], "width_reduction")
        w_full = net.layers[0].params["w"]
        w_new = out.layers[0].params["w"]
        sel = np.ix_(maps[0]["out"], maps[0]["in"])
        npt.assert_allclose(w_new[sel], w_full[sel] + 1.0, atol=1e-12)
        mask = np.ones(w_full.shape, bool)
        mask[sel] = False
        npt.assert_array_equal(w_new[mask], w_full[mask])

    def test_aggregation_weights_sum_to_one_exactly(self):
        base = tiny_dense_net()
        updates = [
            full_update(0, {0: 1.0, 1: 1.0}),
            full_update(1, {0: 3.0, 1: 2.0}),
            ClientUpdate(2, Strategy.suffix(1), {1: {"w": np.array([[6.0]]), "b": np.zeros(1)}}, {}),
        ]
        weights = aggregation_weights(base, updates)
        assert weights.check_normalized()
        assert weights.per_layer[0] and len(weights.per_layer[0]) == 2
        assert len(weights.per_layer[1]) == 3


def build_run(mode, strategies, *, seed=0, bn="global", rounds_seed=5, tau=3, lr=0.05,
              sample_fraction=1.0, parallel=1, svcca_every=0):
    ds = data.synth_image_dataset(5, 30, seed=17, size=8, noise=0.25, max_shift=1)
    train, evald = ds.take_per_class(24)
    plan = data.dirichlet_partition(train, len(strategies), 0.5, seed=seed + 100)
    net = conv_net(seed + 7, bn)
    roster = [ClientProfile(i, "strong", s, plan.assignments[i], i) for i, s in enumerate(strategies)]
    state = fedsim.init_run_state(net, roster, train, evald, rounds_seed, mode)
    settings = RoundSettings(
        mode=mode, tau=tau, batch_size=8, lr=lr, momentum=0.9, weight_decay=1e-4,
        sample_fraction=sample_fraction, clients_seed=seed + 200, parallel_clients=parallel,
        svcca_every=svcca_every, svcca_samples=20, svcca_batch=10,
    )
    return state, settings


def params_of(net):
    return {
        (i, n): net.layers[i].params[n]
        for i in net.parametric_layers()
        for n in net.layers[i].params
    }


class TestRunRound:
    def test_degenerate_single_client_equals_centralized_step(self):
        state, settings = build_run("embracing", [Strategy.full()], tau=1)
        target = state.global_net.clone()
        rng = client_stream(settings.clients_seed, 0, 0)
        batch = BatchSampler(len(state.roster[0].shard), settings.batch_size, rng).next()
        xs = state.train_ds.samples[state.roster[0].shard]
        ys = state.train_ds.labels[state.roster[0].shard]
        _, tr = target.forward(xs[batch], "train")
        grads, _ = target.backward(tr, ys[batch])
        nn.SGD(settings.lr, settings.momentum, settings.weight_decay).step(target, grads)
        run_round(state, settings)
        for key, arr in params_of(state.global_net).items():
            assert arr.tobytes() == params_of(target)[key].tobytes()

    def test_embracing_reduces_to_fedavg_bitwise(self):
        full = [Strategy.full()] * 4
        st_e, se = build_run("embracing", full)
        st_f, sf = build_run("fedavg", full)
        for _ in range(5):
            run_round(st_e, se)
            run_round(st_f, sf)
        pe, pf = params_of(st_e.global_net), params_of(st_f.global_net)
        for key in pe:
            assert np.abs(pe[key] - pf[key]).max() < 1e-12

    def test_parallel_equals_serial_bitwise(self):
        strategies = [Strategy.full(), Strategy.full(), Strategy.suffix(4), Strategy.suffix(4)]
        st_1, s1 = build_run("embracing", strategies, parallel=1)
        st_4, s4 = build_run("embracing", strategies, parallel=4)
        for _ in range(4):
            run_round(st_1, s1)
            run_round(st_4, s4)
        p1, p4 = params_of(st_1.global_net), params_of(st_4.global_net)
        for key in p1:
            assert p1[key].tobytes() == p4[key].tobytes()
        assert [m.global_accuracy for m in st_1.metrics] == [m.global_accuracy for m in st_4.metrics]

    def test_deterministic_repetition(self):
        strategies = [Strategy.full()] * 3 + [Strategy.suffix(4)]
        runs = []
        for _ in range(2):
            state, settings = build_run("embracing", strategies, sample_fraction=0.5)
            for _ in range(6):
                run_round(state, settings)
            runs.append([(m.round, m.global_loss, m.global_accuracy, tuple(m.sampled_clients)) for m in state.metrics])
        assert runs[0] == runs[1]

    def test_sampling_fraction_size_and_stream(self):
        state, settings = build_run("fedavg", [Strategy.full()] * 5, sample_fraction=0.5)
        rec = run_round(state, settings)
        assert len(rec.sampled_clients) == 3  # ceil(0.5 * 5)
        assert rec.sampled_clients == sorted(rec.sampled_clients)

    def test_sampling_unaffected_by_tau(self):
        # the round stream is dedicated: local-step counts cannot perturb it
        picks = []
        for tau in (1, 3):
            state, settings = build_run("fedavg", [Strategy.full()] * 6, sample_fraction=0.5, tau=tau)
            picks.append([run_round(state, settings).sampled_clients for _ in range(4)])
        assert picks[0] == picks[1]

    def test_static_bn_stats_never_change_during_run(self):
        state, settings = build_run("embracing", [Strategy.full()] * 3, bn="static")
        init_stats = {
            i: {k: v.copy() for k, v in state.global_net.layers[i].state.items()}
            for i, l in enumerate(state.global_net.layers)
            if isinstance(l, nn.BatchNorm)
        }
        for _ in range(3):
            run_round(state, settings)
        for i, stats in init_stats.items():
            for k, v in stats.items():
                npt.assert_array_equal(state.global_net.layers[i].state[k], v)

    def test_global_bn_stats_shared_after_aggregation(self):
        state, settings = build_run("embracing", [Strategy.full()] * 3, bn="global")
        run_round(state, settings)
        # next round: every client starts from the aggregated model, so all
        # clients share identical running statistics by construction
        stats = state.global_net.layers[2].state["running_mean"]
        assert np.abs(stats).max() > 0  # they did move

    def test_suffix_requires_embracing_mode(self):
        state, settings = build_run("width_reduction", [Strategy.full(), Strategy.suffix(4)])
        with pytest.raises(ValueError):
            run_round(state, settings)

    def test_svcca_metrics_recorded(self):
        state, settings = build_run("embracing", [Strategy.full()] * 3, svcca_every=2)
        rec0 = run_round(state, settings)
        rec1 = run_round(state, settings)
        assert rec0.per_layer_svcca and set(rec0.per_layer_svcca) == {
            "000_conv2d", "004_conv2d", "008_dense"
        }
        assert all(0.0 <= v <= 1.0 for v in rec0.per_layer_svcca.values())
        assert rec1.per_layer_svcca is None

    def test_independent_mode_keeps_client_models_local(self):
        state, settings = build_run("independent", [Strategy.full()] * 3)
        g0 = {k: v.copy() for k, v in params_of(state.global_net).items()}
        for _ in range(2):
            run_round(state, settings)
        for key, arr in params_of(state.global_net).items():
            npt.assert_array_equal(arr, g0[key])
        c0 = params_of(state.client_nets[0])
        c1 = params_of(state.client_nets[1])
        assert any(c0[k].tobytes() != c1[k].tobytes() for k in c0)

    def test_ablation_second_half_syncs_only_that_subset(self):
        state, settings = build_run("ablation:second_half", [Strategy.full()] * 3)
        run_round(state, settings)
        h = fedsim._half_boundary(state.global_net)
        nets = [state.client_nets[i] for i in range(3)]
        for i in state.global_net.parametric_layers():
            name = sorted(nets[0].layers[i].params)[-1]  # 'w' or 'gamma'
            same = all(
                nets[0].layers[i].params[name].tobytes() == n.layers[i].params[name].tobytes()
                for n in nets[1:]
            )
            if i >= h:
                assert same, f"layer {i} should be synchronized"
            else:
                assert not same, f"layer {i} should stay local"

    def test_ablation_channel_wise_syncs_half_channels(self):
        state, settings = build_run("ablation:channel_wise", [Strategy.full()] * 3)
        run_round(state, settings)
        sel = fedsim.ablation_selection(state.global_net, "channel_wise")
        a, b = state.client_nets[0], state.client_nets[1]
        for i, masks in sel.items():
            name = "w" if "w" in masks else "gamma"
            mask = masks[name]
            wa, wb = a.layers[i].params[name], b.layers[i].params[name]
            npt.assert_array_equal(wa[mask], wb[mask])
            if not mask.all():
                assert (wa[~mask] != wb[~mask]).any()


class TestRoundsToTarget:
    def _metrics(self, accs):
        return [
            fedsim.RoundMetrics(i, 0.0, a, None, [0]) for i, a in enumerate(accs)
        ]

    def test_first_crossing(self):
        assert rounds_to_target(self._metrics([0.1, 0.5, 0.9]), 0.5) == 1

    def test_never_reached(self):
        assert rounds_to_target(self._metrics([0.1, 0.5, 0.9]), 0.99) is None

    def test_zero_target_hits_first_round(self):
        assert rounds_to_target(self._metrics([0.1, 0.5]), 0.0) == 0
