"""Federated loop tests: partitioning, aggregation, dropout broadcast, runs."""

import numpy as np
import pytest

from fedgrow import fedsim, growth, nn
from fedgrow.errors import ConfigError, NumericalError
from fedgrow.fedsim import (ClientShard, PartitionSpec, RunSettings, aggregate,
                            fd_extract, fd_merge, local_train, partition,
                            run_experiment, select_clients)
from fedgrow.rng import stream

from conftest import random_params


def toy_dataset(n, classes=4, seed=0):
    r = stream(seed, 0)
    x = r.random((n, 4, 4, 1), dtype=np.float32)
    y = r.integers(0, classes, n)
    return x, y


def tiny_schedule():
    rows = [
        [("conv", 2, 3), ("pool", 2), ("dense", 4), ("dense", 3)],
        [("conv", 4, 3), ("pool", 2), ("dense", 4), ("dense", 3)],
        [("conv", 4, 3), ("pool", 2), ("dense", 8), ("dense", 3)],
    ]
    models = tuple(growth.build_arch((4, 4, 1), row, 0.125, name=f"tiny-{i}")
                   for i, row in enumerate(rows))
    sched = growth.GrowthSchedule("tiny", models, (0.5, 0.25))
    growth.validate_schedule(sched)
    return sched


# ---------------------------------------------------------------------------
# partition / selection


def test_iid_partition_is_exhaustive_and_even():
    x, y = toy_dataset(6000)  # 600 per client, as with 60000 over 100
    shards = partition(x, y, PartitionSpec(client_count=10, seed=3))
    assert len(shards) == 10
    assert all(s.n == 600 for s in shards)
    # exhaustive + disjoint via index bookkeeping on a tagged copy
    tags = np.arange(x.shape[0], dtype=np.float32).reshape(-1, 1, 1, 1)
    shards_tagged = partition(np.broadcast_to(tags, x.shape).copy(), y,
                              PartitionSpec(client_count=10, seed=3))
    collected = np.sort(np.concatenate(
        [s.samples[:, 0, 0, 0].astype(int) for s in shards_tagged]))
    assert np.array_equal(collected, np.arange(x.shape[0]))


def test_single_client_gets_everything():
    x, y = toy_dataset(37)
    shards = partition(x, y, PartitionSpec(client_count=1, seed=0))
    assert len(shards) == 1 and shards[0].n == 37


def test_partition_deterministic_under_seed():
    x, y = toy_dataset(100)
    a = partition(x, y, PartitionSpec(client_count=7, seed=5))
    b = partition(x, y, PartitionSpec(client_count=7, seed=5))
    for sa, sb in zip(a, b):
        assert np.array_equal(sa.samples, sb.samples)
        assert np.array_equal(sa.labels, sb.labels)


def test_label_shard_partition_limits_labels_per_client():
    x, y = toy_dataset(600, classes=10, seed=4)
    spec = PartitionSpec(scheme="label-shard-non-iid", client_count=30,
                         shards_per_client=2, seed=4)
    shards = partition(x, y, spec)
    assert all(len(np.unique(s.labels)) <= 2 for s in shards)
    assert sum(s.n for s in shards) == 600


def test_more_clients_than_samples_rejected():
    x, y = toy_dataset(5)
    with pytest.raises(ConfigError, match="more clients"):
        partition(x, y, PartitionSpec(client_count=6, seed=0))


def test_select_clients_all_and_determinism():
    assert select_clients(stream(0, 1), 8, 8) == list(range(8))
    a = select_clients(stream(7, 1, 3), 100, 10)
    b = select_clients(stream(7, 1, 3), 100, 10)
    assert a == b and len(set(a)) == 10
    with pytest.raises(ConfigError):
        select_clients(stream(0, 1), 4, 5)


def test_mnist_default_clients_per_round():
    assert growth.CLIENTS_PER_ROUND["mnist"] == 10


# ---------------------------------------------------------------------------
# local training / aggregation


def test_local_train_zero_lr_returns_input_params():
    sched = tiny_schedule()
    arch = sched.models[0]
    params = random_params(arch, 1)
    x, y = toy_dataset(20, classes=3, seed=1)
    shard = ClientShard(0, x, y)
    cfg = nn.TrainConfig(learning_rate=0.0, dropout_rate=0.0)
    out, loss, n = local_train(arch, params, shard, cfg, stream(0, 2))
    assert n == 20
    for i in params:
        assert np.array_equal(out[i].w, params[i].w)


def test_local_train_loss_decreases_over_epochs():
    sched = tiny_schedule()
    arch = sched.models[0]
    params = random_params(arch, 2)
    x, y = toy_dataset(40, classes=3, seed=2)
    shard = ClientShard(0, x, y)
    cfg = nn.TrainConfig(learning_rate=0.1, dropout_rate=0.0)
    losses = []
    cur = params
    for epoch in range(20):
        cur, loss, _ = local_train(arch, cur, shard, cfg, stream(0, 3, epoch))
        losses.append(loss)
    assert losses[-1] < losses[0]


def test_aggregate_single_client_identity():
    sched = tiny_schedule()
    params = random_params(sched.models[0], 3)
    out = aggregate([(params, 17)])
    for i in params:
        assert np.allclose(out[i].w, params[i].w)


def test_aggregate_weighted_mean_hand_case():
    p0 = {0: nn.LayerParams(np.zeros((2, 2), np.float32), np.zeros(2, np.float32))}
    p1 = {0: nn.LayerParams(np.full((2, 2), 4.0, np.float32),
                            np.full(2, 4.0, np.float32))}
    out = aggregate([(p0, 1), (p1, 3)])
    assert np.allclose(out[0].w, 3.0)  # (1*0 + 3*4) / 4
    assert np.allclose(out[0].b, 3.0)


def test_aggregate_identical_clients_fixed_point():
    params = random_params(tiny_schedule().models[1], 4)
    out = aggregate([(params, 5), (params, 9), (params, 1)])
    for i in params:
        assert np.abs(out[i].w - params[i].w).max() < 1e-6


def test_aggregate_shape_mismatch_rejected():
    a = {0: nn.LayerParams(np.zeros((2, 2), np.float32), np.zeros(2, np.float32))}
    b = {0: nn.LayerParams(np.zeros((3, 2), np.float32), np.zeros(2, np.float32))}
    with pytest.raises(ConfigError, match="shape"):
        aggregate([(a, 1), (b, 1)])


def test_aggregate_matches_brute_force_per_scalar():
    rng = stream(5, 0)
    updates = []
    arch = tiny_schedule().models[0]
    for k in range(6):
        updates.append((random_params(arch, 50 + k), int(rng.integers(1, 40))))
    out = aggregate(updates)
    total = sum(n for _, n in updates)
    for i in updates[0][0]:
        expect = sum(p[i].w.astype(np.float64) * n for p, n in updates) / total
        assert np.abs(out[i].w - expect).max() < 1e-6


# ---------------------------------------------------------------------------
# federated dropout


def test_fd_extract_keep_one_is_identity():
    arch = tiny_schedule().models[1]
    params = random_params(arch, 6)
    sub_arch, sub_params, mask = fd_extract(arch, params, 1.0, stream(0, 4))
    assert sub_arch.layers == arch.layers
    for i in params:
        assert np.array_equal(sub_params[i].w, params[i].w)
    for i, kept in mask.kept.items():
        assert np.array_equal(kept, np.arange(len(kept)))


def test_fd_extract_keep_count_uses_floor():
    arch = growth.build_arch((4, 4, 1),
                             [("conv", 8, 3), ("pool", 2), ("dense", 512), ("dense", 3)])
    params = random_params(arch, 7)
    _, _, mask = fd_extract(arch, params, 0.875, stream(0, 5))
    dense_idx = nn.trainable_indices(arch)[1]
    assert len(mask.kept[dense_idx]) == 448  # floor(512 * 0.875)
    assert len(mask.kept[0]) == 7  # floor(8 * 0.875)


def test_fd_extract_zero_kept_rejected():
    arch = tiny_schedule().models[0]
    params = random_params(arch, 8)
    with pytest.raises(ConfigError, match="zero"):
        fd_extract(arch, params, 0.1, stream(0, 6))  # floor(2 * 0.1) == 0


def test_fd_extract_classifier_never_masked():
    arch = tiny_schedule().models[1]
    params = random_params(arch, 9)
    _, _, mask = fd_extract(arch, params, 0.5, stream(0, 7))
    assert max(nn.trainable_indices(arch)) not in mask.kept


def test_fd_round_trip_without_training_is_identity():
    arch = tiny_schedule().models[1]
    params = random_params(arch, 10)
    sub_arch, sub_params, mask = fd_extract(arch, params, 0.5, stream(0, 8))
    merged = fd_merge(arch, params, [(sub_params, mask, 3)])
    for i in params:
        assert np.array_equal(merged[i].w, params[i].w)
        assert np.array_equal(merged[i].b, params[i].b)


def test_fd_sub_model_forward_runs():
    arch = tiny_schedule().models[2]
    params = random_params(arch, 11)
    sub_arch, sub_params, _ = fd_extract(arch, params, 0.5, stream(0, 9))
    x = stream(1, 9).random((3, 4, 4, 1), dtype=np.float32)
    probs = nn.forward(sub_arch, sub_params, x)
    assert probs.shape == (3, 3)
    assert np.abs(probs.sum(axis=1) - 1).max() < 1e-5


def test_fd_merge_disjoint_masks_take_sole_contributor():
    arch = nn.ModelArch((4,), (nn.dense(4, 4), nn.relu(), nn.dropout(0.1),
                               nn.dense(4, 2), nn.softmax()))
    params = random_params(arch, 12)
    mask_a = fedsim.DropoutMask({0: np.array([0, 1])}, 0.5)
    mask_b = fedsim.DropoutMask({0: np.array([2, 3])}, 0.5)

    def crop(mask):
        _, sub = fedsim._crop_model(arch, params, mask)
        return sub

    sub_a, sub_b = crop(mask_a), crop(mask_b)
    sub_a[0].w += 1.0
    sub_b[0].w += 2.0
    merged = fd_merge(arch, params, [(sub_a, mask_a, 1), (sub_b, mask_b, 1)])
    assert np.allclose(merged[0].w[:, :2], params[0].w[:, :2] + 1.0)
    assert np.allclose(merged[0].w[:, 2:], params[0].w[:, 2:] + 2.0)


def test_fd_merge_shared_mask_equals_aggregate_on_submatrix():
    arch = tiny_schedule().models[1]
    params = random_params(arch, 13)
    _, _, mask = fd_extract(arch, params, 0.5, stream(0, 10))
    subs = []
    for k in range(3):
        _, sub = fedsim._crop_model(arch, params, mask)
        for p in sub.values():
            p.w += np.float32(k)
        subs.append((sub, int(1 + k)))
    merged = fd_merge(arch, params, [(s, mask, n) for s, n in subs])
    plain = aggregate(subs)
    prev_map = fedsim._prev_trainable_map(arch)
    for i in plain:
        in_idx = fedsim._in_index(arch, i, mask.kept, prev_map)
        out_idx = mask.kept.get(i)
        sel = fedsim._index_expr(arch.layers[i], in_idx, out_idx)
        assert np.array_equal(merged[i].w[sel], plain[i].w)


def test_fd_merge_uncovered_positions_keep_global_values():
    arch = nn.ModelArch((4,), (nn.dense(4, 4), nn.relu(), nn.dropout(0.1),
                               nn.dense(4, 2), nn.softmax()))
    params = random_params(arch, 14)
    mask = fedsim.DropoutMask({0: np.array([1])}, 0.25)
    _, sub = fedsim._crop_model(arch, params, mask)
    sub[0].w += 5.0
    merged = fd_merge(arch, params, [(sub, mask, 2)])
    for col in (0, 2, 3):
        assert np.array_equal(merged[0].w[:, col], params[0].w[:, col])


def test_fd_merge_mask_shape_inconsistency_rejected():
    arch = tiny_schedule().models[1]
    params = random_params(arch, 15)
    _, sub_params, mask = fd_extract(arch, params, 0.5, stream(0, 11))
    wrong_mask = fedsim.DropoutMask(
        {i: np.arange(max(1, len(k) - 1)) for i, k in mask.kept.items()},
        mask.keep_fraction)
    with pytest.raises(ConfigError, match="inconsistent"):
        fd_merge(arch, params, [(sub_params, wrong_mask, 1)])


# ---------------------------------------------------------------------------
# run_experiment


def _settings(rounds, **kw):
    defaults = dict(
        rounds=rounds, clients_per_round=4,
        train=nn.TrainConfig(learning_rate=0.05),
        master_seed=3, eval_every=10, switch_window=4, switch_lag=8)
    defaults.update(kw)
    return RunSettings(**defaults)


@pytest.fixture(scope="module")
def toy_world():
    x, y = toy_dataset(160, classes=3, seed=20)
    shards = partition(x, y, PartitionSpec(client_count=16, seed=20))
    tx, ty = toy_dataset(60, classes=3, seed=21)
    return shards, tx, ty


def test_run_zero_rounds(toy_world):
    shards, tx, ty = toy_world
    result = run_experiment("fedavg", tiny_schedule(), shards, tx, ty, _settings(0))
    assert result.metrics == [] and result.ledger.rows == []


def test_unknown_method_rejected(toy_world):
    shards, tx, ty = toy_world
    with pytest.raises(ConfigError, match="unknown method"):
        run_experiment("fedsgd", tiny_schedule(), shards, tx, ty, _settings(1))


def test_fedavg_constant_bytes_and_ledger_consistency(toy_world):
    shards, tx, ty = toy_world
    result = run_experiment("fedavg", tiny_schedule(), shards, tx, ty, _settings(12))
    per_round = {(r.download_bytes, r.upload_bytes) for r in result.ledger.rows}
    assert len(per_round) == 1
    expected = nn.count_params(tiny_schedule().models[-1]) * 4 * 4
    assert per_round.pop() == (expected, expected)
    assert [r.cumulative_bytes for r in result.ledger.rows] == \
        result.ledger.recompute_cumulative()


def test_same_seed_runs_are_bitwise_identical(toy_world):
    shards, tx, ty = toy_world
    a = run_experiment("fnn", tiny_schedule(), shards, tx, ty, _settings(25))
    b = run_experiment("fnn", tiny_schedule(), shards, tx, ty, _settings(25))
    assert a.metrics == b.metrics
    assert a.ledger.rows == b.ledger.rows


def test_fd_keep_fraction_one_equals_fedavg(toy_world):
    shards, tx, ty = toy_world
    a = run_experiment("fedavg", tiny_schedule(), shards, tx, ty,
                       _settings(8, fd_keep_fraction=1.0))
    b = run_experiment("fd", tiny_schedule(), shards, tx, ty,
                       _settings(8, fd_keep_fraction=1.0))
    assert a.metrics == b.metrics


def test_fd_reduces_bytes(toy_world):
    shards, tx, ty = toy_world
    full = run_experiment("fedavg", tiny_schedule(), shards, tx, ty, _settings(4))
    sub = run_experiment("fd", tiny_schedule(), shards, tx, ty,
                         _settings(4, fd_keep_fraction=0.5))
    assert sub.ledger.rows[0].download_bytes < full.ledger.rows[0].download_bytes


def test_paired_selection_across_methods(toy_world):
    # The selection stream depends only on (seed, round), so different
    # methods see the same clients each round.
    shards, tx, ty = toy_world
    seen = {}
    for method in ("fedavg", "fnn"):
        sel_log = []
        orig = fedsim.select_clients

        def spy(rng, population, m, _log=sel_log):
            out = orig(rng, population, m)
            _log.append(tuple(out))
            return out

        fedsim.select_clients = spy
        try:
            run_experiment(method, tiny_schedule(), shards, tx, ty, _settings(6))
        finally:
            fedsim.select_clients = orig
        seen[method] = sel_log
    assert seen["fedavg"] == seen["fnn"]


def test_staged_run_switches_and_preserves_accuracy(toy_world):
    shards, tx, ty = toy_world
    result = run_experiment("fnn", tiny_schedule(), shards, tx, ty,
                            _settings(40, fd_keep_fraction=None))
    assert result.events, "expected at least one switch in 40 rounds"
    for ev in result.events:
        assert ev.accuracy_before is not None
        assert abs(ev.accuracy_before - ev.accuracy_after) < 1e-5
    switch_rounds = [ev.round for ev in result.events]
    # rounds are 0-based: 12 recorded losses means round index >= 11
    assert min(switch_rounds) >= 11
    # bytes never decrease across stages and jump at each switch
    rows = result.ledger.rows
    for earlier, later in zip(rows, rows[1:]):
        assert later.download_bytes >= earlier.download_bytes
    for ev in result.events:
        assert rows[ev.round + 1].download_bytes > rows[ev.round].download_bytes


def test_fnn_fd_exemption_prefix(toy_world):
    shards, tx, ty = toy_world
    result = run_experiment("fnn-fd", tiny_schedule(), shards, tx, ty,
                            _settings(40, fd_keep_fraction=0.5, fd_exempt_prefix=1))
    by_model = {}
    for row in result.ledger.rows:
        by_model.setdefault(row.model_index, set()).add(row.download_bytes)
    # model 0 exempt: full bytes; later models: cropped bytes
    full0 = nn.count_params(tiny_schedule().models[0]) * 4 * 4
    assert by_model[0] == {full0}
    if 1 in by_model:
        full1 = nn.count_params(tiny_schedule().models[1]) * 4 * 4
        assert all(b < full1 for b in by_model[1])


def test_numerical_failure_carries_round_context(toy_world):
    shards, tx, ty = toy_world
    bad = _settings(3, train=nn.TrainConfig(learning_rate=1e12))
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(NumericalError, match=r"round \d+: client"):
            run_experiment("fedavg", tiny_schedule(), shards, tx, ty, bad)
