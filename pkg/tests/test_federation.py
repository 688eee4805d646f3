import numpy as np
import pytest

from pflcombo.aggregation import AggregationPolicy, ClientUpdate
from pflcombo.data import (
    ClientDataset,
    LabeledDataset,
    PartitionConfig,
    dirichlet_partition,
    evaluate_accuracy,
    generate_synthetic,
)
from pflcombo.federation import (
    FederationConfig,
    local_train,
    run_federated_training,
    sample_clients,
    scaling_attack,
    train_local_baseline,
    write_round_logs,
)
from pflcombo.model import ModelSpec, init_model
from pflcombo.seeding import derive_rng, derive_seed

EMPTY = LabeledDataset(np.zeros((0, 2)), np.zeros(0, dtype=int), 2)


def blobs(seed=0, n=40, sep=3.0):
    return generate_synthetic(2, 2, n, sep, 1.0, seed)


def client(cid, train, test=None):
    test = test if test is not None else train
    return ClientDataset(cid, train, train.subset([]), test)


def test_seed_derivation_is_labeled_and_stable():
    assert derive_seed(1, "a", 2) == derive_seed(1, "a", 2)
    assert derive_seed(1, "a", 2) != derive_seed(1, "a", 3)
    assert derive_seed(1, "ab") != derive_seed(1, "a", "b")
    assert 0 <= derive_seed(7) < 2**64
    assert derive_rng(3, "x").random() == derive_rng(3, "x").random()


def test_config_validation():
    with pytest.raises(ValueError):
        FederationConfig(rounds=0)
    with pytest.raises(ValueError):
        FederationConfig(regime="p2p")
    with pytest.raises(ValueError):
        FederationConfig(local_lr=0.0)
    assert FederationConfig(regime="cross_silo", sample_size=3).participants_per_round(10) == 10
    assert FederationConfig(regime="cross_device", sample_size=3).participants_per_round(10) == 3
    with pytest.raises(ValueError):
        FederationConfig(regime="cross_device", sample_size=11).participants_per_round(10)


def test_local_train_identities():
    ds = blobs()
    start = init_model(ModelSpec(2, 3, 2), 0)
    assert local_train(start, ds, 2, 0.0, 8) == start
    full = np.ones(start.values.size, dtype=bool)
    assert local_train(start, ds, 2, 0.5, 8, freeze_mask=full) == start
    assert local_train(start, EMPTY, 2, 0.5, 8) is start


def test_local_train_improves_training_accuracy():
    ds = blobs(sep=4.0)
    start = init_model(ModelSpec(2, 0, 2), 1)
    before = evaluate_accuracy(start, ds)
    after = evaluate_accuracy(local_train(start, ds, 5, 0.1, 8, rng=np.random.default_rng(0)), ds)
    assert after > before


def test_local_train_partial_freeze_is_bitwise():
    ds = blobs()
    start = init_model(ModelSpec(2, 3, 2), 0)
    mask = np.zeros(start.values.size, dtype=bool)
    mask[:5] = True
    out = local_train(start, ds, 3, 0.5, 8, freeze_mask=mask, rng=np.random.default_rng(0))
    assert np.array_equal(out.values[:5], start.values[:5])
    assert not np.array_equal(out.values[5:], start.values[5:])
    with pytest.raises(ValueError):
        local_train(start, ds, 1, 0.1, 8, freeze_mask=mask[:-1])
    with pytest.raises(ValueError):
        local_train(start, ds, 0, 0.1, 8)


def test_local_train_deterministic_and_pure():
    ds = blobs()
    start = init_model(ModelSpec(2, 3, 2), 0)
    snapshot = start.values.copy()
    a = local_train(start, ds, 2, 0.1, 7, rng=np.random.default_rng(4))
    b = local_train(start, ds, 2, 0.1, 7, rng=np.random.default_rng(4))
    assert a == b
    assert np.array_equal(start.values, snapshot)


def test_sample_clients():
    assert sample_clients(5, 5, 1, 0) == [0, 1, 2, 3, 4]
    s = sample_clients(20, 4, 3, 9)
    assert s == sample_clients(20, 4, 3, 9) and s == sorted(s) and len(set(s)) == 4
    with pytest.raises(ValueError):
        sample_clients(3, 4, 1, 0)


def test_sample_clients_uniform_frequency():
    counts = np.zeros(100)
    for t in range(10_000):
        counts[sample_clients(100, 10, t, 42)] += 1
    freq = counts / 10_000
    assert np.all(np.abs(freq - 0.10) <= 0.01)


def make_clients(n=4, alpha=1.0, seed=0):
    ds = generate_synthetic(3, 4, 40, 2.0, 1.0, seed)
    return dirichlet_partition(ds, PartitionConfig(n, alpha), seed)


def test_single_client_single_round_equals_local_training():
    ds = blobs()
    c = client(0, ds)
    init = init_model(ModelSpec(2, 2, 2), 0)
    cfg = FederationConfig(rounds=1, local_epochs=2, local_lr=0.1, batch_size=8, seed=5)
    G, logs = run_federated_training(cfg, [c], init)
    expected = local_train(init, ds, 2, 0.1, 8, rng=derive_rng(5, "local", 1, 0))
    assert np.allclose(G.values, expected.values, rtol=0, atol=1e-15)
    assert logs[0].participant_ids == [0]


def test_identical_clients_match_single_client_trajectory():
    ds = blobs()
    init = init_model(ModelSpec(2, 2, 2), 0)
    # one batch per epoch makes every client's shuffle irrelevant
    cfg = FederationConfig(rounds=4, local_epochs=2, local_lr=0.1, batch_size=len(ds), seed=5)
    many, _ = run_federated_training(cfg, [client(i, ds) for i in range(3)], init)
    single, _ = run_federated_training(cfg, [client(0, ds)], init)
    g = init
    for _ in range(4):
        g = local_train(g, ds, 2, 0.1, len(ds))
    assert np.allclose(many.values, single.values, rtol=0, atol=1e-12)
    assert np.allclose(many.values, g.values, rtol=0, atol=1e-12)


def test_cross_silo_logs_all_clients_and_cross_device_samples():
    clients = make_clients(5)
    init = init_model(ModelSpec(4, 3, 3), 0)
    _, logs = run_federated_training(FederationConfig(rounds=3, seed=1), clients, init)
    assert all(log.participant_ids == [0, 1, 2, 3, 4] for log in logs)
    cfg = FederationConfig(rounds=4, regime="cross_device", sample_size=2, seed=1)
    G, logs = run_federated_training(cfg, clients, init)
    assert all(len(log.participant_ids) == 2 for log in logs)
    assert G.spec == init.spec


def test_round_determinism_across_workers():
    clients = make_clients(6)
    init = init_model(ModelSpec(4, 3, 3), 0)
    for policy in (AggregationPolicy(), AggregationPolicy("median")):
        a, _ = run_federated_training(FederationConfig(rounds=3, seed=2, policy=policy), clients, init)
        b, _ = run_federated_training(FederationConfig(rounds=3, seed=2, policy=policy, workers=3), clients, init)
        assert np.array_equal(a.values, b.values)


def test_empty_participants_are_skipped():
    ds = blobs()
    empty = ClientDataset(1, EMPTY, EMPTY, EMPTY)
    init = init_model(ModelSpec(2, 0, 2), 0)
    cfg = FederationConfig(rounds=2, seed=0)
    G, logs = run_federated_training(cfg, [client(0, ds), empty], init)
    assert logs[0].skipped_ids == [1]
    only, _ = run_federated_training(cfg, [client(0, ds)], init)
    assert np.array_equal(G.values, only.values)
    all_empty = [ClientDataset(i, EMPTY, EMPTY, EMPTY) for i in range(2)]
    G, _ = run_federated_training(cfg, all_empty, init)
    assert G == init


def test_eval_logs_and_csv(tmp_path):
    clients = make_clients(3)
    init = init_model(ModelSpec(4, 0, 3), 0)
    _, logs = run_federated_training(FederationConfig(rounds=2, seed=0, eval_every=1), clients, init)
    assert set(logs[0].post_acc) == {c.client_id for c in clients if len(c.test)}
    path = tmp_path / "rounds.csv"
    write_round_logs(logs, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "round,client_id,pre_acc,post_acc"
    assert len(lines) == 1 + 2 * 3


def test_near_iid_fl_beats_local_baselines():
    ds = generate_synthetic(6, 8, 60, 2.0, 1.0, 0)
    clients = dirichlet_partition(ds, PartitionConfig(10, 100.0), 0)
    spec = ModelSpec(8, 8, 6)
    cfg = FederationConfig(rounds=20, local_epochs=2, local_lr=0.05, seed=0)
    G, _ = run_federated_training(cfg, clients, init_model(spec, 0))
    fl = np.mean([evaluate_accuracy(G, c.test) for c in clients])
    local = np.mean([evaluate_accuracy(train_local_baseline(c, spec, 5, 0.05, 16, c.client_id), c.test) for c in clients])
    assert fl > local


def test_local_baseline_deterministic_and_single_class():
    x = np.random.default_rng(0).normal(size=(20, 2))
    only = LabeledDataset(x, np.ones(20, dtype=int), 2)
    c = client(0, only)
    spec = ModelSpec(2, 0, 2)
    a = train_local_baseline(c, spec, 3, 0.1, 8, seed=1)
    assert a == train_local_baseline(c, spec, 3, 0.1, 8, seed=1)
    assert evaluate_accuracy(a, only) == 1.0
    with pytest.raises(ValueError):
        train_local_baseline(ClientDataset(1, EMPTY, EMPTY, EMPTY), spec, 3, 0.1, 8, 0)


def test_skewed_partition_some_local_beats_fl():
    ds = generate_synthetic(10, 20, 100, 2.5, 1.0, 0)
    clients = dirichlet_partition(ds, PartitionConfig(10, 0.01), 0)
    spec = ModelSpec(20, 16, 10)
    G, _ = run_federated_training(FederationConfig(rounds=20, local_lr=0.05, seed=0), clients, init_model(spec, 0))
    wins = 0
    for c in clients:
        if len(c.train) and len(c.test):
            loc = train_local_baseline(c, spec, 5, 0.05, 16, c.client_id)
            wins += evaluate_accuracy(loc, c.test) > evaluate_accuracy(G, c.test)
    assert wins >= 1


def test_scaling_attack_modes():
    init = init_model(ModelSpec(2, 0, 2), 0)
    honest = ClientUpdate(0, init.with_values(init.values + 1.0))
    attacker = ClientUpdate(1, init.with_values(init.values + 1.0))
    model_hook = scaling_attack([1], 10.0)
    assert model_hook(1, honest, init) is honest
    assert np.allclose(model_hook(1, attacker, init).params.values, 10.0 * (init.values + 1.0))
    delta_hook = scaling_attack([1], 10.0, mode="delta")
    assert np.allclose(delta_hook(1, attacker, init).params.values, init.values + 10.0)
    with pytest.raises(ValueError):
        scaling_attack([1], 2.0, mode="sign")
