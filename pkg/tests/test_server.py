import math

import numpy as np
import pytest

from neurotoxin.attack import AttackConfig, AttackPlan, attacker_local_update, top_k_mask
from neurotoxin.data import Dataset, DevicePartition, PoisonedDataset, PoisonKind
from neurotoxin.nn import Batch, Dense, Model, ModelSpec, TrainConfig, grad
from neurotoxin.seeding import derive_seed, rng_for
from neurotoxin.server import (
    ATTACKER,
    DefenseConfig,
    FedTask,
    RoundConfig,
    ServerState,
    add_gaussian_noise,
    benign_local_update,
    clip_update,
    fedavg_aggregate,
    run_round,
    sample_participants,
    server_sparsify,
)


def linear_model():
    return Model(ModelSpec((5,), (Dense(5, 5),), 5))


def micro_task(n_devices=4, per_device=6, seed=0):
    rng = np.random.default_rng(seed)
    n = n_devices * per_device
    train = Dataset(rng.normal(size=(n, 5)), rng.integers(0, 5, size=n), 5)
    part = DevicePartition([np.arange(i * per_device, (i + 1) * per_device) for i in range(n_devices)])
    test = Dataset(rng.normal(size=(20, 5)), rng.integers(0, 5, size=20), 5)
    poison = PoisonedDataset(Dataset(rng.normal(size=(16, 5)) + 3.0, np.full(16, 4), 5), 4, PoisonKind.EDGE_CASE)
    p_train, p_eval = poison.split(8)
    return FedTask(linear_model(), train, part, test, p_train, p_eval)


# ---------------------------------------------------------------- benign_local_update


def reference_trainer(model, theta0, X, y, lr, batch_size, epochs, seed):
    rng = np.random.default_rng(seed)
    theta = theta0.copy()
    for _ in range(epochs):
        order = rng.permutation(len(y))
        for lo in range(0, len(y), batch_size):
            idx = order[lo : lo + batch_size]
            theta = theta - lr * model.loss_and_grad(theta, Batch(X[idx], y[idx]))[2]
    return theta0 - theta


def test_zero_learning_rate_gives_zero_delta():
    task = micro_task()
    theta = task.model.init_params(0)
    delta = benign_local_update(task.model, theta, task.device_data(0), TrainConfig(0.0, 2, 3), seed=0)
    assert np.all(delta == 0.0)


def test_single_full_batch_step_is_lr_times_gradient():
    task = micro_task()
    theta = task.model.init_params(0)
    dev = task.device_data(1)
    delta = benign_local_update(task.model, theta, dev, TrainConfig(0.3, 100, 1), seed=5)
    expected = 0.3 * grad(task.model, theta, dev.as_batch())
    np.testing.assert_allclose(delta, expected, rtol=1e-12, atol=1e-15)


def test_benign_update_matches_reference_trainer():
    task = micro_task()
    theta = task.model.init_params(0)
    dev = task.device_data(2)
    got = benign_local_update(task.model, theta, dev, TrainConfig(0.1, 4, 2), seed=0)
    expected = reference_trainer(task.model, theta, dev.inputs, dev.labels, 0.1, 4, 2, 0)
    assert got.tobytes() == expected.tobytes()


def test_empty_device_rejected():
    task = micro_task()
    with pytest.raises(ValueError):
        benign_local_update(task.model, task.model.init_params(0), task.device_data(0).subset([]), TrainConfig(), 0)


# ---------------------------------------------------------------- defenses


def test_clip_examples():
    u = np.array([3.0, 4.0])
    np.testing.assert_allclose(clip_update(u, 2.5), u * 0.5, rtol=1e-15)
    small = np.array([0.3, 0.4])
    assert clip_update(small, 0.5).tobytes() == small.tobytes()
    assert np.all(clip_update(np.zeros(3), 1.0) == 0.0)
    rng = np.random.default_rng(0)
    for _ in range(200):
        v = rng.normal(size=20) * rng.uniform(0, 10)
        p = rng.uniform(0.01, 5)
        assert np.linalg.norm(clip_update(v, p)) <= p + 1e-12


def test_fedavg_examples():
    u = np.array([1.0, -2.0, 0.5])
    np.testing.assert_array_equal(fedavg_aggregate([u, u, u]), u)
    np.testing.assert_array_equal(fedavg_aggregate([np.array([1.0, 0.0]), np.array([0.0, 1.0])]), [0.5, 0.5])
    with pytest.raises(ValueError):
        fedavg_aggregate([])
    with pytest.raises(ValueError):
        fedavg_aggregate([np.zeros(2), np.zeros(3)])


def test_fedavg_matches_exact_summation():
    rng = np.random.default_rng(1)
    vecs = [rng.normal(size=50) * 10 ** rng.uniform(-3, 3) for _ in range(10)]
    expected = np.array([math.fsum(v[i] for v in vecs) / 10 for i in range(50)])
    np.testing.assert_allclose(fedavg_aggregate(vecs), expected, rtol=0, atol=1e-12 * np.max(np.abs(expected)))


def test_gaussian_noise_statistics():
    u = np.linspace(-1, 1, 100_000)
    assert add_gaussian_noise(u, 0.0, 3).tobytes() == u.tobytes()
    sigma = 0.001
    noise = add_gaussian_noise(u, sigma, seed=42) - u
    assert abs(noise.var() / sigma**2 - 1) < 0.05
    assert abs(noise.mean()) < 3 * sigma / math.sqrt(len(u))
    np.testing.assert_array_equal(add_gaussian_noise(u, sigma, 42), add_gaussian_noise(u, sigma, 42))


def test_server_sparsify_examples():
    agg = np.array([3.0, -1.0, 2.0, 5.0])
    np.testing.assert_array_equal(server_sparsify(agg, 1.0), agg)
    np.testing.assert_array_equal(server_sparsify(agg, 0.5), [3.0, 0.0, 0.0, 5.0])
    rng = np.random.default_rng(0)
    v = rng.normal(size=101)
    once = server_sparsify(v, 0.13)
    np.testing.assert_array_equal(server_sparsify(once, 0.13), once)
    assert np.count_nonzero(once) == 14


# ---------------------------------------------------------------- run_round


def test_single_device_round_moves_by_clipped_delta():
    task = micro_task(n_devices=1, per_device=10)
    theta = task.model.init_params(0)
    cfg = RoundConfig(devices_per_round=1, train=TrainConfig(0.5, 4, 2), defense=DefenseConfig(clip_norm=0.05))
    state, log = run_round(ServerState(theta), task, cfg, master_seed=9)
    delta = benign_local_update(task.model, theta, task.device_data(0), cfg.train, derive_seed(9, "device", 0, 0))
    assert np.linalg.norm(delta) > 0.05
    np.testing.assert_array_equal(state.global_params, theta - clip_update(delta, 0.05) / 1)
    assert log.clipped == (True,)
    assert state.round == 1


def test_attacker_contribution_is_clipped():
    task = micro_task()
    theta = task.model.init_params(0)
    p = 0.01
    attack = AttackConfig(boost=50.0, train=TrainConfig(0.5, 8, 5))
    plan = AttackPlan(start_round=0, attack_num=1)
    cfg = RoundConfig(devices_per_round=1, defense=DefenseConfig(clip_norm=p), attack=attack, plan=plan)
    state, log = run_round(ServerState(theta), task, cfg, master_seed=0)
    assert log.participants == (ATTACKER,)
    assert log.clipped == (True,)
    assert np.linalg.norm(theta - state.global_params) == pytest.approx(p, rel=1e-12)


def test_clipping_happens_per_update_before_averaging():
    big = np.array([30.0, 40.0])
    small = [np.array([0.1, 0.0]), np.array([0.0, 0.1])]
    per_update = fedavg_aggregate([clip_update(u, 1.0) for u in [big] + small])
    after = clip_update(fedavg_aggregate([big] + small), 1.0)
    np.testing.assert_allclose(per_update, [(0.6 + 0.1) / 3, (0.8 + 0.1) / 3])
    assert not np.allclose(per_update, after)


def test_sampling_without_replacement_and_round_size():
    for rnd in range(30):
        ids = sample_participants(50, 10, master_seed=3, rnd=rnd)
        assert len(set(ids.tolist())) == 10
    task = micro_task(n_devices=6)
    theta = task.model.init_params(0)
    plan = AttackPlan(start_round=0, attack_num=1, attackers_per_round=2)
    cfg = RoundConfig(devices_per_round=4, plan=plan)
    _, attacked = run_round(ServerState(theta), task, cfg, 0)
    _, clean = run_round(ServerState(theta, round=1), task, cfg, 0)
    assert len(attacked.participants) == len(clean.participants) == 4
    assert attacked.participants.count(ATTACKER) == 2
    assert ATTACKER not in clean.participants


def test_thread_count_does_not_change_results():
    task = micro_task(n_devices=8)
    theta = task.model.init_params(0)
    cfg = RoundConfig(devices_per_round=6, defense=DefenseConfig(clip_norm=0.1, dp_sigma=0.01, server_topk=0.5))
    a, la = run_round(ServerState(theta), task, cfg, 1, workers=1)
    b, lb = run_round(ServerState(theta), task, cfg, 1, workers=4)
    assert a.global_params.tobytes() == b.global_params.tobytes()
    assert la == lb


def reference_micro_run(task, cfg, master_seed, rounds):
    """Round pipeline written out by hand from the primitives' definitions."""
    theta = task.model.init_params(derive_seed(master_seed, "init"))
    last = None
    logs = []
    for rnd in range(rounds):
        chosen = sorted(rng_for(master_seed, "sampling", rnd).choice(task.n_devices, cfg.devices_per_round, replace=False).tolist())
        attack = cfg.plan.is_attack_round(rnd)
        if attack:
            chosen = chosen[:-1]
        ups = [
            reference_trainer(
                task.model, theta, task.device_data(d).inputs, task.device_data(d).labels,
                cfg.train.learning_rate, cfg.train.batch_size, cfg.train.local_epochs,
                derive_seed(master_seed, "device", rnd, d),
            )
            for d in chosen
        ]
        if attack:
            mask = top_k_mask(last, cfg.attack.mask_ratio) if last is not None else None
            ups.append(attacker_local_update(task.model, theta, last, task.poison_train, cfg.attack, derive_seed(master_seed, "attacker", rnd), mask=mask))
        p = cfg.defense.clip_norm
        ups = [u * min(1.0, p / np.linalg.norm(u)) if np.linalg.norm(u) > p else u for u in ups]
        agg = np.array([math.fsum(u[i] for u in ups) for i in range(len(theta))]) / len(ups)
        theta = theta - agg
        last = agg
        pred = task.model.predict(theta, task.test.inputs)
        benign = float(np.mean(pred == task.test.labels))
        att = float(np.mean(task.model.predict(theta, task.poison_eval.base.inputs) == task.poison_eval.target_label))
        logs.append((rnd, benign, att, attack, float(np.linalg.norm(agg))))
    return theta, logs


def test_three_round_micro_run_matches_reference():
    task = micro_task(n_devices=4)
    assert task.model.total_params == 30
    cfg = RoundConfig(
        devices_per_round=3,
        train=TrainConfig(0.2, 4, 2),
        defense=DefenseConfig(clip_norm=0.08),
        attack=AttackConfig(mask_ratio=0.1, pgd_norm_bound=0.08, train=TrainConfig(0.5, 8, 3)),
        plan=AttackPlan(start_round=1, attack_num=2),
    )
    state = ServerState(task.model.init_params(derive_seed(11, "init")))
    logs = []
    for _ in range(3):
        state, log = run_round(state, task, cfg, master_seed=11)
        logs.append((log.round, log.benign_acc, log.attack_acc, log.attacker_present, log.aggregate_norm))
    ref_theta, ref_logs = reference_micro_run(task, cfg, 11, 3)
    np.testing.assert_allclose(state.global_params, ref_theta, rtol=0, atol=1e-14)
    for got, want in zip(logs, ref_logs):
        assert got[:4] == want[:4]
        assert got[4] == pytest.approx(want[4], rel=1e-12)


def test_mask_comes_from_previous_broadcast():
    task = micro_task(n_devices=4)
    cfg = RoundConfig(devices_per_round=2, attack=AttackConfig(mask_ratio=0.2), plan=AttackPlan(start_round=0, attack_num=3))
    from neurotoxin.attack import vector_digest

    state = ServerState(task.model.init_params(0))
    state, first = run_round(state, task, cfg, 0)
    assert first.mask_size == 0 and first.mask_source_digest == ""
    for _ in range(2):
        expected = vector_digest(state.last_broadcast_update)
        state, log = run_round(state, task, cfg, 0)
        assert log.mask_source_digest == expected == log.downloaded_digest
        assert log.mask_size == 6
