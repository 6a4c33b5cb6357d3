import numpy as np
import pytest

from feddtg import nn
from feddtg.baselines import (
    BaselineConfig,
    ClassifierClient,
    fedavg_round,
    fedprox_local_step,
    local_only_train,
    proximal_gradient,
)
from feddtg.exceptions import ParameterError
from feddtg.experiments import evaluate
from feddtg.protocol import CommLedger

from conftest import Federation, small_config
from oracles import central_difference, elementwise_mean


def classifier_clients(fed):
    base = fed.clients[0]
    return [ClassifierClient(k, base.classifier.copy(), base.clf_opt.copy()) for k in range(fed.cfg.n_clients)]


def test_config_validation():
    with pytest.raises(ParameterError):
        BaselineConfig(fedprox_mu=-0.1)


def test_proximal_gradient(rng):
    spec = nn.NetworkSpec.mlp([3, 2])
    theta = nn.ParamVector(spec, rng.normal(size=spec.n_params))
    glob = nn.ParamVector(spec, rng.normal(size=spec.n_params))
    assert not proximal_gradient(theta, theta.copy(), 0.3).any()
    mu = 0.7
    num = central_difference(lambda v: mu / 2 * np.sum((v - glob.values) ** 2), theta.values)
    assert np.abs(proximal_gradient(theta, glob, mu) - num).max() < 1e-6


def test_fedprox_mu_zero_equals_fedavg_step(rng):
    spec = nn.NetworkSpec.mlp([2, 4, 3])
    theta = nn.init_params(spec, rng)
    glob = nn.init_params(spec, rng)
    x, y = rng.normal(size=(8, 2)), rng.integers(0, 3, 8)
    opt = nn.make_optimizer("adam", 1e-2, spec.n_params)
    a, _, _ = fedprox_local_step(theta, glob, x, y, 0.0, opt)
    b, _, _ = fedprox_local_step(theta, None, x, y, 0.0, opt)
    assert a.values.tobytes() == b.values.tobytes()
    with pytest.raises(ParameterError):
        fedprox_local_step(theta, glob, x, y, -1.0, opt)


def run_fedavg(fed, rounds, mu=0.0):
    theta, clients, ledger = fed.clients[0].classifier.copy(), classifier_clients(fed), CommLedger()
    recs = []
    for t in range(1, rounds + 1):
        theta, clients, rec = fedavg_round(theta, clients, fed.train, fed.shards, fed.cfg, ledger, t, mu)
        recs.append(rec)
    return theta, clients, recs, ledger


def test_fedprox_zero_mu_is_trajectory_identical(federation):
    a = run_fedavg(federation(algorithm="fedavg"), 3)
    b = run_fedavg(federation(algorithm="fedprox", fedprox_mu=0.0), 3, mu=0.0)
    assert a[0].values.tobytes() == b[0].values.tobytes()


def test_zero_local_steps_leave_global_unchanged(federation):
    fed = federation(algorithm="fedavg", local_epochs=0)
    start = fed.clients[0].classifier.copy()
    theta, *_ = run_fedavg(fed, 2)
    assert theta.values.tobytes() == start.values.tobytes()


def test_fedavg_aggregate_matches_oracle(federation):
    fed = federation(algorithm="fedavg")
    theta, clients, recs, _ = run_fedavg(fed, 1)
    oracle = elementwise_mean([clients[k].classifier.values for k in recs[0].selected])
    assert np.abs(theta.values - oracle).max() <= 1e-12


def test_fedavg_ledger(federation):
    fed = federation(algorithm="fedavg", frac=0.5)
    theta, _, recs, ledger = run_fedavg(fed, 2)
    n = len(theta.values)
    for rec in recs:
        assert rec.ledger["uplink_total"] == rec.ledger["uplink_classifier"] == n * len(rec.selected)
        assert rec.ledger["uplink_generator"] == 0


def test_single_client_fedavg_is_local_training(federation):
    fed = federation(algorithm="fedavg", n_clients=1, partition="iid")
    theta, clients, _, _ = run_fedavg(fed, 2)
    local, _ = local_only_train(classifier_clients(fed), fed.train, fed.shards, small_config(n_clients=1, partition="iid", rounds=2))
    assert theta.values.tobytes() == local[0].classifier.values.tobytes()


def test_local_only_one_class_per_client_predicts_own_class(federation):
    fed = federation(algorithm="local", rounds=30, lr_classifier=1e-2)
    clients, _ = local_only_train(classifier_clients(fed), fed.train, fed.shards, fed.cfg)
    for c in clients:
        assert evaluate(c.classifier, fed.test) == pytest.approx(0.25, abs=0.05)


def test_local_only_zero_epochs_is_chance(federation):
    fed = federation(algorithm="local", local_epochs=0)
    clients, _ = local_only_train(classifier_clients(fed), fed.train, fed.shards, fed.cfg)
    assert all(c.classifier.values.tobytes() == fed.clients[0].classifier.values.tobytes() for c in clients)


def test_local_only_iid_clients_agree():
    cfg = small_config(algorithm="local", partition="iid", rounds=30, mixture_samples_per_class=100,
                       mixture_test_per_class=100, classifier_hidden=[16], lr_classifier=1e-2)
    fed = Federation(cfg)
    clients, _ = local_only_train(classifier_clients(fed), fed.train, fed.shards, cfg)
    accs = [evaluate(c.classifier, fed.test) for c in clients]
    assert max(accs) - min(accs) < 0.05


def test_local_only_skips_empty_shard(federation):
    fed = federation(algorithm="local")
    fed.shards[1] = type(fed.shards[1])(1, np.zeros(0, dtype=np.int64))
    _, recs = local_only_train(classifier_clients(fed), fed.train, fed.shards, fed.cfg)
    assert all(r.skipped_clients == [1] for r in recs)
