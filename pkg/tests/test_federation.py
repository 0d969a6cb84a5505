import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import fedmeta.federation as fed
from fedmeta.data_io import SyntheticSpec, generate_synthetic, partition_clients
from fedmeta.episodes import EpisodeSpec
from fedmeta.federation import (CheckpointError, ClientState, ServerState, TrainingConfig, checksum,
                                decode_checkpoint, encode_checkpoint, fedavg, initial_meta, load_checkpoint,
                                local_round, run_round, run_training, save_checkpoint, train_centralized)
from fedmeta.meta import MetaConfig, MetaParams
from fedmeta.nn import MLP, ModelConfig
from fedmeta.rng import stream


def const(value, n=1):
    return MetaParams(np.full(n, float(value)), np.full(n, float(value)))


@pytest.fixture(scope="module")
def data():
    return generate_synthetic(SyntheticSpec(examples_per_class=40, resolution=4, noise=0.5, seed=1))


@pytest.fixture(scope="module")
def model():
    return MLP(ModelConfig(input_dim=16, hidden_dims=(8, 6)))


def cfg(**kw):
    base = dict(episode=EpisodeSpec(2, 2, 2), meta=MetaConfig(beta=0.1, tasks_per_batch=2),
                rounds=2, local_batches=2, eval_tasks=4, seed=3)
    base.update(kw)
    return TrainingConfig(**base)


# -- fedavg ---------------------------------------------------------------------


def test_fedavg_examples():
    assert fedavg([const(5)], [7]).theta[0] == 5.0
    assert fedavg([const(2), const(4)], [1, 1]).theta[0] == 3.0
    assert fedavg([const(0), const(4)], [1, 3]).theta[0] == 3.0
    assert fedavg([const(0), const(4)], [1, 3]).alpha[0] == 3.0


def test_fedavg_single_client_is_bitwise_identity():
    p = MetaParams(np.array([-0.0, 1e-300, np.pi]), np.array([0.1, -0.0, 7.0]))
    out = fedavg([p], [13])
    assert out.flat().tobytes() == p.flat().tobytes()


@pytest.mark.parametrize("errors", [([], []), ([const(1)], [0]), ([const(1)], [-1]), ([const(1)], [1, 2]),
                                    ([const(1), const(1, n=2)], [1, 1])])
def test_fedavg_errors(errors):
    with pytest.raises(ValueError):
        fedavg(*errors)


@settings(max_examples=100, deadline=None)
@given(n=st.sampled_from([1, 2, 4, 8]), value=st.floats(-1e6, 1e6), w=st.integers(1, 1000))
def test_fedavg_identical_inputs_equal_weights(n, value, w):
    # bitwise only when the shares 1/n are exact binary fractions
    assert fedavg([const(value)] * n, [w] * n).theta[0] == value


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 6))
def test_fedavg_is_a_convex_combination_in_fixed_order(seed, n):
    rng = np.random.default_rng(seed)
    params = [MetaParams(rng.normal(size=4), rng.normal(size=4)) for _ in range(n)]
    weights = list(rng.integers(1, 100, size=n))
    ids = list(rng.permutation(n))
    out = fedavg(params, weights, ids)
    total = sum(weights)
    expected = sum(w / total * p.theta for w, p in zip(weights, params))
    np.testing.assert_allclose(out.theta, expected, rtol=0, atol=1e-12)
    assert abs(math.fsum(w / total for w in weights) - 1) <= 1e-12
    perm = rng.permutation(n)
    again = fedavg([params[i] for i in perm], [weights[i] for i in perm], [ids[i] for i in perm])
    assert again.flat().tobytes() == out.flat().tobytes()


# -- local and global rounds -------------------------------------------------------


def test_zero_local_batches_return_global(model, data):
    meta = initial_meta(model, cfg())
    out, trace = local_round(model, ClientState(0, data), meta, 0, stream(0, "x"), cfg())
    assert out is meta and trace == []


def test_identical_clients_identical_results(model, data):
    meta = initial_meta(model, cfg())
    a, _ = local_round(model, ClientState(0, data), meta, 3, stream(5, "c"), cfg())
    b, _ = local_round(model, ClientState(1, data), meta, 3, stream(5, "c"), cfg())
    assert a.flat().tobytes() == b.flat().tobytes()


def test_single_client_round_matches_local_result(model, data):
    config = cfg()
    meta = initial_meta(model, config)
    server, report = run_round(model, ServerState(meta, 0), [ClientState(0, data)], config)
    local, _ = local_round(model, ClientState(0, data), meta, config.local_batches,
                           stream(config.seed, "client", 0, 0), config)
    assert server.global_meta.flat().tobytes() == local.flat().tobytes()
    assert server.round_index == 1 and report.round_index == 1 and report.weights == [1.0]


def test_unbalanced_weights(model):
    ds = generate_synthetic(SyntheticSpec(examples_per_class=50, resolution=4, seed=2))
    parts = partition_clients(ds, (1, 2, 3, 4), 0)
    config = cfg(local_batches=1)
    _, report = run_round(model, ServerState(initial_meta(model, config)),
                          [ClientState(i, p) for i, p in enumerate(parts)], config)
    assert report.weights == pytest.approx([0.1, 0.2, 0.3, 0.4], abs=1e-15)
    assert report.sizes == [10, 20, 30, 40]


@pytest.mark.parametrize("learner,sigma,clip", [("metasgd", 0.0, math.inf), ("metadpsgd", 0.0, math.inf),
                                                ("metadpsgd", 0.5, 1.0), ("maml", 0.0, math.inf)])
def test_one_client_federation_equals_centralized(model, data, learner, sigma, clip):
    config = cfg(learner=learner, rounds=3, meta=MetaConfig(beta=0.1, tasks_per_batch=2, sigma=sigma,
                                                            clip_bound=clip))
    central = train_centralized(model, data, config)
    _, server = run_training(model, [ClientState(0, data)], config)
    assert server.global_meta.flat().tobytes() == central.flat().tobytes()


def test_replay_is_deterministic(model, data):
    parts = partition_clients(data, (1, 1), 0)
    clients = [ClientState(i, p) for i, p in enumerate(parts)]
    config = cfg(learner="metadpsgd", meta=MetaConfig(beta=0.1, tasks_per_batch=2, sigma=1.0, clip_bound=1.0))
    h1, _ = run_training(model, clients, config, {"test": data})
    h2, _ = run_training(model, clients, config, {"test": data})
    assert [r.checksum for r in h1] == [r.checksum for r in h2]
    assert [r.losses for r in h1] == [r.losses for r in h2]
    assert h1[-1].evals["test"].to_dict() == h2[-1].evals["test"].to_dict()


def test_thread_count_does_not_change_results(model, data):
    parts = partition_clients(data, (1, 1, 1, 1), 0)
    clients = [ClientState(i, p) for i, p in enumerate(parts)]
    serial, _ = run_training(model, clients, cfg(workers=1))
    threaded, _ = run_training(model, list(reversed(clients)), cfg(workers=4))
    assert [r.checksum for r in serial] == [r.checksum for r in threaded]


def test_zero_rounds_keep_initialization(model, data):
    config = cfg(rounds=0)
    init = initial_meta(model, config)
    history, server = run_training(model, [ClientState(0, data)], config, init=init)
    assert history == [] and server.global_meta is init and server.round_index == 0


def test_default_round_count():
    assert TrainingConfig().rounds == 100


def test_evaluation_cadence(model, data):
    history, _ = run_training(model, [ClientState(0, data)], cfg(rounds=5, eval_every=2), {"test": data})
    assert [bool(r.evals) for r in history] == [False, True, False, True, True]


def test_client_validation(model, data):
    with pytest.raises(ValueError):
        ClientState(0, data.subset([]))
    with pytest.raises(ValueError):
        run_round(model, ServerState(initial_meta(model, cfg())), [], cfg())
    with pytest.raises(ValueError):
        run_round(model, ServerState(initial_meta(model, cfg())), [ClientState(0, data), ClientState(0, data)], cfg())


def test_clients_only_touch_their_own_data(model, data, monkeypatch):
    parts = partition_clients(data, (1, 1, 1), 0)
    clients = [ClientState(i, p) for i, p in enumerate(parts)]
    current = threading.local()
    violations, calls = [], []
    real_local_round, real_sample = fed.local_round, fed.sample_episode

    def spy_local_round(model_, client, *args):
        current.client = client
        return real_local_round(model_, client, *args)

    def spy_sample(dataset, spec, rng):
        calls.append(1)
        if dataset is not current.client.dataset:
            violations.append(current.client.client_id)
        return real_sample(dataset, spec, rng)

    monkeypatch.setattr(fed, "local_round", spy_local_round)
    monkeypatch.setattr(fed, "sample_episode", spy_sample)
    real_fedavg = fed.fedavg
    seen_by_server = []

    def spy_fedavg(params, weights, ids=None):
        seen_by_server.extend(type(p) for p in params)
        return real_fedavg(params, weights, ids)

    monkeypatch.setattr(fed, "fedavg", spy_fedavg)
    run_training(model, clients, cfg(workers=3))
    assert calls and not violations
    assert set(seen_by_server) == {MetaParams}


def test_maml_keeps_constant_inner_rate(model, data):
    config = cfg(learner="maml", meta=MetaConfig(beta=0.1, tasks_per_batch=2, maml_inner_rate=0.07))
    _, server = run_training(model, [ClientState(0, data)], config)
    assert np.all(server.global_meta.alpha == 0.07)


# -- checkpoints ------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, model):
    meta = initial_meta(model, cfg())
    digest = model.config.digest()
    save_checkpoint(tmp_path / "a" / "x.ckpt", meta, digest, 17)
    loaded, r = load_checkpoint(tmp_path / "a" / "x.ckpt", digest)
    assert r == 17 and loaded.flat().tobytes() == meta.flat().tobytes()
    assert checksum(loaded) == checksum(meta)
    assert not list((tmp_path / "a").glob("*.tmp"))


def test_checkpoint_layout():
    blob = encode_checkpoint(MetaParams(np.array([1.0, 2.0]), np.array([0.5, 0.25])), bytes(range(32)), 3)
    assert blob[:8] == b"FMETACK\0"
    assert int.from_bytes(blob[8:12], "little") == 1
    assert int.from_bytes(blob[12:20], "little") == 3
    assert blob[20:52] == bytes(range(32))
    assert int.from_bytes(blob[52:60], "little") == 2
    assert np.frombuffer(blob[60:], "<f8").tolist() == [1.0, 2.0, 0.5, 0.25]
    assert len(blob) == 60 + 32


def test_checkpoint_errors():
    good = encode_checkpoint(const(1, 3), bytes(32), 0)
    with pytest.raises(CheckpointError):
        decode_checkpoint(good[:10])
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"XXXXXXXX" + good[8:])
    with pytest.raises(CheckpointError):
        decode_checkpoint(good[:8] + (2).to_bytes(4, "little") + good[12:])
    with pytest.raises(CheckpointError):
        decode_checkpoint(good[:-1])
    with pytest.raises(CheckpointError):
        decode_checkpoint(good, bytes([1]) * 32)
    with pytest.raises(ValueError):
        encode_checkpoint(const(1), b"short", 0)
