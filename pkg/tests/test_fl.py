import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridfl import data, fl, nn
from hybridfl.errors import PreconditionError, ShapeError, TransportError
from oracles import fedavg_reference

TINY = nn.Architecture(input_shape=(16, 16, 1), conv_filters=2, hidden=(4,))


def test_sample_all_when_c_is_one():
    cfg = fl.FLConfig(rounds=5, agents=10, select_fraction=1.0)
    ids = fl.agent_ids(10)
    for t in range(5):
        assert fl.sample_agents(cfg, t, ids) == tuple(ids)


def test_sample_ten_of_hundred():
    cfg = fl.FLConfig(rounds=3, agents=100, select_fraction=0.1)
    ids = fl.agent_ids(100)
    picks = [fl.sample_agents(cfg, t, ids) for t in range(3)]
    assert all(len(p) == len(set(p)) == 10 for p in picks)
    assert fl.sample_agents(cfg, 1, ids) == picks[1]
    assert len(set(picks)) > 1


def test_sample_rejects_round_out_of_range():
    cfg = fl.FLConfig(rounds=2, agents=3)
    with pytest.raises(PreconditionError):
        fl.sample_agents(cfg, 2, fl.agent_ids(3))


def test_per_round_is_ceil():
    assert fl.FLConfig(agents=30, select_fraction=1 / 3).per_round == 10
    assert fl.FLConfig(agents=10, select_fraction=0.25).per_round == 3
    assert fl.FLConfig(agents=10, corrupt_fraction=0.1).n_corrupt == 1


@pytest.mark.parametrize("bad", [
    dict(corrupt_fraction=1.5), dict(select_fraction=0.0), dict(rounds=0), dict(kappa=0), dict(agents=0),
])
def test_config_invariants(bad):
    with pytest.raises(ValueError):
        fl.FLConfig(**bad)


def test_fedavg_symmetric_cancellation():
    inc = fl.fedavg_oracle({"a": np.full(5, 2.0), "b": np.full(5, -2.0)}, {"a": 3, "b": 3}, 1.0)
    assert np.all(inc == 0.0)


def test_fedavg_hand_value():
    inc = fl.fedavg_oracle({"1": np.full(4, 4.0), "2": np.zeros(4)}, {"1": 100, "2": 300}, 1.0)
    np.testing.assert_array_equal(inc, np.ones(4))


def test_fedavg_single_agent_identity():
    d = np.random.default_rng(0).normal(size=50)
    np.testing.assert_array_equal(fl.fedavg_oracle({"a": d}, {"a": 7}, 1.0), d)


def test_fedavg_matches_coordinatewise_reference():
    rng = np.random.default_rng(1)
    ups = {f"k{i}": rng.normal(size=20) for i in range(5)}
    w = {k: int(rng.integers(1, 50)) for k in ups}
    np.testing.assert_allclose(fl.fedavg_oracle(ups, w, 0.5), fedavg_reference(ups, w, 0.5), rtol=1e-12)


def test_fedavg_shape_mismatch():
    with pytest.raises(ShapeError):
        fl.fedavg_oracle({"a": np.zeros(3), "b": np.zeros(4)}, {"a": 1, "b": 1}, 1.0)


def test_sign_majority_cases():
    ups = {"a": np.array([1.0, 1.0, -1.0]), "b": np.array([1.0, -1.0, -1.0]), "c": np.array([-1.0, 1.0, -1.0])}
    np.testing.assert_array_equal(fl.sign_agg_oracle(ups, 0.5), [0.5, 0.5, -0.5])


def test_sign_tie_rule_exhaustive_pairs():
    # every sign pair, including exact zeros, under "zero votes +1; zero sum resolves to +1"
    values = [-2.0, -0.0, 0.0, 3.0]
    for x, y in itertools.product(values, repeat=2):
        vx = 1 if x >= 0 else -1
        vy = 1 if y >= 0 else -1
        expected = 1.0 if vx + vy >= 0 else -1.0
        got = fl.sign_agg_oracle({"a": np.array([x]), "b": np.array([y])}, 1.0)
        assert got[0] == expected, (x, y)
    assert fl.sign_agg_oracle({"a": np.array([1.0]), "b": np.array([-1.0])}, 1.0)[0] == 1.0


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 30), st.floats(0.01, 5.0), st.integers(0, 2**31))
def test_oracle_properties(k, dim, eta, seed):
    rng = np.random.default_rng(seed)
    ups = {f"a{i}": rng.normal(size=dim) for i in range(k)}
    w = {key: int(rng.integers(1, 100)) for key in ups}
    s = fl.sign_agg_oracle(ups, eta)
    assert set(np.unique(np.abs(s))) == {eta}
    inc = fl.fedavg_oracle(ups, w, eta) / eta
    stack = np.stack(list(ups.values()))
    assert np.all(inc >= stack.min(axis=0) - 1e-12) and np.all(inc <= stack.max(axis=0) + 1e-12)


def test_local_update_quadratic_matches_manual_sgd():
    # one parameter, loss 0.5*a*(w - c)^2 per batch; grad = a*(w - c)
    arch = nn.Architecture(input_shape=(1, 1, 1), conv_filters=0, hidden=(), num_classes=2)
    assert arch.dim == 4
    a, c, lr = 2.0, 3.0, 0.1

    def quad(model, batch, rng):
        w = model.params
        grad = np.zeros_like(w)
        grad[0] = a * (w[0] - c)
        return 0.5 * a * (w[0] - c) ** 2, grad

    ds = nn.LabeledDataset(np.zeros((6, 1, 1, 1)), np.zeros(6, dtype=int))
    agent = fl.AgentSpec("a", ds)
    cfg = fl.FLConfig(rounds=1, agents=1, local_epochs=2, batch_size=4, lr=lr)
    delta = fl.local_update(agent, np.array([0.5, 0.0, 0.0, 0.0]), cfg, 0, arch, loss_fn=quad)
    w = 0.5
    for _ in range(4):  # 2 epochs x ceil(6/4) steps
        w = w - lr * a * (w - c)
    assert delta[0] == pytest.approx(w - 0.5, abs=1e-15)
    assert np.all(delta[1:] == 0.0)


def test_local_update_zero_epochs_is_zero():
    ds = data.synthetic_dataset(8, 0)
    cfg = fl.FLConfig(rounds=1, agents=1, local_epochs=0)
    d = fl.local_update(fl.AgentSpec("a", ds), fl.init_global(TINY, 0), cfg, 0, TINY)
    assert np.all(d == 0) and d.shape == (TINY.dim,)


def test_local_update_shape_check():
    cfg = fl.FLConfig(rounds=1, agents=1)
    with pytest.raises(ShapeError):
        fl.local_update(fl.AgentSpec("a", data.synthetic_dataset(4, 0)), np.zeros(3), cfg, 0, TINY)


def test_agent_spec_requires_matching_count():
    with pytest.raises(PreconditionError):
        fl.AgentSpec("a", data.synthetic_dataset(4, 0), sample_count=5)


def test_round_seed_independent_of_order():
    assert fl.round_seed(1, 2, "agent-03") == fl.round_seed(1, 2, "agent-03")
    assert fl.round_seed(1, 2, "agent-03") != fl.round_seed(1, 2, "agent-04")


def _agents(k, n=24, seed=0):
    parts = data.iid_split(data.synthetic_dataset(n * k, seed), k, seed)
    return [fl.AgentSpec(a, p) for a, p in zip(fl.agent_ids(k), parts)]


def test_single_agent_single_round():
    agents = _agents(1)
    cfg = fl.FLConfig(rounds=1, agents=1, batch_size=8, lr=0.1)
    (rec,) = fl.run_protocol(cfg, agents, fl.FEDAVG, arch=TINY)
    delta = rec.updates["agent-00"]
    np.testing.assert_array_equal(rec.global_after, rec.global_before + delta)


def test_run_protocol_records_and_replay():
    agents = _agents(4)
    cfg = fl.FLConfig(rounds=3, agents=4, select_fraction=0.5, batch_size=8, lr=0.1, local_epochs=1)
    for agg in fl.AGGREGATORS:
        recs = fl.run_protocol(cfg, agents, agg, arch=TINY)
        for rec in recs:
            assert len(rec.selected) == math.ceil(0.5 * 4)
            assert set(rec.updates) == set(rec.selected)
        traj = fl.replay(recs)
        for rec, w in zip(recs, traj[1:]):
            np.testing.assert_array_equal(rec.global_after, w)


def test_run_protocol_is_deterministic():
    agents = _agents(3)
    cfg = fl.FLConfig(rounds=2, agents=3, batch_size=8, lr=0.1, seed=5)
    a = fl.run_protocol(cfg, agents, fl.FEDAVG, arch=TINY)
    b = fl.run_protocol(cfg, agents, fl.FEDAVG, arch=TINY)
    np.testing.assert_array_equal(a[-1].global_after, b[-1].global_after)


def test_run_protocol_wraps_transport_errors():
    class Broken:
        def aggregate_round(self, t, updates, weights, aggregator, eta):
            if t == 1:
                raise PreconditionError("boom")
            return fl.oracle_increment(aggregator, updates, weights, eta)

        def after_round(self, rec):
            pass

    cfg = fl.FLConfig(rounds=3, agents=2, batch_size=8, lr=0.1, local_epochs=1)
    with pytest.raises(TransportError) as err:
        fl.run_protocol(cfg, _agents(2), fl.FEDAVG, transport=Broken(), arch=TINY)
    assert err.value.round_index == 1
    assert "round 1" in str(err.value)


def test_run_protocol_agent_count_precondition():
    with pytest.raises(PreconditionError):
        fl.run_protocol(fl.FLConfig(rounds=1, agents=3), _agents(2), fl.FEDAVG, arch=TINY)


def test_save_load_rounds_bit_exact(tmp_path):
    cfg = fl.FLConfig(rounds=2, agents=3, select_fraction=0.6, batch_size=8, lr=0.1, local_epochs=1)
    recs = fl.run_protocol(cfg, _agents(3), fl.FEDAVG, arch=TINY)
    fl.save_rounds(tmp_path / "a.npz", recs)
    fl.save_rounds(tmp_path / "b.npz", recs)
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    back = fl.load_rounds(tmp_path / "a.npz")
    for x, y in zip(recs, back):
        assert x.selected == y.selected and x.sample_counts == y.sample_counts
        for k in x.selected:
            np.testing.assert_array_equal(x.updates[k], y.updates[k])
        np.testing.assert_array_equal(x.global_before, y.global_before)
        np.testing.assert_array_equal(x.global_after, y.global_after)
