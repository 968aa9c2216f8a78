import numpy as np
import pytest

from hybridfl import codec, fl
from hybridfl import ledger as L
from hybridfl.errors import IntegrityError, PreconditionError, TransportError


def _ledger():
    led = L.Ledger({"a": "ta", "b": "tb", "srv": "ts"})
    led.create_channel("ch", ["a", "b", "srv"])
    return led


def _writer(key, value):
    def program(ctx):
        ctx.put(key, value)
    return program


def test_same_key_same_snapshot_one_commit_one_conflict():
    led = _ledger()
    p1 = led.simulate("ch", "a", "ta", _writer("k", "1"))
    p2 = led.simulate("ch", "b", "tb", _writer("k", "2"))
    r1, r2 = led.commit(p1), led.commit(p2)
    assert (r1.status, r2.status) == (L.COMMITTED, L.MVCC_CONFLICT)
    assert led.channels["ch"].get("k") == "1"
    assert led.channels["ch"].version("k") == 1


def test_disjoint_keys_both_commit():
    led = _ledger()
    p1 = led.simulate("ch", "a", "ta", _writer("A00001", "x"))
    p2 = led.simulate("ch", "b", "tb", _writer("B00001", "y"))
    assert led.commit(p1).ok and led.commit(p2).ok


def test_read_only_never_conflicts():
    led = _ledger()
    led.submit("ch", "a", "ta", _writer("k", "1"))
    reader = led.simulate("ch", "b", "tb", lambda ctx: ctx.get("k"))
    led.submit("ch", "a", "ta", _writer("k", "2"))
    res = led.commit(reader)
    assert res.ok and res.value == "1" and res.writes == ()


def test_conflict_leaves_ledger_unchanged():
    led = _ledger()
    p1 = led.simulate("ch", "a", "ta", _writer("k", "1"))
    p2 = led.simulate("ch", "b", "tb", _writer("k", "2"))
    led.commit(p1)
    before = led.state_digest()
    assert led.commit(p2).status == L.MVCC_CONFLICT
    assert led.state_digest() == before


def test_history_is_queryable_and_versions_increment():
    led = _ledger()
    for v in "abc":
        led.submit("ch", "a", "ta", _writer("k", v))
    ch = led.channels["ch"]
    assert ch.version("k") == 3
    assert [ch.get("k", i) for i in (1, 2, 3)] == ["a", "b", "c"]


def test_unknown_channel_and_bad_credential_are_rejected():
    led = _ledger()
    assert led.submit("nope", "a", "ta", _writer("k", "1")).status == L.REJECTED
    assert led.submit("ch", "a", "wrong", _writer("k", "1")).status == L.REJECTED
    assert led.submit("ch", "mallory", None, _writer("k", "1")).status == L.REJECTED
    assert led.channels["ch"].get("k") is None


def test_non_member_is_rejected():
    led = _ledger()
    led.create_channel("private", ["a"])
    assert led.submit("private", "b", "tb", _writer("k", "1")).status == L.REJECTED


def test_serial_replay_on_random_concurrent_workload():
    led = _ledger()
    sched = L.Scheduler(3)
    for _ in range(20):
        subs = [("ch", w, t, _writer(f"k{int(i) % 3}", f"{w}{i}"), "w")
                for i, (w, t) in enumerate([("a", "ta"), ("b", "tb")] * 3)]
        sched.run_interleaved(led, subs)
    replayed = L.serial_replay(led)
    ch = led.channels["ch"]
    assert replayed["ch"] == {k: (ch.get(k), ch.version(k)) for k in ch.keys()}


def test_serial_replay_detects_forged_history():
    led = _ledger()
    led.submit("ch", "a", "ta", _writer("k", "1"))
    led.submit("ch", "a", "ta", lambda ctx: ctx.put("j", ctx.get("k")))
    led.channels["ch"].log[-1] = led.channels["ch"].log[-1].__class__(
        **{**led.channels["ch"].log[-1].__dict__, "reads": (("ch", "k", 7),)})
    with pytest.raises(IntegrityError):
        L.serial_replay(led)


# chaincode

WORKERS = ["A", "B", "C", "D"]


def _updates(dim=40, seed=0, workers=WORKERS):
    rng = np.random.default_rng(seed)
    return {w: rng.normal(size=dim).astype(np.float32).astype(np.float64) for w in workers}


def _run_epoch(cc, epoch, ups, kind=codec.FLOAT32, counts=None, scheduler=None, chunk=None):
    chunk = chunk or cc.chunk_chars
    counts = counts or {w: 10 + i for i, w in enumerate(sorted(ups))}
    cc.open_epoch(epoch, list(ups))
    batches = {w: codec.make_batches(w, epoch, ups[w], kind, chunk, counts[w]) for w in ups}
    up = L.Uploader(cc, scheduler or L.Scheduler(0))
    up.upload_round(epoch, batches)
    return up, counts


def test_sharded_keys_are_one_based_and_fixed_width():
    cc = L.FLChaincode.bootstrap(["A"], chunk_chars=32)
    _run_epoch(cc, 0, {"A": np.arange(20, dtype=np.float64)})  # 160 hex chars -> 5 shards
    keys = cc.ledger.channels["ch-A"].keys("A0")
    assert keys[:3] == ["A00001", "A00002", "A00003"]
    assert len(keys) == 5


def test_counter_reaches_expected_and_enables_aggregation():
    cc = L.FLChaincode.bootstrap(WORKERS)
    _run_epoch(cc, 0, _updates())
    st = cc.state(0)
    assert st.upload_counter == 4 and st.aggregation_enabled


def test_duplicate_upload_same_epoch_rejected():
    cc = L.FLChaincode.bootstrap(["A"])
    ups = {"A": np.ones(8)}
    _run_epoch(cc, 0, ups)
    batch = codec.make_batches("A", 0, ups["A"], codec.FLOAT32, cc.chunk_chars, 1)[0]
    res = cc.ledger.submit(*cc.upload_submission("A", batch))
    assert res.status == L.REJECTED and "already uploaded" in res.detail


@pytest.mark.parametrize("mutate", [
    lambda b: b.__class__(**{**b.__dict__, "payload": b.payload[:-2]}),
    lambda b: b.__class__(**{**b.__dict__, "payload": "Z" * len(b.payload)}),
    lambda b: b.__class__(**{**b.__dict__, "kind": "float16"}),
    lambda b: b.__class__(**{**b.__dict__, "batch_count": b.batch_count + 1}),
])
def test_malformed_batch_rejected(mutate):
    cc = L.FLChaincode.bootstrap(["A"])
    cc.open_epoch(0, ["A"])
    batch = codec.make_batches("A", 0, np.ones(8), codec.FLOAT32, cc.chunk_chars, 1)[0]
    res = cc.ledger.submit(*cc.upload_submission("A", mutate(batch)))
    assert res.status == L.REJECTED


def test_upload_with_wrong_credential_rejected():
    cc = L.FLChaincode.bootstrap(["A", "B"])
    cc.open_epoch(0, ["A"])
    batch = codec.make_batches("A", 0, np.ones(8), codec.FLOAT32, cc.chunk_chars, 1)[0]
    assert cc.ledger.submit(*cc.upload_submission("A", batch, token="forged")).status == L.REJECTED


def test_counter_safety_blocks_partial_epoch():
    cc = L.FLChaincode.bootstrap(WORKERS)
    ups = _updates()
    cc.open_epoch(0, WORKERS)
    partial = {w: codec.make_batches(w, 0, ups[w], codec.FLOAT32, cc.chunk_chars, 5) for w in WORKERS[:3]}
    L.Uploader(cc, L.Scheduler(0)).upload_round(0, partial)
    assert cc.state(0).upload_counter == 3
    with pytest.raises(PreconditionError):
        cc.aggregate(0, fl.FEDAVG, 1.0)
    assert cc.ledger.channels[L.AGG_CHANNEL].get(L.global_key(0)) is None


def test_fedavg_on_chain_matches_oracle_with_conflicts():
    cc = L.FLChaincode.bootstrap(WORKERS, chunk_chars=64)
    ups = _updates(dim=100)
    _, counts = _run_epoch(cc, 0, ups, scheduler=L.Scheduler(1, conflict_rate=0.5))
    inc = cc.aggregate(0, fl.FEDAVG, 0.7)
    np.testing.assert_array_equal(inc, fl.fedavg_oracle(ups, counts, 0.7))
    np.testing.assert_array_equal(cc.global_increment(0), inc)


def test_sign_on_chain_matches_oracle_exactly_with_ties():
    cc = L.FLChaincode.bootstrap(WORKERS, chunk_chars=8)
    ups = _updates(dim=33, seed=2)
    ups["A"][:5] = 0.0  # zero coordinates vote +1
    ups["B"][5:10] = -ups["C"][5:10]
    _run_epoch(cc, 0, ups, kind=codec.SIGN_BITS)
    inc = cc.aggregate(0, fl.SIGNSGD, 0.25)
    np.testing.assert_array_equal(inc, fl.sign_agg_oracle(ups, 0.25))


def test_single_worker_aggregate_is_its_update():
    cc = L.FLChaincode.bootstrap(["A"])
    ups = _updates(workers=["A"])
    _run_epoch(cc, 0, ups)
    np.testing.assert_array_equal(cc.aggregate(0, fl.FEDAVG, 1.0), ups["A"])


def test_aggregation_emits_completion_event():
    cc = L.FLChaincode.bootstrap(["A", "B"])
    events = []
    cc.ledger.subscribe(events.append)
    _run_epoch(cc, 0, _updates(workers=["A", "B"]))
    cc.aggregate(0, fl.FEDAVG, 1.0)
    assert events[-1]["event"] == "aggregation-complete" and events[-1]["epoch"] == 0
    with pytest.raises(TransportError):
        cc.aggregate(0, fl.FEDAVG, 1.0)  # epoch already closed


def test_cache_drain_with_half_conflicts_equals_conflict_free_run():
    ups = _updates(dim=300)
    ref = L.FLChaincode.bootstrap(WORKERS, chunk_chars=100)
    _run_epoch(ref, 0, ups)
    for seed in range(5):
        cc = L.FLChaincode.bootstrap(WORKERS, chunk_chars=100)
        up, _ = _run_epoch(cc, 0, ups, scheduler=L.Scheduler(seed, conflict_rate=0.5))
        assert cc.ledger.state() == ref.ledger.state()
        assert set(up.calls.values()) == {1}
        assert len(up.calls) == 4 * codec.chunk_count(300 * 8, 100)
        conflicts = [r for r in cc.ledger.commit_log() if r.status == L.MVCC_CONFLICT]
        assert conflicts  # the cache really did the work


def test_empty_cache_drain_is_noop():
    cc = L.FLChaincode.bootstrap(["A"])
    cache = L.CacheChaincode(cc, L.Scheduler(0))
    before = cc.ledger.state_digest()
    assert cache.drain("ch-A") == [] and cache.drain_all() == []
    assert cc.ledger.state_digest() == before


def test_cache_drain_retry_limit_escalates():
    cc = L.FLChaincode.bootstrap(["A"], chunk_chars=16)
    cc.open_epoch(0, ["A"])
    cache = L.CacheChaincode(cc, L.Scheduler(0, conflict_rate=0.99), max_retries=2)
    for b in codec.make_batches("A", 0, np.ones(8), codec.FLOAT32, 16, 1):
        cache.put("A", b)
    with pytest.raises(TransportError):
        cache.drain("ch-A")
    assert cache.pending("ch-A") > 0


def test_recomputed_hash_matches_worker_digest_and_chunk_size():
    ups = _updates(dim=64)
    digests = set()
    for chunk in (16, 100, codec.DEFAULT_CHUNK_CHARS):
        cc = L.FLChaincode.bootstrap(WORKERS, chunk_chars=chunk)
        _run_epoch(cc, 0, ups)
        got = cc.recompute_worker_hash("B", 0)
        assert got == codec.hash_params(ups["B"], codec.FLOAT32)
        digests.add(got)
    assert len(digests) == 1


def test_tampered_value_changes_hash():
    cc = L.FLChaincode.bootstrap(["A"], chunk_chars=32)
    ups = _updates(dim=16, workers=["A"])
    _run_epoch(cc, 0, ups)
    honest = cc.recompute_worker_hash("A", 0)
    val = cc.ledger.channels["ch-A"].get("A00002", 1)
    cc.ledger.tamper("ch-A", "A00002", 1, ("0" if val[0] != "0" else "1") + val[1:])
    assert cc.recompute_worker_hash("A", 0) != honest


def test_missing_shard_names_worker_and_batch():
    cc = L.FLChaincode.bootstrap(["A"], chunk_chars=32)
    _run_epoch(cc, 0, _updates(dim=16, workers=["A"]))
    del cc.ledger.channels["ch-A"].history["A00003"]
    with pytest.raises(IntegrityError, match="A: missing shard batchIndex=2"):
        cc.recompute_worker_hash("A", 0)


def test_single_key_scheme_contends_and_sharded_does_not():
    ups = _updates(dim=200)
    sharded = L.FLChaincode.bootstrap(WORKERS, chunk_chars=80)
    single = L.FLChaincode.bootstrap(WORKERS, chunk_chars=80, key_scheme="single", shared_channel="shared")
    _run_epoch(sharded, 0, ups)
    _run_epoch(single, 0, ups)
    count = lambda cc: sum(r.status == L.MVCC_CONFLICT for r in cc.ledger.commit_log())
    assert count(sharded) == 0
    assert count(single) > 0
    for w in WORKERS:
        assert single.recompute_worker_hash(w, 0) == sharded.recompute_worker_hash(w, 0)


def test_persistence_round_trip(tmp_path):
    cc = L.FLChaincode.bootstrap(WORKERS, chunk_chars=50)
    _run_epoch(cc, 0, _updates(dim=30), scheduler=L.Scheduler(4, conflict_rate=0.3))
    cc.aggregate(0, fl.FEDAVG, 1.0)
    cc.ledger.save(tmp_path / "led")
    back = L.Ledger.load(tmp_path / "led", cc.ledger.membership)
    assert back.state_digest() == cc.ledger.state_digest()
    assert back.commit_log_lines() == cc.ledger.commit_log_lines()
    L.serial_replay(back)


def test_commit_log_lines_are_json_records():
    import json
    led = _ledger()
    led.submit("ch", "a", "ta", _writer("k", "1"))
    rec = json.loads(led.commit_log_lines().splitlines()[0])
    assert {"tx_id", "channel", "status", "reads", "writes"} <= set(rec)
