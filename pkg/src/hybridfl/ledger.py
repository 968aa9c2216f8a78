"""Simulated permissioned ledger: versioned key-value channels with MVCC commits.

Transactions are Python callables run against a snapshot (simulation). Every
``get`` and every ``put`` records the version seen for that key; at commit the
transaction is rejected with an mvcc-conflict if any of those versions moved.
Consensus is not modelled: each channel is one logical state machine with an
ordered commit log.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import codec
from .errors import IntegrityError, PreconditionError, TransportError

COMMITTED = "committed"
MVCC_CONFLICT = "mvcc-conflict"
REJECTED = "rejected"

SERVER = "server"
AGG_CHANNEL = "aggregation"
KEY_DIGITS = 5


class Rejected(Exception):
    """Raised by chaincode during simulation to refuse a transaction."""


@dataclass(frozen=True)
class TxResult:
    tx_id: str
    channel: str
    status: str
    reads: tuple = ()  # ((channel, key, version), ...)
    writes: tuple = ()  # ((key, new_version), ...) when committed, else (key,)
    detail: str | None = None
    value: object = field(default=None, compare=False, repr=False)
    seq: int = 0

    @property
    def ok(self):
        return self.status == COMMITTED


@dataclass
class Proposal:
    """A simulated but not yet committed transaction."""
    tx_id: str
    channel: str
    creator: str
    name: str
    reads: dict  # (channel, key) -> version
    writes: dict  # key -> value
    value: object = None


@dataclass
class CommitRecord:
    seq: int
    tx_id: str
    channel: str
    creator: str
    name: str
    status: str
    reads: tuple
    writes: tuple  # ((key, version), ...)
    detail: str | None = None

    def to_dict(self):
        return {
            "seq": self.seq, "tx_id": self.tx_id, "channel": self.channel,
            "creator": self.creator, "name": self.name, "status": self.status,
            "reads": [list(r) for r in self.reads],
            "writes": [list(w) for w in self.writes],
            "detail": self.detail,
        }


class Channel:
    def __init__(self, name, members):
        self.name = name
        self.members = frozenset(members)
        self.history = {}  # key -> [value at version 1, value at version 2, ...]
        self.log = []

    def version(self, key):
        return len(self.history.get(key, ()))

    def get(self, key, version=None):
        values = self.history.get(key)
        if not values:
            return None
        if version is None:
            return values[-1]
        if not 1 <= version <= len(values):
            return None
        return values[version - 1]

    def keys(self, prefix=""):
        return sorted(k for k in self.history if k.startswith(prefix))

    def state(self):
        """Latest (value, version) per key."""
        return {k: (v[-1], len(v)) for k, v in sorted(self.history.items())}


class TxContext:
    """What a chaincode program sees while it is simulated."""

    def __init__(self, ledger, channel, creator):
        self._ledger = ledger
        self.channel = channel
        self.creator = creator
        self.reads = {}
        self.writes = {}

    def _channel(self, name):
        ch = self._ledger.channels[name or self.channel]
        if self.creator not in ch.members:
            raise Rejected(f"{self.creator} is not a member of channel {ch.name}")
        return ch

    def get(self, key, channel=None):
        ch = self._channel(channel)
        if ch.name == self.channel and key in self.writes:
            return self.writes[key]
        self.reads.setdefault((ch.name, key), ch.version(key))
        return ch.get(key)

    def get_version(self, key, version, channel=None):
        """A historical value. Old versions are immutable, so this adds no read dependency."""
        return self._channel(channel).get(key, version)

    def keys(self, prefix, channel=None):
        """Keys with ``prefix``; each one found is added to the read-set (no phantom protection)."""
        ch = self._channel(channel)
        found = ch.keys(prefix)
        for k in found:
            self.reads.setdefault((ch.name, k), ch.version(k))
        return found

    def put(self, key, value):
        if not isinstance(value, str):
            raise TypeError("ledger values are text")
        ch = self._ledger.channels[self.channel]
        self.reads.setdefault((ch.name, key), ch.version(key))
        self.writes[key] = value


class Ledger:
    def __init__(self, membership):
        self.membership = dict(membership)  # identity -> credential token
        self.channels = {}
        self._seq = 0
        self._tx = 0
        self._subscribers = []

    def create_channel(self, name, members):
        if name in self.channels:
            raise PreconditionError(f"channel {name} exists")
        unknown = set(members) - set(self.membership)
        if unknown:
            raise PreconditionError(f"unregistered channel members: {sorted(unknown)}")
        self.channels[name] = Channel(name, members)
        return self.channels[name]

    def subscribe(self, callback):
        self._subscribers.append(callback)

    def emit(self, event):
        for cb in list(self._subscribers):
            cb(dict(event))

    def _next_tx(self):
        self._tx += 1
        return f"tx{self._tx:08d}"

    def _record(self, channel, creator, name, tx_id, status, reads, writes, detail):
        self._seq += 1
        rec = CommitRecord(self._seq, tx_id, channel, creator, name, status, reads, writes, detail)
        if channel in self.channels:
            self.channels[channel].log.append(rec)
        return rec

    def _reject(self, channel, creator, name, detail, tx_id=None):
        tx_id = tx_id or self._next_tx()
        rec = self._record(channel, creator, name, tx_id, REJECTED, (), (), detail)
        return TxResult(tx_id, channel, REJECTED, detail=detail, seq=rec.seq)

    def simulate(self, channel, creator, token, program, name="tx"):
        """Run ``program(ctx)`` on the current snapshot. Returns a Proposal or a rejected TxResult."""
        if channel not in self.channels:
            return self._reject(channel, creator, name, f"unknown channel {channel}")
        if self.membership.get(creator) is None or self.membership.get(creator) != token:
            return self._reject(channel, creator, name, "missing or invalid credential")
        if creator not in self.channels[channel].members:
            return self._reject(channel, creator, name, f"{creator} is not a member of {channel}")
        ctx = TxContext(self, channel, creator)
        tx_id = self._next_tx()
        try:
            value = program(ctx)
        except Rejected as exc:
            return self._reject(channel, creator, name, str(exc), tx_id)
        return Proposal(tx_id, channel, creator, name, dict(ctx.reads), dict(ctx.writes), value)

    def commit(self, proposal, inject_conflict=False):
        """Validate the read-set and apply the write-set atomically, or discard."""
        if isinstance(proposal, TxResult):
            return proposal
        reads = tuple((c, k, v) for (c, k), v in sorted(proposal.reads.items()))
        # a read-only transaction changes nothing, so it cannot conflict
        read_only = not proposal.writes
        stale = [] if read_only else [(c, k) for c, k, v in reads if self.channels[c].version(k) != v]
        if stale or (inject_conflict and not read_only):
            detail = "injected conflict" if not stale else f"stale read of {stale[0][0]}/{stale[0][1]}"
            rec = self._record(proposal.channel, proposal.creator, proposal.name, proposal.tx_id,
                               MVCC_CONFLICT, reads, tuple((k,) for k in sorted(proposal.writes)), detail)
            return TxResult(proposal.tx_id, proposal.channel, MVCC_CONFLICT, reads,
                            tuple(sorted(proposal.writes)), detail, seq=rec.seq)
        ch = self.channels[proposal.channel]
        writes = []
        for key in sorted(proposal.writes):
            ch.history.setdefault(key, []).append(proposal.writes[key])
            writes.append((key, ch.version(key)))
        writes = tuple(writes)
        rec = self._record(proposal.channel, proposal.creator, proposal.name, proposal.tx_id,
                           COMMITTED, reads, writes, None)
        return TxResult(proposal.tx_id, proposal.channel, COMMITTED, reads, writes, None,
                        proposal.value, rec.seq)

    def submit(self, channel, creator, token, program, name="tx"):
        return self.commit(self.simulate(channel, creator, token, program, name))

    def commit_log(self):
        """All commit records across channels, in global commit order."""
        recs = [r for ch in self.channels.values() for r in ch.log]
        return sorted(recs, key=lambda r: r.seq)

    def commit_log_lines(self):
        return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in self.commit_log())

    def state(self):
        return {name: ch.state() for name, ch in sorted(self.channels.items())}

    def state_digest(self):
        h = hashlib.sha256()
        for name, ch in sorted(self.channels.items()):
            for key, values in sorted(ch.history.items()):
                for v, value in enumerate(values, 1):
                    h.update(f"{name}\x00{key}\x00{v}\x00".encode())
                    h.update(hashlib.sha256(value.encode()).digest())
        return h.hexdigest()

    def tamper(self, channel, key, version, value):
        """Fault injection for audit fixtures: overwrite a committed value in place."""
        values = self.channels[channel].history.get(key)
        if not values or not 1 <= version <= len(values):
            raise PreconditionError(f"no {channel}/{key} at version {version}")
        values[version - 1] = value

    # persistence: values in one blob, everything else as JSON lines
    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        offset = 0
        index = []
        with open(os.path.join(directory, "values.bin"), "wb") as blob:
            for name, ch in sorted(self.channels.items()):
                for key, values in sorted(ch.history.items()):
                    for v, value in enumerate(values, 1):
                        raw, enc = _pack_value(value)
                        blob.write(raw)
                        index.append({"channel": name, "key": key, "version": v, "encoding": enc,
                                      "offset": offset, "length": len(raw)})
                        offset += len(raw)
        with open(os.path.join(directory, "index.jsonl"), "w") as fh:
            for row in index:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        with open(os.path.join(directory, "channels.json"), "w") as fh:
            json.dump({n: sorted(ch.members) for n, ch in sorted(self.channels.items())},
                      fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(os.path.join(directory, "commits.jsonl"), "w") as fh:
            fh.write(self.commit_log_lines())

    @classmethod
    def load(cls, directory, membership=None):
        def need(name):
            path = os.path.join(directory, name)
            if not os.path.exists(path):
                raise IntegrityError(f"missing ledger file {path}")
            return path

        with open(need("channels.json")) as fh:
            chans = json.load(fh)
        members = set().union(*chans.values()) if chans else set()
        ledger = cls(membership or {m: None for m in members})
        for name, mem in chans.items():
            ledger.channels[name] = Channel(name, mem)
        with open(need("values.bin"), "rb") as blob:
            data = blob.read()
        with open(need("index.jsonl")) as fh:
            for line in fh:
                row = json.loads(line)
                raw = data[row["offset"]:row["offset"] + row["length"]]
                values = ledger.channels[row["channel"]].history.setdefault(row["key"], [])
                if row["version"] != len(values) + 1:
                    raise IntegrityError(f"ledger index out of order at {row['channel']}/{row['key']}")
                values.append(_unpack_value(raw, row["encoding"]))
        with open(need("commits.jsonl")) as fh:
            for line in fh:
                d = json.loads(line)
                rec = CommitRecord(d["seq"], d["tx_id"], d["channel"], d["creator"], d["name"],
                                   d["status"], tuple(tuple(r) for r in d["reads"]),
                                   tuple(tuple(w) for w in d["writes"]), d["detail"])
                if rec.channel in ledger.channels:
                    ledger.channels[rec.channel].log.append(rec)
                ledger._seq = max(ledger._seq, rec.seq)
        return ledger


def _pack_value(value):
    # hex payloads are stored as their bytes; halves the on-disk size
    if len(value) % 2 == 0 and len(value) >= 64 and codec.valid_chunk_alphabet(value, codec.FLOAT32):
        return bytes.fromhex(value), "hex"
    return value.encode(), "utf8"


def _unpack_value(raw, encoding):
    return raw.hex() if encoding == "hex" else raw.decode()


def serial_replay(ledger):
    """Re-apply committed write-sets in commit order and check every read-set.

    Returns the replayed per-channel state; raises IntegrityError if the history
    is not equivalent to that serial order.
    """
    history = {name: {} for name in ledger.channels}
    for rec in ledger.commit_log():
        if rec.status != COMMITTED or not rec.writes:
            continue
        for c, k, v in rec.reads:
            if len(history[c].get(k, ())) != v:
                raise IntegrityError(f"{rec.tx_id}: read {c}/{k}@{v} not serializable")
        ch = ledger.channels[rec.channel]
        for k, v in rec.writes:
            values = history[rec.channel].setdefault(k, [])
            if v != len(values) + 1:
                raise IntegrityError(f"{rec.tx_id}: write {k}@{v} skips a version")
            values.append(ch.get(k, v))
    return {name: {k: (vals[-1], len(vals)) for k, vals in sorted(h.items())}
            for name, h in sorted(history.items())}


class Scheduler:
    """Seeded interleaving of concurrent submissions plus optional synthetic conflicts."""

    def __init__(self, seed, conflict_rate=0.0):
        if not 0.0 <= conflict_rate < 1.0:
            raise PreconditionError("conflict_rate must be in [0, 1)")
        self.seed = seed
        self.conflict_rate = conflict_rate
        self.rng = np.random.default_rng([seed, 0x5C4ED])

    def inject(self):
        return self.conflict_rate > 0 and self.rng.random() < self.conflict_rate

    def run_block(self, ledger, submissions):
        """Simulate every submission on the same snapshot, then commit in a seeded order.

        ``submissions`` is a list of (channel, creator, token, program, name).
        Results come back in submission order.
        """
        proposals = [ledger.simulate(*s) for s in submissions]
        results = [None] * len(proposals)
        for i in self.rng.permutation(len(proposals)):
            results[i] = ledger.commit(proposals[i], inject_conflict=self.inject())
        return results

    def run_interleaved(self, ledger, submissions):
        """Random interleaving of simulate/commit steps, each simulate before its commit."""
        n = len(submissions)
        steps = np.repeat(np.arange(n), 2)[self.rng.permutation(2 * n)]
        proposals = [None] * n
        results = [None] * n
        for i in steps:
            if proposals[i] is None:
                proposals[i] = ledger.simulate(*submissions[i])
            else:
                results[i] = ledger.commit(proposals[i], inject_conflict=self.inject())
        return results


@dataclass(frozen=True)
class ChaincodeState:
    epoch: int
    upload_counter: int
    expected: frozenset
    received: frozenset

    @property
    def aggregation_enabled(self):
        return self.received == self.expected


def shard_key(worker_id, batch_index):
    """``A00001`` for worker ``A`` batch 0: 1-based, fixed width so key order is batch order."""
    return f"{worker_id}{batch_index + 1:0{KEY_DIGITS}d}"


def manifest_key(worker_id, epoch):
    return f"MANIFEST:{worker_id}:{epoch:0{KEY_DIGITS}d}"


def global_key(epoch):
    return f"GLOBAL{epoch:0{KEY_DIGITS}d}"


def epoch_key(epoch):
    return f"EPOCH{epoch:0{KEY_DIGITS}d}"


def worker_channel(worker_id):
    return f"ch-{worker_id}"


def _json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


class FLChaincode:
    """Upload, completion and aggregation logic on top of a Ledger.

    ``key_scheme="sharded"`` writes one key per (worker, batch). ``"single"``
    keeps a worker's whole upload under one JSON key and exists to show the
    contention the sharded scheme avoids.
    """

    def __init__(self, ledger, tokens, chunk_chars=codec.DEFAULT_CHUNK_CHARS, key_scheme="sharded",
                 shared_channel=None):
        if key_scheme not in ("sharded", "single"):
            raise PreconditionError(f"unknown key scheme {key_scheme!r}")
        self.ledger = ledger
        self.tokens = dict(tokens)
        self.chunk_chars = chunk_chars
        self.key_scheme = key_scheme
        self.shared_channel = shared_channel

    @classmethod
    def bootstrap(cls, workers, seed=0, shared_channel=None, **kwargs):
        """Fresh ledger with a membership registry, one channel per worker and an aggregation channel."""
        tokens = {w: hashlib.sha256(f"{seed}:{w}".encode()).hexdigest()[:16] for w in workers}
        tokens[SERVER] = hashlib.sha256(f"{seed}:{SERVER}".encode()).hexdigest()[:16]
        ledger = Ledger(tokens)
        if shared_channel:
            ledger.create_channel(shared_channel, list(workers) + [SERVER])
        else:
            for w in workers:
                ledger.create_channel(worker_channel(w), [w, SERVER])
        ledger.create_channel(AGG_CHANNEL, [SERVER])
        return cls(ledger, tokens, shared_channel=shared_channel, **kwargs)

    def channel_of(self, worker_id):
        return self.shared_channel or worker_channel(worker_id)

    def _upload_key(self, worker_id, batch_index):
        if self.key_scheme == "single":
            return "PARAMS"
        return shard_key(worker_id, batch_index)

    # epoch lifecycle
    def open_epoch(self, epoch, expected):
        expected = sorted(expected)

        def program(ctx):
            if ctx.get(epoch_key(epoch)) is not None:
                raise Rejected(f"epoch {epoch} already opened")
            ctx.put(epoch_key(epoch), _json({"epoch": epoch, "expected": expected, "status": "open"}))

        res = self.ledger.submit(AGG_CHANNEL, SERVER, self.tokens[SERVER], program, "open-epoch")
        if not res.ok:
            raise TransportError(f"open epoch: {res.detail}", epoch)
        for ch in sorted({self.channel_of(w) for w in expected}):
            def mark(ctx):
                ctx.put("EPOCH", str(epoch))
            res = self.ledger.submit(ch, SERVER, self.tokens[SERVER], mark, "open-epoch")
            if not res.ok:
                raise TransportError(f"open epoch on {ch}: {res.detail}", epoch)
        return res

    def _epoch_info(self, epoch):
        raw = self.ledger.channels[AGG_CHANNEL].get(epoch_key(epoch))
        if raw is None:
            raise PreconditionError(f"epoch {epoch} was never opened")
        return json.loads(raw)

    # uploads
    def upload_submission(self, worker_id, batch, token=None):
        """(channel, creator, token, program, name) for one WireBatch upload."""
        chunk_chars = self.chunk_chars
        key = self._upload_key(worker_id, batch.batch_index)
        single = self.key_scheme == "single"

        def program(ctx):
            if batch.worker_id != worker_id:
                raise Rejected("batch worker id does not match the submitter")
            if ctx.get("EPOCH") != str(batch.epoch):
                raise Rejected(f"epoch {batch.epoch} is not open")
            if ctx.get(manifest_key(worker_id, batch.epoch)) is not None:
                raise Rejected(f"{worker_id} already uploaded for epoch {batch.epoch}")
            _check_batch(batch, chunk_chars)
            if single:
                current = ctx.get(key)
                shards = json.loads(current) if current else {}
                shards[f"{worker_id}:{batch.epoch}:{batch.batch_index}"] = batch.payload
                ctx.put(key, _json(shards))
            else:
                ctx.put(key, batch.payload)

        tok = self.tokens.get(worker_id) if token is None else token
        return (self.channel_of(worker_id), worker_id, tok, program, f"upload:{batch.batch_index}")

    def finalize_submission(self, worker_id, epoch, kind, dim, batch_count, sample_count):
        """Completion transaction: checks every shard landed and writes the manifest."""
        single = self.key_scheme == "single"

        def program(ctx):
            mkey = manifest_key(worker_id, epoch)
            if ctx.get(mkey) is not None:
                raise Rejected(f"{worker_id} already uploaded for epoch {epoch}")
            if ctx.get("EPOCH") != str(epoch):
                raise Rejected(f"epoch {epoch} is not open")
            shards = []
            if single:
                blob = ctx.get("PARAMS")
                present = json.loads(blob) if blob else {}
                version = ctx._ledger.channels[ctx.channel].version("PARAMS")
                for i in range(batch_count):
                    if f"{worker_id}:{epoch}:{i}" not in present:
                        raise Rejected(f"batch {i} missing")
                    shards.append(["PARAMS", version])
            else:
                ch = ctx._ledger.channels[ctx.channel]
                for i in range(batch_count):
                    key = shard_key(worker_id, i)
                    if ctx.get(key) is None:
                        raise Rejected(f"batch {i} missing")
                    shards.append([key, ch.version(key)])
            ctx.put(mkey, _json({
                "worker": worker_id, "epoch": epoch, "kind": kind, "dim": dim,
                "batch_count": batch_count, "sample_count": sample_count, "shards": shards,
                "key_scheme": self.key_scheme,
            }))

        return (self.channel_of(worker_id), worker_id, self.tokens.get(worker_id), program, "finalize")

    def manifest(self, worker_id, epoch):
        raw = self.ledger.channels[self.channel_of(worker_id)].get(manifest_key(worker_id, epoch))
        return None if raw is None else json.loads(raw)

    def state(self, epoch):
        info = self._epoch_info(epoch)
        expected = frozenset(info["expected"])
        received = frozenset(w for w in expected if self.manifest(w, epoch) is not None)
        return ChaincodeState(epoch, len(received), expected, received)

    # reads for aggregation and audit
    def worker_text(self, worker_id, epoch, reader=None):
        """Reassembled payload text of a worker's epoch upload, at the versions its manifest pinned."""
        man = self.manifest(worker_id, epoch)
        if man is None:
            raise IntegrityError(f"{worker_id}: no completed upload for epoch {epoch}")
        ch = self.ledger.channels[self.channel_of(worker_id)]
        parts = []
        for i, (key, version) in enumerate(man["shards"]):
            value = ch.get(key, version) if reader is None else reader(key, version, ch.name)
            if value is None:
                raise IntegrityError(f"{worker_id}: missing shard batchIndex={i} for epoch {epoch}")
            if man.get("key_scheme", "sharded") == "single":
                value = json.loads(value).get(f"{worker_id}:{epoch}:{i}")
                if value is None:
                    raise IntegrityError(f"{worker_id}: missing shard batchIndex={i} for epoch {epoch}")
            parts.append(value)
        return "".join(parts), man

    def worker_update(self, worker_id, epoch):
        text, man = self.worker_text(worker_id, epoch)
        try:
            return codec.decode_payload(text, man["kind"], man["dim"]), man
        except Exception as exc:
            raise IntegrityError(f"{worker_id}: epoch {epoch} payload does not decode: {exc}") from exc

    def recompute_worker_hash(self, worker_id, epoch):
        text, man = self.worker_text(worker_id, epoch)
        try:
            raw = codec.text_to_bytes(text, man["kind"], man["dim"])
        except Exception as exc:
            raise IntegrityError(f"{worker_id}: epoch {epoch} payload does not decode: {exc}") from exc
        return codec.sha256_hex(raw)

    def aggregate(self, epoch, aggregator, eta):
        """Aggregate a closed-out epoch on chain; writes the increment under GLOBAL<epoch>."""
        from .fl import FEDAVG, SIGNSGD  # fl imports codec only; keep the module graph one-way

        state = self.state(epoch)
        if not state.aggregation_enabled or state.upload_counter != len(state.expected):
            raise PreconditionError(
                f"epoch {epoch}: {state.upload_counter}/{len(state.expected)} uploads, aggregation disabled")
        if aggregator not in (FEDAVG, SIGNSGD):
            raise PreconditionError(f"unknown aggregator {aggregator!r}")

        def program(ctx):
            info = json.loads(ctx.get(epoch_key(epoch)))
            if info["status"] != "open":
                raise Rejected(f"epoch {epoch} already aggregated")
            manifests = {}
            for w in sorted(info["expected"]):
                raw = ctx.get(manifest_key(w, epoch), channel=self.channel_of(w))
                if raw is None:
                    raise IntegrityError(f"{w}: no completed upload for epoch {epoch}")
                manifests[w] = json.loads(raw)
                if aggregator == FEDAVG and int(manifests[w]["sample_count"]) <= 0:
                    raise Rejected(f"{w}: non-positive sample count")
            total = sum(int(m["sample_count"]) for m in manifests.values())
            acc = None
            for w, man in manifests.items():
                text, _ = self.worker_text(
                    w, epoch, reader=lambda k, v, c: ctx.get_version(k, v, channel=c))
                try:
                    delta = codec.decode_payload(text, man["kind"], man["dim"])
                except Exception as exc:
                    raise IntegrityError(f"{w}: epoch {epoch} payload does not decode: {exc}") from exc
                if acc is None:
                    acc = np.zeros(man["dim"])
                elif acc.shape[0] != man["dim"]:
                    raise IntegrityError(f"{w}: dim {man['dim']} differs from the other uploads")
                if aggregator == FEDAVG:
                    acc += (int(man["sample_count"]) / total) * delta
                else:
                    acc += delta  # decoded signs are +-1
            if aggregator == FEDAVG:
                inc = eta * acc
            else:
                inc = eta * np.where(acc >= 0, 1.0, -1.0)
            ctx.put(global_key(epoch), np.asarray(inc, dtype="<f8").tobytes().hex())
            info["status"] = "aggregated"
            ctx.put(epoch_key(epoch), _json(info))
            return inc

        res = self.ledger.submit(AGG_CHANNEL, SERVER, self.tokens[SERVER], program, "aggregate")
        if not res.ok:
            raise TransportError(f"aggregate: {res.status}: {res.detail}", epoch)
        self.ledger.emit({"event": "aggregation-complete", "epoch": epoch,
                          "key": global_key(epoch), "tx_id": res.tx_id,
                          "workers": sorted(state.expected)})
        return res.value

    def global_increment(self, epoch):
        raw = self.ledger.channels[AGG_CHANNEL].get(global_key(epoch))
        if raw is None:
            raise IntegrityError(f"no aggregate for epoch {epoch}")
        return np.frombuffer(bytes.fromhex(raw), dtype="<f8").astype(np.float64)


def _check_batch(batch, chunk_chars):
    if batch.kind not in codec.PAYLOAD_KINDS:
        raise Rejected(f"unknown payload kind {batch.kind!r}")
    if batch.dim < 1 or batch.batch_count < 1 or not 0 <= batch.batch_index < batch.batch_count:
        raise Rejected("batch header out of range")
    if batch.sample_count < 1:
        raise Rejected("sample count must be positive")
    total = codec.payload_chars(batch.dim, batch.kind)
    if codec.chunk_count(total, chunk_chars) != batch.batch_count:
        raise Rejected(f"{batch.batch_count} batches does not fit dim {batch.dim} at {chunk_chars} chars")
    expected = min(chunk_chars, total - batch.batch_index * chunk_chars)
    if len(batch.payload) != expected:
        raise Rejected(f"batch {batch.batch_index}: {len(batch.payload)} chars, expected {expected}")
    if not codec.valid_chunk_alphabet(batch.payload, batch.kind):
        raise Rejected(f"batch {batch.batch_index}: characters outside the {batch.kind} alphabet")


class CacheChaincode:
    """Holds batches whose upload hit an mvcc-conflict and re-submits them until they land."""

    def __init__(self, chaincode, scheduler, max_retries=64):
        self.chaincode = chaincode
        self.scheduler = scheduler
        self.max_retries = max_retries
        self._pending = {}  # channel -> list of (worker, batch)

    def put(self, worker_id, batch):
        ch = self.chaincode.channel_of(worker_id)
        self._pending.setdefault(ch, []).append((worker_id, batch))

    def pending(self, channel=None):
        if channel is None:
            return sum(len(v) for v in self._pending.values())
        return len(self._pending.get(channel, ()))

    def drain(self, channel):
        """Re-submit everything cached for ``channel``; returns the committed results."""
        queue = self._pending.pop(channel, [])
        done = []
        attempts = 0
        while queue:
            attempts += 1
            if attempts > self.max_retries:
                self._pending[channel] = queue
                raise TransportError(
                    f"cache drain on {channel}: {len(queue)} batches still conflicting after "
                    f"{self.max_retries} attempts", queue[0][1].epoch)
            subs = [self.chaincode.upload_submission(w, b) for w, b in queue]
            results = self.scheduler.run_block(self.chaincode.ledger, subs)
            retry = []
            for (w, b), res in zip(queue, results):
                if res.status == MVCC_CONFLICT:
                    retry.append((w, b))
                elif res.status == REJECTED:
                    raise TransportError(f"cached batch {w}/{b.batch_index} rejected: {res.detail}", b.epoch)
                else:
                    done.append(res)
            queue = retry
        return done

    def drain_all(self):
        out = []
        for ch in sorted(self._pending):
            out.extend(self.drain(ch))
        return out


class Uploader:
    """Worker-side API: one call per batch; conflicts are absorbed by the cache chaincode."""

    def __init__(self, chaincode, scheduler, cache=None):
        self.chaincode = chaincode
        self.scheduler = scheduler
        self.cache = cache or CacheChaincode(chaincode, scheduler)
        self.calls = {}  # (worker, epoch, batch_index) -> count

    def upload_round(self, epoch, uploads):
        """Concurrently upload every worker's batches, drain the cache, then finalize.

        ``uploads`` maps worker id -> list of WireBatch. Returns the commit sequence
        number at which each worker's upload completed (its logical latency).
        """
        by_block = {}
        for w in sorted(uploads):
            for b in uploads[w]:
                self.calls[(w, epoch, b.batch_index)] = self.calls.get((w, epoch, b.batch_index), 0) + 1
                by_block.setdefault(b.batch_index, []).append((w, b))
        for i in sorted(by_block):
            pairs = by_block[i]
            results = self.scheduler.run_block(
                self.chaincode.ledger, [self.chaincode.upload_submission(w, b) for w, b in pairs])
            for (w, b), res in zip(pairs, results):
                if res.status == MVCC_CONFLICT:
                    self.cache.put(w, b)
                elif res.status == REJECTED:
                    raise TransportError(f"{w} batch {b.batch_index} rejected: {res.detail}", epoch)
        self.cache.drain_all()
        finals = []
        for w in sorted(uploads):
            b0 = uploads[w][0]
            finals.append(self.chaincode.finalize_submission(
                w, epoch, b0.kind, b0.dim, b0.batch_count, b0.sample_count))
        done = {}
        pending = list(zip(sorted(uploads), finals))
        for _ in range(self.cache.max_retries):
            if not pending:
                break
            results = self.scheduler.run_block(self.chaincode.ledger, [s for _, s in pending])
            retry = []
            for (w, sub), res in zip(pending, results):
                if res.status == MVCC_CONFLICT:
                    retry.append((w, sub))
                elif res.status == REJECTED:
                    raise TransportError(f"{w} finalize rejected: {res.detail}", epoch)
                else:
                    done[w] = res.seq
            pending = retry
        if pending:
            raise TransportError(f"finalize still conflicting for {[w for w, _ in pending]}", epoch)
        return done

