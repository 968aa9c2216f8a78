"""Federated training rounds and the in-memory reference aggregators."""
from __future__ import annotations

import hashlib
import io
import json
import math
import zipfile
from dataclasses import dataclass, field

import numpy as np

from . import codec, nn
from .errors import HybridFLError, PreconditionError, ShapeError, TransportError

FEDAVG = "fedavg"
SIGNSGD = "signsgd"
AGGREGATORS = (FEDAVG, SIGNSGD)
WIRE_KIND = {FEDAVG: codec.FLOAT32, SIGNSGD: codec.SIGN_BITS}


@dataclass(frozen=True)
class FLConfig:
    rounds: int = 100
    agents: int = 10
    corrupt_fraction: float = 0.1
    select_fraction: float = 1.0
    local_epochs: int = 2
    batch_size: int = 256
    eta: float = 1.0
    kappa: int = 1000
    seed: int = 0
    lr: float = 0.01  # not given for agents; 0.01 is our default

    def __post_init__(self):
        if not 0.0 <= self.corrupt_fraction <= 1.0:
            raise ValueError("corrupt_fraction must be in [0, 1]")
        if not 0.0 < self.select_fraction <= 1.0:
            raise ValueError("select_fraction must be in (0, 1]")
        if self.rounds < 1 or self.agents < 1 or self.kappa < 1:
            raise ValueError("rounds, agents and kappa must be >= 1")
        if self.local_epochs < 0 or self.batch_size < 1:
            raise ValueError("local_epochs must be >= 0 and batch_size >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")

    @property
    def per_round(self):
        return min(self.agents, math.ceil(self.select_fraction * self.agents - 1e-9))

    @property
    def n_corrupt(self):
        return math.ceil(self.corrupt_fraction * self.agents - 1e-9)


@dataclass
class AgentSpec:
    agent_id: str
    dataset: nn.LabeledDataset
    sample_count: int | None = None
    is_corrupt: bool = False

    def __post_init__(self):
        if self.sample_count is None:
            self.sample_count = len(self.dataset)
        if self.sample_count != len(self.dataset) or self.sample_count < 1:
            raise PreconditionError(f"{self.agent_id}: sample_count must equal a non-empty dataset length")


@dataclass
class RoundRecord:
    round_index: int
    selected: tuple
    updates: dict = field(repr=False)
    sample_counts: dict
    global_before: np.ndarray = field(repr=False)
    global_after: np.ndarray = field(repr=False)
    increment: np.ndarray = field(repr=False)
    aggregator: str = FEDAVG
    eta: float = 1.0


def agent_ids(k):
    width = max(2, len(str(k - 1)))
    return [f"agent-{i:0{width}d}" for i in range(k)]


def round_seed(seed, round_index, agent_id):
    """Per (run, round, agent) training seed; independent of execution order."""
    digest = hashlib.sha256(f"{seed}:{round_index}:{agent_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def init_global(arch, seed):
    rng = np.random.default_rng([seed, 0x1A1])
    return rng.uniform(-0.05, 0.05, size=arch.dim)


def sample_agents(config, round_index, ids):
    """ceil(C*K) distinct ids, uniform without replacement, fixed per (seed, round)."""
    if not 0 <= round_index < config.rounds:
        raise PreconditionError(f"round {round_index} outside [0, {config.rounds})")
    ids = list(ids)
    m = config.per_round
    if m >= len(ids):
        return tuple(sorted(ids))
    rng = np.random.default_rng([config.seed, round_index, 0x5E1])
    picked = rng.choice(len(ids), size=m, replace=False)
    return tuple(sorted(ids[i] for i in picked))


def local_update(agent, global_params, config, seed, arch, loss_fn=None):
    """Delta = locally trained weights - global weights."""
    global_params = np.asarray(global_params, dtype=np.float64)
    if global_params.shape != (arch.dim,):
        raise ShapeError(f"global vector has shape {global_params.shape}, expected ({arch.dim},)")
    if config.local_epochs == 0:
        return np.zeros(arch.dim)
    trained = nn.sgd_train(
        nn.Model(arch, global_params), agent.dataset, config.local_epochs,
        config.batch_size, config.lr, seed, loss_fn=loss_fn,
    )
    return trained.params - global_params


def _check_dims(updates):
    if not updates:
        raise PreconditionError("no updates to aggregate")
    dims = {np.shape(v) for v in updates.values()}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise ShapeError(f"updates disagree on shape: {sorted(dims)}")


def fedavg_oracle(updates, weights, eta):
    """eta * sum(n_k * delta_k) / sum(n_k), as sum((n_k / N) * delta_k) in sorted id order.

    Normalising the weights first keeps the one-agent case exact.
    """
    _check_dims(updates)
    keys = sorted(updates)
    if any(weights[k] <= 0 for k in keys):
        raise PreconditionError("sample counts must be positive")
    total = sum(int(weights[k]) for k in keys)
    acc = np.zeros(np.shape(updates[keys[0]]))
    for k in keys:
        acc += (weights[k] / total) * np.asarray(updates[k], dtype=np.float64)
    return eta * acc


def sign_agg_oracle(updates, eta):
    """eta * sign(sum_k sign(delta_k)); zeros count as +1 at both levels."""
    _check_dims(updates)
    votes = sum(np.where(np.asarray(v) >= 0, 1, -1) for v in updates.values())
    return eta * np.where(votes >= 0, 1.0, -1.0)


def oracle_increment(aggregator, updates, weights, eta):
    if aggregator == FEDAVG:
        return fedavg_oracle(updates, weights, eta)
    if aggregator == SIGNSGD:
        return sign_agg_oracle(updates, eta)
    raise ValueError(f"unknown aggregator {aggregator!r}")


def run_protocol(config, agents, aggregator, transport=None, arch=None, w0=None, loss_fn=None):
    """Run ``config.rounds`` rounds and return the full history.

    ``transport`` carries uploads and aggregation (see ``network.HybridNetwork``);
    ``None`` aggregates in memory with the oracles. Updates are recorded at wire
    precision (float32) so a record replays exactly.
    """
    if aggregator not in AGGREGATORS:
        raise ValueError(f"unknown aggregator {aggregator!r}")
    if len(agents) != config.agents:
        raise PreconditionError(f"config expects {config.agents} agents, got {len(agents)}")
    by_id = {a.agent_id: a for a in agents}
    if len(by_id) != len(agents):
        raise PreconditionError("agent ids must be unique")
    arch = arch or nn.Architecture()
    w = init_global(arch, config.seed) if w0 is None else np.array(w0, dtype=np.float64)
    records = []
    for t in range(config.rounds):
        selected = sample_agents(config, t, by_id)
        updates = {}
        for k in selected:
            delta = local_update(by_id[k], w, config, round_seed(config.seed, t, k), arch, loss_fn)
            updates[k] = codec.quantize(delta)
        weights = {k: by_id[k].sample_count for k in selected}
        if transport is None:
            inc = oracle_increment(aggregator, updates, weights, config.eta)
        else:
            try:
                inc = transport.aggregate_round(t, updates, weights, aggregator, config.eta)
            except HybridFLError as exc:
                raise TransportError(f"{type(exc).__name__}: {exc}", t) from exc
        rec = RoundRecord(t, selected, updates, weights, w, w + inc, inc, aggregator, config.eta)
        if transport is not None:
            transport.after_round(rec)
        records.append(rec)
        w = rec.global_after
    return records


def replay(rounds):
    """Rebuild the global trajectory from records using the oracles only."""
    if not rounds:
        return []
    w = rounds[0].global_before
    out = [w]
    for rec in rounds:
        w = w + oracle_increment(rec.aggregator, rec.updates, rec.sample_counts, rec.eta)
        out.append(w)
    return out


def _put_array(zf, name, arr):
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
    zf.writestr(info, buf.getvalue())


def save_rounds(path, rounds):
    """Byte-deterministic npz: w_0, per-round increments, and updates.

    Updates that are exactly float32 (the wire precision) are stored as float32.
    ``global_before``/``global_after`` are rebuilt on load by the same additions
    the run performed, so they come back bit-identical.
    """
    meta = []
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        if rounds:
            _put_array(zf, "w0", np.asarray(rounds[0].global_before, dtype=np.float64))
        prev = None
        for rec in rounds:
            t = rec.round_index
            if prev is not None and not np.array_equal(rec.global_before, prev):
                raise PreconditionError(f"round {t} does not continue the previous round")
            _put_array(zf, f"r{t}.inc", np.asarray(rec.increment, dtype=np.float64))
            for k in rec.selected:
                u = np.asarray(rec.updates[k], dtype=np.float64)
                q = u.astype(np.float32)
                _put_array(zf, f"r{t}.u.{k}", q if np.array_equal(q, u) else u)
            meta.append({
                "round": t, "selected": list(rec.selected), "sample_counts": rec.sample_counts,
                "aggregator": rec.aggregator, "eta": rec.eta,
            })
            prev = rec.global_after
        _put_array(zf, "meta", np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8))


def load_rounds(path):
    with np.load(path) as data:
        meta = json.loads(data["meta"].tobytes().decode())
        out = []
        w = data["w0"] if meta else None
        for m in meta:
            t = m["round"]
            inc = data[f"r{t}.inc"]
            out.append(RoundRecord(
                t, tuple(m["selected"]),
                {k: data[f"r{t}.u.{k}"].astype(np.float64) for k in m["selected"]},
                {k: int(v) for k, v in m["sample_counts"].items()},
                w, w + inc, inc, m["aggregator"], m["eta"],
            ))
            w = w + inc
    return out
