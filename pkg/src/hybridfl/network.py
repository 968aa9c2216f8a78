"""Round transport over the hybrid setup: private-chain aggregation, public hash
commitments and per-round logs.

Plugs into ``fl.run_protocol`` as its ``transport``.
"""
from __future__ import annotations

import numpy as np

from . import codec, fl, ledger, logstore
from .errors import IntegrityError


class HybridNetwork:
    def __init__(self, chaincode, scheduler, contract=None, logs=None, validation=None, arch=None,
                 loo=True):
        self.chaincode = chaincode
        self.scheduler = scheduler
        self.uploader = ledger.Uploader(chaincode, scheduler)
        self.contract = contract
        self.logs = logs
        self.validation = validation
        self.arch = arch
        self.loo = loo and validation is not None
        self.latency = {}  # worker -> list of logical upload latencies
        self.events = []
        self._epoch_count = {}
        self._seq = 0
        chaincode.ledger.subscribe(self.events.append)

    def aggregate_round(self, t, updates, weights, aggregator, eta):
        kind = fl.WIRE_KIND[aggregator]
        selected = sorted(updates)
        self.chaincode.open_epoch(t, selected)
        start = self.chaincode.ledger._seq
        uploads = {
            w: codec.make_batches(w, t, updates[w], kind, self.chaincode.chunk_chars, int(weights[w]))
            for w in selected
        }
        done = self.uploader.upload_round(t, uploads)
        for w in selected:
            self.latency.setdefault(w, []).append(done[w] - start)
        if self.contract is not None:
            for w in selected:
                # each worker hashes its own update off chain
                idx = self._epoch_count.get(w, 0)
                self.contract.commit_hash(w, idx, codec.hash_params(updates[w], kind), round_index=t)
                self._epoch_count[w] = idx + 1
        inc = self.chaincode.aggregate(t, aggregator, eta)
        if not any(e.get("epoch") == t and e.get("event") == "aggregation-complete" for e in self.events):
            raise IntegrityError(f"round {t}: no aggregation-complete event")
        return inc

    def after_round(self, rec):
        if self.logs is None:
            return
        kind = fl.WIRE_KIND[rec.aggregator]
        for seq, w in enumerate(rec.selected):
            if self.loo:
                metrics = logstore.leave_one_out_eval(rec, w, self.validation, self.arch)
            else:
                metrics = (float("nan"), float("nan"))
            epoch = self._log_epoch(w, rec.round_index)
            self.logs.publish(logstore.record_from_update(
                w, epoch, rec.updates[w], kind, metrics, (rec.round_index, seq), rec.round_index))

    def _log_epoch(self, worker, round_index):
        # the per-worker dense index matches the public commitment index
        if self.contract is not None:
            held = self.contract.commitments.get(worker, [])
            for c in held:
                if c.round_index == round_index:
                    return c.epoch_index
        return round_index

    def average_latency(self):
        return {w: float(np.mean(v)) for w, v in sorted(self.latency.items())}
