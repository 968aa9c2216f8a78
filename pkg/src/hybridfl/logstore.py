"""Mock secure-cloud log store with one-time access grants.

Layout under the root directory::

    manifest.jsonl            one line per published record, in publish order
    grants.json               issued grants and whether they were consumed
    <worker>/<epoch>.log      header line (JSON) + canonical wire payload bytes

Payloads are never returned except through ``fetch_logs`` with an unconsumed grant.
"""
from __future__ import annotations

import base64
import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from . import codec, fl, nn
from .errors import AccessDenied, IntegrityError, PreconditionError

HEADER_FIELDS = ("worker_id", "epoch", "round_index", "kind", "dim", "digest",
                 "loo_accuracy", "loo_loss", "timestamp")


@dataclass(frozen=True)
class LogRecord:
    worker_id: str
    epoch: int
    payload: bytes
    kind: str
    dim: int
    loo_accuracy: float
    loo_loss: float
    timestamp: tuple  # (round, sequence) logical clock
    round_index: int = -1

    def header(self):
        return {
            "worker_id": self.worker_id, "epoch": self.epoch, "round_index": self.round_index,
            "kind": self.kind, "dim": self.dim, "digest": codec.sha256_hex(self.payload),
            "loo_accuracy": self.loo_accuracy, "loo_loss": self.loo_loss,
            "timestamp": list(self.timestamp),
        }

    def update(self):
        return codec.decode_payload(_bytes_to_text(self.payload, self.kind), self.kind, self.dim)


@dataclass
class AccessGrant:
    grant_id: str
    claim_id: str
    worker_id: str
    consumed: bool = False


def _bytes_to_text(raw, kind):
    if kind == codec.FLOAT32:
        return raw.hex()
    return base64.b64encode(raw).decode()


def record_from_update(worker_id, epoch, delta, kind, loo, timestamp, round_index=-1):
    raw = codec.canonical_bytes(delta, kind)
    return LogRecord(worker_id, epoch, raw, kind, int(np.size(delta)),
                     float(loo[0]), float(loo[1]), tuple(timestamp), round_index)


class LogStore:
    def __init__(self, root):
        self.root = root
        os.makedirs(root, exist_ok=True)
        self._index = {}  # (worker, epoch) -> header
        self._grants = {}
        manifest = os.path.join(root, "manifest.jsonl")
        if os.path.exists(manifest):
            with open(manifest) as fh:
                for line in fh:
                    h = json.loads(line)
                    self._index[(h["worker_id"], h["epoch"])] = h
        grants = os.path.join(root, "grants.json")
        if os.path.exists(grants):
            with open(grants) as fh:
                for g in json.load(fh):
                    self._grants[g["grant_id"]] = AccessGrant(**g)

    def _path(self, worker_id, epoch):
        return os.path.join(self.root, worker_id, f"{epoch:05d}.log")

    def __len__(self):
        return len(self._index)

    def headers(self):
        """Record headers (no payloads), in publish order."""
        return list(self._index.values())

    def publish(self, record):
        key = (record.worker_id, record.epoch)
        if key in self._index or os.path.exists(self._path(*key)):
            raise PreconditionError(f"log for {record.worker_id} epoch {record.epoch} already published")
        header = record.header()
        os.makedirs(os.path.join(self.root, record.worker_id), exist_ok=True)
        with open(self._path(*key), "xb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            fh.write(record.payload)
        with open(os.path.join(self.root, "manifest.jsonl"), "a") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
        self._index[key] = header
        return {"worker_id": record.worker_id, "epoch": record.epoch, "digest": header["digest"],
                "location": os.path.relpath(self._path(*key), self.root)}

    def _save_grants(self):
        with open(os.path.join(self.root, "grants.json"), "w") as fh:
            json.dump([vars(g) for g in self._grants.values()], fh, indent=2, sort_keys=True)
            fh.write("\n")

    def grant_access(self, claim_id, subject, authorize):
        """Issue a one-time grant; ``authorize(claim_id, subject)`` must vouch for it."""
        if not authorize(claim_id, subject):
            raise AccessDenied(f"{claim_id} does not authorize access to {subject}'s logs")
        gid = "grant-" + hashlib.sha256(
            f"{claim_id}:{subject}:{len(self._grants)}".encode()).hexdigest()[:16]
        grant = AccessGrant(gid, claim_id, subject)
        self._grants[gid] = grant
        self._save_grants()
        return grant

    def fetch_logs(self, grant):
        gid = grant.grant_id if isinstance(grant, AccessGrant) else grant
        stored = self._grants.get(gid)
        if stored is None:
            raise AccessDenied(f"unknown grant {gid}")
        if stored.consumed:
            raise AccessDenied(f"grant {gid} was already used")
        stored.consumed = True
        self._save_grants()
        out = []
        for (w, e), header in sorted(self._index.items()):
            if w != stored.worker_id:
                continue
            out.append(self._read(w, e, header))
        return out

    def _read(self, worker_id, epoch, header):
        path = self._path(worker_id, epoch)
        if not os.path.exists(path):
            raise IntegrityError(f"log file {path} is missing")
        with open(path, "rb") as fh:
            first = fh.readline()
            payload = fh.read()
        if json.loads(first) != header or codec.sha256_hex(payload) != header["digest"]:
            raise IntegrityError(f"log file {path} does not match its manifest entry")
        return LogRecord(header["worker_id"], header["epoch"], payload, header["kind"], header["dim"],
                         header["loo_accuracy"], header["loo_loss"], tuple(header["timestamp"]),
                         header["round_index"])


def leave_one_out_increment(rec, exclude):
    """Round increment recomputed without ``exclude``'s update (zero if nobody is left)."""
    if exclude not in rec.updates:
        raise IntegrityError(f"round {rec.round_index}: no update from {exclude}")
    missing = [k for k in rec.selected if k not in rec.updates]
    if missing:
        raise IntegrityError(f"round {rec.round_index}: missing updates from {missing}")
    keep = {k: v for k, v in rec.updates.items() if k != exclude}
    if not keep:
        return np.zeros_like(np.asarray(rec.global_before, dtype=np.float64))
    weights = {k: rec.sample_counts[k] for k in keep}
    return fl.oracle_increment(rec.aggregator, keep, weights, rec.eta)


def leave_one_out_eval(rec, exclude, validation, arch):
    """(accuracy, loss) on ``validation`` of w_t plus the increment without ``exclude``."""
    model = nn.Model(arch, rec.global_before + leave_one_out_increment(rec, exclude))
    return nn.evaluate(model, validation)
