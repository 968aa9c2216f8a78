"""Upload throughput smoke benchmark for the simulated ledger. Not a test; nothing gates on it.

Times one epoch of uploads for both key schemes and a few chunk sizes and prints
transactions per second. Numbers describe this simulator on this machine only.

    python benchmarks/throughput.py --workers 10 --dim 5000
"""
import argparse
import time

import numpy as np

from hybridfl import codec, fl
from hybridfl import ledger as L
from hybridfl.errors import TransportError


def one_epoch(workers, dim, chunk, scheme, kind, conflict_rate, seed):
    rng = np.random.default_rng(seed)
    ids = [f"W{i:02d}" for i in range(workers)]
    ups = {w: rng.normal(size=dim) for w in ids}
    shared = "shared" if scheme == "single" else None
    cc = L.FLChaincode.bootstrap(ids, chunk_chars=chunk, key_scheme=scheme, shared_channel=shared)
    cc.open_epoch(0, ids)
    batches = {w: codec.make_batches(w, 0, ups[w], kind, chunk, 100) for w in ids}
    start = time.perf_counter()
    escalated = False
    try:
        L.Uploader(cc, L.Scheduler(seed, conflict_rate)).upload_round(0, batches)
        cc.aggregate(0, fl.FEDAVG if kind == codec.FLOAT32 else fl.SIGNSGD, 1.0)
    except TransportError:
        escalated = True  # one shared key serialises every writer; the cache gives up
    elapsed = time.perf_counter() - start
    log = cc.ledger.commit_log()
    conflicts = sum(r.status == L.MVCC_CONFLICT for r in log)
    return elapsed, len(log), conflicts, escalated


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--workers", type=int, default=10)
    p.add_argument("--dim", type=int, default=5_000)
    p.add_argument("--conflict-rate", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    print(f"{'scheme':8} {'kind':9} {'chunk':>6} {'txs':>7} {'conflicts':>9} {'seconds':>8} {'tx/s':>9}  note")
    for kind in codec.PAYLOAD_KINDS:
        for chunk in (1_000, codec.DEFAULT_CHUNK_CHARS):
            for scheme in ("sharded", "single"):
                secs, txs, conflicts, escalated = one_epoch(args.workers, args.dim, chunk, scheme, kind,
                                                            args.conflict_rate, args.seed)
                note = "cache retry limit hit" if escalated else ""
                print(f"{scheme:8} {kind:9} {chunk:6d} {txs:7d} {conflicts:9d} {secs:8.3f} "
                      f"{txs / secs:9.0f}  {note}")


if __name__ == "__main__":
    main()
