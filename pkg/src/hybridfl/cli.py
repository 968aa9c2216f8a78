"""Command line: run, audit, report, verify-formats.

Exit codes: 0 success, 1 other failure, 2 config error, 3 integrity error,
4 attack failed (detection would be vacuous).
"""
from __future__ import annotations

import argparse
import csv
import datetime
import hashlib
import io
import json
import os
import sys

import numpy as np

from . import codec, contract as pc, experiment, fl, forensics, ledger, logstore
from .config import ExperimentConfig
from .errors import ConfigError, HybridFLError, IntegrityError
from .network import HybridNetwork

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_INTEGRITY, EXIT_ATTACK_FAILED = 0, 1, 2, 3, 4

MANIFEST = "MANIFEST.json"
INCOMPLETE, COMPLETE = "incomplete", "complete"


class AttackFailed(Exception):
    pass


def _dump_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_json(path):
    if not os.path.exists(path):
        raise IntegrityError(f"missing artifact {path}")
    with open(path) as fh:
        return json.load(fh)


def _file_digests(run_dir):
    out = {}
    for base, dirs, files in os.walk(run_dir):
        dirs.sort()
        for name in sorted(files):
            path = os.path.join(base, name)
            rel = os.path.relpath(path, run_dir)
            if rel == MANIFEST:
                continue
            h = hashlib.sha256()
            with open(path, "rb") as fh:
                for block in iter(lambda: fh.read(1 << 20), b""):
                    h.update(block)
            out[rel.replace(os.sep, "/")] = h.hexdigest()
    return out


def _write_manifest(run_dir, status, outcome=None, digests=False):
    body = {"status": status, "outcome": outcome}
    if digests:
        body["files"] = _file_digests(run_dir)
    _dump_json(os.path.join(run_dir, MANIFEST), body)


def _read_manifest(run_dir):
    man = _load_json(os.path.join(run_dir, MANIFEST))
    if man.get("status") != COMPLETE:
        raise IntegrityError(f"{run_dir} is marked {man.get('status')!r}, not complete")
    return man


# run
def default_run_dir(seed):
    stamp = datetime.datetime.now(datetime.timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    return os.path.join("runs", f"run-{stamp}-seed{seed}")


def run(cfg, run_dir, kappa=None, assume_adversaries=None, log=print):
    """Full pipeline into ``run_dir``. Returns the run summary dict."""
    if os.path.exists(run_dir) and os.listdir(run_dir):
        raise ConfigError("out", f"{run_dir} exists and is not empty")
    os.makedirs(run_dir, exist_ok=True)
    _write_manifest(run_dir, INCOMPLETE)
    with open(os.path.join(run_dir, "config.yaml"), "w") as fh:
        fh.write(cfg.to_yaml())

    setup = experiment.prepare(cfg)
    workers = [a.agent_id for a in setup.agents]
    chain = cfg.chain
    cc = ledger.FLChaincode.bootstrap(workers, seed=chain["scheduler_seed"],
                                      chunk_chars=chain["chunk_chars"], key_scheme=chain["key_scheme"])
    sched = ledger.Scheduler(chain["scheduler_seed"], chain["conflict_rate"])
    public = pc.Contract(workers, base_reward=cfg.units("base_reward"), speed_bonus=cfg.units("speed_bonus"))
    for w in workers:
        public.open_account(w, cfg.units("initial_balance"))
        public.register_and_deposit(w, cfg.units("deposit"))
    public.fund_pool(cfg.units("pool"))
    logs = logstore.LogStore(os.path.join(run_dir, "logs"))
    net = HybridNetwork(cc, sched, public, logs, setup.validation, setup.arch, loo=cfg.loo)

    log(f"training: {cfg.rounds} rounds, {cfg.agents} agents, aggregator {cfg.aggregator}")
    records = fl.run_protocol(setup.fl_config, setup.agents, cfg.aggregator, transport=net, arch=setup.arch)
    for rec, w_next in zip(records, fl.replay(records)[1:]):
        if not np.array_equal(rec.global_after, w_next):
            raise IntegrityError(f"round {rec.round_index}: chain aggregate differs from the oracle replay")

    fl.save_rounds(os.path.join(run_dir, "rounds.npz"), records)
    cc.ledger.save(os.path.join(run_dir, "ledger"))
    os.makedirs(os.path.join(run_dir, "contract"), exist_ok=True)
    _dump_json(os.path.join(run_dir, "contract", "state.json"), public.to_state())
    with open(os.path.join(run_dir, "contract", "events.jsonl"), "w") as fh:
        fh.write(public.event_lines())
    _dump_json(os.path.join(run_dir, "latency.json"), net.average_latency())
    with open(os.path.join(run_dir, "chain-events.jsonl"), "w") as fh:
        for e in net.events:
            fh.write(json.dumps(e, sort_keys=True) + "\n")

    if cfg.aggregator == fl.FEDAVG:
        outcome = experiment.evaluate(cfg, setup, records, kappa=kappa, m=assume_adversaries)
        summary = outcome.summary()
        _dump_json(os.path.join(run_dir, "report.json"), outcome.report.to_dict())
        with open(os.path.join(run_dir, "ranking.txt"), "w") as fh:
            fh.write(outcome.report.summary())
    else:
        # no trojan detection for sign aggregation
        summary = {"status": "detection-not-applicable", "adversaries": setup.adversaries}
    _dump_json(os.path.join(run_dir, "summary.json"), summary)
    status = summary["status"]
    _write_manifest(run_dir, COMPLETE, status, digests=True)
    log(f"run complete: {status}")
    if status == experiment.ATTACK_FAILED:
        raise AttackFailed(f"backdoor accuracy {summary['backdoor_accuracy']:.3f} is below "
                           f"{cfg.detection['min_backdoor_accuracy']}; detection would be vacuous")
    return summary


# audit
def _load_run(run_dir):
    _read_manifest(run_dir)
    cfg = ExperimentConfig.load(os.path.join(run_dir, "config.yaml"))
    state = _load_json(os.path.join(run_dir, "contract", "state.json"))
    public = pc.Contract.from_state(state)
    chain = ledger.Ledger.load(os.path.join(run_dir, "ledger"))
    cc = ledger.FLChaincode(chain, {}, chunk_chars=cfg.chain["chunk_chars"], key_scheme=cfg.chain["key_scheme"])
    rounds_path = os.path.join(run_dir, "rounds.npz")
    if not os.path.exists(rounds_path):
        raise IntegrityError(f"missing artifact {rounds_path}")
    if not os.path.isdir(os.path.join(run_dir, "logs")):
        raise IntegrityError(f"missing artifact {os.path.join(run_dir, 'logs')}")
    logs = logstore.LogStore(os.path.join(run_dir, "logs"))
    latency = _load_json(os.path.join(run_dir, "latency.json"))
    return cfg, public, cc, rounds_path, logs, latency


def audit(run_dir, accused, accuser=None, kappa=None, assume_adversaries=None, log=print):
    """Breach claim against ``accused`` replayed on the stored artifacts; returns the transcript."""
    cfg, public, cc, rounds_path, logs, latency = _load_run(run_dir)
    if accused not in public.accounts:
        raise ConfigError("accused", f"unknown worker {accused}")
    if accuser is None:
        accuser = next(w for w in sorted(public.accounts) if w != accused)
    steps = []

    def step(name, **detail):
        steps.append({"step": name, **detail, "balances": public.balances()})
        log(f"[{len(steps):02d}] {name} " + " ".join(f"{k}={v}" for k, v in detail.items()))

    claim = public.open_claim(accuser, accused)
    step("open-claim", claim=claim.claim_id, accuser=accuser, accused=accused,
         epochs=list(claim.epoch_range), verification_contract=claim.verification_contract_id)
    public.adjudicate_hashes(claim.claim_id, cc.recompute_worker_hash)
    step("verify-hashes", phase=claim.phase, status=claim.status, mismatched=claim.mismatched,
         detail=claim.detail)
    if claim.phase == pc.PHASE_SUSPENDED:
        raise IntegrityError(f"claim suspended: {claim.detail}")

    report = None
    if claim.status == pc.OPEN:
        grant = logs.grant_access(claim.claim_id, accused, public.may_grant)
        step("grant-log-access", grant=grant.grant_id)
        fetched = logs.fetch_logs(grant)
        for rec in fetched:
            if public.commitment(accused, rec.epoch).digest != codec.sha256_hex(rec.payload):
                raise IntegrityError(f"{accused} log epoch {rec.epoch} does not match its public commitment")
        step("fetch-logs", records=len(fetched))

        records = fl.load_rounds(rounds_path)
        forensics.check_rounds(records)
        for rec in records:
            if not np.array_equal(rec.increment, cc.global_increment(rec.round_index)):
                raise IntegrityError(f"round {rec.round_index}: replay increment differs from the ledger")
        by_round = {rec.round_index: rec for rec in fetched}
        for rec in records:
            if accused in rec.selected:
                log_rec = by_round.get(rec.round_index)
                if log_rec is None or not np.array_equal(
                        codec.quantize(log_rec.update()), codec.quantize(rec.updates[accused])):
                    raise IntegrityError(f"round {rec.round_index}: replay update of {accused} differs from its log")
        setup = experiment.prepare(cfg)
        m = cfg.assumed_adversaries() if assume_adversaries is None else assume_adversaries
        report = forensics.detect(records, setup.poisoned_validation, kappa or cfg.kappa, m, setup.arch,
                                  agents=sorted(public.accounts))
        public.record_verdict(claim.claim_id, report)
        step("detect", flagged=report.flagged, qualifying_rounds=len(report.qualifying_rounds),
             status=claim.status)

    settlement = public.settle(claim.claim_id)
    step("settle", status=claim.status, loser=settlement.loser, forfeited=settlement.forfeited,
         share=settlement.recipients[0][1] if settlement.recipients else 0, to_pool=settlement.to_pool)
    rewards = public.pay_rewards(latency)
    step("pay-rewards", rewards={r.worker_id: r.reward for r in rewards},
         scaled=any(r.scaled for r in rewards))

    transcript = {
        "claim": claim.claim_id, "accuser": accuser, "accused": accused, "status": claim.status,
        "loser": settlement.loser, "steps": steps, "events": public.events,
        "report": report.to_dict() if report else None,
    }
    os.makedirs(os.path.join(run_dir, "audits"), exist_ok=True)
    _dump_json(os.path.join(run_dir, "audits", f"{accused}-by-{accuser}.json"), transcript)
    log(f"verdict: {claim.status}; {settlement.loser} forfeits {settlement.forfeited} units")
    return transcript


# report
def _write_csv(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def report(run_dir, log=print):
    _read_manifest(run_dir)
    out = os.path.join(run_dir, "report")
    os.makedirs(out, exist_ok=True)
    det = forensics.DetectionReport.from_dict(_load_json(os.path.join(run_dir, "report.json")))
    qualifying = set(det.qualifying_rounds)
    _write_csv(os.path.join(out, "backdoor_loss.csv"), ["round", "backdoor_loss", "qualifying"],
               [[t, repr(v), int(t in qualifying)] for t, v in det.backdoor_losses])
    _write_csv(os.path.join(out, "contributions.csv"), ["round", "agent", "l2"],
               [[t, a, repr(v)] for t, a, v in det.contributions])
    flagged = set(det.flagged)
    _write_csv(os.path.join(out, "agent_averages.csv"), ["rank", "agent", "avg_l2", "flagged", "signal"],
               [[i + 1, a, repr(det.per_agent_avg_l2[a]), int(a in flagged),
                 "insufficient" if a in det.insufficient_signal else "ok"]
                for i, a in enumerate(det.full_ranking)])
    state = _load_json(os.path.join(run_dir, "contract", "state.json"))
    _write_csv(os.path.join(out, "gas.csv"), ["worker", "commitments", "gas_spent", "gas_cost_units"],
               [[w, len(state["commitments"].get(w, [])), a["gas_spent"], a["gas_spent"] * state["gas_price"]]
                for w, a in sorted(state["accounts"].items())])
    rows = []
    audits = os.path.join(run_dir, "audits")
    if os.path.isdir(audits):
        for name in sorted(os.listdir(audits)):
            t = _load_json(os.path.join(audits, name))
            settle = next(s for s in t["steps"] if s["step"] == "settle")
            rows.append([t["claim"], t["accuser"], t["accused"], t["status"], t["loser"],
                         settle["forfeited"], settle["share"], settle["to_pool"]])
    _write_csv(os.path.join(out, "settlement.csv"),
               ["claim", "accuser", "accused", "status", "loser", "forfeited", "share", "to_pool"], rows)
    log(det.summary().rstrip("\n"))
    return out


# verify-formats
def format_checks():
    """(name, passed) pairs for the codec's fixed vectors."""
    rng = np.random.default_rng(0)
    checks = []
    checks.append(("float32 1.0 is 00 00 80 3f", codec.serialize_float32([1.0]) == b"\x00\x00\x80\x3f"))
    checks.append(("sha256 of empty input", codec.sha256_hex(b"")
                   == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"))
    checks.append(("24 positive signs -> '////'", codec.encode_base64(codec.pack_signs(np.ones(24))) == "////"))
    checks.append(("zero packs as bit 1", codec.pack_signs(np.array([0.0, -1.0])).tolist() == [1, 0]))
    checks.append(("300M params -> 50M base64 chars", codec.base64_chars(300_000_000) == 50_000_000))
    checks.append(("50M chars at 13,300 -> 3,760 chunks", codec.chunk_count(50_000_000, 13_300) == 3760))
    checks.append(("37.5M bytes -> 75M hex chars", codec.hex_chars_for_bytes(37_500_000) == 75_000_000))
    ok = True
    for _ in range(200):
        n = int(rng.integers(0, 300))
        bits = rng.integers(0, 2, n).astype(np.uint8)
        ok &= np.array_equal(codec.decode_base64(codec.encode_base64(bits), n), bits)
    checks.append(("base64 round trip x200", bool(ok)))
    v = rng.normal(size=1000)
    ok = all(codec.sha256_hex(codec.text_to_bytes(codec.reassemble(codec.make_batches("A", 0, v, kind, size)),
                                                  kind, v.size)) == codec.hash_params(v, kind)
             for kind in codec.PAYLOAD_KINDS for size in (1, 97, 13_300))
    checks.append(("digest independent of chunking", ok))
    return checks


def verify_formats(log=print):
    checks = format_checks()
    for name, ok in checks:
        log(f"{'PASS' if ok else 'FAIL'}  {name}")
    return all(ok for _, ok in checks)


def build_parser():
    p = argparse.ArgumentParser(prog="hybridfl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="train, aggregate on chain, commit hashes, log, detect")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", help="run directory (default runs/run-<utc time>-seed<seed>)")
    r.add_argument("--kappa", type=int)
    r.add_argument("--assume-adversaries", type=int)
    a = sub.add_parser("audit", help="open and adjudicate a breach claim against a finished run")
    a.add_argument("run_dir")
    a.add_argument("--accused", required=True)
    a.add_argument("--accuser")
    a.add_argument("--kappa", type=int)
    a.add_argument("--assume-adversaries", type=int)
    rp = sub.add_parser("report", help="CSV tables for a finished run")
    rp.add_argument("run_dir")
    sub.add_parser("verify-formats", help="codec self-test")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            overrides = {} if args.seed is None else {"seed": args.seed}
            cfg = ExperimentConfig.load(args.config, **overrides)
            if args.kappa is not None and not 1 <= args.kappa <= cfg.architecture_obj().dim:
                raise ConfigError("kappa", f"must be in [1, {cfg.architecture_obj().dim}]")
            run(cfg, args.out or default_run_dir(cfg.seed), args.kappa, args.assume_adversaries)
        elif args.command == "audit":
            audit(args.run_dir, args.accused, args.accuser, args.kappa, args.assume_adversaries)
        elif args.command == "report":
            report(args.run_dir)
        else:
            return EXIT_OK if verify_formats() else EXIT_INTEGRITY
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except AttackFailed as exc:
        print(f"attack failed: {exc}", file=sys.stderr)
        return EXIT_ATTACK_FAILED
    except HybridFLError as exc:
        print(f"{type(exc).__module__}.{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
