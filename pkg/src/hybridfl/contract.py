"""Simulated public contract: escrow deposits, hash commitments, gas, breach claims.

All currency is integer smallest units (``UNIT`` per currency unit). Gas is a
fixed charge per commitment, burned at ``gas_price`` units per gas. The
contract keeps ``minted == sum(balances) + sum(held) + pool + burned`` after
every operation.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

from . import codec
from .errors import AccessDenied, ContractError, IntegrityError

UNIT = 10 ** 9
GAS_FIRST_COMMIT = 95_000
GAS_NEXT_COMMIT = 25_000
GAS_PRICE = 20  # units per gas: 95,000 gas -> 0.0019 currency units

OPEN = "open"
HASH_MISMATCH = "hash-mismatch-confirmed"
TROJAN_CONFIRMED = "trojan-confirmed"
DISMISSED = "dismissed"
TERMINAL = (HASH_MISMATCH, TROJAN_CONFIRMED, DISMISSED)

# phases an open claim moves through
PHASE_HASHES = "hash-check"
PHASE_TROJAN = "trojan"
PHASE_SUSPENDED = "suspended"


def commitment_gas(m):
    """Total gas for ``m`` commitments by one worker."""
    return 0 if m <= 0 else GAS_FIRST_COMMIT + GAS_NEXT_COMMIT * (m - 1)


def address_of(worker_id):
    return "0x" + hashlib.sha256(f"address:{worker_id}".encode()).hexdigest()[:40]


@dataclass
class EscrowAccount:
    worker_id: str
    address: str
    balance: int = 0
    deposit_held: int = 0
    gas_spent: int = 0
    registered: bool = False
    forfeited: bool = False


@dataclass(frozen=True)
class HashCommitment:
    worker_id: str
    epoch_index: int
    digest: str
    tx_gas: int
    round_index: int


@dataclass
class BreachClaim:
    claim_id: str
    accuser: str
    accused: str
    epoch_range: tuple  # (first, last) inclusive, accused's commitment indices
    status: str = OPEN
    verification_contract_id: str = ""
    phase: str = PHASE_HASHES
    detail: str = ""
    mismatched: list = field(default_factory=list)
    settled: bool = False


@dataclass(frozen=True)
class Settlement:
    claim_id: str
    loser: str
    forfeited: int
    recipients: tuple  # ((worker, amount), ...)
    to_pool: int


@dataclass(frozen=True)
class RewardRecord:
    worker_id: str
    rank: int | None
    deposit_returned: int
    reward: int
    scaled: bool


class Contract:
    def __init__(self, identities, gas_price=GAS_PRICE, base_reward=UNIT // 10,
                 speed_bonus=UNIT // 10):
        """``identities`` is the set of worker ids known to the private chain."""
        self.identities = frozenset(identities)
        self.gas_price = int(gas_price)
        self.base_reward = int(base_reward)
        self.speed_bonus = int(speed_bonus)
        self.accounts = {}
        self.commitments = {}
        self.claims = {}
        self.pool = 0
        self.minted = 0
        self.burned = 0
        self.events = []

    # bookkeeping
    def _emit(self, op, **fields):
        self.events.append({"seq": len(self.events) + 1, "op": op, **fields})

    def total(self):
        return (sum(a.balance + a.deposit_held for a in self.accounts.values())
                + self.pool + self.burned)

    def check_conservation(self):
        if self.total() != self.minted:
            raise IntegrityError(f"currency not conserved: {self.total()} != minted {self.minted}")

    def event_lines(self):
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events)

    def account(self, worker_id):
        try:
            return self.accounts[worker_id]
        except KeyError:
            raise ContractError(f"no account for {worker_id}") from None

    # currency in
    def open_account(self, worker_id, balance=0):
        """Create a wallet and mint ``balance`` into it (the faucet)."""
        if worker_id in self.accounts:
            raise ContractError(f"{worker_id} already has an account")
        if balance < 0:
            raise ContractError("balance must be non-negative")
        acct = EscrowAccount(worker_id, address_of(worker_id), balance=int(balance))
        self.accounts[worker_id] = acct
        self.minted += int(balance)
        self._emit("open-account", parties=[worker_id], amount=int(balance))
        return acct

    def fund_pool(self, amount):
        if amount < 0:
            raise ContractError("amount must be non-negative")
        self.pool += int(amount)
        self.minted += int(amount)
        self._emit("fund-pool", parties=[], amount=int(amount))

    def register_and_deposit(self, worker_id, amount):
        if worker_id not in self.identities:
            raise AccessDenied(f"{worker_id} has no private-chain identity")
        acct = self.account(worker_id)
        if acct.registered:
            raise ContractError(f"{worker_id} is already registered")
        amount = int(amount)
        if amount <= 0:
            raise ContractError("deposit must be positive")
        if acct.balance < amount:
            raise ContractError(f"{worker_id}: balance {acct.balance} < deposit {amount}")
        acct.balance -= amount
        acct.deposit_held += amount
        acct.registered = True
        self._emit("register", parties=[worker_id], amount=amount)
        return acct

    # commitments
    def commit_hash(self, worker_id, epoch_index, digest, round_index=None):
        acct = self.account(worker_id)
        if not acct.registered:
            raise ContractError(f"{worker_id} is not registered")
        if not codec.is_digest(digest):
            raise ContractError("digest must be 64 lowercase hex characters")
        held = self.commitments.setdefault(worker_id, [])
        if epoch_index != len(held):
            raise ContractError(f"{worker_id}: commitment {epoch_index} out of order, next is {len(held)}")
        gas = GAS_FIRST_COMMIT if not held else GAS_NEXT_COMMIT
        cost = gas * self.gas_price
        if acct.balance < cost:
            raise ContractError(f"{worker_id}: balance {acct.balance} cannot pay {cost} for gas")
        acct.balance -= cost
        acct.gas_spent += gas
        self.burned += cost
        rec = HashCommitment(worker_id, epoch_index, digest, gas,
                             epoch_index if round_index is None else int(round_index))
        held.append(rec)
        self._emit("commit-hash", parties=[worker_id], epoch=epoch_index, round=rec.round_index,
                   digest=digest, gas=gas, amount=cost)
        return rec

    def commitment(self, worker_id, epoch_index):
        held = self.commitments.get(worker_id, [])
        if not 0 <= epoch_index < len(held):
            raise ContractError(f"{worker_id} has no commitment {epoch_index}")
        return held[epoch_index]

    # claims
    def _busy(self, worker_id):
        return any(not c.settled and worker_id in (c.accuser, c.accused) for c in self.claims.values())

    def open_claim(self, accuser, accused, epoch_range=None):
        if accuser == accused:
            raise ContractError("a worker cannot accuse itself")
        for w in (accuser, accused):
            if w not in self.accounts or not self.accounts[w].registered:
                raise ContractError(f"{w} is not registered")
            if self.accounts[w].deposit_held <= 0:
                raise ContractError(f"{w} has no deposit at stake")
        n = len(self.commitments.get(accused, []))
        if epoch_range is None:
            epoch_range = (0, n - 1)
        first, last = (int(x) for x in epoch_range)
        if not 0 <= first <= last < n:
            raise ContractError(f"epoch range {epoch_range} outside {accused}'s {n} commitments")
        if any(not c.settled and c.accused == accused and c.epoch_range == (first, last)
               for c in self.claims.values()):
            raise ContractError(f"a claim on {accused} {epoch_range} is already open")
        if self._busy(accuser) or self._busy(accused):
            raise ContractError("a party is already in an unsettled claim")
        claim_id = f"claim-{len(self.claims) + 1:04d}"
        vc = "vc-" + hashlib.sha256(f"{claim_id}:{accuser}:{accused}:{first}:{last}".encode()).hexdigest()[:16]
        claim = BreachClaim(claim_id, accuser, accused, (first, last), OPEN, vc)
        self.claims[claim_id] = claim
        self._emit("open-claim", parties=[accuser, accused], claim=claim_id,
                   epochs=[first, last], status=OPEN, verification_contract=vc)
        return claim

    def claim(self, claim_id):
        try:
            return self.claims[claim_id]
        except KeyError:
            raise ContractError(f"unknown claim {claim_id}") from None

    def adjudicate_hashes(self, claim_id, recompute):
        """Compare stored digests with ``recompute(worker, round_index)`` from the private chain."""
        claim = self.claim(claim_id)
        if claim.status != OPEN or claim.phase != PHASE_HASHES:
            raise ContractError(f"{claim_id} is not awaiting hash verification")
        first, last = claim.epoch_range
        mismatched = []
        for e in range(first, last + 1):
            rec = self.commitment(claim.accused, e)
            try:
                fresh = recompute(claim.accused, rec.round_index)
            except IntegrityError as exc:
                claim.phase = PHASE_SUSPENDED
                claim.detail = str(exc)
                self._emit("suspend-claim", parties=[claim.accused], claim=claim_id, detail=str(exc))
                return claim
            if fresh != rec.digest:
                mismatched.append(e)
        claim.mismatched = mismatched
        if mismatched:
            claim.status = HASH_MISMATCH
            claim.phase = ""
            self._emit("hash-check", parties=[claim.accused], claim=claim_id,
                       mismatched=mismatched, status=HASH_MISMATCH)
        else:
            claim.phase = PHASE_TROJAN
            self._emit("hash-check", parties=[claim.accused], claim=claim_id,
                       mismatched=[], status=OPEN, log_access="granted")
        return claim

    def may_grant(self, claim_id, subject):
        claim = self.claims.get(claim_id)
        return (claim is not None and claim.status == OPEN and claim.phase == PHASE_TROJAN
                and claim.accused == subject)

    def record_verdict(self, claim_id, verdict):
        """``verdict`` is a bool or anything with a ``flagged`` list (a DetectionReport)."""
        claim = self.claim(claim_id)
        if claim.status != OPEN or claim.phase != PHASE_TROJAN:
            raise ContractError(f"{claim_id} is not in the trojan phase")
        guilty = verdict if isinstance(verdict, bool) else claim.accused in verdict.flagged
        claim.status = TROJAN_CONFIRMED if guilty else DISMISSED
        claim.phase = ""
        self._emit("verdict", parties=[claim.accuser, claim.accused], claim=claim_id, status=claim.status)
        return claim

    def settle(self, claim_id, verdict=None):
        """Forfeit the losing deposit and split it equally among every other registered worker."""
        claim = self.claim(claim_id)
        if claim.settled:
            raise ContractError(f"{claim_id} is already settled")
        if claim.status == OPEN and verdict is not None:
            self.record_verdict(claim_id, verdict)
        if claim.status not in TERMINAL:
            raise ContractError(f"{claim_id} has no terminal determination yet")
        loser = claim.accuser if claim.status == DISMISSED else claim.accused
        acct = self.accounts[loser]
        amount = acct.deposit_held
        acct.deposit_held = 0
        acct.forfeited = True
        others = sorted(w for w, a in self.accounts.items() if a.registered and w != loser)
        share = amount // len(others) if others else 0
        for w in others:
            self.accounts[w].balance += share
        rest = amount - share * len(others)
        self.pool += rest
        claim.settled = True
        rec = Settlement(claim_id, loser, amount, tuple((w, share) for w in others), rest)
        self._emit("settle", parties=[loser], claim=claim_id, status=claim.status, amount=amount,
                   share=share, recipients=others, to_pool=rest)
        self.check_conservation()
        return rec

    def pay_rewards(self, latencies):
        """Return clean deposits and pay base + bonus * (1 - rank/(K-1)) by upload speed.

        ``latencies`` maps worker -> average logical upload latency (lower is faster).
        Workers who lost a deposit in any claim, as accused or as false accuser, get nothing.
        """
        pending = [c.claim_id for c in self.claims.values() if not c.settled]
        if pending:
            raise ContractError(f"unsettled claims: {pending}")
        clean = sorted((w for w, a in self.accounts.items() if a.registered and not a.forfeited),
                       key=lambda w: (latencies.get(w, float("inf")), w))
        k = len(clean)
        owed = {}
        for rank, w in enumerate(clean):
            bonus = self.speed_bonus if k == 1 else self.speed_bonus * (k - 1 - rank) // (k - 1)
            owed[w] = self.base_reward + bonus
        total = sum(owed.values())
        scaled = total > self.pool
        if scaled:
            owed = {w: v * self.pool // total for w, v in owed.items()} if total else owed
        out = []
        for rank, w in enumerate(clean):
            acct = self.accounts[w]
            back = acct.deposit_held
            acct.deposit_held = 0
            acct.balance += back + owed[w]
            self.pool -= owed[w]
            out.append(RewardRecord(w, rank, back, owed[w], scaled))
            self._emit("reward", parties=[w], rank=rank, deposit_returned=back,
                       amount=owed[w], scaled=scaled)
        for w, a in sorted(self.accounts.items()):
            if a.registered and a.forfeited:
                out.append(RewardRecord(w, None, 0, 0, scaled))
        self.check_conservation()
        return out

    def to_state(self):
        """Everything needed to resume the contract, as plain JSON types."""
        return {
            "identities": sorted(self.identities),
            "gas_price": self.gas_price, "base_reward": self.base_reward,
            "speed_bonus": self.speed_bonus,
            "accounts": {w: asdict(a) for w, a in sorted(self.accounts.items())},
            "commitments": {w: [asdict(c) for c in cs] for w, cs in sorted(self.commitments.items())},
            "claims": {c: _claim_dict(v) for c, v in sorted(self.claims.items())},
            "pool": self.pool, "minted": self.minted, "burned": self.burned,
            "events": list(self.events),
        }

    @classmethod
    def from_state(cls, state):
        c = cls(state["identities"], state["gas_price"], state["base_reward"], state["speed_bonus"])
        c.accounts = {w: EscrowAccount(**a) for w, a in state["accounts"].items()}
        c.commitments = {w: [HashCommitment(**h) for h in cs] for w, cs in state["commitments"].items()}
        c.claims = {k: BreachClaim(**{**v, "epoch_range": tuple(v["epoch_range"])})
                    for k, v in state["claims"].items()}
        c.pool, c.minted, c.burned = state["pool"], state["minted"], state["burned"]
        c.events = list(state["events"])
        c.check_conservation()
        return c

    def balances(self):
        return {w: {"balance": a.balance, "deposit_held": a.deposit_held, "gas_spent": a.gas_spent}
                for w, a in sorted(self.accounts.items())} | {"_pool": {"balance": self.pool}}


def _claim_dict(claim):
    d = asdict(claim)
    d["epoch_range"] = list(claim.epoch_range)
    return d
