"""Data setup, attack and detection evaluation shared by the CLI and the acceptance harness."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import data, fl, forensics, nn
from .errors import PreconditionError

ATTACK_OK = "ok"
ATTACK_FAILED = "attack-failed"
ATTACK_ABSENT = "attack-absent"


@dataclass
class Setup:
    arch: nn.Architecture
    fl_config: fl.FLConfig
    agents: list
    validation: nn.LabeledDataset
    poisoned_validation: nn.LabeledDataset
    trojan: forensics.TrojanSpec
    adversaries: list


@dataclass
class Outcome:
    records: list
    report: forensics.DetectionReport
    clean_accuracy: float
    backdoor_accuracy: float
    status: str
    adversaries: list

    def summary(self):
        return {
            "status": self.status,
            "clean_accuracy": self.clean_accuracy,
            "backdoor_accuracy": self.backdoor_accuracy,
            "adversaries": list(self.adversaries),
            "ranking": self.report.full_ranking,
            "flagged": list(self.report.flagged),
            "qualifying_rounds": len(self.report.qualifying_rounds),
        }


def _split(cfg, train, k, attempt):
    seed = [cfg.seed, 3, attempt]
    if cfg.split["kind"] == "iid":
        return data.iid_split(train, k, seed)
    return data.dirichlet_split(train, k, float(cfg.split["concentration"]), seed, min_size=1)


def prepare(cfg, max_split_tries=100):
    """Datasets and agents for ``cfg``. The first ceil(F*K) agents are the adversaries.

    Dirichlet splits are redrawn until every adversary holds at least
    ``min_adversary_base_samples`` base-class samples to poison.
    """
    flc = cfg.fl_config()
    arch = cfg.architecture_obj()
    spec = cfg.trojan_spec()
    k = flc.agents
    train = data.synthetic_dataset(cfg.samples_per_agent * k, [cfg.seed, 1], noise=cfg.noise)
    validation = data.synthetic_dataset(cfg.validation_size, [cfg.seed, 2], noise=cfg.noise)
    n_bad = flc.n_corrupt
    need = cfg.min_adversary_base_samples
    for attempt in range(max_split_tries):
        parts = _split(cfg, train, k, attempt)
        if all(np.sum(parts[i].labels == spec.base_class) >= need for i in range(n_bad)):
            break
    else:
        raise PreconditionError(f"no split gives every adversary {need} base-class samples")
    ids = fl.agent_ids(k)
    agents = []
    for i, (aid, part) in enumerate(zip(ids, parts)):
        bad = i < n_bad
        if bad:
            part = forensics.poison_dataset(part, spec, float(cfg.trojan["fraction"]), seed=[cfg.seed, 4, i])
        agents.append(fl.AgentSpec(aid, part, is_corrupt=bad))
    poisoned = forensics.build_poisoned_validation(validation, spec)
    return Setup(arch, flc, agents, validation, poisoned, spec, ids[:n_bad])


def evaluate(cfg, setup, records, kappa=None, m=None):
    final = nn.Model(setup.arch, records[-1].global_after)
    clean = nn.accuracy(final, setup.validation)
    bd = forensics.backdoor_accuracy(final, setup.poisoned_validation, setup.trojan.target_class)
    kappa = cfg.kappa if kappa is None else kappa
    m = cfg.assumed_adversaries() if m is None else m
    report = forensics.detect(records, setup.poisoned_validation, kappa, m, setup.arch,
                              agents=[a.agent_id for a in setup.agents])
    if not setup.adversaries:
        status = ATTACK_ABSENT
    elif bd < cfg.detection["min_backdoor_accuracy"]:
        status = ATTACK_FAILED
    else:
        status = ATTACK_OK
    return Outcome(records, report, float(clean), float(bd), status, list(setup.adversaries))


def run_in_memory(cfg):
    """Train with the in-memory oracle aggregators and evaluate; no chain, contract or logs."""
    setup = prepare(cfg)
    records = fl.run_protocol(setup.fl_config, setup.agents, cfg.aggregator, arch=setup.arch)
    return evaluate(cfg, setup, records)
