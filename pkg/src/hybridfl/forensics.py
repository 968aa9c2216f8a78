"""Pixel-pattern trojan injection and Fisher-attribution attacker detection."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import IntegrityError, PreconditionError

PLUS_5X5 = np.array(
    [[0, 0, 1, 0, 0],
     [0, 0, 1, 0, 0],
     [1, 1, 1, 1, 1],
     [0, 0, 1, 0, 0],
     [0, 0, 1, 0, 0]],
    dtype=bool,
)


@dataclass(frozen=True)
class TrojanSpec:
    base_class: int = 5
    target_class: int = 7
    position: tuple = (0, 0)
    value: float = 1.0
    mask: np.ndarray = field(default_factory=lambda: PLUS_5X5.copy(), compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(int(p) for p in self.position))
        object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool))
        if self.base_class == self.target_class:
            raise PreconditionError("base and target class must differ")
        if not 0.0 <= self.value <= 1.0:
            raise PreconditionError("pattern value must be a valid pixel value")

    def check_fits(self, image_shape):
        r, c = self.position
        mh, mw = self.mask.shape
        if r < 0 or c < 0 or r + mh > image_shape[0] or c + mw > image_shape[1]:
            raise PreconditionError(f"pattern at {self.position} does not fit a {image_shape[:2]} image")

    def stamp(self, images):
        """Copy of ``images`` (N, H, W, C) with the pattern written in every channel."""
        self.check_fits(images.shape[1:])
        out = images.copy()
        r, c = self.position
        mh, mw = self.mask.shape
        region = out[:, r:r + mh, c:c + mw, :]
        region[:, self.mask, :] = self.value
        return out


def poison_dataset(data, spec, fraction, seed=0):
    """Stamp and relabel ``fraction`` of the base-class samples; the rest is untouched."""
    if not 0.0 < fraction <= 1.0:
        raise PreconditionError("fraction must be in (0, 1]")
    base = np.flatnonzero(data.labels == spec.base_class)
    if base.size == 0:
        raise PreconditionError(f"no samples of base class {spec.base_class}")
    n_pick = int(round(fraction * base.size))
    if fraction < 1.0:
        base = np.sort(np.random.default_rng(seed).choice(base, size=max(n_pick, 1), replace=False))
    inputs = data.inputs.copy()
    labels = data.labels.copy()
    inputs[base] = spec.stamp(data.inputs[base])
    labels[base] = spec.target_class
    return nn.LabeledDataset(inputs, labels)


def build_poisoned_validation(clean, spec):
    base = np.flatnonzero(clean.labels == spec.base_class)
    if base.size == 0:
        raise PreconditionError(f"validation set has no base class {spec.base_class} samples")
    return poison_dataset(clean.subset(base), spec, 1.0)


def backdoor_loss(model, poisoned):
    if len(poisoned) == 0:
        raise PreconditionError("empty poisoned validation set")
    return nn.loss(model, poisoned)


def backdoor_accuracy(model, poisoned, target_class):
    return float(np.mean(nn.predict(model, poisoned) == target_class))


def top_kappa(scores, kappa):
    """Indices of the ``kappa`` largest scores, larger first, ties to the lower index."""
    kappa = min(int(kappa), scores.size)
    order = np.argsort(-scores, kind="stable")
    return order[:kappa]


@dataclass
class DetectionReport:
    per_agent_avg_l2: dict
    qualifying_rounds: list
    ranking: list
    flagged: list
    insufficient_signal: list = field(default_factory=list)
    no_signal: bool = False
    backdoor_losses: list = field(default_factory=list)  # (round, loss)
    contributions: list = field(default_factory=list)  # (round, agent, l2)
    kappa: int = 0
    assumed_adversaries: int = 0

    @property
    def full_ranking(self):
        return self.ranking + self.insufficient_signal

    def to_dict(self):
        return {
            "per_agent_avg_l2": {k: self.per_agent_avg_l2[k] for k in sorted(self.per_agent_avg_l2)},
            "qualifying_rounds": list(self.qualifying_rounds),
            "ranking": list(self.ranking),
            "flagged": list(self.flagged),
            "insufficient_signal": list(self.insufficient_signal),
            "no_signal": self.no_signal,
            "backdoor_losses": [[t, v] for t, v in self.backdoor_losses],
            "contributions": [[t, a, v] for t, a, v in self.contributions],
            "kappa": self.kappa,
            "assumed_adversaries": self.assumed_adversaries,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            per_agent_avg_l2=dict(d["per_agent_avg_l2"]),
            qualifying_rounds=list(d["qualifying_rounds"]),
            ranking=list(d["ranking"]),
            flagged=list(d["flagged"]),
            insufficient_signal=list(d["insufficient_signal"]),
            no_signal=d["no_signal"],
            backdoor_losses=[tuple(x) for x in d["backdoor_losses"]],
            contributions=[tuple(x) for x in d["contributions"]],
            kappa=d["kappa"],
            assumed_adversaries=d["assumed_adversaries"],
        )

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def summary(self):
        """Plain-text ranking, one agent per line."""
        lines = [f"kappa={self.kappa} qualifying_rounds={len(self.qualifying_rounds)} "
                 f"assumed_adversaries={self.assumed_adversaries}"]
        if self.no_signal:
            lines.append("no-signal: backdoor loss never decreased")
        for pos, agent in enumerate(self.full_ranking, 1):
            tag = " FLAGGED" if agent in self.flagged else ""
            if agent in self.insufficient_signal:
                tag = " insufficient-signal"
            lines.append(f"{pos:3d} {agent} {self.per_agent_avg_l2[agent]:.6f}{tag}")
        return "\n".join(lines) + "\n"


def check_rounds(rounds, atol=0.0):
    prev_after = None
    for rec in rounds:
        if not np.array_equal(rec.global_after, rec.global_before + rec.increment):
            raise IntegrityError(f"round {rec.round_index}: global_after != global_before + increment")
        if prev_after is not None and not np.array_equal(rec.global_before, prev_after):
            raise IntegrityError(f"round {rec.round_index}: does not continue the previous round")
        if set(rec.updates) != set(rec.selected):
            raise IntegrityError(f"round {rec.round_index}: updates do not match the selected agents")
        prev_after = rec.global_after


def detect(rounds, poisoned_val, kappa, m, arch, agents=None):
    """Replay logged rounds and rank agents by top-kappa backdoor contribution.

    A round qualifies when the backdoor loss of its aggregated model is strictly
    below the previous round's. For each qualifying round the diagonal empirical
    Fisher of that model on ``poisoned_val`` picks the ``kappa`` most important
    parameters, and every selected agent is scored by the L2 norm of its update
    restricted to them. Scores are averaged per agent over the rounds it took part in.
    """
    if len(poisoned_val) == 0:
        raise PreconditionError("empty poisoned validation set")
    if kappa < 1 or kappa > arch.dim:
        raise PreconditionError(f"kappa must be in [1, {arch.dim}]")
    check_rounds(rounds)
    seen = set(agents or ())
    sums, counts = {}, {}
    qualifying, losses, contributions = [], [], []
    prev = None
    for rec in rounds:
        seen.update(rec.selected)
        model = nn.Model(arch, rec.global_after)
        value = backdoor_loss(model, poisoned_val)
        losses.append((rec.round_index, value))
        if prev is not None and value < prev:
            qualifying.append(rec.round_index)
            fim = nn.per_sample_sq_grad(model, poisoned_val)
            idx = top_kappa(fim, kappa)
            for agent in rec.selected:
                l2 = float(np.linalg.norm(np.asarray(rec.updates[agent])[idx]))
                contributions.append((rec.round_index, agent, l2))
                sums[agent] = sums.get(agent, 0.0) + l2
                counts[agent] = counts.get(agent, 0) + 1
        prev = value

    averages = {a: sums[a] / counts[a] for a in sums}
    ranking = sorted(averages, key=lambda a: (-averages[a], a))
    absent = sorted(seen - set(averages))
    for a in absent:
        averages[a] = 0.0
    return DetectionReport(
        per_agent_avg_l2=averages,
        qualifying_rounds=qualifying,
        ranking=ranking,
        flagged=ranking[:m],
        insufficient_signal=absent,
        no_signal=not qualifying,
        backdoor_losses=losses,
        contributions=contributions,
        kappa=int(kappa),
        assumed_adversaries=int(m),
    )
