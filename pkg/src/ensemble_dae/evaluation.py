"""Accuracy-improvement metrics and the scenario matrix.

A defense is identified by a :class:`DefenseKey`: the set of attack
algorithms and the set of architecture types whose gradients produced its
training noise.  Accuracies are kept as exact fractions and only turned
into floats when reported.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations
from typing import Optional

import numpy as np

from .attacks import ALGORITHMS, AttackConfig, run_attack
from .defense import test_time_defense
from .errors import ContractError, DomainError, MissingDefenseError, UndefinedMetricError
from .nn.model import count_correct

FAMILIES = ("vary-arch", "vary-attack")
ARCHITECTURES = ("fc", "cnn")
LOW_CONFIDENCE = Fraction(1, 1000)


def accuracy_improvement(post, pre):
    """Signed post-defense minus pre-defense accuracy.

    Fractions in give a Fraction out; anything else is treated as float.
    """
    for v in (post, pre):
        if not 0 <= v <= 1:
            raise DomainError(f"accuracy {float(v)} lies outside [0, 1]")
    if isinstance(post, Fraction) or isinstance(pre, Fraction):
        return Fraction(post) - Fraction(pre)
    return float(post) - float(pre)


def percent_increase(p, t):
    """(p - t) / |t| * 100; raises UndefinedMetricError when t == 0."""
    if t == 0:
        raise UndefinedMetricError("percent increase is undefined when the baseline improvement t is 0")
    if isinstance(p, Fraction) and isinstance(t, Fraction):
        return (p - t) / abs(t) * 100
    return (p - t) / abs(t) * 100.0


@dataclass(frozen=True, order=True)
class DefenseKey:
    attacks: tuple
    archs: tuple

    @classmethod
    def of(cls, attacks, archs):
        attacks = tuple(sorted(set(attacks)))
        archs = tuple(sorted(set(archs)))
        for a in attacks:
            if a not in ALGORITHMS:
                raise ContractError(f"unknown attack {a!r} in defense key")
        if not attacks or not archs:
            raise ContractError("a defense key needs at least one attack and one architecture")
        return cls(attacks, archs)

    @classmethod
    def parse(cls, text):
        attacks, _, archs = text.partition("@")
        return cls.of(attacks.split("+"), archs.split("+"))

    def __str__(self):
        return "+".join(self.attacks) + "@" + "+".join(self.archs)


@dataclass(frozen=True)
class AttackSpec:
    """An attacker's choice: algorithm config applied with a source model."""

    config: AttackConfig
    source: object  # Model

    @property
    def arch(self):
        from .nn.presets import arch_type

        return arch_type(self.source.spec)

    def describe(self):
        return f"{self.config.label()} on {self.source.name}"


@dataclass
class ScenarioSpec:
    name: str
    family: str
    victim: object  # Model
    images: np.ndarray
    labels: np.ndarray
    defense_pool: dict  # DefenseKey -> Model
    proposed: DefenseKey
    attack: Optional[AttackSpec] = None
    study_attack: Optional[str] = None  # vary-arch without attack: which single attack the baselines use
    archs: tuple = ARCHITECTURES  # vary-attack: architecture set the defenses were trained on
    attacks: tuple = ALGORITHMS  # vary-attack: the attack menu
    baselines: Optional[list] = None  # explicit override; None selects per the rules
    baseline_free: bool = False
    attacked_images: Optional[np.ndarray] = None  # precomputed attack output

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ContractError(f"unknown scenario family {self.family!r}")
        if len(self.images) != len(self.labels) or len(self.images) == 0:
            raise ContractError("scenario needs a non-empty, aligned test set")


def select_traditional_baselines(scenario, defense_pool=None):
    """Traditional defenses the proposed one is compared against.

    vary-arch, attacked: the defense trained with the attacker's algorithm on
    the other architecture type.  vary-arch, no attack: the two single-type
    defenses for the study attack.  vary-attack, attacked: the two
    single-attack defenses the attacker did not use plus their pair.
    vary-attack, no attack: all single-attack and pair-attack defenses.
    """
    pool = scenario.defense_pool if defense_pool is None else defense_pool
    if scenario.family == "vary-arch":
        if scenario.attack is not None:
            other = [a for a in ARCHITECTURES if a != scenario.attack.arch]
            wanted = [DefenseKey.of([scenario.attack.config.algorithm], [a]) for a in other]
        else:
            if scenario.study_attack is None:
                raise ContractError("vary-arch scenario without an attack needs study_attack")
            wanted = [DefenseKey.of([scenario.study_attack], [a]) for a in ARCHITECTURES]
    else:
        menu = list(scenario.attacks)
        if scenario.attack is not None:
            rest = [a for a in menu if a != scenario.attack.config.algorithm]
            wanted = [DefenseKey.of([a], scenario.archs) for a in rest]
            wanted.append(DefenseKey.of(rest, scenario.archs))
        else:
            wanted = [DefenseKey.of([a], scenario.archs) for a in menu]
            wanted += [DefenseKey.of(pair, scenario.archs) for pair in combinations(menu, 2)]
    missing = [k for k in wanted if k not in pool]
    if missing:
        raise MissingDefenseError(missing)
    return wanted


@dataclass
class ScenarioResult:
    name: str
    family: str
    attack: Optional[str]
    total: int
    pre_correct: int
    post_correct: dict  # defense label -> correct count
    proposed: str
    baselines: list
    flags: list = field(default_factory=list)

    @property
    def pre(self):
        return Fraction(self.pre_correct, self.total)

    def post(self, label):
        return Fraction(self.post_correct[label], self.total)

    def improvement(self, label):
        return self.post(label) - self.pre

    @property
    def p(self):
        return self.improvement(self.proposed)

    @property
    def t(self):
        if not self.baselines:
            return None
        return sum((self.improvement(b) for b in self.baselines), Fraction(0)) / len(self.baselines)

    @property
    def percent_increase(self):
        t = self.t
        if t is None or t == 0:
            return None
        return percent_increase(self.p, t)

    def to_dict(self):
        """JSON-safe record; fractions appear as [numerator, denominator] and as floats."""
        def fr(f):
            return None if f is None else {"exact": [f.numerator, f.denominator], "value": float(f)}

        labels = [self.proposed] + self.baselines
        pi = self.percent_increase
        return {
            "name": self.name,
            "family": self.family,
            "attack": self.attack,
            "total": self.total,
            "pre_correct": self.pre_correct,
            "pre_accuracy": fr(self.pre),
            "proposed": self.proposed,
            "baselines": list(self.baselines),
            "defenses": {lab: {"post_correct": self.post_correct[lab], "post_accuracy": fr(self.post(lab)),
                               "improvement": fr(self.improvement(lab))} for lab in labels},
            "p": fr(self.p),
            "t": fr(self.t),
            "percent_increase": fr(pi),
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], d["family"], d["attack"], d["total"], d["pre_correct"],
                   {k: v["post_correct"] for k, v in d["defenses"].items()}, d["proposed"], list(d["baselines"]),
                   list(d["flags"]))


def result_flags(result):
    flags = []
    for label in [result.proposed] + result.baselines:
        if result.improvement(label) < 0:
            flags.append(f"negative-improvement:{label}")
    t = result.t
    if t is not None:
        if t == 0:
            flags.append("undefined-percent-increase")
        elif abs(t) < LOW_CONFIDENCE:
            flags.append("low-confidence-t")
    return flags


def attacked_inputs(spec):
    if spec.attacked_images is not None:
        return np.asarray(spec.attacked_images, dtype=np.float64)
    if spec.attack is None:
        return np.asarray(spec.images, dtype=np.float64)
    return run_attack(spec.attack.source, spec.images, spec.labels, spec.attack.config).perturbed


def run_scenario(spec: ScenarioSpec) -> ScenarioResult:
    """Victim accuracy on (attacked) test data, without and with each defense."""
    if spec.baseline_free:
        baselines = []
    elif spec.baselines is not None:
        baselines = list(spec.baselines)
        if not baselines:
            raise ContractError("baselines are empty; set baseline_free for diagnostic runs")
        missing = [k for k in baselines if k not in spec.defense_pool]
        if missing:
            raise MissingDefenseError(missing)
    else:
        baselines = select_traditional_baselines(spec)
    if spec.proposed not in spec.defense_pool:
        raise MissingDefenseError([spec.proposed])
    x = attacked_inputs(spec)
    labels = np.asarray(spec.labels)
    pre = count_correct(spec.victim, x, labels)
    post = {}
    for key in [spec.proposed] + baselines:
        post[str(key)] = count_correct(spec.victim, test_time_defense(spec.defense_pool[key], x), labels)
    result = ScenarioResult(spec.name, spec.family, spec.attack.describe() if spec.attack else None, len(labels),
                            pre, post, str(spec.proposed), [str(b) for b in baselines])
    result.flags = result_flags(result)
    return result


# -- reports ---------------------------------------------------------------

REPORT_FORMATS = ("csv", "json", "md")
_COLUMNS = ("scenario", "attack", "pre_defense_accuracy", "proposed", "proposed_improvement",
            "baseline_improvements", "t", "percent_increase", "flags")


def _fmt(value, digits=4):
    return "" if value is None else f"{value:.{digits}f}"


def report_rows(results):
    rows = []
    for r in results:
        if isinstance(r, dict):
            r = ScenarioResult.from_dict(r)
        pi = r.percent_increase
        rows.append({
            "scenario": r.name,
            "attack": r.attack or "none",
            "pre_defense_accuracy": _fmt(float(r.pre)),
            "proposed": r.proposed,
            "proposed_improvement": _fmt(float(r.p)),
            "baseline_improvements": "; ".join(f"{b}={float(r.improvement(b)):+.4f}" for b in r.baselines),
            "t": _fmt(None if r.t is None else float(r.t)),
            "percent_increase": "undefined" if pi is None and r.baselines else _fmt(None if pi is None else float(pi), 2),
            "flags": " ".join(r.flags),
        })
    return rows


def format_report(results, fmt="md"):
    """Table of scenario, pre-defense accuracy, improvements and percent increase."""
    if fmt not in REPORT_FORMATS:
        raise ContractError(f"unknown report format {fmt!r}; choose from {REPORT_FORMATS}")
    rows = report_rows(results)
    if fmt == "json":
        return json.dumps(rows, indent=2) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        return buf.getvalue()
    lines = ["| " + " | ".join(_COLUMNS) + " |", "|" + "---|" * len(_COLUMNS)]
    for row in rows:
        lines.append("| " + " | ".join(row[c].replace("|", "/") for c in _COLUMNS) + " |")
    return "\n".join(lines) + "\n"
