"""Scene-invariant train/validation splits.

Every eligible record (one with at least one label in the grouping family and
whose primary class is large enough) gets one representative auxiliary label.
Records sharing (primary label, representative) form a pair group, and groups
are never divided between train and validation, so no pair seen in validation
was seen in training.

Variant 1 picks, per record, the label most frequent inside its primary class
and sends the rarest groups to validation. Variant 2 picks the label rarest
inside the class and fills training with the most common groups. Ties in
within-class counts are broken by global popularity (more popular wins for
variant 1, less popular for variant 2), then by label id.
"""

from __future__ import annotations

import json
import warnings
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .manifest import Manifest, Record

RULES = ("most_frequent_in_class", "most_rare_in_class")
VARIANT_RULE = {1: "most_frequent_in_class", 2: "most_rare_in_class"}
VARIANT_NAME = {1: "scene_invariant_1", 2: "scene_invariant_2"}
FRACTION_TOLERANCE = 0.5


class SplitWarning(UserWarning):
    pass


@dataclass(frozen=True)
class RepresentativeChoice:
    record_id: str
    label: int
    rule: str


@dataclass
class PairGroup:
    primary: int
    aux: int
    members: list[str]

    @property
    def key(self) -> tuple[int, int]:
        return (self.primary, self.aux)

    @property
    def rarity(self) -> int:
        return len(self.members)


@dataclass
class SplitAssignment:
    name: str
    variant: int
    family: str
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    choices: dict[str, RepresentativeChoice]
    groups: list[PairGroup]
    params: dict
    achieved_val_fraction: float
    reassigned: list[tuple[int, int]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def side_of(self) -> dict[str, str]:
        out = {i: "train" for i in self.train_ids}
        out.update({i: "val" for i in self.val_ids})
        return out


class _Popularity:
    """Within-class and global counts of one family over a record set."""

    def __init__(self, records: Iterable[Record], family: str):
        self.in_class: Counter = Counter()
        self.glob: Counter = Counter()
        for r in records:
            for x in r.aux(family):
                self.in_class[(r.primary_label, x)] += 1
                self.glob[x] += 1

    def pick(self, record: Record, family: str, rule: str) -> int:
        labels = record.aux(family)
        if not labels:
            raise ValueError(f"record {record.id!r} has no {family} label")
        a = record.primary_label
        if rule == "most_frequent_in_class":
            key = lambda x: (-self.in_class[(a, x)], -self.glob[x], x)  # noqa: E731
        elif rule == "most_rare_in_class":
            key = lambda x: (self.in_class[(a, x)], self.glob[x], x)  # noqa: E731
        else:
            raise ValueError(f"rule must be one of {RULES}")
        return min(labels, key=key)


def choose_representative(m: Manifest, record: Record, rule: str, family: str = "scene") -> int:
    """Representative label of ``record``, with counts taken over all of ``m``."""
    return _Popularity(m.records, family).pick(record, family, rule)


def representatives(m: Manifest, family: str, rule: str,
                    reference: Manifest | None = None) -> dict[str, int]:
    """Representative label per record id, for records with a nonempty family set.

    Popularity counts come from ``reference`` when given (e.g. the training
    records, so held-out labels do not influence the choice), else from ``m``.
    """
    pop = _Popularity((reference or m).records, family)
    return {r.id: pop.pick(r, family, rule) for r in m.records if r.aux(family)}


def eligible(m: Manifest, family: str, min_class_size: int) -> list[Record]:
    """Records with a label in ``family`` whose class keeps ``min_class_size`` such records."""
    m.universe.check_family(family)
    labelled = [r for r in m.records if r.aux(family)]
    sizes = Counter(r.primary_label for r in labelled)
    return [r for r in labelled if sizes[r.primary_label] >= min_class_size]


def _group(records: list[Record], choices: dict[str, RepresentativeChoice]) -> list[PairGroup]:
    members: dict[tuple[int, int], list[str]] = defaultdict(list)
    for r in records:
        members[(r.primary_label, choices[r.id].label)].append(r.id)
    return [PairGroup(a, x, ids) for (a, x), ids in sorted(members.items())]


def _order(groups: list[PairGroup], descending: bool, tie_break: str, seed) -> list[PairGroup]:
    if tie_break == "canonical":
        jitter = {g.key: 0.0 for g in groups}
    elif tie_break == "random":
        rng = np.random.default_rng(seed)
        jitter = {g.key: float(v) for g, v in zip(groups, rng.random(len(groups)))}
    else:
        raise ValueError("tie_break must be 'canonical' or 'random'")
    sign = -1 if descending else 1
    return sorted(groups, key=lambda g: (sign * g.rarity, jitter[g.key], g.key))


def build_split(m: Manifest, variant: int, min_class_size: int = 124, val_fraction: float = 0.06,
                seed: int | None = None, family: str = "scene", repair: bool = True,
                tie_break: str = "canonical") -> SplitAssignment:
    """Assign whole pair groups to train or validation.

    Variant 1 walks groups from rarest up and adds them to validation while the
    validation size stays within ``val_fraction * total``; it stops at the first
    group that would overflow. Variant 2 walks from the most common group down
    and adds to training until training reaches ``(1 - val_fraction) * total``.
    Equal sizes are ordered by (primary id, aux id). With ``repair`` a
    validation class absent from training gets its largest validation group
    moved to training. ``seed`` only matters with ``tie_break="random"``.
    """
    if variant not in (1, 2):
        raise ValueError("variant must be 1 or 2")
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must lie in (0, 1)")
    if min_class_size < 1:
        raise ValueError("min_class_size must be >= 1")
    records = eligible(m, family, min_class_size)
    if not records:
        raise ValueError(f"no record has a {family} label in a class of >= {min_class_size}")
    rule = VARIANT_RULE[variant]
    pop = _Popularity(records, family)
    choices = {r.id: RepresentativeChoice(r.id, pop.pick(r, family, rule), rule) for r in records}
    groups = _group(records, choices)
    total = len(records)
    notes: list[str] = []

    val_keys: set[tuple[int, int]] = set()
    if variant == 1:
        target = val_fraction * total
        size = 0
        for g in _order(groups, False, tie_break, seed):
            if size + g.rarity > target + 1e-9:
                break
            val_keys.add(g.key)
            size += g.rarity
    else:
        target = (1.0 - val_fraction) * total
        size = 0
        train_keys = set()
        for g in _order(groups, True, tie_break, seed):
            if size >= target - 1e-9:
                break
            train_keys.add(g.key)
            size += g.rarity
        val_keys = {g.key for g in groups} - train_keys

    reassigned: list[tuple[int, int]] = []
    if repair:
        train_classes = {g.primary for g in groups if g.key not in val_keys}
        orphans: dict[int, list[PairGroup]] = defaultdict(list)
        for g in groups:
            if g.key in val_keys and g.primary not in train_classes:
                orphans[g.primary].append(g)
        for a in sorted(orphans):
            move = max(orphans[a], key=lambda g: (g.rarity, [-k for k in g.key]))
            val_keys.discard(move.key)
            reassigned.append(move.key)
        if reassigned:
            notes.append(f"moved {len(reassigned)} group(s) to train so every validation class "
                         f"also appears in train: {reassigned}")

    val_set = {i for g in groups if g.key in val_keys for i in g.members}
    train_ids = tuple(r.id for r in records if r.id not in val_set)
    val_ids = tuple(r.id for r in records if r.id in val_set)
    achieved = len(val_ids) / total
    if not val_ids:
        notes.append("validation split is empty")
    elif abs(achieved - val_fraction) > FRACTION_TOLERANCE * val_fraction:
        notes.append(f"achieved validation fraction {achieved:.4f} is more than "
                     f"{FRACTION_TOLERANCE:.0%} away from the target {val_fraction}")
    if not train_ids:
        notes.append("training split is empty")
    for n in notes:
        warnings.warn(n, SplitWarning, stacklevel=2)
    params = {"variant": variant, "family": family, "min_class_size": min_class_size,
              "val_fraction": val_fraction, "repair": repair, "tie_break": tie_break,
              "seed": seed if tie_break == "random" else None,
              "stopping_rule": ("never exceed val_fraction (rarest first)" if variant == 1
                                else "fill train to 1 - val_fraction (most common first)")}
    return SplitAssignment(VARIANT_NAME[variant], variant, family, train_ids, val_ids, choices,
                           groups, params, achieved, reassigned, notes)


@dataclass
class VerifyReport:
    passed: bool
    checks: dict[str, bool]
    failures: list[str]
    warnings: list[str]

    def to_dict(self) -> dict:
        return asdict(self)


def verify_split(m: Manifest, s: SplitAssignment) -> VerifyReport:
    """Recheck a split from scratch: coverage, disjointness, pair leakage,
    group atomicity, class coverage and representative choices."""
    fam = s.family
    min_size = s.params.get("min_class_size", 1)
    failures: list[str] = []
    notes: list[str] = []
    train, val = set(s.train_ids), set(s.val_ids)
    known = {r.id for r in m.records}
    unknown = sorted((train | val) - known)
    if unknown:
        failures.append(f"unknown record ids: {unknown[:5]}")

    # eligibility, counted directly
    with_label = [r for r in m.records if len(r.aux(fam)) > 0]
    size = Counter(r.primary_label for r in with_label)
    expected = {r.id for r in with_label if size[r.primary_label] >= min_size}
    overlap = sorted(train & val)
    checks = {"disjoint": not overlap, "complete": (train | val) == expected}
    if overlap:
        failures.append(f"ids in both train and val: {overlap[:5]}")
    if not checks["complete"]:
        failures.append(f"{len(expected - train - val)} eligible id(s) unassigned, "
                        f"{len((train | val) - expected)} ineligible id(s) assigned")

    by_id = {r.id: r for r in m.records}
    rule = VARIANT_RULE[s.variant]
    pool = [by_id[i] for i in sorted(expected)]
    in_class = Counter((r.primary_label, x) for r in pool for x in r.aux(fam))
    glob = Counter(x for r in pool for x in r.aux(fam))
    mismatched = []
    for r in pool:
        ranked = sorted(r.aux(fam), key=lambda x: (in_class[(r.primary_label, x)], glob[x], -x))
        want = ranked[-1] if rule == "most_frequent_in_class" else \
            sorted(r.aux(fam), key=lambda x: (in_class[(r.primary_label, x)], glob[x], x))[0]
        got = s.choices.get(r.id)
        if got is None or got.label != want or got.label not in r.aux(fam):
            mismatched.append(r.id)
    checks["representatives"] = not mismatched
    if mismatched:
        failures.append(f"representative choice differs for {len(mismatched)} record(s), "
                        f"e.g. {mismatched[:3]}")

    pairs = {"train": set(), "val": set()}
    for side, ids in (("train", train), ("val", val)):
        for i in ids:
            if i in by_id and i in s.choices:
                pairs[side].add((by_id[i].primary_label, s.choices[i].label))
    leaked = sorted(pairs["train"] & pairs["val"])
    checks["pair_disjoint"] = not leaked
    u = m.universe
    for a, x in leaked[:5]:
        failures.append(f"pair leak: {u.name_of(u.primary, a)}:{u.name_of(fam, x)} "
                        "occurs in both train and val")

    split_groups = []
    for g in s.groups:
        sides = {"train" if i in train else "val" if i in val else "none" for i in g.members}
        if len(sides) > 1:
            split_groups.append(g.key)
    checks["atomic_groups"] = not split_groups
    if split_groups:
        failures.append(f"groups divided between splits: {split_groups[:5]}")

    train_classes = {by_id[i].primary_label for i in train if i in by_id}
    uncovered = sorted({by_id[i].primary_label for i in val if i in by_id} - train_classes)
    checks["class_coverage"] = not uncovered
    if uncovered:
        failures.append(f"validation classes missing from train: {uncovered[:5]}")

    target = s.params.get("val_fraction")
    if not val:
        notes.append("validation split is empty")
    elif target and abs(len(val) / max(len(expected), 1) - target) > FRACTION_TOLERANCE * target:
        notes.append("validation fraction outside tolerance of target")
    return VerifyReport(not failures, checks, failures, notes)


def sidecar(s: SplitAssignment, m: Manifest, report: VerifyReport | None = None) -> dict:
    u = m.universe
    side = s.side_of()
    return {
        "name": s.name,
        "params": s.params,
        "n_train": len(s.train_ids),
        "n_val": len(s.val_ids),
        "achieved_val_fraction": s.achieved_val_fraction,
        "reassigned": [[u.name_of(u.primary, a), u.name_of(s.family, x)] for a, x in s.reassigned],
        "warnings": s.warnings,
        "groups": [{"primary": u.name_of(u.primary, g.primary), "aux": u.name_of(s.family, g.aux),
                    "size": g.rarity, "side": side[g.members[0]]} for g in s.groups],
        "representatives": {i: u.name_of(s.family, c.label) for i, c in s.choices.items()},
        "rule": VARIANT_RULE[s.variant],
        "verify": None if report is None else report.to_dict(),
    }


def write_split(s: SplitAssignment, m: Manifest, outdir, report: VerifyReport | None = None) -> None:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train.txt").write_text("".join(f"{i}\n" for i in s.train_ids))
    (out / "val.txt").write_text("".join(f"{i}\n" for i in s.val_ids))
    (out / "split.json").write_text(json.dumps(sidecar(s, m, report), indent=2, sort_keys=True))


def read_ids(path) -> list[str]:
    return [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]
