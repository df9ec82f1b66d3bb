"""Dichotomous necessary condition analysis over (primary, auxiliary) label pairs.

For an outcome Y (a primary label) and a condition X (an auxiliary label) the
2x2 contingency matrix is laid out as::

                 X absent    X present
    Y present    (1,1)       (1,2)        <- (1,1) sits above the ceiling line
    Y absent     (2,1)       (2,2)

X is necessary for Y when cell (1,1) is empty. With noisy labels the rule is
relaxed: cell (1,1), normalized by the co-occurrence cell (1,2), must fall
below a threshold. Cell (2,1) grows with any unrelated item added to the data,
so it is stored but never used in a decision.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .manifest import Manifest, ManifestError

DEFAULT_CUTOFF = 0.5
_trapezoid = getattr(np, "trapezoid", None) or np.trapz
MODES = ("any", "most_frequent")


def default_thresholds(num: int = 21) -> np.ndarray:
    return np.linspace(0.0, 1.0, num)


def parse_thresholds(text: str) -> np.ndarray:
    """Parse ``start:stop:num`` or a comma list into a sorted threshold grid."""
    if ":" in text:
        start, stop, num = text.split(":")
        grid = np.linspace(float(start), float(stop), int(num))
    else:
        grid = np.array([float(t) for t in text.split(",") if t.strip()])
    _check_grid(grid)
    return grid


def _check_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError("threshold grid must be a non-empty 1-D sequence")
    if np.any(grid < 0) or np.any(np.diff(grid) < 0):
        raise ValueError("thresholds must be nonnegative and sorted ascending")
    return grid


@dataclass(frozen=True)
class ContingencyMatrix:
    n_y1_x0: int
    n_y1_x1: int
    n_y0_x1: int
    n_y0_x0: int

    @property
    def n_y1(self) -> int:
        return self.n_y1_x0 + self.n_y1_x1

    def normalized(self) -> "NormalizedContingency":
        d = self.n_y1_x1
        if d == 0:
            return NormalizedContingency(float("nan"), float("nan"), float("nan"), float("nan"),
                                         valid=False)
        return NormalizedContingency(self.n_y1_x0 / d, 1.0, self.n_y0_x1 / d, self.n_y0_x0 / d)

    def as_grid(self) -> list[list[int]]:
        """Conventional layout: rows Y present/absent, columns X absent/present."""
        return [[self.n_y1_x0, self.n_y1_x1], [self.n_y0_x0, self.n_y0_x1]]


@dataclass(frozen=True)
class NormalizedContingency:
    y1_x0: float
    y1_x1: float
    y0_x1: float
    y0_x0: float
    valid: bool = True

    def as_grid(self) -> list[list[float]]:
        return [[self.y1_x0, self.y1_x1], [self.y0_x0, self.y0_x1]]


def _indicators(m: Manifest, family: str) -> tuple[np.ndarray, np.ndarray]:
    """Integer one-hot primary matrix (n x A) and multi-hot family matrix (n x L)."""
    u = m.universe
    n = len(m.records)
    prim = np.zeros((n, u.size(u.primary)), dtype=np.int64)
    aux = np.zeros((n, u.size(family)), dtype=np.int64)
    for i, r in enumerate(m.records):
        prim[i, r.primary_label] = 1
        for j in r.aux(family):
            aux[i, j] = 1
    return prim, aux


@dataclass(frozen=True)
class _Counts:
    """All pairwise cells for one family at once, as (A x L) integer arrays."""
    y1_x1: np.ndarray
    y1: np.ndarray
    x1: np.ndarray
    n: int

    @classmethod
    def of(cls, m: Manifest, family: str) -> "_Counts":
        prim, aux = _indicators(m, family)
        return cls(prim.T @ aux, prim.sum(axis=0), aux.sum(axis=0), len(m.records))

    def matrix(self, a: int, x: int) -> ContingencyMatrix:
        n11 = int(self.y1_x1[a, x])
        ny = int(self.y1[a])
        nx = int(self.x1[x])
        return ContingencyMatrix(ny - n11, n11, nx - n11, self.n - ny - nx + n11)


def _resolve(m: Manifest, family: str, label) -> int:
    m.universe.check_family(family)
    if isinstance(label, str):
        return m.universe.id_of(family, label)
    if not 0 <= int(label) < m.universe.size(family):
        raise ManifestError(f"unknown label id {label} in family {family!r}")
    return int(label)


def contingency(m: Manifest, primary_label, family: str, aux_label) -> ContingencyMatrix:
    """2x2 counts for one (primary label, auxiliary label) pair."""
    a = _resolve(m, m.primary, primary_label)
    x = _resolve(m, family, aux_label)
    return _Counts.of(m, family).matrix(a, x)


def contingency_table(m: Manifest, family: str) -> dict[tuple[int, int], ContingencyMatrix]:
    """Matrices for every (primary id, aux id) pair of a family."""
    m.universe.check_family(family)
    counts = _Counts.of(m, family)
    return {(a, x): counts.matrix(a, x)
            for a in range(counts.y1.size) for x in range(counts.x1.size)}


def _most_frequent(counts: _Counts, a: int) -> int | None:
    row = counts.y1_x1[a]
    if row.size == 0 or row.max() == 0:
        return None
    # lexicographic: co-occurrence desc, global frequency desc, id asc
    order = np.lexsort((np.arange(row.size), -counts.x1, -row))
    return int(order[0])


def most_frequent_cooccurring(m: Manifest, primary_label, family: str) -> int | None:
    """Auxiliary label co-occurring most often with ``primary_label``.

    Ties go to the label that is more frequent across the whole manifest, then
    to the lower label id. Returns None when nothing co-occurs.
    """
    a = _resolve(m, m.primary, primary_label)
    m.universe.check_family(family)
    return _most_frequent(_Counts.of(m, family), a)


def necessity_holds(c: ContingencyMatrix, threshold: float) -> bool:
    """Strict test ``n_y1_x0 / n_y1_x1 < threshold``; threshold 0 means ``n_y1_x0 == 0``."""
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    if threshold == 0:
        return c.n_y1_x0 == 0 and c.n_y1_x1 > 0
    if c.n_y1_x1 == 0:
        raise ValueError("contingency matrix has no co-occurrence and cannot be normalized")
    return c.n_y1_x0 / c.n_y1_x1 < threshold


@dataclass
class FamilyReport:
    family: str
    mode: str
    thresholds: np.ndarray
    sweep: np.ndarray                       # primary labels with a necessary aux label, per threshold
    n_primary: int
    representative: dict[int, int | None]   # primary id -> most frequent co-occurring aux id
    matrices: dict[int, ContingencyMatrix]
    average: NormalizedContingency
    n_averaged: int
    score: float = 0.0
    sign: int = 0
    labels: Mapping[str, Sequence[str]] = field(default_factory=dict, repr=False)

    def area(self) -> float:
        """Area under the sweep curve normalized by primary-label count and grid span."""
        if self.n_primary == 0:
            return 0.0
        frac = self.sweep / self.n_primary
        span = self.thresholds[-1] - self.thresholds[0]
        if span == 0:
            return float(frac.mean())
        return float(_trapezoid(frac, self.thresholds) / span)

    def to_dict(self) -> dict:
        prim_names = self.labels.get("primary", ())
        aux_names = self.labels.get("aux", ())
        per_label = {}
        for a, x in self.representative.items():
            key = prim_names[a] if prim_names else str(a)
            entry = {"most_frequent": None if x is None else (aux_names[x] if aux_names else x)}
            if x is not None:
                c = self.matrices[a]
                entry["contingency"] = c.as_grid()
                entry["normalized"] = c.normalized().as_grid()
            per_label[key] = entry
        avg = self.average
        return {
            "family": self.family,
            "mode": self.mode,
            "thresholds": [round(float(t), 12) for t in self.thresholds],
            "sweep": [int(v) for v in self.sweep],
            "n_primary": self.n_primary,
            "average_normalized": avg.as_grid() if avg.valid else None,
            "n_averaged": self.n_averaged,
            "score": round(self.score, 12),
            "sign": self.sign,
            "per_primary": per_label,
        }


def analyze(m: Manifest, family: str, thresholds=None, mode: str = "any") -> FamilyReport:
    """Threshold sweep and averaged normalized matrix for one auxiliary family.

    ``mode="any"`` counts a primary label as having a necessary condition at
    threshold t when any co-occurring label in the family passes; with
    ``mode="most_frequent"`` only its most frequent co-occurring label is tested.
    """
    u = m.universe
    u.check_family(family)
    if family == u.primary:
        raise ValueError("cannot analyze the primary family against itself")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    grid = _check_grid(default_thresholds() if thresholds is None else thresholds)
    counts = _Counts.of(m, family)
    present = [a for a in range(u.size(u.primary)) if counts.y1[a] > 0]

    # ratio of cell (1,1) to (1,2); inf where the pair never co-occurs
    n11 = counts.y1_x1.astype(float)
    n10 = counts.y1[:, None] - counts.y1_x1
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(n11 > 0, n10 / np.where(n11 > 0, n11, 1.0), np.inf)

    rep = {a: _most_frequent(counts, a) for a in present}
    if mode == "any":
        candidates = {a: np.flatnonzero(counts.y1_x1[a] > 0) for a in present}
    else:
        candidates = {a: np.array([] if rep[a] is None else [rep[a]], dtype=int) for a in present}

    sweep = np.zeros(grid.size, dtype=np.int64)
    for a in present:
        xs = candidates[a]
        if xs.size == 0:
            continue
        best = ratio[a, xs].min()
        strict = bool(np.any(n10[a, xs] == 0))
        for k, t in enumerate(grid):
            if (strict if t == 0 else best < t):
                sweep[k] += 1

    matrices = {a: counts.matrix(a, x) for a, x in rep.items() if x is not None}
    valid = [matrices[a].normalized() for a in present if a in matrices]
    if valid:
        cells = np.array([[v.y1_x0, v.y1_x1, v.y0_x1, v.y0_x0] for v in valid])
        mean = cells.mean(axis=0)
        average = NormalizedContingency(*map(float, mean))
    else:
        average = NormalizedContingency(*([float("nan")] * 4), valid=False)
    report = FamilyReport(family, mode, grid, sweep, len(present), rep, matrices, average,
                          len(valid), labels={"primary": u.labels[u.primary],
                                              "aux": u.labels[family]})
    report.score = report.area()
    return report


def recommend_signs(reports: Mapping[str, FamilyReport] | Sequence[FamilyReport],
                    cutoff: float = DEFAULT_CUTOFF) -> dict[str, int]:
    """+1 (auxiliary) for families whose normalized sweep area exceeds ``cutoff``, else -1.

    The score is recorded on each report. A cutoff of 0 admits every family.
    """
    if not isinstance(reports, Mapping):
        reports = {r.family: r for r in reports}
    signs = {}
    for fam, rep in reports.items():
        rep.score = rep.area()
        rep.sign = 1 if (cutoff <= 0 or rep.score > cutoff) else -1
        signs[fam] = rep.sign
    return signs


def run(m: Manifest, families: Sequence[str], thresholds=None, mode: str = "any",
        cutoff: float = DEFAULT_CUTOFF) -> dict:
    """Analyze several families and return the JSON-ready report."""
    reports = {f: analyze(m, f, thresholds, mode) for f in families}
    signs = recommend_signs(reports, cutoff)
    return {
        "primary": m.primary,
        "n_records": len(m.records),
        "cutoff": cutoff,
        "mode": mode,
        "signs": signs,
        "families": {f: r.to_dict() for f, r in reports.items()},
    }


def dumps(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True, allow_nan=False)
