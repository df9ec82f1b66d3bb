"""Multi-label dataset manifests.

A manifest is a label universe (one sorted label list per task family, with a
designated primary family) plus an ordered list of records. Each record has
exactly one primary label and a possibly-empty label set per auxiliary family.

Two on-disk formats are supported:

* JSON Lines (canonical). An optional header object on line 1 names the
  families and the JSON field each one is read from::

      {"families": {"action": "action", "scene": "scenes", "object": "objects"},
       "primary": "action", "labels": {"scene": ["beach", "pool"], ...}}

  ``labels`` is optional and declares labels that may not be observed in any
  record; ``emit`` always writes it so that round trips are exact.
* CSV with columns ``id,<primary field>,<aux fields...>``; multi-label cells
  are ``|``-delimited.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

log = logging.getLogger(__name__)

DEFAULT_FIELDS = {"action": "action", "scene": "scenes", "object": "objects"}
DEFAULT_PRIMARY = "action"
MULTI_SEP = "|"


class ManifestError(ValueError):
    """Raised for malformed or inconsistent manifest input."""


@dataclass(frozen=True)
class LabelUniverse:
    families: tuple[str, ...]
    labels: Mapping[str, tuple[str, ...]]
    primary: str

    def __post_init__(self):
        if self.families.count(self.primary) != 1:
            raise ManifestError(f"primary family {self.primary!r} must appear exactly once")
        for fam in self.families:
            labs = self.labels.get(fam)
            if labs is None:
                raise ManifestError(f"no label list for family {fam!r}")
            if len(set(labs)) != len(labs):
                raise ManifestError(f"duplicate labels in family {fam!r}")
            if list(labs) != sorted(labs):
                raise ManifestError(f"labels of family {fam!r} are not sorted")
        object.__setattr__(self, "_index", {
            fam: {lab: i for i, lab in enumerate(self.labels[fam])} for fam in self.families
        })

    @classmethod
    def build(cls, families: Sequence[str], primary: str,
              labels: Mapping[str, Iterable[str]]) -> "LabelUniverse":
        return cls(tuple(families), {f: tuple(sorted(set(labels.get(f, ())))) for f in families},
                   primary)

    @property
    def aux_families(self) -> tuple[str, ...]:
        return tuple(f for f in self.families if f != self.primary)

    def size(self, family: str) -> int:
        return len(self.labels[family])

    def id_of(self, family: str, label: str) -> int:
        try:
            return self._index[family][label]
        except KeyError:
            raise ManifestError(f"unknown label {label!r} in family {family!r}") from None

    def name_of(self, family: str, label_id: int) -> str:
        return self.labels[family][label_id]

    def check_family(self, family: str) -> None:
        if family not in self.labels:
            raise ManifestError(f"unknown family {family!r}")


@dataclass(frozen=True)
class Record:
    id: str
    primary_label: int
    aux_labels: Mapping[str, frozenset[int]] = field(default_factory=dict)

    def aux(self, family: str) -> frozenset[int]:
        return self.aux_labels.get(family, frozenset())


@dataclass(frozen=True)
class Manifest:
    universe: LabelUniverse
    records: tuple[Record, ...]

    def __post_init__(self):
        u = self.universe
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise ManifestError(f"duplicate record id {r.id!r}")
            seen.add(r.id)
            if not 0 <= r.primary_label < u.size(u.primary):
                raise ManifestError(f"record {r.id!r}: primary label id out of range")
            for fam, ids in r.aux_labels.items():
                if fam not in u.aux_families:
                    raise ManifestError(f"record {r.id!r}: unknown aux family {fam!r}")
                n = u.size(fam)
                if any(not 0 <= i < n for i in ids):
                    raise ManifestError(f"record {r.id!r}: {fam} label id out of range")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def primary(self) -> str:
        return self.universe.primary

    def index(self) -> dict[str, int]:
        return {r.id: i for i, r in enumerate(self.records)}

    def subset(self, ids: Iterable[str]) -> "Manifest":
        """Records with the given ids, in manifest order; universe unchanged."""
        keep = set(ids)
        return Manifest(self.universe, tuple(r for r in self.records if r.id in keep))

    def to_named(self) -> list[dict]:
        """Records as plain dicts of label strings (renumbering-independent view)."""
        u = self.universe
        out = []
        for r in self.records:
            row = {"id": r.id, u.primary: u.name_of(u.primary, r.primary_label)}
            for fam in u.aux_families:
                row[fam] = sorted(u.name_of(fam, i) for i in r.aux(fam))
            out.append(row)
        return out


def from_named(rows: Sequence[Mapping], families: Sequence[str] = ("action", "scene", "object"),
               primary: str = DEFAULT_PRIMARY,
               declared: Mapping[str, Iterable[str]] | None = None) -> Manifest:
    """Build a manifest from dicts keyed by family name holding label strings."""
    labels: dict[str, set[str]] = {f: set((declared or {}).get(f, ())) for f in families}
    for row in rows:
        labels[primary].add(row[primary])
        for fam in families:
            if fam != primary:
                labels[fam].update(row.get(fam, ()))
    universe = LabelUniverse.build(families, primary, labels)
    records = []
    for row in rows:
        aux = {fam: frozenset(universe.id_of(fam, lab) for lab in row.get(fam, ()))
               for fam in universe.aux_families}
        records.append(Record(str(row["id"]), universe.id_of(primary, row[primary]), aux))
    return Manifest(universe, tuple(records))


def _primary_value(value, where: str) -> str:
    if isinstance(value, list):
        if len(value) != 1:
            raise ManifestError(f"{where}: expected exactly one primary label, got {len(value)}")
        value = value[0]
    if not isinstance(value, str) or value == "":
        raise ManifestError(f"{where}: missing primary label")
    return value


def _aux_value(value, where: str) -> list[str]:
    if value is None:
        return []
    if isinstance(value, str):
        return [value] if value else []
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ManifestError(f"{where}: auxiliary labels must be a list of strings")
    return value


def _ingest_jsonl(text: str) -> Manifest:
    fields = dict(DEFAULT_FIELDS)
    primary = DEFAULT_PRIMARY
    declared: dict[str, list[str]] = {}
    rows = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        where = f"line {lineno}"
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{where}: malformed JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise ManifestError(f"{where}: expected a JSON object")
        if "families" in obj and "id" not in obj:
            if rows:
                raise ManifestError(f"{where}: header must be the first line")
            fams = obj["families"]
            if isinstance(fams, list):
                fams = {f: f for f in fams}
            if not isinstance(fams, dict) or not fams:
                raise ManifestError(f"{where}: 'families' must be a non-empty object")
            fields = {str(k): str(v) for k, v in fams.items()}
            primary = obj.get("primary", DEFAULT_PRIMARY)
            if primary not in fields:
                raise ManifestError(f"{where}: primary family {primary!r} not among families")
            declared = {str(k): list(v) for k, v in obj.get("labels", {}).items()}
            continue
        if "id" not in obj:
            raise ManifestError(f"{where}: record without 'id'")
        rid = str(obj["id"])
        if rid in seen:
            raise ManifestError(f"{where}: duplicate record id {rid!r} (first on line {seen[rid]})")
        seen[rid] = lineno
        row = {"id": rid, primary: _primary_value(obj.get(fields[primary]), where)}
        for fam, key in fields.items():
            if fam != primary:
                row[fam] = _aux_value(obj.get(key), where)
        rows.append(row)
    if not rows:
        raise ManifestError("manifest contains no records")
    return from_named(rows, list(fields), primary, declared)


def _family_for_column(col: str) -> str:
    reverse = {v: k for k, v in DEFAULT_FIELDS.items()}
    return reverse.get(col, col)


def _ingest_csv(text: str) -> Manifest:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ManifestError("manifest contains no records") from None
    if len(header) < 2 or header[0] != "id":
        raise ManifestError("line 1: CSV header must start with 'id' and name the primary column")
    families = [_family_for_column(c) for c in header[1:]]
    primary = families[0]
    rows = []
    seen: dict[str, int] = {}
    for lineno, cells in enumerate(reader, start=2):
        if not cells or all(not c.strip() for c in cells):
            continue
        where = f"line {lineno}"
        if len(cells) != len(header):
            raise ManifestError(f"{where}: expected {len(header)} columns, got {len(cells)}")
        rid = cells[0]
        if rid in seen:
            raise ManifestError(f"{where}: duplicate record id {rid!r} (first on line {seen[rid]})")
        seen[rid] = lineno
        prim = [v for v in cells[1].split(MULTI_SEP) if v]
        row = {"id": rid, primary: _primary_value(prim, where)}
        for fam, cell in zip(families[1:], cells[2:]):
            row[fam] = [v for v in cell.split(MULTI_SEP) if v]
        rows.append(row)
    if not rows:
        raise ManifestError("manifest contains no records")
    return from_named(rows, families, primary)


def _format_of(path: Path, fmt: str | None) -> str:
    if fmt is None:
        fmt = "csv" if path.suffix.lower() == ".csv" else "jsonl"
    if fmt not in ("jsonl", "csv"):
        raise ManifestError(f"unknown manifest format {fmt!r}")
    return fmt


def ingest(path, fmt: str | None = None) -> Manifest:
    """Read a manifest from ``path``; ``fmt`` defaults from the file suffix."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if _format_of(path, fmt) == "csv":
        return _ingest_csv(text)
    return _ingest_jsonl(text)


def _field_names(universe: LabelUniverse) -> dict[str, str]:
    return {f: DEFAULT_FIELDS.get(f, f) for f in universe.families}


def dumps(m: Manifest, fmt: str = "jsonl") -> str:
    if not m.records:
        raise ManifestError("refusing to emit a manifest with no records")
    u = m.universe
    fields = _field_names(u)
    if fmt == "jsonl":
        header = {"families": fields, "primary": u.primary,
                  "labels": {f: list(u.labels[f]) for f in u.families}}
        lines = [json.dumps(header)]
        for row in m.to_named():
            obj = {"id": row["id"]}
            for fam in u.families:
                obj[fields[fam]] = row[fam]
            lines.append(json.dumps(obj))
        return "\n".join(lines) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id"] + [fields[f] for f in u.families])
        for row in m.to_named():
            cells = [row["id"], row[u.primary]]
            cells += [MULTI_SEP.join(row[f]) for f in u.aux_families]
            writer.writerow(cells)
        return buf.getvalue()
    raise ManifestError(f"unknown manifest format {fmt!r}")


def emit(m: Manifest, path, fmt: str | None = None) -> None:
    """Write ``m`` to ``path``. CSV keeps only labels observed in records."""
    path = Path(path)
    text = dumps(m, _format_of(path, fmt))
    path.write_text(text, encoding="utf-8")


def compact(m: Manifest) -> Manifest:
    """Drop labels no record references and renumber ids densely."""
    return from_named(m.to_named(), m.universe.families, m.primary)


def filter_min_class_size(m: Manifest, min_count: int) -> Manifest:
    """Keep records whose primary class has at least ``min_count`` records."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter(r.primary_label for r in m.records)
    kept = [r for r in m.records if counts[r.primary_label] >= min_count]
    if not kept:
        warnings.warn(f"no primary class has >= {min_count} records; result is empty")
        return Manifest(LabelUniverse.build(m.universe.families, m.primary, {}), ())
    if len(kept) == len(m.records):
        return m
    return compact(Manifest(m.universe, tuple(kept)))
