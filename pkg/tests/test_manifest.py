import json
import warnings
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nca_amt import manifest as M

FIX = Path(__file__).parent / "fixtures"


def test_single_record_line(tmp_path):
    p = tmp_path / "one.jsonl"
    p.write_text('{"id":"v1","action":"swim","scenes":["pool"],"objects":[]}\n')
    m = M.ingest(p)
    assert len(m.records) == 1
    assert [m.universe.size(f) for f in ("action", "scene", "object")] == [1, 1, 0]
    assert m.records[0].aux("object") == frozenset()


def test_duplicate_id_reports_both_lines(tmp_path):
    p = tmp_path / "dup.jsonl"
    p.write_text('{"id":"a","action":"x"}\n{"id":"b","action":"x"}\n{"id":"a","action":"y"}\n')
    with pytest.raises(M.ManifestError, match=r"line 3.*duplicate.*line 1"):
        M.ingest(p)


@pytest.mark.parametrize("line", ['{"id":"a","action":["x","y"]}', '{"id":"a","action":[]}',
                                  '{"id":"a","scenes":["s"]}'])
def test_primary_label_must_be_single(tmp_path, line):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"id":"ok","action":"x"}\n' + line + "\n")
    with pytest.raises(M.ManifestError, match="line 2"):
        M.ingest(p)


def test_malformed_json_reports_line(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"id":"a","action":"x"}\n\n{"id": "b", action}\n')
    with pytest.raises(M.ManifestError, match="line 3: malformed JSON"):
        M.ingest(p)


def test_empty_file_is_an_error(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("\n")
    with pytest.raises(M.ManifestError, match="no records"):
        M.ingest(p)


def test_ten_record_fixture_universe_sizes():
    m = M.ingest(FIX / "ten.jsonl")
    assert len(m.records) == 10
    assert m.universe.size("action") == 3
    assert m.universe.size("scene") == 4
    assert m.universe.labels["scene"] == ("kitchen", "park", "street", "track")
    # record order is preserved
    assert [r.id for r in m.records] == [f"r{i:02d}" for i in range(1, 11)]
    # the record with no scene is kept at ingest
    assert m.records[6].aux("scene") == frozenset()


def test_header_renames_fields(tmp_path):
    p = tmp_path / "h.jsonl"
    p.write_text('{"families": {"verb": "verb", "place": "where"}, "primary": "verb"}\n'
                 '{"id": "1", "verb": "jump", "where": ["gym", "park"]}\n')
    m = M.ingest(p)
    assert m.universe.families == ("verb", "place")
    assert m.records[0].aux("place") == frozenset({0, 1})


def test_labels_are_case_sensitive(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text('{"id":"1","action":"Run","scenes":["Park","park"]}\n')
    m = M.ingest(p)
    assert m.universe.labels["scene"] == ("Park", "park")


def test_filter_min_class_size_hand_count():
    rows = [{"id": f"a{i}", "action": "A"} for i in range(5)]
    rows += [{"id": f"b{i}", "action": "B"} for i in range(2)]
    m = M.from_named(rows)
    out = M.filter_min_class_size(m, 3)
    assert [r.id for r in out.records] == [f"a{i}" for i in range(5)]
    assert out.universe.labels["action"] == ("A",)


def test_filter_min_count_one_is_identity():
    m = M.ingest(FIX / "ten.jsonl")
    assert M.filter_min_class_size(m, 1) == m


def test_filter_everything_warns_and_empties():
    m = M.ingest(FIX / "ten.jsonl")
    with pytest.warns(UserWarning, match="empty"):
        out = M.filter_min_class_size(m, 100)
    assert out.records == ()


def test_filter_rejects_nonpositive():
    with pytest.raises(ValueError):
        M.filter_min_class_size(M.ingest(FIX / "ten.jsonl"), 0)


@pytest.mark.parametrize("fmt", ["jsonl", "csv"])
def test_round_trip(tmp_path, fmt):
    m = M.ingest(FIX / "ten.jsonl")
    p = tmp_path / f"out.{fmt}"
    M.emit(m, p)
    assert M.ingest(p) == m


def test_cross_format_round_trip(tmp_path):
    m = M.ingest(FIX / "ten.jsonl")
    M.emit(m, tmp_path / "a.csv")
    back = M.ingest(tmp_path / "a.csv")
    M.emit(back, tmp_path / "b.jsonl")
    assert M.ingest(tmp_path / "b.jsonl") == m


def test_csv_cells_use_pipe(tmp_path):
    m = M.ingest(FIX / "ten.jsonl")
    text = M.dumps(m, "csv").splitlines()
    assert text[0] == "id,action,scenes,objects"
    assert "park|track" in text[2]


def test_emit_empty_manifest_fails(tmp_path):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        empty = M.filter_min_class_size(M.ingest(FIX / "ten.jsonl"), 100)
    with pytest.raises(M.ManifestError):
        M.emit(empty, tmp_path / "x.jsonl")


def test_jsonl_header_declares_unobserved_labels(tmp_path):
    m = M.from_named([{"id": "1", "action": "a", "scene": ["s"]}],
                     declared={"scene": ["s", "unused"]})
    M.emit(m, tmp_path / "m.jsonl")
    head = json.loads((tmp_path / "m.jsonl").read_text().splitlines()[0])
    assert head["labels"]["scene"] == ["s", "unused"]
    assert M.ingest(tmp_path / "m.jsonl") == m


def test_subset_keeps_manifest_order():
    m = M.ingest(FIX / "ten.jsonl")
    assert [r.id for r in m.subset(["r05", "r01"]).records] == ["r01", "r05"]


# -- properties

_label = st.sampled_from(["a", "b", "c", "d"])
_rows = st.lists(
    st.tuples(_label, st.sets(st.sampled_from(["s1", "s2", "s3"])), st.sets(_label)),
    min_size=1, max_size=25)


def _manifest(rows):
    return M.from_named([{"id": f"r{i}", "action": a, "scene": sorted(s), "object": sorted(o)}
                         for i, (a, s, o) in enumerate(rows)])


@settings(max_examples=60, deadline=None)
@given(_rows)
def test_round_trip_property(rows):
    m = _manifest(rows)
    for fmt in ("jsonl", "csv"):
        text = M.dumps(m, fmt)
        back = M._ingest_csv(text) if fmt == "csv" else M._ingest_jsonl(text)
        assert back.to_named() == m.to_named()


@settings(max_examples=60, deadline=None)
@given(_rows, st.integers(1, 6))
def test_filter_is_idempotent(rows, k):
    m = _manifest(rows)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        once = M.filter_min_class_size(m, k)
        if once.records:
            assert M.filter_min_class_size(once, k) == once


@settings(max_examples=60, deadline=None)
@given(_rows)
def test_universe_covers_all_references(rows):
    m = _manifest(rows)
    u = m.universe
    for r in m.records:
        assert 0 <= r.primary_label < u.size("action")
        for fam in u.aux_families:
            assert all(0 <= i < u.size(fam) for i in r.aux(fam))
