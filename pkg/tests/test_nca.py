import json
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nca_amt import manifest as M
from nca_amt import nca


def make(rows, families=("action", "scene", "object")):
    return M.from_named([dict(r, id=str(i)) for i, r in enumerate(rows)], families)


def brute_contingency(m, a, fam, x):
    """Double loop over records; independent of the vectorized counter."""
    cells = {"y1x0": 0, "y1x1": 0, "y0x1": 0, "y0x0": 0}
    for r in m.records:
        y = r.primary_label == a
        has = False
        for lab in r.aux(fam):
            if lab == x:
                has = True
        cells[f"y{int(y)}x{int(has)}"] += 1
    return nca.ContingencyMatrix(cells["y1x0"], cells["y1x1"], cells["y0x1"], cells["y0x0"])


def brute_sweep(m, fam, grid):
    u = m.universe
    out = []
    for t in grid:
        count = 0
        for a in range(u.size(u.primary)):
            if not any(r.primary_label == a for r in m.records):
                continue
            ok = False
            for x in range(u.size(fam)):
                c = brute_contingency(m, a, fam, x)
                if c.n_y1_x1 > 0 and nca.necessity_holds(c, t):
                    ok = True
            count += ok
        out.append(count)
    return out


def random_manifest(rng, n_max=50, k_max=5):
    n = rng.randint(1, n_max)
    acts = [f"a{i}" for i in range(rng.randint(1, k_max))]
    scenes = [f"s{i}" for i in range(rng.randint(1, k_max))]
    objs = [f"o{i}" for i in range(rng.randint(1, k_max))]
    rows = [{"action": rng.choice(acts),
             "scene": rng.sample(scenes, rng.randint(0, len(scenes))),
             "object": rng.sample(objs, rng.randint(0, len(objs)))} for _ in range(n)]
    return make(rows)


# -- contingency

def test_four_record_hand_enumeration():
    m = make([{"action": "Y", "scene": ["X"]}, {"action": "Y", "scene": ["X"]},
              {"action": "Y", "scene": []}, {"action": "N", "scene": ["X"]}])
    c = nca.contingency(m, "Y", "scene", "X")
    assert (c.n_y1_x1, c.n_y1_x0, c.n_y0_x1, c.n_y0_x0) == (2, 1, 1, 0)
    assert c.as_grid() == [[1, 2], [0, 1]]


def test_always_present_condition_has_empty_cell():
    m = make([{"action": "Y", "object": ["X", "z"]}, {"action": "Y", "object": ["X"]},
              {"action": "N", "object": ["z"]}])
    assert nca.contingency(m, "Y", "object", "X").n_y1_x0 == 0


def test_no_cooccurrence_gives_invalid_normalization():
    m = make([{"action": "Y", "scene": []}, {"action": "N", "scene": ["X"]}])
    c = nca.contingency(m, "Y", "scene", "X")
    assert c.n_y1_x1 == 0
    assert not c.normalized().valid


def test_normalized_cell_is_one():
    c = nca.ContingencyMatrix(3, 4, 2, 9)
    n = c.normalized()
    assert n.valid and n.y1_x1 == 1.0 and n.y1_x0 == 0.75


def test_unknown_label_raises():
    m = make([{"action": "Y", "scene": ["X"]}])
    with pytest.raises(M.ManifestError):
        nca.contingency(m, "Y", "scene", "nope")
    with pytest.raises(M.ManifestError):
        nca.contingency(m, "Q", "scene", "X")


def test_oracle_equivalence_randomized():
    rng = random.Random(7)
    for _ in range(30):
        m = random_manifest(rng)
        for fam in ("scene", "object"):
            table = nca.contingency_table(m, fam)
            for (a, x), c in table.items():
                assert c == brute_contingency(m, a, fam, x)


# -- most frequent co-occurring

def test_most_frequent_by_count():
    m = make([{"action": "A", "scene": ["s1"]}] * 3 + [{"action": "A", "scene": ["s2"]}])
    assert m.universe.name_of("scene", nca.most_frequent_cooccurring(m, "A", "scene")) == "s1"


def test_most_frequent_single_label():
    m = make([{"action": "A", "scene": ["only"]}, {"action": "B", "scene": ["x"]}])
    assert nca.most_frequent_cooccurring(m, "A", "scene") == m.universe.id_of("scene", "only")


def test_most_frequent_tie_goes_to_global_popularity():
    rows = [{"action": "A", "scene": ["s1"]}] * 2 + [{"action": "A", "scene": ["s2"]}] * 2
    rows += [{"action": "B", "scene": ["s2"]}] * 3
    m = make(rows)
    assert nca.most_frequent_cooccurring(m, "A", "scene") == m.universe.id_of("scene", "s2")


def test_most_frequent_full_tie_goes_to_lower_id():
    m = make([{"action": "A", "scene": ["s2"]}, {"action": "A", "scene": ["s1"]}])
    assert nca.most_frequent_cooccurring(m, "A", "scene") == m.universe.id_of("scene", "s1")


def test_most_frequent_none_when_nothing_cooccurs():
    m = make([{"action": "A", "scene": []}, {"action": "B", "scene": ["s"]}])
    assert nca.most_frequent_cooccurring(m, "A", "scene") is None


# -- necessity test

def test_strict_necessity_at_zero():
    assert nca.necessity_holds(nca.ContingencyMatrix(0, 5, 1, 1), 0.0)
    assert not nca.necessity_holds(nca.ContingencyMatrix(1, 5, 1, 1), 0.0)
    assert not nca.necessity_holds(nca.ContingencyMatrix(0, 0, 1, 1), 0.0)


def test_threshold_arithmetic_and_strict_boundary():
    c = nca.ContingencyMatrix(1, 4, 0, 0)
    assert nca.necessity_holds(c, 0.3)
    assert not nca.necessity_holds(c, 0.25)


def test_threshold_on_unnormalizable_matrix_raises():
    with pytest.raises(ValueError):
        nca.necessity_holds(nca.ContingencyMatrix(2, 0, 0, 0), 0.5)
    with pytest.raises(ValueError):
        nca.necessity_holds(nca.ContingencyMatrix(0, 1, 0, 0), -0.1)


# -- analysis and signs

def dedicated_fixture(n_actions=4, per=12, seed=0):
    """Each action has its own always-present object; scenes are uniform noise."""
    rng = random.Random(seed)
    rows = []
    for a in range(n_actions):
        for _ in range(per):
            objs = [f"o{a}"] + [f"o{j}" for j in range(n_actions) if j != a and rng.random() < 0.3]
            rows.append({"action": f"a{a}", "scene": [f"s{rng.randrange(3)}"], "object": objs})
    return make(rows)


def test_object_curve_dominates_scene_curve():
    m = dedicated_fixture()
    obj = nca.analyze(m, "object")
    scn = nca.analyze(m, "scene")
    assert np.all(obj.sweep >= scn.sweep)
    assert obj.sweep[0] == 4 and scn.sweep[0] == 0
    grid = nca.default_thresholds()
    assert list(obj.sweep) == brute_sweep(m, "object", grid)
    assert list(scn.sweep) == brute_sweep(m, "scene", grid)


def test_zero_threshold_on_strict_fixture_counts_all():
    m = dedicated_fixture()
    assert list(nca.analyze(m, "object", [0.0]).sweep) == [4]


def test_single_record_counts_one_everywhere():
    m = make([{"action": "a", "scene": ["s"], "object": ["o"]}])
    rep = nca.analyze(m, "scene")
    assert set(rep.sweep.tolist()) == {1}


def test_primary_family_cannot_be_analyzed():
    with pytest.raises(ValueError):
        nca.analyze(dedicated_fixture(), "action")


def test_unsorted_grid_rejected():
    with pytest.raises(ValueError):
        nca.analyze(dedicated_fixture(), "scene", [0.5, 0.1])


def test_signs_for_dedicated_fixture():
    m = dedicated_fixture()
    signs = nca.recommend_signs([nca.analyze(m, "scene"), nca.analyze(m, "object")])
    assert signs == {"scene": -1, "object": 1}


def test_identical_families_get_identical_signs():
    rows = [{"action": "a", "scene": ["x"], "object": ["x"]},
            {"action": "a", "scene": ["y"], "object": ["y"]},
            {"action": "b", "scene": ["x"], "object": ["x"]}]
    m = make(rows)
    signs = nca.recommend_signs([nca.analyze(m, "scene"), nca.analyze(m, "object")])
    assert signs["scene"] == signs["object"]


def test_cutoff_zero_admits_all():
    m = dedicated_fixture()
    assert set(nca.recommend_signs([nca.analyze(m, f) for f in ("scene", "object")],
                                   cutoff=0).values()) == {1}


def test_most_frequent_mode_never_exceeds_any_mode():
    m = random_manifest(random.Random(3))
    for fam in ("scene", "object"):
        assert np.all(nca.analyze(m, fam, mode="most_frequent").sweep
                      <= nca.analyze(m, fam, mode="any").sweep)


def test_average_matrix_uses_most_frequent_label():
    m = make([{"action": "a", "scene": ["x"]}, {"action": "a", "scene": ["x"]},
              {"action": "a", "scene": ["y"]}, {"action": "b", "scene": ["y"]}])
    rep = nca.analyze(m, "scene")
    # a: x, cells (1, 2, 0, 1)/2 ; b: y, cells (0, 1, 1, 2)/1
    assert rep.n_averaged == 2
    assert rep.average.y1_x0 == pytest.approx((0.5 + 0.0) / 2)
    assert rep.average.y0_x1 == pytest.approx((0.0 + 1.0) / 2)
    assert rep.average.y1_x1 == 1.0


def test_parse_thresholds():
    assert np.allclose(nca.parse_thresholds("0:1:21"), np.linspace(0, 1, 21))
    assert list(nca.parse_thresholds("0,0.5,1")) == [0.0, 0.5, 1.0]
    with pytest.raises(ValueError):
        nca.parse_thresholds("1,0")


def test_run_report_is_json_serializable():
    report = nca.run(dedicated_fixture(), ["scene", "object"])
    back = json.loads(nca.dumps(report))
    assert back["signs"] == {"scene": -1, "object": 1}
    assert len(back["families"]["object"]["sweep"]) == 21


# -- properties

_rows = st.lists(st.tuples(st.sampled_from("abc"), st.sets(st.sampled_from("wxyz"))),
                 min_size=1, max_size=30)


@settings(max_examples=80, deadline=None)
@given(_rows, st.lists(st.floats(0, 2, allow_nan=False), min_size=1, max_size=8))
def test_sweep_monotone_and_bounded(rows, ts):
    m = make([{"action": a, "scene": sorted(s)} for a, s in rows])
    rep = nca.analyze(m, "scene", sorted(ts))
    assert np.all(np.diff(rep.sweep) >= 0)
    assert np.all(rep.sweep <= rep.n_primary)


@settings(max_examples=60, deadline=None)
@given(_rows, st.randoms(use_true_random=False))
def test_record_order_does_not_matter(rows, rnd):
    named = [{"id": str(i), "action": a, "scene": sorted(s)} for i, (a, s) in enumerate(rows)]
    shuffled = named[:]
    rnd.shuffle(shuffled)
    m1 = M.from_named(named, ("action", "scene"))
    m2 = M.from_named(shuffled, ("action", "scene"))
    r1, r2 = nca.run(m1, ["scene"]), nca.run(m2, ["scene"])
    assert nca.dumps(r1) == nca.dumps(r2)


@settings(max_examples=60, deadline=None)
@given(_rows)
def test_strict_case_matches_definition(rows):
    m = make([{"action": a, "scene": sorted(s)} for a, s in rows])
    for c in nca.contingency_table(m, "scene").values():
        assert nca.necessity_holds(c, 0) == (c.n_y1_x0 == 0 and c.n_y1_x1 > 0)
