import math
from itertools import permutations

import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mobiscope.segregation import (VisitorMixProfiler, exposure_by_device_month, high_income_share,
                                   poi_profiles, shannon_entropy)


def test_uniform_entropy_is_ln6():
    assert abs(shannon_entropy([5, 5, 5, 5, 5, 5])[0] - math.log(6)) <= 1e-12


def test_single_stratum_entropy_is_zero():
    assert shannon_entropy([0, 0, 9, 0, 0, 0])[0] == 0.0


def test_two_one_one():
    h = shannon_entropy([2, 1, 1, 0, 0, 0])[0]
    expected = -(0.5 * math.log(0.5) + 2 * 0.25 * math.log(0.25))
    assert abs(h - expected) < 1e-12
    assert abs(h - 1.0397) < 1e-4
    assert high_income_share([2, 1, 1, 0, 0, 0])[0] == 0.0


def test_high_income_share_uses_top_three_strata():
    assert high_income_share([1, 1, 1, 1, 1, 1])[0] == 0.5
    assert high_income_share([0, 0, 2, 1, 0, 1])[0] == 0.5
    assert high_income_share([0, 0, 0, 3, 0, 0])[0] == 1.0
    assert high_income_share([0, 0, 1, 0, 0, 0])[0] == 0.0


@given(st.lists(st.integers(0, 50), min_size=6, max_size=6).filter(lambda c: sum(c) > 0))
def test_entropy_bounds_and_permutation_invariance(counts):
    h = shannon_entropy(counts)[0]
    assert -1e-15 <= h <= math.log(6) + 1e-12
    assert (h == 0.0) == (sum(c > 0 for c in counts) == 1)
    perm = list(permutations(counts))[::97]
    np.testing.assert_allclose(shannon_entropy(perm), h, rtol=0, atol=1e-12)
    share = high_income_share(counts)[0]
    low_mid = sum(counts[:3]) / sum(counts)
    assert share + low_mid == pytest.approx(1.0, abs=1e-15)


def test_profiles_from_visits_and_home_strata():
    visits = pd.DataFrame({"device_id": ["a", "b", "c", "d", "e"], "month": "2019-01",
                           "poi_id": ["p", "p", "p", "p", "q"]})
    homes = pd.DataFrame({"device_id": ["a", "b", "c", "d"], "month": "2019-01",
                          "stratum": [1, 1, 2, 3]})
    prof = poi_profiles(visits, homes).set_index("poi_id")
    # 'e' has no home stratum, so 'q' has no attributable visits
    assert list(prof.index) == ["p"]
    assert prof.loc["p", ["n1", "n2", "n3"]].tolist() == [2, 1, 1]
    assert abs(prof.loc["p", "entropy"] - 1.0397) < 1e-4


def test_exposure_examples():
    profiles = pd.DataFrame({"poi_id": ["x", "lo", "hi"], "entropy": [1.2, 0.0, math.log(6)],
                             "high_income_share": [0.1, 0.0, 0.5]})
    visits = pd.DataFrame({"device_id": ["a"] * 3 + ["b"] * 2, "month": "2019-02",
                           "poi_id": ["x", "x", "x", "lo", "hi"]})
    e = exposure_by_device_month(visits, profiles).set_index("device_id")
    assert e.loc["a", "mean_entropy"] == pytest.approx(1.2, abs=1e-15)
    assert e.loc["a", "poi_visits"] == 3 and e.loc["a", "unique_pois"] == 1
    assert e.loc["b", "mean_entropy"] == pytest.approx(0.8959, abs=1e-4)


def test_unique_weighting():
    profiles = pd.DataFrame({"poi_id": ["lo", "hi"], "entropy": [0.0, 1.0], "high_income_share": [0.0, 1.0]})
    visits = pd.DataFrame({"device_id": "a", "month": "2019-02", "poi_id": ["lo", "lo", "lo", "hi"]})
    assert exposure_by_device_month(visits, profiles, "visits")["mean_entropy"][0] == 0.25
    assert exposure_by_device_month(visits, profiles, "unique")["mean_entropy"][0] == 0.5
    with pytest.raises(ValueError):
        exposure_by_device_month(visits, profiles, "bogus")


def test_exposure_matches_brute_force_reaggregation():
    rng = np.random.default_rng(4)
    pois = [f"p{i}" for i in range(8)]
    profiles = pd.DataFrame({"poi_id": pois, "entropy": rng.uniform(0, math.log(6), 8),
                             "high_income_share": rng.uniform(0, 1, 8)})
    rows = [(f"d{d}", "2019-03" if v % 3 else "2019-04", pois[rng.integers(8)])
            for d in range(5) for v in range(10)]
    visits = pd.DataFrame(rows, columns=["device_id", "month", "poi_id"])
    got = exposure_by_device_month(visits, profiles)
    ent = dict(zip(profiles["poi_id"], profiles["entropy"]))
    share = dict(zip(profiles["poi_id"], profiles["high_income_share"]))
    for r in got.itertuples():
        mine = [p for d, m, p in rows if d == r.device_id and m == r.month]
        assert r.poi_visits == len(mine)
        assert abs(r.mean_entropy - sum(ent[p] for p in mine) / len(mine)) <= 1e-12
        assert abs(r.mean_high_share - sum(share[p] for p in mine) / len(mine)) <= 1e-12
    assert len(got) == len({(d, m) for d, m, _ in rows})


def test_profiles_stay_frozen():
    fitted = VisitorMixProfiler().fit(pd.DataFrame({"poi_id": ["p", "p"], "stratum": [1, 6]}))
    before = fitted.profiles_.copy()
    fitted.transform(pd.DataFrame({"device_id": ["a"], "month": ["2019-01"], "poi_id": ["p"]}))
    pd.testing.assert_frame_equal(fitted.profiles_, before)


def test_invalid_stratum_rejected():
    with pytest.raises(ValueError):
        VisitorMixProfiler().fit(pd.DataFrame({"poi_id": ["p"], "stratum": [7]}))
