import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from conftest import make_table
from hurdlesae.errors import ConfigError, ValidationError
from hurdlesae.evaluate import area_blocked_cv, kfold_by_area, pearson, relative_efficiency, score


def test_relative_efficiency_examples():
    assert relative_efficiency(0.3, 0.3) == 1
    assert relative_efficiency(0.2, 0.4) == 2
    assert relative_efficiency(0.2, None) is None
    assert relative_efficiency(None, 0.4) is None
    assert relative_efficiency(0.2, 0.0) is None


def test_score_identity_and_shift():
    ref = {("a", f"k{i}"): float(i) for i in range(1, 4)}
    rep = score(ref, ref)
    s = rep.by_species("a")
    assert (s.bias, s.rmse, s.rho) == (0.0, 0.0, 1.0)
    est = {k: v + 1 for k, v in ref.items()}
    s = score(est, ref).by_species("a")
    assert (s.bias, s.rmse) == (1.0, 1.0) and math.isclose(s.rho, 1.0, rel_tol=1e-14)
    flat = {("a", f"k{i}"): 2.0 for i in range(1, 4)}
    assert score(flat, ref).by_species("a").rho is None


def test_score_errors():
    with pytest.raises(ValidationError):
        score({("a", "x"): 1.0}, {("a", "y"): 1.0})
    with pytest.raises(ConfigError):
        score({("a", "x"): 1.0}, {("a", "x"): 1.0}, mode="other")


def test_pearson_oracle():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=100), rng.normal(size=100)
    assert abs(pearson(x, y) - stats.pearsonr(x, y)[0]) < 1e-12
    assert pearson([1.0], [2.0]) is None


@given(st.permutations(list(range(8))))
def test_score_symmetric_under_area_relabeling(perm):
    rng = np.random.default_rng(1)
    est_v, ref_v = rng.normal(size=8), rng.normal(size=8)
    est = {("a", f"k{i}"): est_v[i] for i in range(8)}
    ref = {("a", f"k{i}"): ref_v[i] for i in range(8)}
    est2 = {("a", f"k{perm[i]}"): est_v[i] for i in range(8)}
    ref2 = {("a", f"k{perm[i]}"): ref_v[i] for i in range(8)}
    s1, s2 = score(est, ref).by_species("a"), score(est2, ref2).by_species("a")
    assert math.isclose(s1.bias, s2.bias, abs_tol=1e-14) and math.isclose(s1.rmse, s2.rmse, rel_tol=1e-14)
    assert math.isclose(s1.rho, s2.rho, rel_tol=1e-12)


def test_re_columns_and_outputs(tmp_path):
    keys = [("a", "k1"), ("a", "k2"), ("a", "k3")]
    est = dict.fromkeys(keys, 1.0)
    mcv = {keys[0]: 0.1, keys[1]: 0.4, keys[2]: 0.2}
    dcv = {keys[0]: 0.2, keys[1]: 0.2, keys[2]: None}
    rep = score(est, dict.fromkeys(keys, 1.5), mode="direct", model_cv=mcv, direct_cv=dcv)
    s = rep.by_species("a")
    assert s.n_re == 2 and s.pct_re_gt1 == 50.0 and rep.pct_re_gt1 == 50.0
    assert math.isclose(s.mean_pct_improvement, (50.0 - 100.0) / 2)
    rep.write_csv(tmp_path / "e.csv", manifest="manifest: t")
    rep.write_json(tmp_path / "e.json")
    header = (tmp_path / "e.csv").read_text().splitlines()[1]
    assert {"rho", "bias", "pct_re_gt1"} <= set(header.split(","))
    assert json.loads((tmp_path / "e.json").read_text())["pct_re_gt1"] == 50.0


def test_kfold_sizes_and_partition():
    areas = [f"C{i:04d}" for i in range(1306)]
    folds = kfold_by_area(areas, 4, np.random.default_rng(0))
    assert sorted(len(f) for f in folds) == [326, 326, 327, 327]
    flat = [a for f in folds for a in f]
    assert sorted(flat) == sorted(areas) and len(set(flat)) == 1306
    assert folds == kfold_by_area(areas, 4, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        kfold_by_area(areas, 1, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        kfold_by_area(["a", "b"], 3, np.random.default_rng(0))


def test_area_blocked_cv_holds_out_areas():
    t = make_table(n=60, J=2, areas=6, seed=2)
    seen = []

    def fit_predict(train, held):
        assert not set(held) & set(train.area_id)
        seen.extend(held)
        return {(sp, a): 1.0 for sp in train.species for a in held}

    rep = area_blocked_cv(t, 3, fit_predict, np.random.default_rng(4))
    assert sorted(seen) == sorted(set(t.area_id))
    assert rep.mode == "direct" and {s.species for s in rep.species} == {"sp0", "sp1"}
