import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import make_table
from hurdlesae.data import (
    PredictionGrid,
    attach_grid,
    derive_presence,
    design_matrix,
    jitter_duplicates,
    load_plot_table,
    spatial_subsample,
    standardize_covariates,
    write_grid,
    write_plot_table,
)
from hurdlesae.errors import SchemaError, ValidationError

HEADER = "plot_id,x,y,area_id,TMIN,TMAX,sp1,sp2\n"


def _write(tmp_path, text, name="plots.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_three_rows(tmp_path):
    p = _write(tmp_path, HEADER + "a,0,0,K1,1,2,0,3.2\nb,1,0,K1,2,3,1.5,0\nc,0,1,K2,3,4,0,0\n")
    t = load_plot_table(p, ["sp1", "sp2"])
    assert t.response.shape == (2, 3)
    assert t.covariate_names == ("TMIN", "TMAX")
    assert list(t.area_id) == ["K1", "K1", "K2"]
    np.testing.assert_array_equal(t.response[1], [3.2, 0, 0])


def test_negative_response_cites_row(tmp_path):
    p = _write(tmp_path, HEADER + "a,0,0,K1,1,2,0,3.2\nbad,1,0,K1,2,3,-1.0,0\n")
    with pytest.raises(ValidationError, match=r"line 3 \(plot bad\).*negative"):
        load_plot_table(p, ["sp1", "sp2"])


def test_missing_column_named(tmp_path):
    p = _write(tmp_path, "plot_id,x,y,area_id,TMIN,sp1\na,0,0,K,1,0\n")
    with pytest.raises(SchemaError, match="sp2"):
        load_plot_table(p, ["sp1", "sp2"])


def test_missing_value_and_duplicate_id(tmp_path):
    p = _write(tmp_path, HEADER + "a,0,0,K1,,2,0,1\n")
    with pytest.raises(ValidationError, match="TMIN"):
        load_plot_table(p, ["sp1", "sp2"])
    p = _write(tmp_path, HEADER + "a,0,0,K1,1,2,0,1\na,1,0,K1,1,2,0,1\n")
    with pytest.raises(ValidationError, match="duplicate plot_id"):
        load_plot_table(p, ["sp1", "sp2"])


def test_round_trip_bit_exact(tmp_path):
    t = make_table(n=40, J=3, seed=5)
    p = tmp_path / "t.csv"
    write_plot_table(t, p, manifest="manifest: test")
    back = load_plot_table(p, t.species, t.covariate_names)
    for a, b in [(t.coords, back.coords), (t.covariates, back.covariates), (t.response, back.response)]:
        assert np.array_equal(a, b)
    assert list(back.plot_id) == list(t.plot_id)


def test_derive_presence_examples():
    t = make_table(n=3, J=1)
    t = t.__class__(**{**t.__dict__, "response": np.array([[0, 3.2, 0]])})
    np.testing.assert_array_equal(derive_presence(t), [[0, 1, 0]])
    rng = np.random.default_rng(0)
    r = np.where(rng.random((5, 8)) < 0.4, 0.0, rng.random((5, 8)))
    t2 = make_table(n=8, J=5)
    t2 = t2.__class__(**{**t2.__dict__, "response": r})
    z = derive_presence(t2)
    for j in range(5):
        for i in range(8):
            assert z[j, i] == (1 if r[j, i] > 0 else 0)
    zero = t2.__class__(**{**t2.__dict__, "response": np.zeros((5, 8))})
    assert not derive_presence(zero).any()


@given(arrays(float, (4, 6), elements=st.one_of(st.just(0.0), st.floats(1e-6, 100))), st.floats(1e-3, 1e3))
def test_presence_invariant_to_positive_rescaling(r, c):
    t = make_table(n=6, J=4)
    a = t.__class__(**{**t.__dict__, "response": r})
    b = t.__class__(**{**t.__dict__, "response": r * c})
    np.testing.assert_array_equal(derive_presence(a), derive_presence(b))


def test_standardize_symmetric_case():
    t = make_table(n=3, J=1, covariates=("TMIN",))
    t = t.__class__(**{**t.__dict__, "covariates": np.array([[1.0], [2.0], [3.0]])})
    s, stats = standardize_covariates(t)
    np.testing.assert_allclose(s.covariates[:, 0], [-1, 0, 1])
    assert stats.mean[0] == 2 and stats.sd[0] == 1


def test_standardize_moments_and_reuse():
    t = make_table(n=100, J=1, seed=2, covariates=("A", "B", "C"))
    s, stats = standardize_covariates(t)
    assert np.all(np.abs(s.covariates.mean(axis=0)) < 1e-12)
    assert np.all(np.abs(s.covariates.std(axis=0, ddof=1) - 1) < 1e-12)
    other = make_table(n=50, J=1, seed=9, covariates=("A", "B", "C"))
    other = other.__class__(**{**other.__dict__, "covariates": other.covariates + 3.0})
    s2, stats2 = standardize_covariates(other, stats)
    assert stats2 is stats
    assert abs(s2.covariates.mean()) > 1.0  # fixed stats: new data not centered
    back = stats.invert(s2.covariates, stats.names)
    np.testing.assert_allclose(back, other.covariates, rtol=1e-10)


def test_zero_variance_named():
    t = make_table(n=5, J=1, covariates=("A", "FLAT"))
    covs = t.covariates.copy()
    covs[:, 1] = 7.0
    with pytest.raises(ValidationError, match="FLAT"):
        standardize_covariates(t.__class__(**{**t.__dict__, "covariates": covs}))


def test_design_matrix_squares_after_standardization():
    covs = np.array([[1.0, 2.0], [-0.5, 3.0]])
    X, names = design_matrix(covs, ["A", "B"], ["A", "B"], ["A"])
    assert names == ["(Intercept)", "A", "A^2", "B"]
    np.testing.assert_array_equal(X, [[1, 1, 1, 2], [1, -0.5, 0.25, 3]])
    with pytest.raises(SchemaError):
        design_matrix(covs, ["A", "B"], ["A"], ["B"])


def _grid_csv(tmp_path, cols=("TMIN", "TMAX")):
    lines = ["cell_id,x,y,area_id," + ",".join(cols)]
    for i in range(12):
        lines.append(f"c{i},{i},0,K{i // 4}," + ",".join(str(float(i + k)) for k in range(len(cols))))
    p = tmp_path / "grid.csv"
    p.write_text("\n".join(lines) + "\n")
    return p


def test_attach_grid_counts_and_schema(tmp_path):
    t = make_table(n=30, J=2)
    _, stats = standardize_covariates(t)
    g = attach_grid(_grid_csv(tmp_path), stats)
    assert g.cell_counts() == {"K0": 4, "K1": 4, "K2": 4}
    np.testing.assert_allclose(stats.invert(g.covariates, g.covariate_names)[:, 0], np.arange(12.0), atol=1e-12)
    with pytest.raises(SchemaError, match="missing: TMAX"):
        attach_grid(_grid_csv(tmp_path, cols=("TMIN",)), stats)
    with pytest.raises(SchemaError, match="extra: TCC"):
        attach_grid(_grid_csv(tmp_path, cols=("TMIN", "TMAX", "TCC")), stats)


def test_write_grid_round_trip(tmp_path):
    t = make_table(n=30, J=2)
    _, stats = standardize_covariates(t)
    g = attach_grid(_grid_csv(tmp_path), stats)
    out = tmp_path / "g2.csv"
    write_grid(g, out, stats)
    g2 = attach_grid(out, stats)
    np.testing.assert_allclose(g2.covariates, g.covariates, rtol=0, atol=1e-12)
    assert isinstance(g2, PredictionGrid) and list(g2.cell_id) == list(g.cell_id)


def test_jitter_duplicates_deterministic():
    c = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 0.0], [0.0, 0.0]])
    j = jitter_duplicates(c)
    np.testing.assert_array_equal(j[:, 1], c[:, 1])
    np.testing.assert_allclose(j[:, 0], [0, 1, 1e-6, 2e-6])
    assert len(np.unique(j, axis=0)) == 4
    np.testing.assert_array_equal(j, jitter_duplicates(c))


def test_spatial_subsample_is_compact():
    t = make_table(n=500, J=1, seed=4)
    s = spatial_subsample(t, 0.05, np.random.default_rng(0))
    assert s.n == 25
    center_dist = np.hypot(*(t.coords - s.coords.mean(axis=0)).T)
    assert np.max(np.hypot(*(s.coords - s.coords.mean(axis=0)).T)) < np.median(center_dist)
