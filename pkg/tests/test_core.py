import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stratarm.core import (
    CsvSchema,
    ExperimentData,
    Propensity,
    demean,
    group_demean,
    load_columns,
    load_csv,
    solve_least_squares,
)
from stratarm.exceptions import (
    DataError,
    EmptyArm,
    MissingColumn,
    NonBinaryTreatment,
    NonNumericCell,
    RankDeficient,
)


class TestPropensity:
    def test_basic(self):
        pr = Propensity(2, 3)
        assert pr.p == pytest.approx(2 / 3)
        assert pr.s == pytest.approx(np.sqrt(2 / 9))
        assert str(pr) == "2/3"

    @pytest.mark.parametrize("a,k", [(2, 4), (0, 2), (2, 2), (3, 2)])
    def test_rejects(self, a, k):
        with pytest.raises(DataError):
            Propensity(a, k)

    def test_parse(self):
        assert Propensity.parse("1/2") == Propensity(1, 2)
        with pytest.raises(DataError):
            Propensity.parse("half")
        with pytest.raises(DataError):
            Propensity.parse("2/4")

    def test_from_counts_reduces(self):
        assert Propensity.from_counts(40, 60) == Propensity(2, 3)


class TestExperimentData:
    def test_shapes(self):
        data = ExperimentData(y=[1.0, 2.0, 3.0], d=[0, 1, 1], h=[[0.1], [0.5], [0.2]])
        assert data.n == 3
        assert data.d_h == 1 and data.d_z == 0 and data.d_psi == 0
        assert data.w.shape == (3, 1)

    def test_nonbinary_row_is_one_based(self):
        with pytest.raises(NonBinaryTreatment) as exc:
            ExperimentData(y=[1, 2, 3], d=[0, 1, 2])
        assert exc.value.row == 3

    def test_singular_h(self):
        with pytest.raises(DataError):
            ExperimentData(y=[1, 2, 3], d=[0, 1, 1], h=np.ones((3, 1)))

    def test_nonfinite(self):
        with pytest.raises(DataError):
            ExperimentData(y=[1, np.nan], d=[0, 1])

    def test_empty_arm(self):
        with pytest.raises(EmptyArm):
            ExperimentData(y=[1, 2], d=[1, 1]).require_both_arms()

    def test_subset_and_replace(self):
        data = ExperimentData(y=[1, 2, 3, 4], d=[0, 1, 0, 1], h=[[1], [3], [2], [5]])
        sub = data.subset([1, 3])
        np.testing.assert_array_equal(sub.y, [2, 4])
        assert data.replace(y=np.zeros(4)).y.sum() == 0


class TestLeastSquares:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(5, 30), st.integers(1, 4), st.integers(0, 10_000))
    def test_matches_lstsq(self, n, q, seed):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((n, q))
        y = rng.standard_normal(n)
        fit = solve_least_squares(X, y)
        ref = np.linalg.lstsq(X, y, rcond=None)[0]
        np.testing.assert_allclose(fit.coefficients, ref, atol=1e-10)
        np.testing.assert_allclose(X.T @ fit.residuals, 0, atol=1e-9)

    def test_rank_deficient(self):
        X = np.column_stack([np.ones(5), np.arange(5), 2 * np.arange(5)])
        with pytest.raises(RankDeficient):
            solve_least_squares(X, np.arange(5.0))
        fit = solve_least_squares(X, np.arange(5.0), allow_rank_deficient=True)
        assert not fit.rank_flag and fit.rank == 2

    def test_more_columns_than_rows(self):
        with pytest.raises(RankDeficient):
            solve_least_squares(np.ones((2, 3)), np.ones(2))


def test_group_demean():
    m = np.array([[1.0], [3.0], [10.0], [20.0]])
    out = group_demean(m, np.array([0, 0, 1, 1]))
    np.testing.assert_allclose(out.ravel(), [-1, 1, -5, 5])
    np.testing.assert_allclose(demean(m).sum(), 0, atol=1e-12)


class TestCsv:
    def write(self, tmp_path, text):
        p = tmp_path / "data.csv"
        p.write_text(text)
        return p

    def test_load(self, tmp_path):
        p = self.write(tmp_path, "y,d,psi_1,h_1,h_2,z_1\n1.5,1,0.1,2,3,0\n2.5,0,0.2,1,5,1\n0.5,1,0.4,0,1,1\n")
        data = load_csv(p)
        assert data.n == 3 and data.d_h == 2 and data.d_z == 1 and data.d_psi == 1
        np.testing.assert_array_equal(data.d, [1, 0, 1])

    def test_missing_column(self, tmp_path):
        p = self.write(tmp_path, "y,treat\n1,0\n")
        with pytest.raises(MissingColumn) as exc:
            load_csv(p)
        assert exc.value.column == "d"

    def test_non_numeric_cell(self, tmp_path):
        p = self.write(tmp_path, "y,d,h_1\n1,0,2\nabc,1,3\n")
        with pytest.raises(NonNumericCell) as exc:
            load_csv(p)
        assert (exc.value.row, exc.value.col) == (2, "y")

    def test_treatment_must_be_literal(self, tmp_path):
        p = self.write(tmp_path, "y,d\n1,0\n2,1.0\n")
        with pytest.raises(NonBinaryTreatment) as exc:
            load_csv(p)
        assert exc.value.row == 2

    def test_schema_from_mapping(self, tmp_path):
        p = self.write(tmp_path, "out,treat,x\n1,0,5\n2,1,6\n")
        cols = load_columns(p, {"y": "out", "d": "treat", "h": ["x"]})
        assert cols["h"].shape == (2, 1)
        assert CsvSchema.coerce(None).y == "y"
