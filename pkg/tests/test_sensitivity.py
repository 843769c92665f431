import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cfcalib.sensitivity import (SensitivityReport, ishigami, ishigami_total_indices, merge,
                                 oat_sensitivity, pair_objective, rank_parameters, saltelli_design,
                                 sobol_total_order)
from cfcalib.synthetic import drive_off_pair


def additive(X):
    return X[:, 0] + X[:, 1]


def test_ishigami_analytic_values():
    # closed form for a=7, b=0.1
    np.testing.assert_allclose(ishigami_total_indices(), [0.5576, 0.4424, 0.2437], atol=1e-4)


def test_ishigami_estimate_close_to_analytic():
    lb, ub = [-np.pi] * 3, [np.pi] * 3
    rep = sobol_total_order(ishigami, lb, ub, n=2048, seed=0)
    np.testing.assert_allclose(rep.sobol_total, ishigami_total_indices(), atol=0.05)
    assert rep.evaluations == 2048 * 5


def test_additive_function_half_each():
    rep = sobol_total_order(additive, [0, 0], [1, 1], n=1024, seed=3)
    np.testing.assert_allclose(rep.sobol_total, [0.5, 0.5], atol=0.05)


def test_constant_function_flags_zero_variance():
    rep = sobol_total_order(lambda X: np.full(len(X), 4.2), [0, 0], [1, 1], n=64)
    assert rep.zero_variance and np.all(rep.sobol_total == 0)


def test_dummy_input_has_zero_index():
    rep = sobol_total_order(lambda X: X[:, 0] ** 2, [0, 0], [1, 1], n=256)
    assert rep.sobol_total[1] == 0.0


def test_non_power_of_two_rounds_down_with_warning():
    with pytest.warns(UserWarning, match="rounded down"):
        rep = sobol_total_order(additive, [0, 0], [1, 1], n=1000)
    assert rep.n_base == 512 and rep.evaluations == 512 * 4


@given(seed=st.integers(0, 2 ** 16))
def test_saltelli_design_structure(seed):
    A, B, AB = saltelli_design([0, -1, 2], [1, 1, 5], 16, seed)
    for i in range(3):
        np.testing.assert_array_equal(AB[i][:, i], B[:, i])
        others = [j for j in range(3) if j != i]
        np.testing.assert_array_equal(AB[i][:, others], A[:, others])
    assert np.all(A >= [0, -1, 2]) and np.all(A <= [1, 1, 5])


def test_oat_flags_dominant_parameter():
    stub = lambda X: 1.0 + 10 * X[:, 0] + 0.01 * X[:, 1]  # noqa: E731
    rep = oat_sensitivity(stub, [0, 0], [1, 1], [0.5, 0.5], grid_n=5, names=("strong", "weak"))
    assert rank_parameters(rep, threshold=0.05) == ["strong"]
    assert rep.oat[0] == pytest.approx(10 / 6.005)


def test_sobol_inf_handled_as_worst_finite():
    def f(X):
        y = X[:, 0].copy()
        y[X[:, 1] > 0.9] = np.inf
        return y

    rep = sobol_total_order(f, [0, 0], [1, 1], n=128)
    assert np.all(np.isfinite(rep.sobol_total))


def test_report_files_and_merge():
    a = oat_sensitivity(additive, [0, 0], [1, 1], [0.5, 0.5], 3, ("p", "q"))
    b = sobol_total_order(additive, [0, 0], [1, 1], 64, names=("p", "q"))
    m = merge(a, b)
    assert m.oat is not None and m.sobol_total is not None
    lines = m.to_csv().splitlines()
    assert lines[0] == "parameter,oat_index,sobol_total" and lines[1].startswith("p,")
    with pytest.raises(ValueError):
        merge(a, SensitivityReport(("x",), np.zeros(1), np.ones(1)))


def test_pair_objective_screening_excludes_amax():
    pair, _ = drive_off_pair(2)
    obj, space, x0 = pair_objective(pair, "eidm", include_amax=False)
    assert "a_max" not in space.names
    assert obj(x0[None, :]).shape == (1,)
