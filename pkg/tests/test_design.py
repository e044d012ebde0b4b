"""Latin hypercube design generation."""

import numpy as np
import pytest

from warpcal.design import lhs_sample


def assert_stratified(design):
    idx = design.stratum_indices()
    for col in range(design.dim):
        assert sorted(idx[:, col]) == list(range(design.n))


def test_single_point_inside_box():
    design = lhs_sample(1, [(0.0, 2.0), (-1.0, 1.0)], seed=3)
    assert design.values.shape == (1, 2)
    assert 0.0 <= design.values[0, 0] <= 2.0
    assert -1.0 <= design.values[0, 1] <= 1.0


def test_toy_design_covers_all_strata():
    # the 50-run toy design on [-0.5, 0.5]^2
    design = lhs_sample(50, [(-0.5, 0.5), (-0.5, 0.5)], seed=0)
    assert_stratified(design)
    assert design.values.min() >= -0.5 and design.values.max() <= 0.5


def test_strength_design_covers_all_strata():
    # the 80-run design on the strength parameter box
    design = lhs_sample(80, [(10.0, 50.0), (10.0, 150.0)], seed=11)
    assert_stratified(design)
    assert design.values[:, 0].min() >= 10.0 and design.values[:, 0].max() <= 50.0
    assert design.values[:, 1].min() >= 10.0 and design.values[:, 1].max() <= 150.0


@pytest.mark.parametrize("seed", range(8))
def test_stratification_across_seeds(seed):
    assert_stratified(lhs_sample(17, [(0.0, 1.0), (5.0, 6.0), (-3.0, 3.0)], seed=seed))


def test_determinism():
    a = lhs_sample(20, [(0.0, 1.0), (0.0, 1.0)], seed=42)
    b = lhs_sample(20, [(0.0, 1.0), (0.0, 1.0)], seed=42)
    assert np.array_equal(a.values, b.values)
    c = lhs_sample(20, [(0.0, 1.0), (0.0, 1.0)], seed=43)
    assert not np.array_equal(a.values, c.values)


def test_degenerate_bounds_rejected():
    with pytest.raises(ValueError, match="degenerate"):
        lhs_sample(5, [(1.0, 1.0)], seed=0)
    with pytest.raises(ValueError, match="design size"):
        lhs_sample(0, [(0.0, 1.0)], seed=0)
