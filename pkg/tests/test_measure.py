import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from acim.errors import DegenerateMeasureError, InputError
from acim.measure import (
    CellMeasure,
    Grid,
    LambdaPartition,
    PartitionElement,
    ReferenceMeasure,
    SubsetFamily,
    distortion_bound,
    grid_from_spec,
    measure_of,
    partition_from_spec,
    validate_partition,
)


@pytest.fixture
def unit4():
    g = Grid.uniform(0.0, 1.0, 4)
    return g, ReferenceMeasure.uniform(g)


# ----------------------------------------------------------------- Grid


def test_grid_rejects_overlap_and_empty_cells():
    with pytest.raises(InputError):
        Grid([0.0, 0.4], [0.5, 1.0])
    with pytest.raises(InputError):
        Grid([0.0, 0.5], [0.5, 0.5])
    with pytest.raises(InputError):
        Grid([0.0], [np.inf])


def test_grid_locate_and_gaps():
    g = Grid([0.0, 2.0], [1.0, 3.0])
    assert not g.is_contiguous
    assert g.gaps() == [(1.0, 2.0)]
    assert g.locate([0.5, 1.5, 2.0, 3.0]).tolist() == [0, -1, 1, -1]


def test_grid_spec_roundtrip():
    g = Grid.uniform(-1.0, 1.0, 8)
    assert grid_from_spec(g.to_dict()).same_as(g)
    h = Grid([0.0, 2.0], [1.0, 3.0])
    assert grid_from_spec(h.to_dict()).same_as(h)


# ----------------------------------------------------------------- measure_of


def test_measure_of_reference_total(unit4):
    g, lam = unit4
    assert measure_of(lam.as_measure(), range(4)) == pytest.approx(1.0, abs=1e-15)


def test_measure_of_empty(unit4):
    _, lam = unit4
    assert measure_of(lam.as_measure(), []) == 0.0


def test_measure_of_arithmetic(unit4):
    g, _ = unit4
    mu = CellMeasure([0.1, 0.2, 0.3, 0.4], g)
    assert measure_of(mu, {1, 2}) == pytest.approx(0.5, abs=1e-15)


def test_measure_of_out_of_range(unit4):
    g, lam = unit4
    with pytest.raises(InputError):
        measure_of(lam.as_measure(), [4])


@settings(max_examples=60, deadline=None)
@given(
    masses=st.lists(st.floats(0, 1e6, allow_nan=False), min_size=6, max_size=6),
    split=st.lists(st.booleans(), min_size=6, max_size=6),
)
def test_measure_of_additive(masses, split):
    g = Grid.uniform(0.0, 1.0, 6)
    mu = CellMeasure(masses, g)
    a = [i for i, s in enumerate(split) if s]
    b = [i for i, s in enumerate(split) if not s]
    whole = measure_of(mu, range(6))
    assert measure_of(mu, a) + measure_of(mu, b) == pytest.approx(whole, rel=1e-14, abs=0)


def test_cell_measure_validation(unit4):
    g, _ = unit4
    with pytest.raises(InputError):
        CellMeasure([0.1, -0.2, 0.3, 0.4], g)
    with pytest.raises(InputError):
        CellMeasure([0.1, 0.2], g)
    with pytest.raises(InputError):
        CellMeasure([0.1, np.inf, 0.3, 0.4], g)


# ----------------------------------------------------------------- reference measure


def test_reference_totals():
    g = Grid.uniform(-32.0, 32.0, 256)
    lam = ReferenceMeasure.cauchy(g)
    assert lam.total == pytest.approx(1.0, abs=1e-12)
    tail, _ = integrate.quad(lambda x: 1.0 / (np.pi * (1 + x * x)), 32.0, np.inf)
    assert lam.outside_mass == pytest.approx(2 * tail, rel=1e-10)
    u = ReferenceMeasure.uniform(Grid.uniform(0.0, 2.0, 7))
    assert u.total == pytest.approx(1.0, abs=1e-15)


def test_cauchy_cell_mass_far_out_is_accurate():
    # naive atan(b) - atan(a) loses digits at large |x|
    g = Grid.from_breakpoints([4095.0, 4096.0])
    lam = ReferenceMeasure.cauchy(g)
    exact, _ = integrate.quad(lambda x: 1.0 / (np.pi * (1 + x * x)), 4095.0, 4096.0, epsabs=0, epsrel=1e-13)
    assert lam.weights[0] == pytest.approx(exact, rel=1e-11)


# ----------------------------------------------------------------- distortion


def test_distortion_reference_is_one():
    g = Grid.uniform(0.0, 1.0, 16)
    lam = ReferenceMeasure.uniform(g)
    G = LambdaPartition.from_breakpoints(g, [0, 0.5, 1])
    for I in G:
        assert distortion_bound(lam.as_measure(), lam, I) == pytest.approx(1.0, abs=1e-14)


def test_distortion_two_level_density():
    # density 2 on the left half of I, 1 on the right; lambda(I) = 1
    g = Grid.uniform(0.0, 1.0, 2)
    lam = ReferenceMeasure.uniform(g)
    mu = CellMeasure([1.0, 0.5], g)
    I = PartitionElement("I", [0, 1])
    K = distortion_bound(mu, lam, I, subsets=[[0], [1]])
    assert K == pytest.approx(1.5, abs=1e-15)


def test_distortion_scaled_reference():
    g = Grid.uniform(0.0, 1.0, 8)
    lam = ReferenceMeasure.uniform(g)
    I = PartitionElement("I", range(8))
    assert distortion_bound(lam.as_measure().scaled(7.5), lam, I) == pytest.approx(1.0, abs=1e-14)


def test_distortion_zero_subset_is_inf_and_zero_element_raises():
    g = Grid.uniform(0.0, 1.0, 4)
    lam = ReferenceMeasure.uniform(g)
    I = PartitionElement("I", range(4))
    assert distortion_bound(CellMeasure([1, 0, 1, 1], g), lam, I) == math.inf
    with pytest.raises(DegenerateMeasureError):
        distortion_bound(CellMeasure([0, 0, 0, 0], g), lam, I)


densities = st.lists(st.floats(0.01, 100.0), min_size=8, max_size=8)


@settings(max_examples=80, deadline=None)
@given(d=densities, c=st.floats(1e-6, 1e6))
def test_distortion_properties(d, c):
    g = Grid.uniform(0.0, 1.0, 8)
    lam = ReferenceMeasure.uniform(g)
    mu = CellMeasure(np.asarray(d) * lam.weights, g)
    I = PartitionElement("I", range(8))
    K = distortion_bound(mu, lam, I)
    assert K >= 1.0
    # scale invariance
    assert distortion_bound(mu.scaled(c), lam, I) == pytest.approx(K, rel=1e-12)
    # single cells attain the supremum for piecewise-constant densities
    mean = np.sum(d) / 8
    assert K == pytest.approx(max(max(d) / mean, mean / min(d)), rel=1e-12)
    # a coarser family never reports more
    coarse = distortion_bound(mu, lam, I, subsets=[[0, 1, 2, 3], [4, 5, 6, 7]])
    assert coarse <= K * (1 + 1e-12)


@settings(max_examples=40, deadline=None)
@given(d=densities, extra=st.lists(st.sets(st.integers(0, 7), min_size=1), min_size=1, max_size=4))
def test_distortion_monotone_in_family(d, extra):
    g = Grid.uniform(0.0, 1.0, 8)
    lam = ReferenceMeasure.uniform(g)
    mu = CellMeasure(np.asarray(d) * lam.weights, g)
    I = PartitionElement("I", range(8))
    base = [[0, 1], [2, 3, 4]]
    assert distortion_bound(mu, lam, I, subsets=base + list(extra)) >= distortion_bound(mu, lam, I, subsets=base)


def test_canonical_family_size():
    fam = SubsetFamily.canonical(PartitionElement("I", range(8)))
    assert len(fam) == 8 + 4 + 2 + 1


def test_constant_density_equals_one_exactly_on_family():
    g = Grid.uniform(0.0, 1.0, 4)
    lam = ReferenceMeasure.uniform(g)
    I = PartitionElement("I", [0, 1])
    mu = CellMeasure([0.3, 0.3, 0.9, 0.1], g)
    assert distortion_bound(mu, lam, I) == 1.0


# ----------------------------------------------------------------- partitions


def test_validate_dyadic_partition(unit4):
    g, lam = unit4
    G = LambdaPartition.from_breakpoints(g, [0, 0.5, 1])
    rep = validate_partition(G, lam)
    assert rep.verdict == "PASS"
    assert rep.element_masses == pytest.approx([0.5, 0.5], abs=1e-15)
    assert rep.cover_defect == 0.0
    assert G.names == ["[0,1/2)", "[1/2,1)"]


def test_validate_overlap_fails():
    g = Grid.uniform(0.0, 1.0, 10)
    lam = ReferenceMeasure.uniform(g)
    G = LambdaPartition(g, (PartitionElement("a", range(0, 6)), PartitionElement("b", range(5, 10))), 0)
    rep = validate_partition(G, lam)
    assert rep.verdict == "FAIL" and not rep.disjoint


def test_validate_uncovered_fails():
    g = Grid.uniform(0.0, 1.0, 4)
    lam = ReferenceMeasure.uniform(g)
    G = LambdaPartition.from_breakpoints(g, [0, 0.5])
    rep = validate_partition(G, lam)
    assert rep.verdict == "FAIL" and rep.cover_defect == pytest.approx(0.5)


def test_validate_boole_partition_reports_tail():
    g = Grid.from_breakpoints(np.arange(-64, 65, dtype=float))
    lam = ReferenceMeasure.cauchy(g)
    G = LambdaPartition.from_breakpoints(g, np.arange(-32, 33, dtype=float))
    tail, _ = integrate.quad(lambda x: 1.0 / (np.pi * (1 + x * x)), 32.0, np.inf)
    rep = validate_partition(G, lam, cover_tol=2 * tail + 1e-12)
    assert rep.verdict == "PASS"
    assert len(G) == 64
    assert rep.cover_defect == pytest.approx(2 * tail, rel=1e-9)


def test_partition_spec_and_i0():
    g = Grid.uniform(0.0, 1.0, 8)
    lam = ReferenceMeasure.uniform(g)
    G = partition_from_spec(g, {"breakpoints": [0, 0.25, 1], "i0": "[1/4,1)"})
    assert G.I0.name == "[1/4,1)"
    G2 = partition_from_spec(g, {"elements": [{"name": "L", "cells": [0, 1, 2]}, {"cells": [3, 4, 5, 6, 7]}]})
    assert G2.names == ["L", "I1"]
    assert G2.with_i0(None, lam).I0.name == "I1"
    with pytest.raises(InputError):
        LambdaPartition.from_breakpoints(g, [0, 0.01, 1])


def test_element_masses_on_stack(unit4):
    g, lam = unit4
    G = LambdaPartition.from_breakpoints(g, [0, 0.5, 1])
    stack = np.array([[1, 2, 3, 4], [0, 0, 1, 1]], dtype=float)
    assert G.element_masses(stack).tolist() == [[3, 7], [0, 2]]
