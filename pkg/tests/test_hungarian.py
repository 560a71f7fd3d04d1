import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gamma_core.hungarian import assignment_cost, hungarian


def brute_force_cost(c):
    n, m = c.shape
    if n <= m:
        return min(sum(c[i, p[i]] for i in range(n)) for p in itertools.permutations(range(m), n))
    return min(sum(c[p[j], j] for j in range(m)) for p in itertools.permutations(range(n), m))


matrices = st.tuples(st.integers(1, 6), st.integers(1, 6)).flatmap(
    lambda s: arrays(np.float64, s, elements=st.one_of(st.integers(-5, 5).map(float), st.floats(-10, 10)))
)


@given(matrices)
def test_optimal_against_enumeration(c):
    a = hungarian(c)
    assert assignment_cost(c, a) == pytest.approx(brute_force_cost(c), abs=1e-9)
    cols = [j for j in a if j is not None]
    assert len(cols) == len(set(cols)) == min(c.shape)


def test_random_sweep_exact_integers():
    rng = np.random.default_rng(0)
    for _ in range(500):
        n, m = rng.integers(1, 7, size=2)
        c = rng.integers(-3, 4, size=(int(n), int(m))).astype(float)
        assert assignment_cost(c, hungarian(c)) == brute_force_cost(c)


def test_degenerate_inputs():
    assert hungarian(np.zeros((0, 3))) == []
    assert hungarian(np.zeros((2, 0))) == [None, None]
    assert hungarian([[5.0]]) == [0]
    with pytest.raises(ValueError):
        hungarian(np.ones(3))
    with pytest.raises(ValueError):
        hungarian([[np.inf, 0.0]])


def test_tall_matrix_leaves_rows_unassigned():
    a = hungarian([[1.0], [0.0], [2.0]])
    assert a == [None, 0, None]
