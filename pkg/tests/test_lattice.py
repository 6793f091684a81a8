import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from glauber_exclusion.errors import ConfigurationError, RadiusTooLarge
from glauber_exclusion.lattice import (
    Torus,
    all_plus,
    all_windows,
    ball_offsets,
    decode_window,
    encode_window,
    local_window,
)


def test_neighbors_wrap_in_one_dimension():
    assert Torus(1, 5).neighbors(0) == [1, 4]


def test_neighbors_axis_order_in_two_dimensions():
    assert Torus(2, 4).neighbors((0, 0)) == [(1, 0), (3, 0), (0, 1), (0, 3)]


def test_neighbors_degenerate_double_edge():
    assert Torus(1, 2).neighbors(1) == [0, 0]


def test_ball_examples():
    assert Torus(1, 9).ball(4, 1) == [3, 4, 5]
    assert Torus(1, 9).ball(0, 2) == [7, 8, 0, 1, 2]
    assert len(Torus(2, 7).ball((3, 3), 1)) == 5


def test_canonical_two_dimensional_order():
    assert ball_offsets(1, 2) == ((0, 0), (-1, 0), (0, -1), (0, 1), (1, 0))


def test_radius_guard():
    with pytest.raises(RadiusTooLarge):
        Torus(1, 2).ball(0, 1)


def test_distance_examples():
    assert Torus(1, 10).distance(1, 9) == 2
    assert Torus(2, 6).distance((0, 0), (3, 3)) == 6
    assert Torus(2, 6).distance((2, 5), (2, 5)) == 0


def test_local_window_example():
    t = Torus(1, 5)
    x = np.array([1, -1, 1, -1, 1])
    assert list(local_window(x, 0, 1, t)) == [1, 1, -1]
    assert list(local_window(all_plus(t), 3, 1, t)) == [1, 1, 1]


def test_locality_of_windows():
    t = Torus(1, 11)
    rng = np.random.default_rng(0)
    x = rng.choice([-1, 1], 11)
    y = x.copy()
    y[7], y[9] = x[9], x[7]
    assert np.array_equal(local_window(x, 2, 2, t), local_window(y, 2, 2, t))


def test_edge_and_neighbor_counts():
    for d, L in ((1, 7), (2, 5)):
        t = Torus(d, L)
        assert t.edge_endpoints().shape == (d * L ** d, 2)
        assert t.neighbor_table().shape == (L ** d, 2 * d)


def test_window_codes_round_trip():
    for code in range(1 << 5):
        assert encode_window(decode_window(code, 5)) == code
    assert np.array_equal(all_windows(3)[5], decode_window(5, 3))
    with pytest.raises(ConfigurationError):
        encode_window([1, 0, -1])


sites2 = st.tuples(st.integers(0, 6), st.integers(0, 6))


@given(sites2, sites2, sites2)
def test_distance_symmetric_and_triangle(u, v, w):
    t = Torus(2, 7)
    assert t.distance(u, v) == t.distance(v, u)
    assert t.distance(u, w) <= t.distance(u, v) + t.distance(v, w)


@given(st.integers(0, 48), st.integers(0, 3))
def test_ball_is_translate_of_origin_ball(u, m):
    t = Torus(2, 9)
    origin = t.ball(0, m)
    shifted = [t.shift(u, t.coords(b)) for b in origin]
    assert t.ball(u, m) == shifted


@given(st.lists(st.sampled_from([-1, 1]), min_size=9, max_size=9), st.integers(0, 8))
def test_window_commutes_with_global_flip(x, u):
    t = Torus(1, 9)
    x = np.array(x)
    assert np.array_equal(local_window(-x, u, 2, t), -local_window(x, u, 2, t))
