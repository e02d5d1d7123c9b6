import numpy as np

from adapt.rng import RandomStream


def test_same_seed_bit_identical():
    a = RandomStream(1999).normal(100)
    b = RandomStream(1999).normal(100)
    np.testing.assert_array_equal(a, b)


def test_different_seeds_differ():
    assert not np.array_equal(RandomStream(1).normal(10), RandomStream(2).normal(10))


def test_named_substreams_are_independent_of_sibling_consumption():
    root = RandomStream(42)
    noise_draws = root.split("noise").normal(8)

    # consuming a lot from another sub-stream must not shift "noise"
    other = RandomStream(42)
    other.split("dropout").normal(10_000)
    np.testing.assert_array_equal(other.split("noise").normal(8), noise_draws)


def test_substream_differs_from_root_and_per_name():
    root = RandomStream(7)
    a = RandomStream(7).split("a").normal(16)
    b = RandomStream(7).split("b").normal(16)
    assert not np.array_equal(a, b)
    assert not np.array_equal(a, RandomStream(7).normal(16))
    # nested paths are position-sensitive
    ab = root.split("a").split("b").normal(4)
    ba = root.split("b").split("a").normal(4)
    assert not np.array_equal(ab, ba)


def test_integers_and_permutation_reproducible():
    s1, s2 = RandomStream(11), RandomStream(11)
    assert list(s1.integers(0, 5, size=20)) == list(s2.integers(0, 5, size=20))
    np.testing.assert_array_equal(s1.permutation(17), s2.permutation(17))
