import numpy as np

from moelab.rng import Rng


def test_same_seed_bit_identical():
    a = Rng(123)
    b = Rng(123)
    assert np.array_equal(a.uniform((100,)), b.uniform((100,)))
    assert np.array_equal(a.normal((101,)), b.normal((101,)))


def test_children_reproducible_and_distinct():
    root = Rng(9)
    c1 = root.child(4)
    c2 = Rng(9).child(4)
    assert np.array_equal(c1.normal((50,)), c2.normal((50,)))
    other = Rng(9).child(5)
    assert not np.array_equal(Rng(9).child(4).uniform((50,)), other.uniform((50,)))


def test_nested_children():
    a = Rng(1).child(2).child(3)
    b = Rng(1, _path=(2, 3))
    assert np.array_equal(a.uniform((10,)), b.uniform((10,)))


def test_normal_moments():
    n = 100_000
    z = Rng(77).normal((n,))
    assert abs(z.mean()) < 4.0 / np.sqrt(n)
    assert abs(z.var() - 1.0) < 0.05


def test_uniform_range_and_moments():
    u = Rng(5).uniform((100_000,))
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.01


def test_bernoulli_keep_rate():
    m = Rng(6).bernoulli_keep(0.9, (100_000,))
    assert set(np.unique(m)) <= {0.0, 1.0}
    assert abs(m.mean() - 0.9) < 0.01


def test_gumbel_sane():
    g = Rng(8).gumbel((100_000,))
    # Gumbel(0,1) mean is the Euler-Mascheroni constant
    assert abs(g.mean() - 0.5772) < 0.02


def test_categorical_frequencies():
    rng = Rng(10)
    p = np.array([0.2, 0.5, 0.3])
    draws = np.array([rng.categorical(p) for _ in range(20_000)])
    freq = np.bincount(draws, minlength=3) / draws.size
    assert np.max(np.abs(freq - p)) < 0.02
