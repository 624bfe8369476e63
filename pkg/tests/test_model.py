import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from megmm.model import (
    DataSet, ExponentialIV, LinearIV, eval_F, eval_G, eval_g, eval_psi, fd_F, fd_G,
    pack_rows, sample_means,
)


def row(y, x, z):
    return pack_rows([y], np.atleast_2d(x), np.atleast_2d(z))[0]


def test_linear_g_examples():
    mod = LinearIV(2, 1)
    np.testing.assert_array_equal(eval_g(mod, row(1, [0], [1, 2]), [0.0]), [1, 2])
    np.testing.assert_array_equal(eval_g(mod, row(3, [1], [1, 2]), [3.0]), [0, 0])


def test_exponential_g_example():
    mod = ExponentialIV(1, 1)
    assert eval_g(mod, row(1, [0], [1]), [5.0])[0] == 0.0


def test_G_examples():
    np.testing.assert_array_equal(eval_G(LinearIV(2, 1), row(0, [3], [1, 2]), [0.7]), [[-3], [-6]])
    assert eval_G(ExponentialIV(1, 1), row(0, [2], [1]), [0.0])[0, 0] == -2.0


def test_F_examples():
    np.testing.assert_array_equal(eval_F(LinearIV(2, 2), row(1, [1, 2], [1, 2]), [0.3, 4.0]), np.zeros((4, 2)))
    assert eval_F(ExponentialIV(1, 1), row(0, [1], [1]), [0.0])[0, 0] == -1.0


def test_psi_examples():
    np.testing.assert_array_equal(eval_psi(LinearIV(2, 1), row(1, [3], [1, 2]), [0.0]), [1, 2, -3, -6])
    psi = eval_psi(LinearIV(2, 2), row(0, [1, 0], [1, 1]), [0.0, 0.0])
    np.testing.assert_array_equal(psi[2:], [-1, 0, -1, 0])


@given(st.integers(1, 4), st.integers(0, 3))
def test_psi_length(p, extra):
    m = p + extra
    mod = LinearIV(m, p)
    x = np.arange(1 + p + m, dtype=float)
    assert eval_psi(mod, x, np.zeros(p)).shape == (m * (p + 1),)


def test_stacking_convention(rng):
    m, p = 3, 2
    mod = ExponentialIV(m, p)
    x = rng.standard_normal(1 + p + m)
    th = rng.standard_normal(p) * 0.2
    G = eval_G(mod, x, th)
    vec = eval_psi(mod, x, th)[m:]
    for k in range(1, m * p + 1):  # 1-based as in the convention statement
        assert vec[k - 1] == G[(k - 1) // p, (k - 1) % p]


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        eval_g(LinearIV(2, 1), row(1, [0], [1, 2]), [0.0, 1.0])


def test_model_rejects_underidentified():
    with pytest.raises(ValueError):
        LinearIV(1, 2)


def test_dataset_invariants():
    with pytest.raises(ValueError):
        DataSet([[1.0, 2.0]])
    with pytest.raises(ValueError):
        DataSet([[1.0, np.nan], [1.0, 2.0]])
    d = DataSet([[1.0, 2.0], [3.0, 4.0]])
    with pytest.raises(ValueError):
        d.rows[0, 0] = 5.0


def test_linearity_contract(rng):
    mod = LinearIV(3, 2)
    x = rng.standard_normal(6)
    a = eval_G(mod, x, rng.standard_normal(2))
    b = eval_G(mod, x, 100 * rng.standard_normal(2))
    assert np.array_equal(a, b)
    assert not np.any(eval_F(mod, x, rng.standard_normal(2)))


@pytest.mark.parametrize("mod", [LinearIV(3, 2), ExponentialIV(3, 2), ExponentialIV(2, 1)])
def test_derivatives_match_finite_differences(mod, rng):
    for _ in range(100):
        x = rng.uniform(-1, 1, 1 + mod.p + mod.m)
        th = rng.uniform(-1, 1, mod.p)
        G, Gfd = eval_G(mod, x, th), fd_G(mod, x, th)
        assert np.max(np.abs(G - Gfd)) <= 1e-6 * max(1.0, np.max(np.abs(G)))
        F, Ffd = eval_F(mod, x, th), fd_F(mod, x, th)
        assert np.max(np.abs(F - Ffd)) <= 1e-5 * max(1.0, np.max(np.abs(F)))


def test_sample_means_examples(rng):
    mod = LinearIV(2, 1)
    x = row(2, [1.5], [0.3, -1])
    d = DataSet(np.tile(x, (7, 1)))
    sm = sample_means(mod, d, [0.4])
    np.testing.assert_allclose(sm.g, eval_g(mod, x, [0.4]), rtol=0, atol=1e-15)
    # two rows with g = (1,0) and (0,1) at theta = 0
    d2 = DataSet([row(1, [0], [1, 0]), row(1, [0], [0, 1])])
    np.testing.assert_array_equal(sample_means(mod, d2, [0.0]).g, [0.5, 0.5])


def test_sample_means_flat_loop_oracle(rng):
    mod = ExponentialIV(2, 2)
    rows = rng.standard_normal((5, 5))
    th = np.array([0.1, -0.2])
    sm = sample_means(mod, DataSet(rows), th)
    acc = np.zeros(mod.k)
    for r in rows:
        acc += eval_psi(mod, r, th)
    np.testing.assert_allclose(sm.psi, acc / 5, rtol=1e-15, atol=1e-15)
    np.testing.assert_array_equal(sm.psi[:2], sm.g)
    np.testing.assert_array_equal(sm.psi[2:], sm.G.reshape(-1))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_psi_all_matches_rowwise(seed):
    r = np.random.default_rng(seed)
    mod = ExponentialIV(3, 2)
    rows = r.uniform(-1, 1, (4, 6))
    th = r.uniform(-1, 1, 2)
    batch = mod.psi_all(DataSet(rows), th)
    for i in range(4):
        np.testing.assert_allclose(batch[i], eval_psi(mod, rows[i], th), rtol=1e-14, atol=1e-14)
