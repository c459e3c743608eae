import numpy as np
from hypothesis import given, settings, strategies as st

import oracles
from ianet.intra_attention import init_intra, intra_interact, self_attend
from ianet.numerics import Param, Tensor, grad_check, mul, sum_all


def make(D=4, H=2, seed=0, dtype=np.float64):
    return init_intra(np.random.default_rng(seed), D, H, "intra", dtype)


def test_single_row_attends_to_itself(rng):
    p = make()
    X = Tensor(rng.normal(size=(1, 4)))
    A, M = self_attend(X, p.theta_video, p.heads)
    assert np.array_equal(A.data, [[1.0]])
    assert np.array_equal(M.data, X.data)


def test_identical_rows_give_uniform_map(rng):
    p = make(D=8, H=4)
    X = Tensor(np.tile(rng.normal(size=8), (5, 1)))
    A, _ = self_attend(X, p.theta_video, p.heads)
    np.testing.assert_allclose(A.data, np.full((5, 5), 0.2), atol=1e-15)


def test_self_attend_matches_per_head_loops(rng):
    p = make(D=4, H=2, seed=2)
    X = rng.normal(size=(4, 4))
    A, M = self_attend(Tensor(X), p.theta_video, 2)
    ref_A, ref_M = oracles.self_attention(X, p.theta_video.W.data, p.theta_video.b.data, 2)
    np.testing.assert_allclose(A.data, ref_A, atol=1e-12)
    np.testing.assert_allclose(M.data, ref_M, atol=1e-12)


@given(st.integers(1, 7), st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_map_is_row_stochastic(m, seed):
    rng = np.random.default_rng(seed)
    p = make(D=8, H=2, seed=seed % 97, dtype=np.float32)
    A, _ = self_attend(Tensor(rng.normal(size=(m, 8)).astype(np.float32) * 3), p.theta_query, 2)
    assert A.shape == (m, m)
    np.testing.assert_allclose(A.data.sum(axis=1), 1.0, atol=1e-5)


@given(st.integers(2, 6), st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_permuting_rows_permutes_output(m, seed):
    rng = np.random.default_rng(seed)
    p = make(D=4, H=2)
    X = rng.normal(size=(m, 4))
    perm = rng.permutation(m)
    _, M = self_attend(Tensor(X), p.theta_video, 2)
    _, M_perm = self_attend(Tensor(X[perm]), p.theta_video, 2)
    np.testing.assert_allclose(M_perm.data, M.data[perm], atol=1e-12)


def test_modalities_do_not_interact(rng):
    p = make(D=4, H=2)
    V = Tensor(rng.normal(size=(3, 4)))
    a, _, _, _ = intra_interact(V, Tensor(rng.normal(size=(2, 4))), p)
    b, _, _, _ = intra_interact(V, Tensor(rng.normal(size=(5, 4))), p)
    assert np.array_equal(a.data, b.data)
    Q = Tensor(rng.normal(size=(2, 4)))
    _, c, _, _ = intra_interact(Tensor(rng.normal(size=(3, 4))), Q, p)
    _, d, _, _ = intra_interact(Tensor(rng.normal(size=(6, 4))), Q, p)
    assert np.array_equal(c.data, d.data)


def test_shapes_preserved(rng):
    p = make(D=8, H=4)
    V2, Q2, A_v, A_q = intra_interact(Tensor(rng.normal(size=(6, 8))), Tensor(rng.normal(size=(3, 8))), p)
    assert V2.shape == (6, 8) and Q2.shape == (3, 8)
    assert A_v.shape == (6, 6) and A_q.shape == (3, 3)


def test_open_gates_make_the_module_an_identity(rng):
    p = make()
    p.calib_video.b_Z.data[:] = 1e4
    p.calib_query.b_Z.data[:] = 1e4
    V, Q = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(2, 4)))
    V2, Q2, _, _ = intra_interact(V, Q, p)
    assert np.array_equal(V2.data, V.data) and np.array_equal(Q2.data, Q.data)


def test_intra_interact_gradient(rng):
    p = make(seed=4)
    V = Param(rng.normal(size=(3, 4)), name="V")
    Q = Param(rng.normal(size=(2, 4)), name="Q")
    wv, wq = rng.normal(size=(3, 4)), rng.normal(size=(2, 4))

    def f():
        v, q, _, _ = intra_interact(V, Q, p)
        return sum_all(mul(v, Tensor(wv))) + sum_all(mul(q, Tensor(wq)))

    report = grad_check(f, [V, Q] + p.params(), oracle_dtype=np.longdouble)
    assert max(e.max_rel_error for e in report) < 1e-4
