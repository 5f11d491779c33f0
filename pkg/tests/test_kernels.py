import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from eapstab import _kernels as K
from eapstab.graph import build_dag
from eapstab.model import ModelConfig

DAG = build_dag(ModelConfig(n_layers=2, n_heads=3))


def test_backend_flag_is_boolean():
    assert isinstance(K.use_numba(), bool)


@settings(max_examples=80, deadline=None)
@given(arrays(np.bool_, DAG.n_edges))
def test_reachability_backends_agree(keep):
    ref = K.io_reachable_numpy(DAG.n_nodes, DAG.src, DAG.dst, keep)
    assert K.io_reachable(DAG.n_nodes, DAG.src, DAG.dst, keep) == ref


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(1, 30), st.integers(0, 2**32 - 1))
def test_jaccard_backends_agree(n, k, seed):
    member = np.random.default_rng(seed).random((n, k)) < 0.4
    a = K.jaccard_matrix_numpy(member)
    b = K.jaccard_matrix(member)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)
    assert np.array_equal(a, a.T) and np.all(np.diag(a) == 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_edge_contract_backends_agree(B, T, seed):
    rng = np.random.default_rng(seed)
    n_up = DAG.n_nodes - 1
    delta = rng.standard_normal((n_up, B, T, 5))
    grad = rng.standard_normal((n_up, B, T, 5))
    ref = np.einsum("ebtd,ebtd->eb", delta[DAG.up_idx], grad[DAG.down_idx])
    np.testing.assert_allclose(K.edge_contract_numpy(delta, grad, DAG.up_idx, DAG.down_idx), ref, atol=1e-12)
    np.testing.assert_allclose(K.edge_contract(delta, grad, DAG.up_idx, DAG.down_idx), ref, atol=1e-12)
