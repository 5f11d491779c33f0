import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eapstab.graph import (
    Circuit,
    build_dag,
    circuit_from_mask,
    edge_id,
    full_circuit,
    has_io_path,
    load_circuit,
    save_circuit,
    split_edge,
)
from eapstab.model import ModelConfig
from oracles import bfs_reachable, dag_edges_bruteforce


def dag(L, H):
    return build_dag(ModelConfig(n_layers=L, n_heads=H))


def test_one_layer_one_head_has_six_edges():
    d = dag(1, 1)
    assert d.nodes == ("emb", "a0.h0", "m0", "logits")
    assert d.n_edges == 6


def test_zero_layers_is_single_edge():
    d = dag(0, 4)
    assert d.edges == ("emb->logits",)


@pytest.mark.parametrize("L,H", [(2, 2), (1, 3), (3, 8), (2, 4)])
def test_edge_enumeration_matches_pair_count(L, H):
    got = [split_edge(e) for e in dag(L, H).edges]
    assert got == dag_edges_bruteforce(L, H)


def test_ordering_is_stable_and_hash_fixed():
    a, b = dag(2, 2), dag(2, 2)
    assert a.edges == b.edges and a.config_hash == b.config_hash
    assert a.config_hash != dag(2, 3).config_hash


def test_downstream_inputs_are_prefixes():
    d = dag(2, 3)
    for j, v in enumerate(d.downstream):
        ups = sorted(d.src[d.dst == j + 1].tolist())
        assert ups == list(range(d.n_inputs[j]))


def test_io_path_trivial_cases():
    d = dag(2, 2)
    assert has_io_path(d, {"emb->logits"})
    assert not has_io_path(d, set())
    assert has_io_path(d, {"emb->a0.h1", "a0.h1->m1", "m1->logits"})
    assert not has_io_path(d, {"emb->a0.h1", "m1->logits"})


def test_io_path_agrees_with_bfs_on_random_subsets():
    d = dag(2, 4)
    rng = np.random.default_rng(0)
    pairs = [split_edge(e) for e in d.edges]
    for _ in range(1000):
        pick = rng.choice(d.n_edges, size=20, replace=False)
        mask = np.zeros(d.n_edges, dtype=bool)
        mask[pick] = True
        assert has_io_path(d, mask) == bfs_reachable([pairs[i] for i in pick])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.booleans(), min_size=54, max_size=54), st.integers(0, 53))
def test_io_path_monotone(bits, extra):
    d = dag(2, 4)
    mask = np.array(bits)
    more = mask.copy()
    more[extra] = True
    if has_io_path(d, mask):
        assert has_io_path(d, more)


def test_unknown_edge_rejected():
    with pytest.raises(KeyError):
        has_io_path(dag(1, 1), {"emb->nowhere"})


def test_circuit_nodes_are_endpoints():
    d = dag(1, 2)
    c = Circuit(frozenset({"emb->a0.h1", "a0.h1->logits"}), d.config_hash)
    assert c.nodes == {"emb", "a0.h1", "logits"}
    assert len(c) == 2


def test_circuit_file_roundtrip_and_hash_check(tmp_path):
    d = dag(2, 2)
    mask = np.zeros(d.n_edges, dtype=bool)
    mask[[0, 3, 7]] = True
    c = circuit_from_mask(d, mask, n=3)
    save_circuit(c, d, tmp_path / "c.json")
    back = load_circuit(tmp_path / "c.json", d)
    assert back == c and back.meta == {"n": 3}
    assert json.loads((tmp_path / "c.json").read_text())["edges"] == [d.edges[i] for i in (0, 3, 7)]
    with pytest.raises(ValueError, match="does not match"):
        load_circuit(tmp_path / "c.json", dag(2, 3))


def test_circuit_mask_rejects_foreign_dag():
    with pytest.raises(ValueError):
        full_circuit(dag(1, 1)).mask(dag(1, 2))


def test_edge_id_roundtrip():
    assert split_edge(edge_id("a1.h0", "m2")) == ("a1.h0", "m2")
