import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eapstab.evaluation import (
    circuit_divergence,
    circuit_error,
    circuit_logits,
    error_from_logits,
    evaluate_circuit,
    kl_from_logits,
    run_as_circuit,
)
from eapstab.graph import Circuit, circuit_from_mask, full_circuit
from eapstab.interventions import InterventionSpec
from eapstab.model import init_model, run_model
from eapstab.tasks import TASKS, TaskGenerator, generate_dataset
from conftest import small_config
from oracles import kl_rows, mismatch_rate, reference_forward

PATCH = InterventionSpec("patching")
ZERO = InterventionSpec("zero")


def random_circuit(rng, dag, k):
    mask = np.zeros(dag.n_edges, dtype=bool)
    mask[rng.choice(dag.n_edges, size=k, replace=False)] = True
    return circuit_from_mask(dag, mask)


@pytest.mark.parametrize("spec", [PATCH, ZERO, InterventionSpec("mean"), InterventionSpec("noisy-embed", 2.0, 1)])
def test_full_circuit_is_exact(small_model, ioi_data, spec):
    c = full_circuit(small_model.dag)
    full, circ = circuit_logits(small_model, c, ioi_data, spec)
    assert np.array_equal(full, circ)
    rep = evaluate_circuit(small_model, c, ioi_data, spec)
    assert rep.circuit_error == 0.0 and rep.kl_divergence == 0.0
    assert rep.size == small_model.dag.n_edges


def test_empty_circuit_zero_ablation_is_zero_input_network(small_model, ioi_data):
    empty = Circuit(frozenset(), small_model.dag.config_hash)
    logits = run_as_circuit(small_model, empty, ZERO, ioi_data, 2)
    # every node input is zero, including the unembedding's
    assert not logits.any()
    zero_in = run_model(
        small_model,
        ioi_data.clean_tokens()[:1],
        overrides={n: np.zeros((1, 12, 12)) for n in small_model.dag.downstream},
    )
    assert np.array_equal(logits, zero_in.logits[0])


def test_random_circuits_match_loop_reference(ioi_data):
    cfg = small_config(n_layers=1, n_heads=2)
    model = init_model(cfg, seed=8)
    dag = model.dag
    rng = np.random.default_rng(4)
    for trial in range(6):
        c = random_circuit(rng, dag, 5)
        i = int(rng.integers(len(ioi_data)))
        p = ioi_data.pairs[i]
        _, base = reference_forward(model.params, cfg, p.corrupted)
        keep = {tuple(e.split("->")): e in c.edges for e in dag.edges}
        ref, _ = reference_forward(model.params, cfg, p.clean, keep, base)
        got = run_as_circuit(model, c, PATCH, ioi_data, i)
        np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)


def test_error_and_kl_match_loop_oracles(small_model, ioi_data):
    rng = np.random.default_rng(9)
    dag = small_model.dag
    full = np.stack([reference_forward(small_model.params, small_model.config, p.clean)[0][-1] for p in ioi_data.pairs])
    bases = [reference_forward(small_model.params, small_model.config, p.corrupted)[1] for p in ioi_data.pairs]
    for _ in range(3):
        c = random_circuit(rng, dag, int(rng.integers(1, dag.n_edges)))
        keep = {tuple(e.split("->")): e in c.edges for e in dag.edges}
        circ = np.stack(
            [
                reference_forward(small_model.params, small_model.config, p.clean, keep, b)[0][-1]
                for p, b in zip(ioi_data.pairs, bases)
            ]
        )
        rep = evaluate_circuit(small_model, c, ioi_data, PATCH)
        assert rep.circuit_error == mismatch_rate(full, circ)
        assert abs(rep.kl_divergence - kl_rows(full, circ)) < 1e-12
        assert rep.circuit_error == circuit_error(small_model, c, ioi_data, PATCH)
        assert rep.kl_divergence == circuit_divergence(small_model, c, ioi_data, PATCH)


def test_one_mismatch_in_four(ioi_data):
    ds = generate_dataset(TaskGenerator("toy-ioi"), 4, seed=0)
    full = np.eye(5)[[0, 1, 2, 3]] * 3.0
    circ = full.copy()
    circ[2] = np.eye(5)[4] * 3.0
    assert error_from_logits(full, circ, ds) == 0.25


def test_hand_three_class_kl():
    p, q = [0.5, 0.3, 0.2], [0.2, 0.5, 0.3]
    expect = 0.5 * math.log(0.5 / 0.2) + 0.3 * math.log(0.3 / 0.5) + 0.2 * math.log(0.2 / 0.3)
    got = kl_from_logits(np.log([p]), np.log([q]) + 7.0)  # logit shift is irrelevant
    assert abs(got - expect) < 1e-15


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 30.0))
def test_kl_nonnegative_and_matches_oracle(seed, scale):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 5, 6)) * scale
    kl = kl_from_logits(a, b)
    assert kl >= 0.0
    assert abs(kl - max(kl_rows(a, b), 0.0)) <= 1e-9 * max(1.0, kl)
    assert kl_from_logits(a, a) == 0.0


def test_restricted_prediction_mode(ioi_data):
    n = len(ioi_data)
    V = 40
    full = np.zeros((n, V))
    circ = np.zeros((n, V))
    for b, p in enumerate(ioi_data.pairs):
        full[b, p.answers[0]] = 2.0
        circ[b, p.answers[0]] = 2.0
        circ[b, 39] = 5.0  # outside answers and foils
    assert error_from_logits(full, circ, ioi_data) == 1.0
    assert error_from_logits(full, circ, ioi_data, restrict_to_answers=True) == 0.0


def test_foreign_circuit_rejected(small_model, ioi_data):
    bad = Circuit(frozenset({"emb->logits"}), "0" * 16)
    with pytest.raises(ValueError, match="DAG"):
        evaluate_circuit(small_model, bad, ioi_data, PATCH)
    with pytest.raises(ValueError):
        run_as_circuit(small_model, bad, PATCH, ioi_data, 0)


def test_run_as_circuit_agrees_with_batch(small_model, ioi_data):
    rng = np.random.default_rng(1)
    c = random_circuit(rng, small_model.dag, 12)
    _, circ = circuit_logits(small_model, c, ioi_data, InterventionSpec("mean"))
    for i in (0, 5):
        one = run_as_circuit(small_model, c, InterventionSpec("mean"), ioi_data, i)
        np.testing.assert_allclose(one[-1], circ[i], rtol=0, atol=1e-12)


def test_mixed_lengths_evaluated(small_model):
    from eapstab.tasks import TaskDataset

    a = generate_dataset(TaskGenerator("toy-ioi", 0), 3, seed=0)
    b = generate_dataset(TaskGenerator("toy-ioi", 1), 3, seed=0)
    mixed = TaskDataset(a.pairs + b.pairs, "toy-ioi", 0)
    c = random_circuit(np.random.default_rng(0), small_model.dag, 20)
    full, circ = circuit_logits(small_model, c, mixed, PATCH)
    fa, ca = circuit_logits(small_model, c, a, PATCH)
    assert np.array_equal(full[:3], fa) and np.array_equal(circ[:3], ca)


@pytest.mark.parametrize("task", TASKS)
def test_shipped_full_never_worse_than_empty(shipped, task):
    model = shipped(task)
    ds = generate_dataset(TaskGenerator(task), 32, seed=5)
    empty = Circuit(frozenset(), model.dag.config_hash)
    full = full_circuit(model.dag)
    for spec in (PATCH, InterventionSpec("mean")):
        ce_full = circuit_error(model, full, ds, spec)
        ce_empty = circuit_error(model, empty, ds, spec)
        assert ce_full == 0.0 <= ce_empty
    # under patching the empty circuit is the corrupted run, which a trained model answers differently
    assert circuit_error(model, empty, ds, PATCH) > 0.5
