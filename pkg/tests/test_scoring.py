import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, settings
from hypothesis import strategies as st

from eapstab.interventions import InterventionSpec, baseline_cache
from eapstab.model import NonFiniteError, backward, init_model, linearize, run_model
from eapstab.scoring import (
    METHODS,
    EdgeScoreTable,
    ScoringConfig,
    aggregate,
    aggregate_rows,
    score_clean_corrupted,
    score_eap,
    score_eap_ig_activations,
    score_eap_ig_inputs,
    score_edges,
)
from eapstab.tasks import PromptPair, TaskMetric
from conftest import small_config
from oracles import reference_forward


def patching_effects(model, dataset, intervention):
    """Brute force: metric change from ablating one edge at a time."""
    tokens = dataset.clean_tokens()
    metric = TaskMetric.for_dataset(dataset, model.config.d_vocab)
    clean = run_model(model, tokens)
    base = baseline_cache(intervention, model, dataset, clean=clean)
    m0 = metric.values(clean.logits)
    dag = model.dag
    out = np.zeros((dag.n_edges, len(dataset)))
    for e in range(dag.n_edges):
        mask = np.ones(dag.n_edges, dtype=bool)
        mask[e] = False
        out[e] = metric.values(run_model(model, tokens, edge_mask=mask, baseline=base).logits) - m0
    return out


@pytest.fixture(scope="module")
def linear_model():
    return linearize(init_model(small_config(), seed=11))


@pytest.mark.parametrize("method", METHODS)
@pytest.mark.parametrize(
    "spec",
    [
        InterventionSpec("patching"),
        InterventionSpec("zero"),
        InterventionSpec("mean"),
        InterventionSpec("noisy-embed", 0.8, 3, all_positions=True),
    ],
    ids=lambda s: s.kind,
)
def test_linear_model_first_order_exact(linear_model, ioi_data, method, spec):
    truth = patching_effects(linear_model, ioi_data, spec)
    got = score_edges(linear_model, ioi_data, ScoringConfig(method, 4, "sum", spec)).raw
    np.testing.assert_allclose(got, truth, rtol=0, atol=1e-10)
    # without attention the final position never sees the name slots,
    # so patching is exactly zero; the other baselines move it
    if spec.kind != "patching":
        assert np.abs(truth).max() > 1e-3


def test_patching_oracle_agrees_with_loop_reference(linear_model, ioi_data):
    # spot-check the brute-force oracle itself against the loop forward
    dag = linear_model.dag
    p = ioi_data.pairs[0]
    _, clean_out = reference_forward(linear_model.params, linear_model.config, p.clean)
    _, base_out = reference_forward(linear_model.params, linear_model.config, p.corrupted)
    truth = patching_effects(linear_model, replace(ioi_data, pairs=(p,)), InterventionSpec())
    metric = TaskMetric.for_pairs([p], "toy-ioi", linear_model.config.d_vocab)
    full, _ = reference_forward(linear_model.params, linear_model.config, p.clean)
    m0 = metric.values(full[None])[0]
    for e in (0, 5, dag.n_edges - 1):
        keep = {tuple(x.split("->")): x != dag.edges[e] for x in dag.edges}
        lg, _ = reference_forward(linear_model.params, linear_model.config, p.clean, keep, base_out)
        assert abs(metric.values(lg[None])[0] - m0 - truth[e, 0]) < 1e-10
    assert set(clean_out) == set(dag.upstream)


def test_ig_single_step_is_eap_bitwise(small_model, ioi_data):
    a = score_eap(small_model, ioi_data).raw
    b = score_eap_ig_inputs(small_model, ioi_data, m=1).raw
    c = score_eap_ig_activations(small_model, ioi_data, m=1).raw
    assert np.array_equal(a, b)
    assert np.array_equal(a, c)


@pytest.mark.parametrize("method", METHODS)
def test_clean_equals_corrupted_gives_zero(small_model, ioi_data, method):
    pairs = tuple(PromptPair(p.clean, p.clean, p.answers, p.foils, p.slots, p.template) for p in ioi_data.pairs)
    ds = replace(ioi_data, pairs=pairs)
    raw = score_edges(small_model, ds, ScoringConfig(method, 3)).raw
    assert not raw.any()


def test_noise_amplitude_zero_gives_zero(small_model, ioi_data):
    cfg = ScoringConfig("eap-ig-inputs", 3, "sum", InterventionSpec("noisy-embed", 0.0, 1))
    assert not score_edges(small_model, ioi_data, cfg).raw.any()


def test_zeroed_downstream_scores_zero(ioi_data):
    model = init_model(small_config(), seed=5)
    model.params["L1.W_in"][:] = 0.0
    for method in METHODS:
        t = score_edges(model, ioi_data, ScoringConfig(method, 3))
        into = [i for i, e in enumerate(model.dag.edges) if e.endswith("->m1")]
        assert not t.raw[into].any()
        assert t.raw.any()


def test_clean_corrupted_is_mean_of_endpoints(small_model, ioi_data):
    tokens = ioi_data.clean_tokens()
    metric = TaskMetric.for_dataset(ioi_data, small_model.config.d_vocab)
    clean = run_model(small_model, tokens)
    corr = run_model(small_model, ioi_data.corrupted_tokens())
    dag = small_model.dag
    delta = corr.outputs - clean.outputs

    def endpoint(cache):
        g, _ = backward(small_model, cache, metric.grad(cache.logits))
        s = np.zeros((dag.n_edges, len(ioi_data)))
        for e in range(dag.n_edges):
            s[e] = np.einsum("btd,btd->b", delta[dag.up_idx[e]], g.inputs[dag.down_idx[e]])
        return s

    expect = 0.5 * (endpoint(clean) + endpoint(corr))
    got = score_clean_corrupted(small_model, ioi_data).raw
    np.testing.assert_allclose(got, expect, rtol=1e-10, atol=1e-12)


class HalfSquare:
    """0.5 * ||final-position logits||^2: quadratic in the embeddings of a linear model."""

    def values(self, logits):
        return 0.5 * (logits[:, -1] ** 2).sum(-1)

    def grad(self, logits):
        g = np.zeros_like(logits)
        g[:, -1] = logits[:, -1]
        return g


def test_ig_quadratic_closed_form(linear_model, ioi_data):
    # gradient is affine along the path, so the k/m rule has a closed form
    metric = HalfSquare()
    dag = linear_model.dag
    tokens = ioi_data.clean_tokens()
    spec = InterventionSpec("noisy-embed", 0.9, 2, all_positions=True)
    clean = run_model(linear_model, tokens)
    corr = baseline_cache(spec, linear_model, ioi_data, clean=clean)
    delta = corr.outputs - clean.outputs

    def contract(g):
        return np.stack([np.einsum("btd,btd->b", delta[u], g[v]) for u, v in zip(dag.up_idx, dag.down_idx)])

    g0 = contract(backward(linear_model, clean, metric.grad(clean.logits))[0].inputs)
    g1 = contract(backward(linear_model, corr, metric.grad(corr.logits))[0].inputs)
    exact = 0.5 * (g0 + g1)
    m = 256
    got = score_eap_ig_inputs(linear_model, ioi_data, metric, spec, m=m).raw
    assert np.abs(g1 - g0).max() > 1e-3
    left = g0 + (g1 - g0) * (m - 1) / (2 * m)
    np.testing.assert_allclose(got, left, rtol=1e-9, atol=1e-10)
    # distance to the path integral shrinks like 1/m
    assert np.abs(got - exact).max() <= np.abs(g1 - g0).max() / (2 * m) + 1e-10
    got8 = score_eap_ig_inputs(linear_model, ioi_data, metric, spec, m=8).raw
    assert np.abs(got - exact).max() < np.abs(got8 - exact).max() / 16


def test_ig_activations_linear_equals_eap(linear_model, ioi_data):
    a = score_eap(linear_model, ioi_data).raw
    b = score_eap_ig_activations(linear_model, ioi_data, m=5).raw
    np.testing.assert_allclose(b, a, rtol=0, atol=1e-12)


def test_ig_activations_converges(ioi_data):
    model = init_model(small_config(n_layers=1), seed=2)
    s64 = score_eap_ig_activations(model, ioi_data, m=64).scores
    s128 = score_eap_ig_activations(model, ioi_data, m=128).scores
    s256 = score_eap_ig_activations(model, ioi_data, m=256).scores
    gap1, gap2 = np.abs(s64 - s128).max(), np.abs(s128 - s256).max()
    assert gap1 < 1e-2 * np.abs(s128).max()
    # left-endpoint rule is first order: halving the step halves the gap
    assert 1.8 < gap1 / gap2 < 2.2


def test_aggregation_examples():
    raw = np.array([[1.0, 2.0, 10.0]])
    assert aggregate_rows(raw, "sum")[0] == 13.0
    assert aggregate_rows(raw, "mean")[0] == 13.0 / 3
    assert aggregate_rows(raw, "median")[0] == 2.0
    assert aggregate_rows(np.array([[4.0, 1.0, 3.0, 2.0]]), "median")[0] == 2.0
    one = np.array([[-0.75]])
    assert {aggregate_rows(one, r)[0] for r in ("sum", "mean", "median")} == {-0.75}
    with pytest.raises(ValueError):
        aggregate_rows(raw, "max")


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(st.integers(-1000, 1000), min_size=5, max_size=5), min_size=2, max_size=30))
def test_sum_and_mean_rank_alike(rows):
    raw = np.array(rows, dtype=float)
    s = np.argsort(-np.abs(aggregate_rows(raw, "sum")), kind="stable")
    m = np.argsort(-np.abs(aggregate_rows(raw, "mean")), kind="stable")
    assert np.array_equal(s, m)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=12), st.randoms(use_true_random=False))
def test_aggregation_order_independent(xs, r):
    ys = list(xs)
    r.shuffle(ys)
    for rule in ("sum", "mean", "median"):
        assert aggregate_rows(np.array([xs]), rule)[0] == aggregate_rows(np.array([ys]), rule)[0]


def test_reaggregate_keeps_raw(small_model, ioi_data):
    t = score_eap(small_model, ioi_data)
    m = aggregate(t, "mean")
    assert m.raw is t.raw
    np.testing.assert_allclose(m.scores * len(ioi_data), t.scores, rtol=1e-12)


def test_table_shape_checked(small_model):
    with pytest.raises(ValueError):
        EdgeScoreTable(small_model.dag, np.zeros((3, 2)), "sum")


def test_non_finite_flagged(ioi_data):
    model = init_model(small_config(), seed=1)
    model.params["L1.W_out"][0, 0] = np.nan
    with pytest.raises(NonFiniteError) as err:
        score_eap(model, ioi_data)
    assert "#" in err.value.where


def test_ig_steps_ignored_for_endpoint_methods():
    assert ScoringConfig("eap", 50).hash() == ScoringConfig("eap", 1).hash()
    assert ScoringConfig("eap-ig-inputs", 50).hash() != ScoringConfig("eap-ig-inputs", 1).hash()
    with pytest.raises(ValueError):
        ScoringConfig("eap-ig-inputs", 0)
    with pytest.raises(ValueError):
        ScoringConfig("attribution")


def test_config_round_trip():
    c = ScoringConfig("eap-ig-activations", 7, "median", InterventionSpec("noisy-embed", 0.5, 3))
    assert ScoringConfig.from_dict(c.to_dict()) == c


def test_scores_csv(tmp_path, small_model, ioi_data):
    t = score_eap(small_model, ioi_data)
    t.to_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0].startswith("# eapstab-scores v1 ")
    assert lines[1] == "edge,score,n_samples"
    assert len(lines) == 2 + small_model.dag.n_edges
    edge, score, n = lines[2].split(",")
    assert edge == small_model.dag.edges[0]
    assert float(score) == t.scores[0] and int(n) == len(ioi_data)


def test_mixed_length_dataset_scored_per_group(small_model):
    from eapstab.tasks import TaskDataset, TaskGenerator, generate_dataset

    a = generate_dataset(TaskGenerator("toy-ioi", 0), 3, seed=0)
    b = generate_dataset(TaskGenerator("toy-ioi", 1), 3, seed=0)
    mixed = TaskDataset(a.pairs + b.pairs, "toy-ioi", 0)
    t = score_eap(small_model, mixed)
    np.testing.assert_array_equal(t.raw[:, :3], score_eap(small_model, a).raw)
    np.testing.assert_array_equal(t.raw[:, 3:], score_eap(small_model, b).raw)
