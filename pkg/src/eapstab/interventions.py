"""Baseline activations for each intervention type.

A baseline cache holds, for every upstream node, the activation that an
ablated edge carries instead of the clean one.  The same cache drives
edge scoring (the "corrupted" state) and circuit evaluation (knock-out
values for edges outside the circuit).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Mapping

import numpy as np

from .model import ActivationCache, ToyTransformer, run_model
from .tasks import TaskDataset

KINDS = ("patching", "zero", "mean", "mean-positional", "noisy-embed")


@dataclass(frozen=True)
class InterventionSpec:
    """How ablated activations are produced.

    ``amplitude``, ``seed`` and ``all_positions`` only matter for
    ``noisy-embed``: the clean embeddings are shifted by ``amplitude`` times
    a unit vector drawn from ``seed``, at the corruption positions of each
    pair (or at every position when ``all_positions``).
    """

    kind: str = "patching"
    amplitude: float = 0.0
    seed: int = 0
    all_positions: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown intervention {self.kind!r}; expected one of {KINDS}")
        if not np.isfinite(self.amplitude) or self.amplitude < 0:
            raise ValueError("noise amplitude must be finite and >= 0")

    def direction(self, d_model: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 0x6E6F697365])
        v = rng.standard_normal(d_model)
        return v / np.linalg.norm(v)

    @property
    def label(self) -> str:
        if self.kind == "noisy-embed":
            return f"noisy-embed(a={self.amplitude:g},seed={self.seed})"
        return self.kind

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "InterventionSpec":
        return cls(**d)


def _cache_from_outputs(model: ToyTransformer, tokens: np.ndarray, outputs: np.ndarray) -> ActivationCache:
    dag = model.dag
    csum = np.cumsum(outputs, axis=0)
    inputs = csum[dag.n_inputs - 1]
    logits = inputs[-1] @ model.params["W_U"]
    return ActivationCache(dag, tokens, outputs, inputs, logits)


def dataset_means(model: ToyTransformer, dataset: TaskDataset, positional: bool) -> np.ndarray:
    """Mean clean output of every upstream node.

    Returns ``[n_up, d]`` (averaged over pairs and positions) or, with
    ``positional``, ``[n_up, T, d]`` (averaged over pairs only).
    """
    if positional:
        if not dataset.uniform_length:
            raise ValueError("mean-positional ablation needs a dataset of uniform sequence length")
        return run_model(model, dataset.clean_tokens()).outputs.mean(axis=1)
    total, count = None, 0
    for _, sub in dataset.groups():
        outs = run_model(model, sub.clean_tokens()).outputs
        s = outs.sum(axis=(1, 2))
        total = s if total is None else total + s
        count += outs.shape[1] * outs.shape[2]
    return total / count


def noise_positions(dataset: TaskDataset, all_positions: bool) -> np.ndarray:
    """``[B, T]`` mask of the positions that receive embedding noise."""
    clean, corrupt = dataset.clean_tokens(), dataset.corrupted_tokens()
    if all_positions:
        return np.ones(clean.shape, dtype=bool)
    return clean != corrupt


def baseline_cache(
    spec: InterventionSpec,
    model: ToyTransformer,
    dataset: TaskDataset,
    *,
    mean_source: TaskDataset | None = None,
    clean: ActivationCache | None = None,
) -> ActivationCache:
    """Batched baseline cache aligned with ``dataset.pairs``.

    ``dataset`` must have a uniform sequence length.  Mean statistics are
    taken over ``mean_source`` (default: ``dataset``) so that callers that
    process length groups separately can still average over the full set.
    """
    tokens = dataset.clean_tokens()
    B, T = tokens.shape
    n_up = model.dag.n_nodes - 1
    d = model.config.d_model
    if spec.kind == "patching":
        return run_model(model, dataset.corrupted_tokens())
    if spec.kind == "zero":
        return _cache_from_outputs(model, tokens, np.zeros((n_up, B, T, d)))
    if spec.kind == "mean":
        mu = dataset_means(model, mean_source or dataset, positional=False)
        return _cache_from_outputs(model, tokens, np.broadcast_to(mu[:, None, None, :], (n_up, B, T, d)).copy())
    if spec.kind == "mean-positional":
        mu = dataset_means(model, mean_source or dataset, positional=True)
        if mu.shape[1] != T:
            raise ValueError("mean-positional statistics and dataset differ in sequence length")
        return _cache_from_outputs(model, tokens, np.broadcast_to(mu[:, None], (n_up, B, T, d)).copy())
    # noisy-embed
    if clean is None:
        clean = run_model(model, tokens)
    mask = noise_positions(dataset, spec.all_positions)
    shift = spec.amplitude * spec.direction(d)
    embed = clean.embed + np.where(mask[..., None], shift, 0.0)
    return run_model(model, tokens, embed=embed)


def baseline_activations(
    spec: InterventionSpec, model: ToyTransformer, dataset: TaskDataset, pair: int
) -> ActivationCache:
    """Baseline cache of a single pair (``dataset.pairs[pair]``).

    Mean variants still average over the whole dataset.
    """
    if not 0 <= pair < len(dataset):
        raise IndexError(f"pair index {pair} outside dataset of {len(dataset)}")
    one = replace(dataset, pairs=(dataset.pairs[pair],))
    return baseline_cache(spec, model, one, mean_source=dataset)
