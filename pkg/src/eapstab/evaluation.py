"""Run a circuit as a standalone model and measure how far it is from the full model."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .graph import Circuit, check_circuit
from .interventions import InterventionSpec, baseline_cache
from .model import ToyTransformer, run_model
from .tasks import TaskDataset

EVAL_CSV_VERSION = 1
EVAL_COLUMNS = ("run_id", "dataset", "circuit_size", "circuit_error", "kl_divergence")


@dataclass(frozen=True)
class EvalReport:
    circuit_error: float
    kl_divergence: float
    size: int
    dataset_id: str

    def to_dict(self) -> dict:
        return asdict(self)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def circuit_logits(
    model: ToyTransformer, circuit: Circuit, dataset: TaskDataset, intervention: InterventionSpec
) -> tuple[np.ndarray, np.ndarray]:
    """Final-position logits ``(full, circuit)``, each ``[N, V]`` in pair order."""
    dag = model.dag
    check_circuit(circuit, dag)
    mask = circuit.mask(dag)
    V = model.config.d_vocab
    full = np.zeros((len(dataset), V))
    circ = np.zeros((len(dataset), V))
    for idx, sub in dataset.groups():
        tokens = sub.clean_tokens()
        clean = run_model(model, tokens)
        base = baseline_cache(intervention, model, sub, mean_source=dataset, clean=clean)
        out = run_model(model, tokens, edge_mask=mask, baseline=base)
        full[idx] = clean.logits[:, -1]
        circ[idx] = out.logits[:, -1]
    return full, circ


def run_as_circuit(
    model: ToyTransformer, circuit: Circuit, intervention: InterventionSpec, dataset: TaskDataset, pair: int
) -> np.ndarray:
    """``[T, V]`` logits of one pair with every non-circuit edge ablated.

    A node input sums the circuit-run outputs of upstream nodes on circuit
    edges and the baseline outputs on all other edges.
    """
    check_circuit(circuit, model.dag)
    one = TaskDataset((dataset.pairs[pair],), dataset.task_id, dataset.generator_seed, dataset.provenance, dataset.info)
    tokens = one.clean_tokens()
    base = baseline_cache(intervention, model, one, mean_source=dataset)
    return run_model(model, tokens, edge_mask=circuit.mask(model.dag), baseline=base).logits[0]


def _predictions(logits: np.ndarray, dataset: TaskDataset, restrict_to_answers: bool) -> np.ndarray:
    if not restrict_to_answers:
        return logits.argmax(axis=-1)
    preds = np.empty(len(logits), dtype=np.int64)
    for b, p in enumerate(dataset.pairs):
        cand = np.array(sorted(set(p.answers) | set(p.foils)))
        preds[b] = cand[np.argmax(logits[b, cand])]
    return preds


def error_from_logits(full, circ, dataset: TaskDataset, restrict_to_answers: bool = False) -> float:
    return float(np.mean(_predictions(full, dataset, restrict_to_answers) != _predictions(circ, dataset, restrict_to_answers)))


def kl_from_logits(full, circ) -> float:
    lp, lq = _log_softmax(full), _log_softmax(circ)
    kl = (np.exp(lp) * (lp - lq)).sum(axis=-1)
    # rounding can leave -1e-17 when the distributions coincide
    return float(np.mean(np.maximum(kl, 0.0)))


def circuit_error(
    model: ToyTransformer,
    circuit: Circuit,
    dataset: TaskDataset,
    intervention: InterventionSpec,
    restrict_to_answers: bool = False,
) -> float:
    """Fraction of pairs where circuit and full model disagree on the argmax.

    The argmax is over the full vocabulary at the final position, or over
    the pair's answer and foil tokens when ``restrict_to_answers``.
    """
    full, circ = circuit_logits(model, circuit, dataset, intervention)
    return error_from_logits(full, circ, dataset, restrict_to_answers)


def circuit_divergence(
    model: ToyTransformer, circuit: Circuit, dataset: TaskDataset, intervention: InterventionSpec
) -> float:
    """Mean KL(full || circuit) of the final-position distributions (nats)."""
    full, circ = circuit_logits(model, circuit, dataset, intervention)
    return kl_from_logits(full, circ)


def evaluate_circuit(
    model: ToyTransformer,
    circuit: Circuit,
    dataset: TaskDataset,
    intervention: InterventionSpec,
    restrict_to_answers: bool = False,
) -> EvalReport:
    full, circ = circuit_logits(model, circuit, dataset, intervention)
    return EvalReport(
        error_from_logits(full, circ, dataset, restrict_to_answers),
        kl_from_logits(full, circ),
        len(circuit),
        dataset.ident(),
    )
