"""Greedy top-n circuit selection with an input-to-output connectivity check."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import _kernels
from .graph import Circuit, ComputeDag, circuit_from_mask


@dataclass(frozen=True)
class SelectionConfig:
    """Top-n schedule: ``n_init``, then ``+step`` up to ``linear_until``,
    then ``round(growth * n)``, capped at ``n_max``."""

    n_init: int = 30
    n_max: int = 2000
    step: int = 10
    linear_until: int = 100
    growth: float = 1.25
    use_absolute: bool = True

    def __post_init__(self):
        if not 1 <= self.n_init <= self.n_max:
            raise ValueError("need 1 <= n_init <= n_max")
        if self.step < 1 or self.growth <= 1.0:
            raise ValueError("schedule must strictly increase")

    def schedule(self) -> list[int]:
        out, n = [], self.n_init
        while True:
            out.append(n)
            if n >= self.n_max:
                return out
            nxt = n + self.step if n < self.linear_until else int(round(self.growth * n))
            n = min(max(nxt, n + 1), self.n_max)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionConfig":
        return cls(**d)


@dataclass(frozen=True)
class NoFaithfulCircuit:
    """No top-n edge set with ``n <= n_max`` connects input to output."""

    n_max: int
    n_tried: tuple[int, ...]

    def __bool__(self) -> bool:
        return False


def edge_ranking(scores: np.ndarray, use_absolute: bool = True) -> np.ndarray:
    """Edge indices by decreasing score (magnitude); ties keep DAG order."""
    key = np.abs(scores) if use_absolute else np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(len(key)), -key))


def select_circuit(scores, dag: ComputeDag, cfg: SelectionConfig = SelectionConfig()) -> Circuit | NoFaithfulCircuit:
    """Smallest schedule value ``n`` whose top-n edges contain an emb->logits path.

    ``scores`` is an ``EdgeScoreTable`` or a vector of aggregated scores in
    ``dag.edges`` order.  The chosen ``n`` is stored in ``circuit.meta["n"]``.
    """
    vec = np.asarray(getattr(scores, "scores", scores), dtype=np.float64)
    if vec.shape != (dag.n_edges,):
        raise ValueError(f"expected {dag.n_edges} edge scores, got shape {vec.shape}")
    order = edge_ranking(vec, cfg.use_absolute)
    tried = []
    for n in cfg.schedule():
        keep = np.zeros(dag.n_edges, dtype=bool)
        keep[order[:n]] = True
        tried.append(n)
        if _kernels.io_reachable(dag.n_nodes, dag.src, dag.dst, keep):
            return circuit_from_mask(dag, keep, n=n)
        if n >= dag.n_edges:
            break
    return NoFaithfulCircuit(cfg.n_max, tuple(tried))
