"""Computational DAG of the toy transformer and circuits over it.

Node order is ``emb, a0.h0 .. a0.h{H-1}, m0, a1.h0, .., m{L-1}, logits``:
layer first, then attention heads before the MLP, then head index.  Every
node writes into the residual stream and every later node reads from it, so
``u -> v`` is an edge whenever ``u`` sits in an earlier stage than ``v``.
Heads of one layer share a stage and are not connected to each other.

Edges are ordered by (source index, destination index); this ordering is
the tie-break used everywhere edges are ranked.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable

import numpy as np

from . import _kernels

EMB = "emb"
LOGITS = "logits"


def head_name(layer: int, head: int) -> str:
    return f"a{layer}.h{head}"


def mlp_name(layer: int) -> str:
    return f"m{layer}"


def edge_id(u: str, v: str) -> str:
    return f"{u}->{v}"


def split_edge(eid: str) -> tuple[str, str]:
    u, v = eid.split("->")
    return u, v


@dataclass(frozen=True)
class ComputeDag:
    n_layers: int
    n_heads: int
    nodes: tuple[str, ...]
    stages: tuple[int, ...]
    edges: tuple[str, ...]
    src: np.ndarray = field(repr=False, compare=False)
    dst: np.ndarray = field(repr=False, compare=False)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def node_index(self) -> dict[str, int]:
        return {n: i for i, n in enumerate(self.nodes)}

    @cached_property
    def edge_index(self) -> dict[str, int]:
        return {e: i for i, e in enumerate(self.edges)}

    @property
    def upstream(self) -> tuple[str, ...]:
        """Nodes that write to the residual stream (everything but logits)."""
        return self.nodes[:-1]

    @property
    def downstream(self) -> tuple[str, ...]:
        """Nodes that read the residual stream (everything but emb)."""
        return self.nodes[1:]

    @cached_property
    def up_idx(self) -> np.ndarray:
        # upstream position == global index
        return self.src.copy()

    @cached_property
    def down_idx(self) -> np.ndarray:
        return self.dst - 1

    @cached_property
    def n_inputs(self) -> np.ndarray:
        """For each downstream node, how many upstream nodes feed it.

        Upstream feeders always form a prefix of the upstream order.
        """
        st = np.asarray(self.stages)
        return np.array([int(np.sum(st[:-1] < st[i])) for i in range(1, self.n_nodes)])

    @cached_property
    def config_hash(self) -> str:
        text = "\n".join(self.edges).encode()
        return hashlib.sha256(text).hexdigest()[:16]

    def edge_mask(self, edges: Iterable[str]) -> np.ndarray:
        """Boolean vector over ``self.edges``."""
        mask = np.zeros(self.n_edges, dtype=bool)
        idx = self.edge_index
        for e in edges:
            if e not in idx:
                raise KeyError(f"edge {e!r} is not in the DAG")
            mask[idx[e]] = True
        return mask

    def adjacency(self, edges: Iterable[str] | np.ndarray | None = None) -> np.ndarray:
        """``[n_upstream, n_downstream]`` boolean matrix of the given edges."""
        keep = self._as_mask(edges)
        adj = np.zeros((self.n_nodes - 1, self.n_nodes - 1), dtype=bool)
        adj[self.up_idx[keep], self.down_idx[keep]] = True
        return adj

    def _as_mask(self, edges) -> np.ndarray:
        if edges is None:
            return np.ones(self.n_edges, dtype=bool)
        if isinstance(edges, np.ndarray) and edges.dtype == bool:
            if edges.shape != (self.n_edges,):
                raise ValueError(f"edge mask has shape {edges.shape}, expected ({self.n_edges},)")
            return edges
        return self.edge_mask(edges)


def build_dag(config) -> ComputeDag:
    """Enumerate nodes and edges for a config with ``n_layers``/``n_heads``."""
    n_layers, n_heads = int(config.n_layers), int(config.n_heads)
    nodes: list[str] = [EMB]
    stages: list[int] = [0]
    for layer in range(n_layers):
        for h in range(n_heads):
            nodes.append(head_name(layer, h))
            stages.append(2 * layer + 1)
        nodes.append(mlp_name(layer))
        stages.append(2 * layer + 2)
    nodes.append(LOGITS)
    stages.append(2 * n_layers + 1)

    src, dst, ids = [], [], []
    for i, u in enumerate(nodes):
        for j in range(i + 1, len(nodes)):
            if stages[i] < stages[j]:
                src.append(i)
                dst.append(j)
                ids.append(edge_id(u, nodes[j]))
    return ComputeDag(
        n_layers=n_layers,
        n_heads=n_heads,
        nodes=tuple(nodes),
        stages=tuple(stages),
        edges=tuple(ids),
        src=np.asarray(src, dtype=np.int64),
        dst=np.asarray(dst, dtype=np.int64),
    )


def has_io_path(dag: ComputeDag, edges) -> bool:
    """Whether ``emb`` reaches ``logits`` using only ``edges``.

    ``edges`` is either an iterable of edge ids or a boolean mask over
    ``dag.edges``.
    """
    keep = dag._as_mask(edges)
    return _kernels.io_reachable(dag.n_nodes, dag.src, dag.dst, keep)


@dataclass(frozen=True)
class Circuit:
    edges: frozenset[str]
    dag_hash: str
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    @property
    def nodes(self) -> frozenset[str]:
        out: set[str] = set()
        for e in self.edges:
            out.update(split_edge(e))
        return frozenset(out)

    def __len__(self) -> int:
        return len(self.edges)

    def mask(self, dag: ComputeDag) -> np.ndarray:
        check_circuit(self, dag)
        return dag.edge_mask(self.edges)

    def to_json(self, dag: ComputeDag) -> dict:
        ordered = [e for e in dag.edges if e in self.edges]
        return {"format": "eapstab-circuit/1", "dag_hash": self.dag_hash, "edges": ordered, "meta": self.meta}


def check_circuit(circuit: Circuit, dag: ComputeDag) -> None:
    if circuit.dag_hash != dag.config_hash:
        raise ValueError(
            f"circuit was built for DAG {circuit.dag_hash}, model DAG is {dag.config_hash}"
        )
    missing = [e for e in circuit.edges if e not in dag.edge_index]
    if missing:
        raise ValueError(f"circuit edges not in DAG: {missing[:5]}")


def circuit_from_mask(dag: ComputeDag, mask: np.ndarray, **meta) -> Circuit:
    return Circuit(frozenset(np.asarray(dag.edges)[mask].tolist()), dag.config_hash, dict(meta))


def full_circuit(dag: ComputeDag) -> Circuit:
    return Circuit(frozenset(dag.edges), dag.config_hash, {})


def save_circuit(circuit: Circuit, dag: ComputeDag, path: str | Path) -> None:
    Path(path).write_text(json.dumps(circuit.to_json(dag), indent=1, sort_keys=True) + "\n")


def load_circuit(path: str | Path, dag: ComputeDag) -> Circuit:
    data = json.loads(Path(path).read_text())
    if data.get("dag_hash") != dag.config_hash:
        raise ValueError(
            f"{path}: circuit hash {data.get('dag_hash')} does not match DAG {dag.config_hash}"
        )
    circuit = Circuit(frozenset(data["edges"]), data["dag_hash"], data.get("meta", {}))
    check_circuit(circuit, dag)
    return circuit
