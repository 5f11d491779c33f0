"""Structural and statistical summaries over sets of discovered circuits."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .graph import Circuit


class UndefinedJaccard(ValueError):
    """Both edge sets are empty, so |A u B| = 0."""


def jaccard(e1: Iterable[str] | Circuit, e2: Iterable[str] | Circuit) -> float:
    a = set(getattr(e1, "edges", e1))
    b = set(getattr(e2, "edges", e2))
    union = len(a | b)
    if union == 0:
        raise UndefinedJaccard("Jaccard index of two empty sets is undefined")
    return len(a & b) / union


def membership(circuits: Sequence[Circuit | Iterable[str]]) -> tuple[np.ndarray, list[str]]:
    """Boolean ``[N, K]`` matrix over the sorted union of all edges."""
    sets = [set(getattr(c, "edges", c)) for c in circuits]
    universe = sorted(set().union(*sets)) if sets else []
    col = {e: j for j, e in enumerate(universe)}
    member = np.zeros((len(sets), len(universe)), dtype=bool)
    for i, s in enumerate(sets):
        member[i, [col[e] for e in s]] = True
    return member, universe


def jaccard_matrix(circuits: Sequence[Circuit | Iterable[str]]) -> np.ndarray:
    """Symmetric ``[N, N]`` Jaccard matrix with unit diagonal."""
    member, _ = membership(circuits)
    if len(circuits) and (member.sum(axis=1) == 0).any():
        raise UndefinedJaccard("Jaccard matrix over an empty circuit is undefined")
    return _kernels.jaccard_matrix(member)


def mean_pairwise_jaccard(jm: np.ndarray) -> float:
    n = len(jm)
    if n < 2:
        raise ValueError("pairwise Jaccard needs at least two circuits")
    iu = np.triu_indices(n, k=1)
    return float(np.mean(jm[iu]))


@dataclass(frozen=True)
class SummaryStats:
    """Mean, population variance and CV = sigma/mu (``None`` when mu == 0)."""

    mean: float
    variance: float
    cv: float | None
    n: int

    def to_row(self) -> list[str]:
        return [repr(self.mean), repr(self.variance), "" if self.cv is None else repr(self.cv), str(self.n)]


def summarize(values: Iterable[float]) -> SummaryStats:
    x = np.sort(np.asarray(list(values), dtype=np.float64))
    if x.size == 0:
        raise ValueError("cannot summarize an empty list")
    if not np.all(np.isfinite(x)):
        raise ValueError("summary statistics need finite values")
    mu = float(x.sum() / x.size)
    var = float(np.sum((x - mu) ** 2) / x.size)
    cv = None if mu == 0.0 else float(np.sqrt(var) / mu)
    return SummaryStats(mu, var, cv, int(x.size))


def _common_hash(circuits: Sequence[Circuit]) -> str:
    hashes = {c.dag_hash for c in circuits}
    if len(hashes) != 1:
        raise ValueError("circuits come from different DAGs")
    return hashes.pop()


def median_circuit(circuits: Sequence[Circuit]) -> Circuit:
    """Edges present in strictly more than half of ``circuits``."""
    if not circuits:
        raise ValueError("median circuit of an empty list")
    h = _common_hash(circuits)
    counts = Counter(e for c in circuits for e in c.edges)
    half = len(circuits) / 2
    return Circuit(frozenset(e for e, k in counts.items() if k > half), h, {"kind": "median", "n_circuits": len(circuits)})


def union_circuit(circuits: Sequence[Circuit]) -> Circuit:
    if not circuits:
        raise ValueError("union circuit of an empty list")
    h = _common_hash(circuits)
    edges = frozenset().union(*(c.edges for c in circuits))
    return Circuit(edges, h, {"kind": "union", "n_circuits": len(circuits)})


@dataclass(frozen=True)
class MdsEmbedding:
    coords: np.ndarray  # [N, dim]
    stress: float
    eigenvalues: np.ndarray


def _pairwise(x: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def classical_mds(distances, dim: int = 2) -> MdsEmbedding:
    """Torgerson MDS: double-centre ``-D**2/2`` and keep the top ``dim`` eigenpairs.

    Negative eigenvalues are clamped to zero.  ``stress`` is
    ``||D - D_hat||_F / ||D||_F`` (0 for an all-zero ``D``).  Each
    coordinate axis is sign-normalised so its largest-magnitude entry is
    positive, which makes the output deterministic.
    """
    D = np.asarray(distances, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ValueError("distance matrix must be square")
    n = D.shape[0]
    if n < 2:
        raise ValueError("MDS needs at least two points")
    if not np.allclose(D, D.T, atol=1e-12) or np.any(np.diag(D) != 0) or np.any(D < 0):
        raise ValueError("distances must be symmetric, non-negative, zero on the diagonal")
    J = np.eye(n) - 1.0 / n
    B = -0.5 * J @ (D * D) @ J
    B = 0.5 * (B + B.T)
    w, V = np.linalg.eigh(B)
    order = np.argsort(w)[::-1][:dim]
    lam = np.clip(w[order], 0.0, None)
    V = V[:, order]
    for j in range(V.shape[1]):
        k = np.argmax(np.abs(V[:, j]))
        if V[k, j] < 0:
            V[:, j] = -V[:, j]
    coords = V * np.sqrt(lam)
    if coords.shape[1] < dim:
        coords = np.hstack([coords, np.zeros((n, dim - coords.shape[1]))])
        lam = np.concatenate([lam, np.zeros(dim - len(lam))])
    coords = coords - coords.mean(axis=0)
    norm = np.linalg.norm(D)
    stress = 0.0 if norm == 0 else float(np.linalg.norm(D - _pairwise(coords)) / norm)
    return MdsEmbedding(coords, stress, lam)
