"""Hot loops shared by selection, scoring and the stability statistics.

Each kernel has a numba implementation and a pure-numpy twin with the same
signature.  The numba path is used when numba imports cleanly and the
``EAPSTAB_DISABLE_NUMBA`` environment variable is unset (or ``0``).  The flag
is read once at import time; ``use_numba`` reports the active backend.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("EAPSTAB_DISABLE_NUMBA", "0") not in ("", "0", "false", "False")

try:
    if _DISABLED:
        raise ImportError("numba disabled by EAPSTAB_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


def use_numba() -> bool:
    return HAVE_NUMBA


# --------------------------------------------------------------------------
# numpy reference path
# --------------------------------------------------------------------------


def io_reachable_numpy(n_nodes: int, src: np.ndarray, dst: np.ndarray, keep: np.ndarray) -> bool:
    # edges must be sorted by src; nodes are topologically numbered
    reached = np.zeros(n_nodes, dtype=np.bool_)
    reached[0] = True
    kept = np.flatnonzero(keep)
    s = src[kept]
    d = dst[kept]
    # group consecutive edges by source so each node is finalised before use
    bounds = np.flatnonzero(np.diff(s)) + 1
    for grp_s, grp_d in zip(np.split(s, bounds), np.split(d, bounds)):
        if grp_s.size and reached[grp_s[0]]:
            reached[grp_d] = True
    return bool(reached[n_nodes - 1])


def jaccard_matrix_numpy(member: np.ndarray) -> np.ndarray:
    m = member.astype(np.int64)
    inter = m @ m.T
    sizes = m.sum(axis=1)
    union = sizes[:, None] + sizes[None, :] - inter
    out = np.ones(inter.shape, dtype=np.float64)
    nz = union > 0
    out[nz] = inter[nz] / union[nz]
    np.fill_diagonal(out, 1.0)
    return out


def edge_contract_numpy(
    delta: np.ndarray, grad: np.ndarray, up_idx: np.ndarray, down_idx: np.ndarray
) -> np.ndarray:
    """Per-edge, per-sample dot products ``<delta[u, b], grad[v, b]>``.

    ``delta`` is ``[U, B, T, D]`` and ``grad`` is ``[V, B, T, D]``; the result
    is ``[E, B]`` with one row per ``(up_idx[e], down_idx[e])``.
    """
    n_up, batch = delta.shape[:2]
    n_down = grad.shape[0]
    a = np.ascontiguousarray(delta.reshape(n_up, batch, -1).transpose(1, 0, 2))
    g = np.ascontiguousarray(grad.reshape(n_down, batch, -1).transpose(1, 2, 0))
    full = a @ g  # [B, U, V]
    return np.ascontiguousarray(full[:, up_idx, down_idx].T)


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _io_reachable_nb(n_nodes, src, dst, keep):
        reached = np.zeros(n_nodes, dtype=np.bool_)
        reached[0] = True
        for e in range(src.shape[0]):
            if keep[e] and reached[src[e]]:
                reached[dst[e]] = True
        return reached[n_nodes - 1]

    @njit(cache=True)
    def _jaccard_matrix_nb(member):
        n, n_edges = member.shape
        out = np.ones((n, n), dtype=np.float64)
        sizes = np.zeros(n, dtype=np.int64)
        for i in range(n):
            c = 0
            for e in range(n_edges):
                if member[i, e]:
                    c += 1
            sizes[i] = c
        for i in range(n):
            for j in range(i + 1, n):
                inter = 0
                for e in range(n_edges):
                    if member[i, e] and member[j, e]:
                        inter += 1
                union = sizes[i] + sizes[j] - inter
                val = 1.0 if union == 0 else inter / union
                out[i, j] = val
                out[j, i] = val
        return out

    @njit(cache=True)
    def _edge_contract_nb(delta, grad, up_idx, down_idx):
        n_up, batch, k = delta.shape
        n_edges = up_idx.shape[0]
        out = np.zeros((n_edges, batch), dtype=np.float64)
        for e in range(n_edges):
            u = up_idx[e]
            v = down_idx[e]
            for b in range(batch):
                acc = 0.0
                for i in range(k):
                    acc += delta[u, b, i] * grad[v, b, i]
                out[e, b] = acc
        return out


def io_reachable(n_nodes: int, src: np.ndarray, dst: np.ndarray, keep: np.ndarray) -> bool:
    """True iff node ``n_nodes - 1`` is reachable from node 0 via kept edges."""
    if HAVE_NUMBA:
        return bool(_io_reachable_nb(n_nodes, src, dst, keep.astype(np.bool_)))
    return io_reachable_numpy(n_nodes, src, dst, keep)


def jaccard_matrix(member: np.ndarray) -> np.ndarray:
    """Pairwise Jaccard indices of the rows of a boolean membership matrix."""
    member = np.ascontiguousarray(member, dtype=np.bool_)
    if HAVE_NUMBA:
        return _jaccard_matrix_nb(member)
    return jaccard_matrix_numpy(member)


def edge_contract(
    delta: np.ndarray, grad: np.ndarray, up_idx: np.ndarray, down_idx: np.ndarray
) -> np.ndarray:
    if HAVE_NUMBA:
        n_up, batch = delta.shape[:2]
        return _edge_contract_nb(
            np.ascontiguousarray(delta.reshape(n_up, batch, -1)),
            np.ascontiguousarray(grad.reshape(grad.shape[0], batch, -1)),
            up_idx.astype(np.int64),
            down_idx.astype(np.int64),
        )
    return edge_contract_numpy(delta, grad, up_idx, down_idx)
