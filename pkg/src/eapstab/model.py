"""Decoder-only toy transformer with per-node caching and a hand-written backward.

There is no layer norm, so the residual stream is an exact sum: the input
of every head, MLP and the unembedding is the sum of the outputs of all
earlier nodes.  That makes edge-level interventions exact: an edge
``u -> v`` can be knocked out by swapping ``u``'s term in ``v``'s input sum.

Shapes: ``B`` batch, ``T`` positions, ``d`` model width, ``H`` heads,
``e`` head width, ``V`` vocab.  Everything is float64.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Mapping, Protocol

import numpy as np

from .graph import ComputeDag, build_dag

CHECKPOINT_MAGIC = b"EAPSTAB-CKPT\x00\x01"
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    """A gradient or score went non-finite; ``where`` names the offender."""

    def __init__(self, message: str, where: str):
        super().__init__(message)
        self.where = where


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 3
    n_heads: int = 8
    d_model: int = 32
    d_head: int = 8
    d_mlp: int = 64
    d_vocab: int = 64
    n_ctx: int = 16
    act: str = "gelu"  # "gelu" (tanh approximation) or "linear"

    def __post_init__(self):
        if self.n_layers < 0 or self.n_heads < 0:
            raise ValueError("n_layers and n_heads must be non-negative")
        for name in ("d_model", "d_head", "d_mlp", "d_vocab", "n_ctx"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.act not in ("gelu", "linear"):
            raise ValueError(f"act must be 'gelu' or 'linear', got {self.act!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**data)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, e, H, m, V = cfg.d_model, cfg.d_head, cfg.n_heads, cfg.d_mlp, cfg.d_vocab
    shapes: dict[str, tuple[int, ...]] = {"W_E": (V, d), "W_pos": (cfg.n_ctx, d)}
    for l in range(cfg.n_layers):
        shapes[f"L{l}.W_Q"] = (H, d, e)
        shapes[f"L{l}.W_K"] = (H, d, e)
        shapes[f"L{l}.W_V"] = (H, d, e)
        shapes[f"L{l}.W_O"] = (H, e, d)
        shapes[f"L{l}.W_in"] = (d, m)
        shapes[f"L{l}.b_in"] = (m,)
        shapes[f"L{l}.W_out"] = (m, d)
        shapes[f"L{l}.b_out"] = (d,)
    shapes["W_U"] = (d, V)
    return shapes


@dataclass
class ToyTransformer:
    config: ModelConfig
    params: dict[str, np.ndarray]

    def __post_init__(self):
        expected = param_shapes(self.config)
        if set(expected) != set(self.params):
            raise ValueError(
                f"parameter names do not match config: missing {sorted(set(expected) - set(self.params))}, "
                f"extra {sorted(set(self.params) - set(expected))}"
            )
        for name, shape in expected.items():
            arr = np.asarray(self.params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"parameter {name} has shape {arr.shape}, expected {shape}")
            self.params[name] = arr

    @cached_property
    def dag(self) -> ComputeDag:
        return build_dag(self.config)

    def copy(self) -> "ToyTransformer":
        return ToyTransformer(self.config, {k: v.copy() for k, v in self.params.items()})

    def fingerprint(self) -> str:
        h = hashlib.sha256(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        for name in param_shapes(self.config):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return h.hexdigest()[:16]


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Seeded init: weights ~ N(0, 1/fan_in), biases zero.

    ``fan_in`` is the width of the vector the matrix multiplies, so
    embeddings (one-hot inputs) use ``d_model`` to give unit-scale rows.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.split(".")[-1]
        if leaf.startswith("b_"):
            params[name] = np.zeros(shape)
            continue
        if leaf in ("W_E", "W_pos"):
            fan_in = cfg.d_model
        elif leaf in ("W_Q", "W_K", "W_V"):
            fan_in = cfg.d_model
        elif leaf == "W_O":
            fan_in = cfg.d_head * max(cfg.n_heads, 1)
        else:
            fan_in = shape[0]
        params[name] = rng.standard_normal(shape) / math.sqrt(fan_in)
    return params


def init_model(cfg: ModelConfig, seed: int) -> ToyTransformer:
    return ToyTransformer(cfg, init_params(cfg, seed))


def zero_model(cfg: ModelConfig) -> ToyTransformer:
    return ToyTransformer(cfg, {k: np.zeros(s) for k, s in param_shapes(cfg).items()})


def linearize(model: ToyTransformer) -> ToyTransformer:
    """Copy of ``model`` with attention switched off and identity MLP activation.

    Every node output is then affine in its input, so the metric is affine
    in every node input for a logit-difference metric.
    """
    cfg = ModelConfig(**{**model.config.to_dict(), "act": "linear"})
    params = {k: v.copy() for k, v in model.params.items()}
    for l in range(cfg.n_layers):
        params[f"L{l}.W_V"][:] = 0.0
        params[f"L{l}.W_O"][:] = 0.0
    return ToyTransformer(cfg, params)


# --------------------------------------------------------------------------
# Node functions
# --------------------------------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(x):
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), t


def _gelu_grad(x, t):
    dinner = _GELU_C * (1.0 + (3 * 0.044715) * (x * x))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner


def _causal_mask(T: int) -> np.ndarray:
    return np.triu(np.ones((T, T), dtype=bool), k=1)


def attn_forward(x, W_Q, W_K, W_V, W_O):
    """All heads of one layer. ``x`` is ``[H, B, T, d]`` (one input per head)."""
    T = x.shape[2]
    scale = 1.0 / math.sqrt(W_Q.shape[-1])
    q = x @ W_Q[:, None]
    k = x @ W_K[:, None]
    v = x @ W_V[:, None]
    s = (q @ k.swapaxes(-1, -2)) * scale
    s = np.where(_causal_mask(T), -np.inf, s)
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    A = p / p.sum(axis=-1, keepdims=True)
    z = A @ v
    out = z @ W_O[:, None]
    return out, (x, q, k, v, A, z)


def attn_backward(g_out, state, W_Q, W_K, W_V, W_O, want_params: bool):
    x, q, k, v, A, z = state
    scale = 1.0 / math.sqrt(W_Q.shape[-1])
    g_z = g_out @ W_O.swapaxes(-1, -2)[:, None]
    g_A = g_z @ v.swapaxes(-1, -2)
    g_v = A.swapaxes(-1, -2) @ g_z
    g_s = A * (g_A - (g_A * A).sum(axis=-1, keepdims=True)) * scale
    g_q = g_s @ k
    g_k = g_s.swapaxes(-1, -2) @ q
    g_x = (
        g_q @ W_Q.swapaxes(-1, -2)[:, None]
        + g_k @ W_K.swapaxes(-1, -2)[:, None]
        + g_v @ W_V.swapaxes(-1, -2)[:, None]
    )
    grads = None
    if want_params:
        H = x.shape[0]
        xt = x.reshape(H, -1, x.shape[-1]).swapaxes(-1, -2)
        grads = {
            "W_Q": xt @ g_q.reshape(H, -1, g_q.shape[-1]),
            "W_K": xt @ g_k.reshape(H, -1, g_k.shape[-1]),
            "W_V": xt @ g_v.reshape(H, -1, g_v.shape[-1]),
            "W_O": z.reshape(H, -1, z.shape[-1]).swapaxes(-1, -2) @ g_out.reshape(H, -1, g_out.shape[-1]),
        }
    return g_x, grads


def mlp_forward(x, W_in, b_in, W_out, b_out, act: str):
    pre = x @ W_in + b_in
    if act == "gelu":
        h, t = _gelu(pre)
    else:
        h, t = pre, None
    return h @ W_out + b_out, (x, pre, t, h)


def mlp_backward(g_out, state, W_in, W_out, act: str, want_params: bool):
    x, pre, t, h = state
    g_h = g_out @ W_out.T
    g_pre = g_h * _gelu_grad(pre, t) if act == "gelu" else g_h
    g_x = g_pre @ W_in.T
    grads = None
    if want_params:
        g_out2 = g_out.reshape(-1, g_out.shape[-1])
        g_pre2 = g_pre.reshape(-1, g_pre.shape[-1])
        grads = {
            "W_out": h.reshape(-1, h.shape[-1]).T @ g_out2,
            "b_out": g_out2.sum(axis=0),
            "W_in": x.reshape(-1, x.shape[-1]).T @ g_pre2,
            "b_in": g_pre2.sum(axis=0),
        }
    return g_x, grads


# --------------------------------------------------------------------------
# Cached forward pass
# --------------------------------------------------------------------------


@dataclass
class ActivationCache:
    """Per-node outputs and per-node residual inputs for one batched pass.

    ``outputs[i]`` is the output of upstream node ``dag.upstream[i]`` and
    ``inputs[j]`` is the input of downstream node ``dag.downstream[j]``,
    both ``[B, T, d]``.  ``logits`` is ``[B, T, V]``.
    """

    dag: ComputeDag
    tokens: np.ndarray
    outputs: np.ndarray
    inputs: np.ndarray
    logits: np.ndarray
    state: dict = field(default_factory=dict, repr=False)

    def output(self, node: str) -> np.ndarray:
        return self.outputs[self.dag.node_index[node]]

    def input(self, node: str) -> np.ndarray:
        return self.inputs[self.dag.node_index[node] - 1]

    @property
    def embed(self) -> np.ndarray:
        return self.outputs[0]

    def as_dict(self) -> dict[str, np.ndarray]:
        out = {f"out:{n}": self.outputs[i] for i, n in enumerate(self.dag.upstream)}
        out.update({f"in:{n}": self.inputs[j] for j, n in enumerate(self.dag.downstream)})
        return out

    def select(self, idx) -> "ActivationCache":
        """Sub-batch view (state is dropped)."""
        return ActivationCache(
            self.dag, self.tokens[idx], self.outputs[:, idx], self.inputs[:, idx], self.logits[idx]
        )


@dataclass
class GradCache:
    """Gradient of the summed per-sample metric w.r.t. node inputs and embeddings."""

    dag: ComputeDag
    inputs: np.ndarray  # [n_down, B, T, d]
    embed: np.ndarray  # [B, T, d]

    def input(self, node: str) -> np.ndarray:
        return self.inputs[self.dag.node_index[node] - 1]


class Metric(Protocol):
    def values(self, logits: np.ndarray) -> np.ndarray: ...

    def grad(self, logits: np.ndarray) -> np.ndarray: ...


def _residual_sum(terms: np.ndarray) -> np.ndarray:
    # one code path for masked and unmasked sums keeps full-circuit runs bit-identical
    return terms.sum(axis=0)


def _layer_slices(cfg: ModelConfig, layer: int) -> tuple[slice, int]:
    """Global node indices of the heads and the MLP of ``layer``."""
    base = 1 + layer * (cfg.n_heads + 1)
    return slice(base, base + cfg.n_heads), base + cfg.n_heads


def _check_tokens(model: ToyTransformer, tokens) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be [B, T], got shape {tokens.shape}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise TypeError("tokens must be integers")
    if tokens.shape[1] > model.config.n_ctx:
        raise ValueError(f"sequence length {tokens.shape[1]} exceeds n_ctx={model.config.n_ctx}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= model.config.d_vocab):
        raise ValueError(f"token ids must lie in [0, {model.config.d_vocab})")
    return tokens


def run_model(
    model: ToyTransformer,
    tokens: np.ndarray,
    *,
    overrides: Mapping[str, np.ndarray] | None = None,
    embed: np.ndarray | None = None,
    edge_mask: np.ndarray | None = None,
    baseline: ActivationCache | None = None,
) -> ActivationCache:
    """Batched forward pass with the intervention hooks used throughout.

    ``overrides`` maps a downstream node to a replacement for its input
    (the computed sum is discarded).  ``embed`` replaces the embedding
    output.  ``edge_mask`` (boolean over ``dag.edges``) with ``baseline``
    runs the model as a circuit: a node input sums the current output of
    upstream nodes on kept edges and the baseline output on removed ones.
    """
    cfg, P = model.config, model.params
    tokens = _check_tokens(model, tokens)
    dag = model.dag
    B, T = tokens.shape
    d = cfg.d_model
    n_up = dag.n_nodes - 1
    overrides = dict(overrides or {})
    for node, val in overrides.items():
        if node not in dag.node_index or node == "emb":
            raise KeyError(f"override for unknown downstream node {node!r}")
        if np.shape(val) != (B, T, d):
            raise ValueError(f"override for node {node!r} has shape {np.shape(val)}, expected {(B, T, d)}")

    adj = None
    if edge_mask is not None:
        if baseline is None:
            raise ValueError("edge_mask requires a baseline cache")
        adj = dag.adjacency(np.asarray(edge_mask, dtype=bool))
        if baseline.outputs.shape != (n_up, B, T, d):
            raise ValueError(
                f"baseline outputs have shape {baseline.outputs.shape}, expected {(n_up, B, T, d)}"
            )

    outputs = np.zeros((n_up, B, T, d))
    inputs = np.zeros((dag.n_nodes - 1, B, T, d))
    if embed is not None:
        if np.shape(embed) != (B, T, d):
            raise ValueError(f"embedding override has shape {np.shape(embed)}, expected {(B, T, d)}")
        outputs[0] = embed
    else:
        outputs[0] = P["W_E"][tokens] + P["W_pos"][:T]

    n_inputs = dag.n_inputs

    def node_input(g: int) -> np.ndarray:
        name = dag.nodes[g]
        if name in overrides:
            return np.asarray(overrides[name], dtype=np.float64)
        p = n_inputs[g - 1]
        if adj is None:
            return _residual_sum(outputs[:p])
        keep = adj[:p, g - 1][:, None, None, None]
        return _residual_sum(np.where(keep, outputs[:p], baseline.outputs[:p]))

    state: dict = {}
    for l in range(cfg.n_layers):
        heads, mlp = _layer_slices(cfg, l)
        if cfg.n_heads:
            x = np.stack([node_input(g) for g in range(heads.start, heads.stop)])
            inputs[heads.start - 1 : heads.stop - 1] = x
            out, st = attn_forward(x, P[f"L{l}.W_Q"], P[f"L{l}.W_K"], P[f"L{l}.W_V"], P[f"L{l}.W_O"])
            outputs[heads] = out
            state[("attn", l)] = st
        x = node_input(mlp)
        inputs[mlp - 1] = x
        out, st = mlp_forward(x, P[f"L{l}.W_in"], P[f"L{l}.b_in"], P[f"L{l}.W_out"], P[f"L{l}.b_out"], cfg.act)
        outputs[mlp] = out
        state[("mlp", l)] = st
    x = node_input(dag.n_nodes - 1)
    inputs[-1] = x
    logits = x @ P["W_U"]
    state["adj"] = adj
    return ActivationCache(dag, tokens, outputs, inputs, logits, state)


def forward_cached(
    model: ToyTransformer,
    tokens: np.ndarray,
    overrides: Mapping[str, np.ndarray] | None = None,
    **kwargs,
) -> tuple[np.ndarray, ActivationCache]:
    """Forward pass returning ``(logits, cache)``.

    Accepts a single sequence ``[T]`` (logits ``[T, V]``, overrides
    ``[T, d]``) or a batch ``[B, T]``.  The cache is always batched.
    """
    tokens = np.asarray(tokens)
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None]
        overrides = {k: np.asarray(v)[None] for k, v in (overrides or {}).items()}
        if kwargs.get("embed") is not None:
            kwargs["embed"] = np.asarray(kwargs["embed"])[None]
    cache = run_model(model, tokens, overrides=overrides, **kwargs)
    return (cache.logits[0] if single else cache.logits), cache


def backward(
    model: ToyTransformer,
    cache: ActivationCache,
    dlogits: np.ndarray,
    *,
    want_params: bool = False,
) -> tuple[GradCache, dict[str, np.ndarray] | None]:
    """Reverse pass from ``dlogits`` (``[B, T, V]``).

    Each node's Jacobian is taken at the input stored in ``cache``; if that
    input came from an override, the gradient still flows straight through
    to the upstream nodes that would normally feed it.  Gradients only
    travel along edges kept by the cache's edge mask.
    """
    cfg, P, dag = model.config, model.params, model.dag
    adj = cache.state.get("adj")
    n_down = dag.n_nodes - 1
    g_in = np.zeros_like(cache.inputs)
    pgrads: dict[str, np.ndarray] | None = {} if want_params else None

    g_in[-1] = dlogits @ P["W_U"].T
    if want_params:
        d = cache.inputs.shape[-1]
        pgrads["W_U"] = cache.inputs[-1].reshape(-1, d).T @ dlogits.reshape(-1, dlogits.shape[-1])

    n_inputs = dag.n_inputs

    def grad_output(u: int) -> np.ndarray:
        readers = np.flatnonzero(n_inputs > u)
        if adj is not None:
            readers = readers[adj[u, readers]]
        if readers.size == 0:
            return np.zeros(cache.inputs.shape[1:])
        return g_in[readers].sum(axis=0)

    for l in reversed(range(cfg.n_layers)):
        heads, mlp = _layer_slices(cfg, l)
        go = grad_output(mlp)
        gx, g = mlp_backward(go, cache.state[("mlp", l)], P[f"L{l}.W_in"], P[f"L{l}.W_out"], cfg.act, want_params)
        g_in[mlp - 1] = gx
        if want_params:
            for k, v in g.items():
                pgrads[f"L{l}.{k}"] = v
        if cfg.n_heads:
            go = np.stack([grad_output(u) for u in range(heads.start, heads.stop)])
            gx, g = attn_backward(
                go, cache.state[("attn", l)], P[f"L{l}.W_Q"], P[f"L{l}.W_K"], P[f"L{l}.W_V"], P[f"L{l}.W_O"], want_params
            )
            g_in[heads.start - 1 : heads.stop - 1] = gx
            if want_params:
                for k, v in g.items():
                    pgrads[f"L{l}.{k}"] = v
        elif want_params:
            for k in ("W_Q", "W_K", "W_V", "W_O"):
                pgrads[f"L{l}.{k}"] = np.zeros_like(P[f"L{l}.{k}"])
    g_emb = grad_output(0)
    if want_params:
        T = cache.tokens.shape[1]
        gW_E = np.zeros_like(P["W_E"])
        np.add.at(gW_E, cache.tokens.reshape(-1), g_emb.reshape(-1, cfg.d_model))
        gW_pos = np.zeros_like(P["W_pos"])
        gW_pos[:T] = g_emb.sum(axis=0)
        pgrads["W_E"] = gW_E
        pgrads["W_pos"] = gW_pos
    assert g_in.shape[0] == n_down
    return GradCache(dag, g_in, g_emb), pgrads


def check_finite_grads(grads: GradCache) -> None:
    if not np.all(np.isfinite(grads.embed)):
        raise NonFiniteError("non-finite gradient at node emb", "emb")
    for j, node in enumerate(grads.dag.downstream):
        if not np.all(np.isfinite(grads.inputs[j])):
            raise NonFiniteError(f"non-finite gradient at node {node}", node)


def grad_metric(
    model: ToyTransformer,
    tokens: np.ndarray,
    metric: Metric,
    *,
    embed: np.ndarray | None = None,
    overrides: Mapping[str, np.ndarray] | None = None,
) -> GradCache:
    """Gradient of each sample's metric w.r.t. every node input and the embeddings.

    Samples are independent, so the gradient of the batch sum is the stack
    of per-sample gradients.
    """
    cache = run_model(model, tokens, embed=embed, overrides=overrides)
    grads, _ = backward(model, cache, metric.grad(cache.logits))
    check_finite_grads(grads)
    return grads


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


def save_model(model: ToyTransformer, path: str | Path) -> str:
    """Write a checkpoint; returns the sha256 of the file bytes.

    Layout: magic, little-endian u64 header length, JSON header, then the
    parameters as little-endian float64 in header order.  No timestamps,
    so identical models give identical files.
    """
    names = list(param_shapes(model.config))
    header = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "params": [[n, list(model.params[n].shape)] for n in names],
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    blob = b"".join(np.ascontiguousarray(model.params[n], dtype="<f8").tobytes() for n in names)
    data = CHECKPOINT_MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + blob
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_model(path: str | Path) -> ToyTransformer:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not an eapstab checkpoint")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<Q", data[off : off + 8])
    off += 8
    header = json.loads(data[off : off + hlen])
    off += hlen
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    cfg = ModelConfig.from_dict(header["config"])
    params = {}
    for name, shape in header["params"]:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape)
        params[name] = arr.astype(np.float64)
        off += 8 * n
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return ToyTransformer(cfg, params)
