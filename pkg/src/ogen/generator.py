"""The class-conditional feature generator and its exact backward pass.

Architecture: one multi-head cross-attention layer plus column-wise layer
normalization; the joint extrapolation variant adds a two-layer ReLU
feed-forward projection of the conditioning embedding. Everything uses a
columns-as-vectors convention: a (d, K) matrix holds K feature columns.

Two synthesis schemes share the attention core:

  per-class  Z = LN(S + MHCA(w 1^T, E, S))       -> (d, K), one column
             per neighbor; the residual extrapolates each support toward
             the conditioning class.
  joint      z = LN(FFN(w) + MHCA(w, E, S))      -> (d,), a single
             feature attending over all neighbors, anchored at a learned
             text-to-image projection of w.

Gradients are derived by hand for exactly this architecture (no general
autodiff): each forward returns a tape consumed once by backward(), which
yields gradients for every parameter and for the inputs, including the
conditioning embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._tensorio import read_tensor_file, write_tensor_file
from .errors import ConfigError, DataError
from .retrieval import NeighborContext

LN_EPS = 1e-5

_TENSOR_FIELDS = (
    "wq", "wk", "wv", "wo",
    "ln_gain", "ln_bias",
    "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2",
)


@dataclass
class GeneratorParams:
    """All learnable tensors of the feature generator (float64 in memory)."""

    heads: int
    dim: int
    d_ff: int
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ln_gain: np.ndarray
    ln_bias: np.ndarray
    ffn_w1: np.ndarray
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray
    ffn_b2: np.ndarray

    def tensor_dict(self) -> dict:
        return {name: getattr(self, name) for name in _TENSOR_FIELDS}

    def copy(self) -> "GeneratorParams":
        return GeneratorParams(
            heads=self.heads, dim=self.dim, d_ff=self.d_ff,
            **{name: getattr(self, name).copy() for name in _TENSOR_FIELDS},
        )

    def check_shapes(self) -> None:
        d, f = self.dim, self.d_ff
        expected = {
            "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
            "ln_gain": (d,), "ln_bias": (d,),
            "ffn_w1": (f, d), "ffn_b1": (f,), "ffn_w2": (d, f), "ffn_b2": (d,),
        }
        for name, shape in expected.items():
            t = getattr(self, name)
            if t.shape != shape:
                raise ConfigError(f"{name} has shape {t.shape}, expected {shape}")
            if not np.all(np.isfinite(t)):
                raise ConfigError(f"{name} contains non-finite values")
        if d % self.heads != 0:
            raise ConfigError(f"dim {d} not divisible by {self.heads} heads")


@dataclass
class GeneratorGrads:
    """One gradient tensor per parameter tensor, same shapes."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ln_gain: np.ndarray
    ln_bias: np.ndarray
    ffn_w1: np.ndarray
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray
    ffn_b2: np.ndarray

    @classmethod
    def zeros_like(cls, params: GeneratorParams) -> "GeneratorGrads":
        return cls(**{name: np.zeros_like(getattr(params, name)) for name in _TENSOR_FIELDS})

    def tensor_dict(self) -> dict:
        return {name: getattr(self, name) for name in _TENSOR_FIELDS}

    def add_(self, other: "GeneratorGrads") -> None:
        for name in _TENSOR_FIELDS:
            getattr(self, name).__iadd__(getattr(other, name))

    def scale_(self, factor: float) -> None:
        for name in _TENSOR_FIELDS:
            getattr(self, name).__imul__(factor)


@dataclass
class InputGrads:
    """Gradients w.r.t. the non-parameter inputs of a forward call."""

    w_n: "np.ndarray | None" = None
    neighbor_embeddings: "np.ndarray | None" = None
    support_features: "np.ndarray | None" = None
    query: "np.ndarray | None" = None


@dataclass
class ForwardTape:
    """Cached activations of one forward call; consumed exactly once."""

    kind: str
    params: GeneratorParams
    cache: dict = field(repr=False, default_factory=dict)
    consumed: bool = False


def init_params(heads: int, dim: int, d_ff: int, seed: int) -> GeneratorParams:
    """Uniform(+-1/sqrt(d)) projection and FFN weights, zero output
    projection (so the attention residual vanishes at step 0), identity
    layer norm. Deterministic per seed."""
    if dim % heads != 0:
        raise ConfigError(f"dim {dim} must be divisible by heads {heads}")
    if d_ff < 1:
        raise ConfigError(f"d_ff must be positive, got {d_ff}")
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(dim)
    draw = lambda shape: rng.uniform(-bound, bound, size=shape)
    return GeneratorParams(
        heads=heads, dim=dim, d_ff=d_ff,
        wq=draw((dim, dim)),
        wk=draw((dim, dim)),
        wv=draw((dim, dim)),
        wo=np.zeros((dim, dim)),
        ln_gain=np.ones(dim),
        ln_bias=np.zeros(dim),
        ffn_w1=draw((d_ff, dim)),
        ffn_b1=np.zeros(d_ff),
        ffn_w2=draw((dim, d_ff)),
        ffn_b2=np.zeros(dim),
    )


# ---------------------------------------------------------------------------
# Attention core
# ---------------------------------------------------------------------------


def _mhca_forward(params: GeneratorParams, query, keys, values):
    """Scaled dot-product cross-attention, heads as row blocks.

    query (d, Q), keys/values (d, K). Per-head projections come from the
    column blocks of wq/wk/wv (applied transposed); softmax runs over the
    K key positions; concatenated heads go through the output projection.
    """
    h, d = params.heads, params.dim
    dh = d // h
    q = np.asarray(query, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DataError("attention inputs must be 2-D column matrices")
    if q.shape[0] != d or k.shape[0] != d or v.shape[0] != d:
        raise DataError(f"attention inputs must have {d} rows")
    if k.shape[1] != v.shape[1]:
        raise DataError("keys and values must have the same number of columns")
    if k.shape[1] < 1:
        raise DataError("attention needs at least one key/value column")

    nq, nk = q.shape[1], k.shape[1]
    pq = (params.wq.T @ q).reshape(h, dh, nq)
    pk = (params.wk.T @ k).reshape(h, dh, nk)
    pv = (params.wv.T @ v).reshape(h, dh, nk)
    scale = 1.0 / math.sqrt(dh)
    logits = scale * np.einsum("hdk,hdq->hkq", pk, pq)
    logits -= logits.max(axis=1, keepdims=True)
    attn = np.exp(logits)
    attn /= attn.sum(axis=1, keepdims=True)
    heads_out = np.einsum("hdk,hkq->hdq", pv, attn)
    concat = heads_out.reshape(d, nq)
    out = params.wo @ concat
    cache = {
        "query": q, "keys": k, "values": v,
        "pq": pq, "pk": pk, "pv": pv,
        "attn": attn, "concat": concat, "scale": scale,
    }
    return out, cache


def _mhca_backward(params: GeneratorParams, cache, d_out, grads: GeneratorGrads):
    h, d = params.heads, params.dim
    dh = d // h
    attn, scale = cache["attn"], cache["scale"]
    nq = cache["query"].shape[1]

    grads.wo += d_out @ cache["concat"].T
    d_heads = (params.wo.T @ d_out).reshape(h, dh, nq)

    d_pv = np.einsum("hdq,hkq->hdk", d_heads, attn)
    d_attn = np.einsum("hdk,hdq->hkq", cache["pv"], d_heads)
    # softmax over the key axis: dS = A * (dA - sum_k A*dA)
    d_logits = attn * (d_attn - (attn * d_attn).sum(axis=1, keepdims=True))
    d_pq = scale * np.einsum("hdk,hkq->hdq", cache["pk"], d_logits)
    d_pk = scale * np.einsum("hdq,hkq->hdk", cache["pq"], d_logits)

    d_pq = d_pq.reshape(d, nq)
    d_pk = d_pk.reshape(d, -1)
    d_pv = d_pv.reshape(d, -1)
    grads.wq += cache["query"] @ d_pq.T
    grads.wk += cache["keys"] @ d_pk.T
    grads.wv += cache["values"] @ d_pv.T
    d_query = params.wq @ d_pq
    d_keys = params.wk @ d_pk
    d_values = params.wv @ d_pv
    return d_query, d_keys, d_values


# ---------------------------------------------------------------------------
# Layer norm (independent statistics per column) and FFN
# ---------------------------------------------------------------------------


def _ln_forward(params: GeneratorParams, x):
    mu = x.mean(axis=0, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    y = params.ln_gain[:, None] * xhat + params.ln_bias[:, None]
    return y, {"xhat": xhat, "inv": inv}


def _ln_backward(params: GeneratorParams, cache, dy, grads: GeneratorGrads):
    xhat, inv = cache["xhat"], cache["inv"]
    grads.ln_gain += (dy * xhat).sum(axis=1)
    grads.ln_bias += dy.sum(axis=1)
    dxhat = dy * params.ln_gain[:, None]
    return inv * (
        dxhat
        - dxhat.mean(axis=0, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=0, keepdims=True)
    )


def _ffn_forward(params: GeneratorParams, x):
    a1 = params.ffn_w1 @ x + params.ffn_b1
    hidden = np.maximum(a1, 0.0)
    y = params.ffn_w2 @ hidden + params.ffn_b2
    return y, {"x": x, "a1": a1, "hidden": hidden}


def _ffn_backward(params: GeneratorParams, cache, dy, grads: GeneratorGrads):
    grads.ffn_w2 += np.outer(dy, cache["hidden"])
    grads.ffn_b2 += dy
    d_hidden = params.ffn_w2.T @ dy
    d_a1 = d_hidden * (cache["a1"] > 0.0)
    grads.ffn_w1 += np.outer(d_a1, cache["x"])
    grads.ffn_b1 += d_a1
    return params.ffn_w1.T @ d_a1


# ---------------------------------------------------------------------------
# Public forward operations
# ---------------------------------------------------------------------------


def mhca(query, keys, values, params: GeneratorParams):
    """Bare cross-attention: (d, Q) output and a tape for backward()."""
    out, cache = _mhca_forward(params, query, keys, values)
    return out, ForwardTape(kind="mhca", params=params, cache=cache)


def extrapolate_per_class(ctx: NeighborContext, w_n, params: GeneratorParams):
    """One synthesized feature per neighbor: layer-normalized supports plus
    an attention residual driven by the conditioning embedding."""
    w = np.asarray(w_n, dtype=np.float64).reshape(-1)
    if w.shape[0] != params.dim:
        raise DataError(f"conditioning embedding dim {w.shape[0]} != {params.dim}")
    query = np.repeat(w[:, None], ctx.k, axis=1)
    resid, mc = _mhca_forward(params, query, ctx.neighbor_embeddings, ctx.support_features)
    pre = ctx.support_features + resid
    out, lc = _ln_forward(params, pre)
    tape = ForwardTape(kind="per_class", params=params, cache={"mhca": mc, "ln": lc, "k": ctx.k})
    return out, tape


def extrapolate_jointly(ctx: NeighborContext, w_n, params: GeneratorParams):
    """A single synthesized feature: layer-normalized sum of the projected
    conditioning embedding and a one-query attention readout."""
    w = np.asarray(w_n, dtype=np.float64).reshape(-1)
    if w.shape[0] != params.dim:
        raise DataError(f"conditioning embedding dim {w.shape[0]} != {params.dim}")
    resid, mc = _mhca_forward(params, w[:, None], ctx.neighbor_embeddings, ctx.support_features)
    anchor, fc = _ffn_forward(params, w)
    pre = anchor + resid[:, 0]
    out2d, lc = _ln_forward(params, pre[:, None])
    tape = ForwardTape(kind="joint", params=params, cache={"mhca": mc, "ffn": fc, "ln": lc})
    return out2d[:, 0], tape


def backward(tape: ForwardTape, upstream):
    """Exact reverse pass for the forward call that produced the tape.

    upstream matches the forward output shape. Returns (GeneratorGrads,
    InputGrads); for the extrapolation schemes InputGrads carries w_n,
    neighbor_embeddings and support_features, for bare mhca it carries
    query/keys/values (keys/values aliases are filled either way).
    """
    if tape.consumed:
        raise DataError("forward tape already consumed by a backward call")
    tape.consumed = True
    params = tape.params
    grads = GeneratorGrads.zeros_like(params)
    up = np.asarray(upstream, dtype=np.float64)

    if tape.kind == "mhca":
        d_query, d_keys, d_values = _mhca_backward(params, tape.cache, up, grads)
        inputs = InputGrads(
            query=d_query, neighbor_embeddings=d_keys, support_features=d_values
        )
        return grads, inputs

    if tape.kind == "per_class":
        d_pre = _ln_backward(params, tape.cache["ln"], up, grads)
        d_query, d_keys, d_values = _mhca_backward(params, tape.cache["mhca"], d_pre, grads)
        d_values = d_values + d_pre  # residual connection to the supports
        return grads, InputGrads(
            w_n=d_query.sum(axis=1),
            neighbor_embeddings=d_keys,
            support_features=d_values,
        )

    if tape.kind == "joint":
        d_pre = _ln_backward(params, tape.cache["ln"], up.reshape(-1, 1), grads)[:, 0]
        d_w = _ffn_backward(params, tape.cache["ffn"], d_pre, grads)
        d_query, d_keys, d_values = _mhca_backward(
            params, tape.cache["mhca"], d_pre[:, None], grads
        )
        return grads, InputGrads(
            w_n=d_w + d_query[:, 0],
            neighbor_embeddings=d_keys,
            support_features=d_values,
        )

    raise DataError(f"unknown tape kind {tape.kind!r}")


# ---------------------------------------------------------------------------
# Checkpoint files (float32 at rest, bit-exact round-trip)
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: GeneratorParams, scheme: str, epoch: int) -> None:
    tensors = {name: t.astype(np.float32) for name, t in params.tensor_dict().items()}
    meta = {
        "format": "ogen-generator",
        "version": 1,
        "heads": params.heads,
        "dim": params.dim,
        "d_ff": params.d_ff,
        "scheme": scheme,
        "epoch": epoch,
    }
    write_tensor_file(path, tensors, meta)


def load_checkpoint(path):
    """Returns (GeneratorParams, metadata dict). Tensors come back float64
    in memory; re-saving reproduces the file byte-for-byte."""
    tensors, meta = read_tensor_file(path)
    if meta.get("format") != "ogen-generator":
        raise DataError(f"{path}: not a generator checkpoint")
    missing = [name for name in _TENSOR_FIELDS if name not in tensors]
    if missing:
        raise DataError(f"{path}: checkpoint missing tensors {missing}")
    params = GeneratorParams(
        heads=int(meta["heads"]), dim=int(meta["dim"]), d_ff=int(meta["d_ff"]),
        **{name: tensors[name].astype(np.float64) for name in _TENSOR_FIELDS},
    )
    params.check_shapes()
    return params, meta
