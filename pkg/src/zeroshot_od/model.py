"""Router-attention prior-fitted network for zero-shot outlier scoring.

Each sample is one token; there are no positional encodings, so outputs are
invariant to the order of context rows.  Per layer, ``R`` learnable routers
gather from the context (training) tokens only, and every token - context or
query - reads back from the routers.  Query tokens therefore never influence
each other or the context, which makes per-query scores independent of the
rest of the query batch.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node

_MSA_PARTS = ("q", "k", "v", "o")
# Cap on attention-logit elements per chunk when no graph is recorded.
_CHUNK_ELEMENTS = 1 << 23
# Shrinks the classifier's last layer so initial predictions are near 50/50.
OUTPUT_INIT_SCALE = 0.1


@dataclass(frozen=True)
class ModelConfig:
    max_dims: int = 100
    num_layers: int = 4
    hidden: int = 256
    heads: int = 4
    routers: int = 500
    ffn_multiplier: int = 4
    precision: str = "float32"

    def __post_init__(self):
        if self.max_dims < 1:
            raise ValueError("max_dims must be >= 1")
        if self.num_layers < 1 or self.routers < 1 or self.heads < 1 or self.ffn_multiplier < 1:
            raise ValueError("num_layers, routers, heads and ffn_multiplier must be >= 1")
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} is not divisible by heads={self.heads}")
        if self.hidden < 2:
            raise ValueError("hidden must be >= 2")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be 'float32' or 'float64'")

    @property
    def dtype(self):
        return np.dtype(self.precision)

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


def count_params(config: ModelConfig) -> int:
    h, f = config.hidden, config.ffn_multiplier * config.hidden
    embed = (config.max_dims + 1) * h
    msa = 4 * (h * h + h)
    per_layer = config.routers * h + 2 * msa + 4 * h + (h * f + f) + (f * h + h)
    head = (h * h + h) + (h * 2 + 2)
    return embed + config.num_layers * per_layer + head


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape layout of all learnable arrays."""
    h, f = config.hidden, config.ffn_multiplier * config.hidden
    shapes: dict[str, tuple[int, ...]] = {"embed.W": (config.max_dims, h), "embed.b": (h,)}
    for i in range(config.num_layers):
        p = f"layer{i}"
        shapes[f"{p}.routers"] = (config.routers, h)
        for msa in ("msa1", "msa2"):
            for part in _MSA_PARTS:
                shapes[f"{p}.{msa}.{part}.W"] = (h, h)
                shapes[f"{p}.{msa}.{part}.b"] = (h,)
        for ln in ("ln1", "ln2"):
            shapes[f"{p}.{ln}.g"] = (h,)
            shapes[f"{p}.{ln}.b"] = (h,)
        shapes[f"{p}.ffn.1.W"] = (h, f)
        shapes[f"{p}.ffn.1.b"] = (f,)
        shapes[f"{p}.ffn.2.W"] = (f, h)
        shapes[f"{p}.ffn.2.b"] = (h,)
    shapes["head.1.W"] = (h, h)
    shapes["head.1.b"] = (h,)
    shapes["head.2.W"] = (h, 2)
    shapes["head.2.b"] = (2,)
    return shapes


def init_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, Node]:
    """Glorot-uniform weights (the final classifier layer scaled by
    ``OUTPUT_INIT_SCALE``), zero biases, N(0, 0.02^2) routers, unit LN gains."""
    params: dict[str, Node] = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "routers":
            value = rng.normal(0.0, 0.02, size=shape)
        elif leaf == "W":
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-limit, limit, size=shape)
            if name == "head.2.W":
                value *= OUTPUT_INIT_SCALE
        elif leaf == "g":
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        params[name] = ad.parameter(value.astype(config.dtype))
    return params


# -- feature adaptation / embedding -------------------------------------------

def adapt_features(X: np.ndarray, max_dims: int, rng: np.random.Generator | None = None):
    """Bring ``X`` to width ``max_dims``.

    ``d <= D``: scale by ``D/d`` and zero-pad on the right.  ``d > D``: keep a
    uniformly drawn subset of ``D`` columns (in their original order).
    Returns ``(X_adapted, kept_columns)``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise ValueError(f"need a non-empty 2-d feature matrix, got shape {X.shape}")
    n, d = X.shape
    if d > max_dims:
        rng = rng if rng is not None else np.random.default_rng(0)
        kept = np.sort(rng.choice(d, size=max_dims, replace=False))
        return X[:, kept], kept
    out = np.zeros((n, max_dims))
    out[:, :d] = X * (max_dims / d)
    return out, np.arange(d)


def embed_features(X: np.ndarray, params: dict[str, Node], config: ModelConfig,
                   rng: np.random.Generator | None = None) -> Node:
    Xa, _ = adapt_features(X, config.max_dims, rng)
    return ad.add(ad.matmul(ad.constant(Xa.astype(config.dtype)), params["embed.W"]), params["embed.b"])


# -- attention ---------------------------------------------------------------

def _linear(x: Node, params: dict[str, Node], prefix: str) -> Node:
    return ad.add(ad.matmul(x, params[prefix + ".W"]), params[prefix + ".b"])


def _split_heads(x: Node, heads: int) -> Node:
    rows, h = x.shape
    return ad.transpose(ad.reshape(x, (rows, heads, h // heads)), (1, 0, 2))


def multi_head_attention(queries: Node, keys_values: Node, params: dict[str, Node], prefix: str,
                         heads: int, return_weights: bool = False):
    """Scaled dot-product multi-head attention; returns ``a x h`` (and the
    ``heads x a x b`` weight tensor when ``return_weights``)."""
    a, h = queries.shape
    b = keys_values.shape[0]
    if h % heads:
        raise ValueError(f"hidden={h} not divisible by heads={heads}")
    scale = 1.0 / math.sqrt(h // heads)
    K = _split_heads(_linear(keys_values, params, prefix + ".k"), heads)
    V = _split_heads(_linear(keys_values, params, prefix + ".v"), heads)

    def attend(q_rows: Node):
        Q = _split_heads(_linear(q_rows, params, prefix + ".q"), heads)
        logits = ad.scale(ad.matmul(Q, ad.transpose(K, (0, 2, 1))), scale)
        A = ad.softmax_rows(logits)
        out = ad.matmul(A, V)
        return ad.reshape(ad.transpose(out, (1, 0, 2)), (q_rows.shape[0], h)), A

    chunk = max(1, _CHUNK_ELEMENTS // max(1, heads * b))
    if ad._GRAD_ENABLED or a <= chunk:
        merged, A = attend(queries)
        weights = A.value
    else:
        # Inference only: bound memory of the a x b logits by chunking query rows.
        parts, wparts = [], []
        for start in range(0, a, chunk):
            m, A = attend(ad.take_rows(queries, slice(start, start + chunk)))
            parts.append(m)
            if return_weights:
                wparts.append(A.value)
        merged = ad.concat(parts, axis=0)
        weights = np.concatenate(wparts, axis=1) if return_weights else None
    out = _linear(merged, params, prefix + ".o")
    return (out, weights) if return_weights else out


def _ffn_ln(Z: Node, params: dict[str, Node], p: str) -> Node:
    hidden = ad.gelu(_linear(Z, params, p + ".ffn.1"))
    return ad.layer_norm(ad.add(_linear(hidden, params, p + ".ffn.2"), Z),
                         params[p + ".ln2.g"], params[p + ".ln2.b"])


def _router_layer(Z: Node, n_train: int, params: dict[str, Node], layer: int, heads: int,
                  trace: dict | None = None) -> Node:
    p = f"layer{layer}"
    Z_train = ad.take_rows(Z, slice(0, n_train))
    routers = params[p + ".routers"]
    want = trace is not None
    M = multi_head_attention(routers, Z_train, params, p + ".msa1", heads, return_weights=want)
    if want:
        M, w1 = M
    Zhat = multi_head_attention(Z, M, params, p + ".msa2", heads, return_weights=want)
    if want:
        Zhat, w2 = Zhat
        trace[layer] = {"routers_to_context": w1, "tokens_to_routers": w2}
    Z1 = ad.layer_norm(ad.add(Zhat, Z), params[p + ".ln1.g"], params[p + ".ln1.b"])
    return _ffn_ln(Z1, params, p)


def _dense_layer(Z: Node, n_train: int, params: dict[str, Node], layer: int, heads: int) -> Node:
    # Baseline: context tokens self-attend; queries cross-attend to the context.
    p = f"layer{layer}"
    Z_train = ad.take_rows(Z, slice(0, n_train))
    Zhat = multi_head_attention(Z, Z_train, params, p + ".msa2", heads)
    Z1 = ad.layer_norm(ad.add(Zhat, Z), params[p + ".ln1.g"], params[p + ".ln1.b"])
    return _ffn_ln(Z1, params, p)


def router_block(Z_train: Node, Z_test: Node, params: dict[str, Node], layer: int, heads: int):
    """One router-attention layer applied to the two token populations."""
    n = Z_train.shape[0]
    if n < 1:
        raise ValueError("need at least one training token")
    out = _router_layer(ad.concat([Z_train, Z_test]), n, params, layer, heads)
    return ad.take_rows(out, slice(0, n)), ad.take_rows(out, slice(n, None))


def _head(Z: Node, params: dict[str, Node]) -> Node:
    return _linear(ad.gelu(_linear(Z, params, "head.1")), params, "head.2")


def pfn_forward(params: dict[str, Node], config: ModelConfig, context_X: np.ndarray,
                query_X: np.ndarray, rng: np.random.Generator | None = None,
                attention: str = "router", trace: dict | None = None):
    """Return ``(logits, probabilities)`` for the query rows: a ``q x 2``
    logits node and a ``q x 2`` array whose column 1 is P(outlier)."""
    context_X = np.atleast_2d(np.asarray(context_X, dtype=np.float64))
    query_X = np.atleast_2d(np.asarray(query_X, dtype=np.float64))
    if context_X.shape[1] != query_X.shape[1]:
        raise ValueError(
            f"context has {context_X.shape[1]} features but queries have {query_X.shape[1]}")
    n, q = context_X.shape[0], query_X.shape[0]
    if n < 1 or q < 1:
        raise ValueError("need at least one context row and one query row")
    Z = embed_features(np.concatenate([context_X, query_X]), params, config, rng)
    for layer in range(config.num_layers):
        if attention == "router":
            Z = _router_layer(Z, n, params, layer, config.heads, trace)
        elif attention == "dense":
            Z = _dense_layer(Z, n, params, layer, config.heads)
        else:
            raise ValueError(f"unknown attention mode {attention!r}")
    logits = _head(ad.take_rows(Z, slice(n, None)), params)
    return logits, ad.softmax_rows(ad.constant(logits.value.astype(np.float64))).value


def attention_topk(params: dict[str, Node], config: ModelConfig, context_X: np.ndarray,
                   query_x: np.ndarray, k: int, rng: np.random.Generator | None = None,
                   layer: int | None = None):
    """Context rows most attended by one query in ``layer`` (default: the final layer).

    Head-averaged query->router weights are pushed through head-averaged
    router->context weights; the product is a distribution over context rows.
    Returns ``(indices, weights, full_distribution)``, ties broken by lower index.
    """
    context_X = np.atleast_2d(context_X)
    n = context_X.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    layer = config.num_layers - 1 if layer is None else layer
    if not 0 <= layer < config.num_layers:
        raise ValueError(f"layer must lie in [0, {config.num_layers - 1}], got {layer}")
    trace: dict = {}
    with ad.no_grad():
        pfn_forward(params, config, context_X, np.atleast_2d(query_x), rng, trace=trace)
    last = trace[layer]
    to_routers = last["tokens_to_routers"][:, n, :].mean(axis=0)
    to_context = last["routers_to_context"].mean(axis=0)
    induced = to_routers.astype(np.float64) @ to_context.astype(np.float64)
    order = np.argsort(-induced, kind="stable")[:k]
    return order, induced[order], induced
