"""Cross-attention feature field: a query point attends over all scene points.

Keys are ``[x_i, f_i]``, the query token is ``[q, idw(q)]`` and every head adds
``log w_i`` (the inverse-distance weights) to its logits, so a decoder whose
logit projections are zero reproduces the inverse-distance field exactly.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
import torch

from .numerics import DTYPE, as_tensor
from .scene import FeaturedCloud, idw_log_weights

MAGIC = b"NAFP"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIId")

DEFAULT_HEADS = 4
DEFAULT_HEAD_DIM = 16
# distance bias regulariser (m^2); with a vanishing value a scene-point query
# attends only to itself and the logits receive no gradient during training
DEFAULT_ATTENTION_EPSILON = 1e-4


@dataclass(frozen=True)
class DecoderLayer:
    w_key: torch.Tensor    # (H, 3+C, d)
    w_query: torch.Tensor  # (H, 3+C, d)
    w_value: torch.Tensor  # (H, C, d)
    w_out: torch.Tensor    # (H*d, C)

    def tensors(self) -> list[torch.Tensor]:
        return [self.w_key, self.w_query, self.w_value, self.w_out]


@dataclass(frozen=True)
class DecoderParams:
    layers: tuple[DecoderLayer, ...]
    feature_dim: int
    heads: int
    head_dim: int
    epsilon: float = DEFAULT_ATTENTION_EPSILON

    def __post_init__(self):
        c, h, d = self.feature_dim, self.heads, self.head_dim
        for i, layer in enumerate(self.layers):
            expected = [(h, 3 + c, d), (h, 3 + c, d), (h, c, d), (h * d, c)]
            for name, t, shape in zip(("w_key", "w_query", "w_value", "w_out"), layer.tensors(), expected):
                if tuple(t.shape) != shape:
                    raise ValueError(f"layer {i} {name} has shape {tuple(t.shape)}, expected {shape}")
                if not torch.all(torch.isfinite(t)):
                    raise ValueError(f"layer {i} {name} has non-finite entries")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    def tensors(self) -> list[torch.Tensor]:
        return [t for layer in self.layers for t in layer.tensors()]

    def with_tensors(self, tensors) -> "DecoderParams":
        tensors = list(tensors)
        layers = tuple(DecoderLayer(*tensors[4 * i:4 * i + 4]) for i in range(len(self.layers)))
        return DecoderParams(layers, self.feature_dim, self.heads, self.head_dim, self.epsilon)

    def detached(self) -> "DecoderParams":
        return self.with_tensors(t.detach().clone() for t in self.tensors())

    def requiring_grad(self) -> "DecoderParams":
        return self.with_tensors(t.detach().clone().requires_grad_(True) for t in self.tensors())

    # -- serialisation ---------------------------------------------------------
    def to_bytes(self) -> bytes:
        head = _HEADER.pack(MAGIC, VERSION, self.feature_dim, self.heads, self.head_dim,
                            len(self.layers), self.epsilon)
        body = b"".join(t.detach().contiguous().numpy().astype("<f8").tobytes() for t in self.tensors())
        return head + body

    @classmethod
    def from_bytes(cls, blob: bytes) -> "DecoderParams":
        if len(blob) < _HEADER.size:
            raise ValueError("parameter blob shorter than its header")
        magic, version, c, h, d, n_layers, eps = _HEADER.unpack_from(blob)
        if magic != MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {MAGIC!r}")
        if version != VERSION:
            raise ValueError(f"unsupported parameter format version {version}")
        shapes = [(h, 3 + c, d), (h, 3 + c, d), (h, c, d), (h * d, c)] * n_layers
        expected = _HEADER.size + 8 * sum(math.prod(s) for s in shapes)
        if len(blob) != expected:
            raise ValueError(f"parameter blob is {len(blob)} bytes, header implies {expected}")
        offset, tensors = _HEADER.size, []
        for shape in shapes:
            count = math.prod(shape)
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(np.float64)
            tensors.append(torch.from_numpy(arr.reshape(shape).copy()))
            offset += 8 * count
        layers = tuple(DecoderLayer(*tensors[4 * i:4 * i + 4]) for i in range(n_layers))
        return cls(layers, c, h, d, eps)


def _identity_value_path(c: int, h: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    """W_V, W_O with sum_h W_V[h] @ W_O[h] = I_C."""
    w_v = np.zeros((h, c, d))
    w_o = np.zeros((h * d, c))
    if d >= c:
        for head in range(h):
            w_v[head, :, :c] = np.eye(c)
            w_o[head * d:head * d + c, :] = np.eye(c) / h
        return w_v, w_o
    if h * d < c:
        raise ValueError(f"heads*head_dim={h * d} cannot carry {c} feature channels unchanged")
    for ch in range(c):
        head, slot = divmod(ch, d)
        w_v[head, ch, slot] = 1.0
        w_o[head * d + slot, ch] = 1.0
    return w_v, w_o


def init_params(feature_dim: int, heads: int = DEFAULT_HEADS, head_dim: int = DEFAULT_HEAD_DIM,
                seed: int = 0, mode: str = "zero-logit", layers: int = 1,
                epsilon: float = DEFAULT_ATTENTION_EPSILON, query_scale: float = 0.0) -> DecoderParams:
    """Build decoder parameters.

    ``zero-logit``: key (and by default query) projections are zero and the value
    path is the identity on features, so the decoder equals the inverse-distance
    field.  ``query_scale > 0`` draws the query projection from the seed while
    keeping the keys zero; logits stay exactly zero but are no longer a saddle.
    ``random``: every matrix ~ N(0, 1/fan_in).
    """
    if min(feature_dim, heads, head_dim, layers) < 1:
        raise ValueError("feature_dim, heads, head_dim and layers must be >= 1")
    c, h, d = feature_dim, heads, head_dim
    rng = np.random.default_rng(seed)
    built = []
    for _ in range(layers):
        if mode == "zero-logit":
            w_k = np.zeros((h, 3 + c, d))
            w_q = rng.standard_normal((h, 3 + c, d)) * query_scale if query_scale else np.zeros((h, 3 + c, d))
            w_v, w_o = _identity_value_path(c, h, d)
        elif mode == "random":
            w_k = rng.standard_normal((h, 3 + c, d)) / math.sqrt(3 + c)
            w_q = rng.standard_normal((h, 3 + c, d)) / math.sqrt(3 + c)
            w_v = rng.standard_normal((h, c, d)) / math.sqrt(c)
            w_o = rng.standard_normal((h * d, c)) / math.sqrt(h * d)
        else:
            raise ValueError(f"unknown init mode {mode!r}")
        built.append(DecoderLayer(*(torch.from_numpy(np.ascontiguousarray(w)) for w in (w_k, w_q, w_v, w_o))))
    return DecoderParams(tuple(built), c, h, d, epsilon)


def normalisation(points: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Centroid and bounding-sphere radius; both move rigidly with the cloud."""
    center = points.mean(0)
    radius = torch.sqrt(((points - center) ** 2).sum(1).max())
    return center, torch.clamp(radius, min=1e-9)


@dataclass
class AttentionTrace:
    weights: torch.Tensor  # (layers, H, N)
    logits: torch.Tensor   # (layers, H, N), learned part only
    bias: torch.Tensor     # (N,), log inverse-distance weights


class FieldContext:
    """Key/value projections of one scene, reusable across many queries."""

    def __init__(self, params: DecoderParams, cloud: FeaturedCloud):
        if params.feature_dim != cloud.dim:
            raise ValueError(f"decoder expects C={params.feature_dim}, cloud has C={cloud.dim}")
        self.params = params
        self.cloud = cloud
        self.points = cloud.points_t()
        self.features = cloud.features_t()
        self.center, self.scale = normalisation(self.points)
        key_tok = torch.cat([(self.points - self.center) / self.scale, self.features], 1)
        self.keys = [torch.einsum("nc,hcd->hnd", key_tok, layer.w_key) for layer in params.layers]
        self.values = [torch.einsum("nc,hcd->hnd", self.features, layer.w_value) for layer in params.layers]

    def query(self, q, trace: bool = False):
        """Aggregated features for q of shape (..., 3); returns (..., C)."""
        p = self.params
        q = as_tensor(q)
        bias = idw_log_weights(self.points, q, p.epsilon)            # (..., N)
        f = torch.exp(bias) @ self.features                          # idw feature
        qn = (q - self.center) / self.scale
        inv_sqrt_d = 1.0 / math.sqrt(p.head_dim)
        weights, logits = [], []
        for layer, keys, values in zip(p.layers, self.keys, self.values):
            tok = torch.cat([qn, f], -1)
            qp = torch.einsum("...c,hcd->...hd", tok, layer.w_query)
            lg = torch.einsum("...hd,hnd->...hn", qp, keys) * inv_sqrt_d
            attn = torch.softmax(lg + bias.unsqueeze(-2), -1)
            heads = torch.einsum("...hn,hnd->...hd", attn, values)
            f = heads.reshape(*heads.shape[:-2], -1) @ layer.w_out
            if trace:
                weights.append(attn)
                logits.append(lg)
        if trace:
            return f, AttentionTrace(torch.stack(weights, -3), torch.stack(logits, -3), bias)
        return f


def query_feature(params: DecoderParams, cloud: FeaturedCloud, q) -> tuple[torch.Tensor, AttentionTrace]:
    q = as_tensor(q)
    if q.shape != (3,):
        raise ValueError(f"query_feature takes one 3-vector, got shape {tuple(q.shape)}")
    return FieldContext(params, cloud).query(q, trace=True)


def query_features(params: DecoderParams, cloud: FeaturedCloud, queries, chunk: int = 512) -> torch.Tensor:
    ctx = FieldContext(params, cloud)
    queries = as_tensor(queries)
    if queries.shape[0] <= chunk:
        return ctx.query(queries)
    return torch.cat([ctx.query(queries[s:s + chunk]) for s in range(0, queries.shape[0], chunk)])


def self_attention_features(params: DecoderParams, cloud: FeaturedCloud) -> torch.Tensor:
    """Row i is the field evaluated at scene point i (a virtual query on every point)."""
    return query_features(params, cloud, cloud.points_t())


__all__ = [
    "AttentionTrace", "DecoderLayer", "DecoderParams", "FieldContext", "init_params",
    "query_feature", "query_features", "self_attention_features", "DTYPE",
]
