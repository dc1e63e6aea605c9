"""Plain causal self-attention with a KV cache.

This is the unprotected baseline and the correctness oracle for the shielded
runtime. There are no embeddings, FFNs or norms: each layer maps a ``1 x d``
input row to a ``1 x d`` output row, and the output of layer ``l`` is the
input of layer ``l + 1``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from kvshield import linalg
from kvshield.errors import ShapeError, InvalidDimensionError, WorldMismatchError, ConfigError


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    num_heads: int
    num_layers: int = 1
    num_kv_heads: int | None = None
    precision: str = "f64"

    def __post_init__(self):
        for name in ("d_model", "num_heads", "num_layers"):
            if getattr(self, name) < 1:
                raise InvalidDimensionError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.num_heads:
            raise InvalidDimensionError(f"d_model={self.d_model} is not divisible by num_heads={self.num_heads}")
        if self.num_kv_heads is None:
            object.__setattr__(self, "num_kv_heads", self.num_heads)
        elif self.num_kv_heads < 1:
            raise InvalidDimensionError(f"num_kv_heads must be >= 1, got {self.num_kv_heads}")
        linalg.dtype_of(self.precision)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads

    @property
    def dtype(self):
        return linalg.dtype_of(self.precision)

    @property
    def scalar_bytes(self) -> int:
        return linalg.scalar_bytes(self.precision)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "head_dim" in d:
            head_dim = d.pop("head_dim")
            if "d_model" in d and d["d_model"] != d.get("num_heads", 0) * head_dim:
                raise ConfigError("d_model must equal num_heads * head_dim")
            d.setdefault("d_model", d["num_heads"] * head_dim)
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AttentionWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray | None = None
    permuted: bool = False

    def __post_init__(self):
        d = self.w_q.shape[0]
        for name in ("w_q", "w_k", "w_v", "w_o"):
            m = getattr(self, name)
            if m is not None and (m.ndim != 2 or m.shape != (d, d)):
                raise ShapeError(f"{name} must be {d}x{d}, got {m.shape}")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]


def random_weights(cfg: ModelConfig, seed: int, with_output: bool = True) -> list[AttentionWeights]:
    """Gaussian weights scaled by 1/sqrt(d_model), one set per layer."""
    rng = np.random.default_rng(seed)
    d = cfg.d_model
    s = 1.0 / math.sqrt(d)
    layers = []
    for _ in range(cfg.num_layers):
        mats = [(rng.standard_normal((d, d)) * s).astype(cfg.dtype) for _ in range(4)]
        layers.append(AttentionWeights(*mats[:3], w_o=mats[3] if with_output else None))
    return layers


WEIGHTS_FORMAT = "kvshield-weights"
WEIGHTS_VERSION = 1


def save_weights(path, cfg: ModelConfig, weights: list[AttentionWeights]) -> None:
    """Write an ``.npz`` container with a JSON header and per-layer arrays."""
    if len(weights) != cfg.num_layers:
        raise ShapeError(f"config has {cfg.num_layers} layers, got {len(weights)} weight sets")
    header = {"format": WEIGHTS_FORMAT, "version": WEIGHTS_VERSION, "config": cfg.to_dict(),
              "has_output": [w.w_o is not None for w in weights],
              "permuted": [w.permuted for w in weights]}
    arrays = {"header": np.array(json.dumps(header))}
    for i, w in enumerate(weights):
        for name in ("w_q", "w_k", "w_v", "w_o"):
            m = getattr(w, name)
            if m is not None:
                arrays[f"layer{i}_{name}"] = m
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_weights(path) -> tuple[ModelConfig, list[AttentionWeights]]:
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("format") != WEIGHTS_FORMAT or header.get("version") != WEIGHTS_VERSION:
            raise ConfigError(f"{path} is not a version-{WEIGHTS_VERSION} weight file")
        cfg = ModelConfig(**header["config"])
        weights = []
        for i in range(cfg.num_layers):
            mats = {n: z[f"layer{i}_{n}"] for n in ("w_q", "w_k", "w_v")}
            w_o = z[f"layer{i}_w_o"] if header["has_output"][i] else None
            weights.append(AttentionWeights(**mats, w_o=w_o, permuted=header["permuted"][i]))
    return cfg, weights


class KVCache:
    """Per-layer growing K and V matrices backed by capacity-doubling buffers."""

    def __init__(self, num_layers: int, d_model: int, dtype=np.float64, permuted: bool = False):
        self.num_layers = num_layers
        self.d_model = d_model
        self.dtype = np.dtype(dtype)
        self.permuted = permuted
        self._k = [np.empty((0, d_model), self.dtype) for _ in range(num_layers)]
        self._v = [np.empty((0, d_model), self.dtype) for _ in range(num_layers)]
        self._len = [0] * num_layers

    def _check_layer(self, layer: int) -> None:
        if not 0 <= layer < self.num_layers:
            raise IndexError(f"layer {layer} out of range for a {self.num_layers}-layer cache")

    def seq_len(self, layer: int = 0) -> int:
        self._check_layer(layer)
        return self._len[layer]

    def keys(self, layer: int) -> np.ndarray:
        self._check_layer(layer)
        return self._k[layer][:self._len[layer]]

    def values(self, layer: int) -> np.ndarray:
        self._check_layer(layer)
        return self._v[layer][:self._len[layer]]

    def append(self, layer: int, k: np.ndarray, v: np.ndarray) -> "KVCache":
        self._check_layer(layer)
        if k.shape != (1, self.d_model) or v.shape != (1, self.d_model):
            raise ShapeError(f"expected 1x{self.d_model} k and v, got {k.shape} and {v.shape}")
        n = self._len[layer]
        if n == self._k[layer].shape[0]:
            cap = max(4, 2 * n)
            for buf in (self._k, self._v):
                grown = np.empty((cap, self.d_model), self.dtype)
                grown[:n] = buf[layer][:n]
                buf[layer] = grown
        self._k[layer][n] = k[0]
        self._v[layer][n] = v[0]
        self._len[layer] = n + 1
        return self


def append_kv(cache: KVCache, layer: int, k: np.ndarray, v: np.ndarray) -> KVCache:
    return cache.append(layer, k, v)


def qkv_project(x: np.ndarray, w: AttentionWeights) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if x.ndim != 2 or x.shape[1] != w.d_model:
        raise ShapeError(f"input of shape {x.shape} does not match d_model={w.d_model}")
    return linalg.matmul(x, w.w_q), linalg.matmul(x, w.w_k), linalg.matmul(x, w.w_v)


def scaled_dot_attention(q: np.ndarray, K: np.ndarray, V: np.ndarray, num_heads: int) -> np.ndarray:
    """Multi-head attention of one query row over all rows of ``K``/``V``.

    Heads are contiguous column blocks of width ``d / num_heads``; scores are
    scaled by ``1/sqrt(head_dim)``.
    """
    if num_heads < 1:
        raise InvalidDimensionError("num_heads must be >= 1")
    if q.ndim != 2 or q.shape[0] != 1:
        raise ShapeError(f"query must be 1xd, got {q.shape}")
    d = q.shape[1]
    if K.ndim != 2 or V.ndim != 2 or K.shape != V.shape or K.shape[1] != d:
        raise ShapeError(f"K {K.shape} and V {V.shape} must both be n x {d}")
    if K.shape[0] == 0:
        raise ShapeError("attention over an empty cache")
    if d % num_heads:
        raise ShapeError(f"d_model={d} is not divisible by num_heads={num_heads}")
    hd = d // num_heads
    inv_sqrt = 1.0 / math.sqrt(hd)
    out = np.empty((1, d), dtype=np.result_type(q, K, V))
    for h in range(num_heads):
        cols = slice(h * hd, (h + 1) * hd)
        scores = linalg.scale(linalg.matmul(q[:, cols], linalg.transpose(K[:, cols])), inv_sqrt)
        out[:, cols] = linalg.matmul(linalg.row_softmax(scores), V[:, cols])
    return out


def _output_projection(a: np.ndarray, w: AttentionWeights) -> np.ndarray:
    return a if w.w_o is None else linalg.matmul(a, w.w_o)


def plain_layer(x, w: AttentionWeights, cache: KVCache, layer: int, num_heads: int):
    """One cached layer step; returns ``(q, a, out)`` with ``a`` taken before ``w_o``."""
    if w.permuted or cache.permuted:
        raise WorldMismatchError("permuted weights or cache reached the plain attention path")
    q, k, v = qkv_project(x, w)
    cache.append(layer, k, v)
    a = scaled_dot_attention(q, cache.keys(layer), cache.values(layer), num_heads)
    return q, a, _output_projection(a, w)


def decode_step_plain(x: np.ndarray, w: AttentionWeights, cache: KVCache, layer: int,
                      num_heads: int = 1) -> np.ndarray:
    return plain_layer(x, w, cache, layer, num_heads)[2]


@dataclass
class PlainTrace:
    """Per-layer record of a plain run, used as victim ground truth."""

    queries: list[list[np.ndarray]] = field(default_factory=list)
    attention: list[list[np.ndarray]] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)


def plain_decode(xs: np.ndarray, weights: list[AttentionWeights], cfg: ModelConfig,
                 cache: KVCache | None = None) -> tuple[PlainTrace, KVCache]:
    """Feed the rows of ``xs`` one token at a time through every layer."""
    xs = linalg.as_matrix(xs, cfg.precision)
    if cache is None:
        cache = KVCache(cfg.num_layers, cfg.d_model, cfg.dtype)
    trace = PlainTrace([[] for _ in weights], [[] for _ in weights])
    for t in range(xs.shape[0]):
        h = xs[t:t + 1]
        for layer, w in enumerate(weights):
            q, a, h = plain_layer(h, w, cache, layer, cfg.num_heads)
            trace.queries[layer].append(q)
            trace.attention[layer].append(a)
        trace.outputs.append(h)
    return trace, cache


def recompute_uncached(xs: np.ndarray, weights: list[AttentionWeights], cfg: ModelConfig) -> list[np.ndarray]:
    """Final-layer outputs for every prefix, without any KV cache.

    Each layer projects the whole input sequence at once, then each position
    attends over the projected prefix ending at itself.
    """
    h_all = linalg.as_matrix(xs, cfg.precision)
    for w in weights:
        if w.permuted:
            raise WorldMismatchError("permuted weights reached the plain attention path")
        Q = linalg.matmul(h_all, w.w_q)
        K = linalg.matmul(h_all, w.w_k)
        V = linalg.matmul(h_all, w.w_v)
        rows = []
        for t in range(h_all.shape[0]):
            a = scaled_dot_attention(Q[t:t + 1], K[:t + 1], V[:t + 1], cfg.num_heads)
            rows.append(_output_projection(a, w))
        h_all = np.vstack(rows)
    return [h_all[t:t + 1] for t in range(h_all.shape[0])]
